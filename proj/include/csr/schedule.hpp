#ifndef CSR_SCHEDULE_HPP
#define CSR_SCHEDULE_HPP

#include <vector>

#include "csr/tensor.hpp"

namespace csr {

// Per-timestep beta / alpha-bar tables. A spaced schedule stores the original
// timestep index of each retained step in spaced_map.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;
    std::vector<int> spaced_map;  // empty for a base schedule

    bool is_spaced() const { return !spaced_map.empty(); }
};

// Linear beta interpolation from beta_start to beta_end over T steps.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

// Keeps n timesteps at uniform stride round(i*T/n), deduplicated, and
// recomputes effective betas over the subsequence.
NoiseSchedule space_schedule(const NoiseSchedule& s, int n);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
Tensor4 add_noise(const Tensor4& x0, int t, const Tensor4& eps, const NoiseSchedule& s);

// One reverse step x_k -> x_{k-1} with the posterior ("small") variance.
// Deterministic at k = 0.
Tensor4 ddpm_step(const Tensor4& x_t, const Tensor4& eps_hat, int k,
                  const NoiseSchedule& s, Rng& rng);

}  // namespace csr

#endif
