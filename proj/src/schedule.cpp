#include "csr/schedule.hpp"

#include <cmath>

namespace csr {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ValidationError("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ValidationError("make_schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        s.beta[t] = T == 1 ? beta_start
                           : beta_start + (beta_end - beta_start) * t / (double)(T - 1);
        prod *= 1.0 - s.beta[t];
        s.alpha_bar[t] = prod;
    }
    return s;
}

NoiseSchedule space_schedule(const NoiseSchedule& s, int n) {
    if (n < 1 || n > s.T)
        throw ValidationError("space_schedule: n must be in [1, T], got " + std::to_string(n));
    std::vector<int> map;
    for (int i = 0; i < n; ++i) {
        int idx = (int)std::lround((double)i * s.T / n);
        if (idx > s.T - 1) idx = s.T - 1;
        if (map.empty() || idx != map.back()) map.push_back(idx);
    }
    NoiseSchedule out;
    out.T = (int)map.size();
    out.spaced_map = map;
    out.beta.resize(out.T);
    out.alpha_bar.resize(out.T);
    double prev_abar = 1.0;
    for (int k = 0; k < out.T; ++k) {
        const double abar = s.alpha_bar[map[k]];
        const int prev = k > 0 ? map[k - 1] : -1;
        // adjacent steps keep the original beta bit-exactly
        out.beta[k] = map[k] == prev + 1 ? s.beta[map[k]] : 1.0 - abar / prev_abar;
        out.alpha_bar[k] = abar;
        prev_abar = abar;
    }
    return out;
}

Tensor4 add_noise(const Tensor4& x0, int t, const Tensor4& eps, const NoiseSchedule& s) {
    if (!x0.same_shape(eps))
        throw ValidationError("add_noise: x0 shape " + x0.shape.str() + " vs eps " + eps.shape.str());
    if (t < 0 || t >= s.T) throw ValidationError("add_noise: timestep out of range");
    const double a = std::sqrt(s.alpha_bar[t]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor4 out(x0.shape);
    for (int64_t i = 0; i < x0.size(); ++i) out.v[i] = a * x0.v[i] + b * eps.v[i];
    return out;
}

Tensor4 ddpm_step(const Tensor4& x_t, const Tensor4& eps_hat, int k,
                  const NoiseSchedule& s, Rng& rng) {
    if (!x_t.same_shape(eps_hat))
        throw ValidationError("ddpm_step: x shape " + x_t.shape.str() + " vs eps_hat " +
                              eps_hat.shape.str());
    if (k < 0 || k >= s.T) throw ValidationError("ddpm_step: step index out of range");
    const double beta = s.beta[k];
    const double abar = s.alpha_bar[k];
    const double abar_prev = k > 0 ? s.alpha_bar[k - 1] : 1.0;
    const double mean_eps_coef = beta / std::sqrt(1.0 - abar);
    const double mean_scale = 1.0 / std::sqrt(1.0 - beta);
    // posterior ("small") variance; the final step is deterministic
    const double sigma = k == 0 ? 0.0 : std::sqrt((1.0 - abar_prev) / (1.0 - abar) * beta);
    Tensor4 out(x_t.shape);
    for (int64_t i = 0; i < x_t.size(); ++i)
        out.v[i] = mean_scale * (x_t.v[i] - mean_eps_coef * eps_hat.v[i]);
    if (sigma > 0.0)
        for (double& x : out.v) x += sigma * rng.normal();
    return out;
}

}  // namespace csr
