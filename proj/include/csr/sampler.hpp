#ifndef CSR_SAMPLER_HPP
#define CSR_SAMPLER_HPP

#include <string>
#include <vector>

#include "csr/params.hpp"
#include "csr/schedule.hpp"
#include "csr/store.hpp"

namespace csr {

// Latent Space Adjustment: early steps pull the step output toward the
// latent LR embeddings (ELA), late steps push away from them (LLA).
struct LSAConfig {
    double alpha = 0.01;
    double beta = 0.01;
    int n_steps = 50;
    double early_frac = 0.4;
    double late_frac = 0.8;
    uint64_t seed = 0;
};

LSAConfig lsa_from(const RunConfig& cfg);

enum class Phase { ELA, NONE, LLA };
const char* phase_name(Phase p);

// i counts executed steps from the noisiest; ELA below ceil(early*n),
// LLA from ceil(late*n).
Phase assign_phase(int i, const LSAConfig& cfg);

// (1-alpha) x + alpha x_lr
Tensor4 ela(const Tensor4& x, const Tensor4& x_lr, double alpha);
// (1+beta) x - beta x_lr
Tensor4 lla(const Tensor4& x, const Tensor4& x_lr, double beta);

struct TraceRecord {
    int step = 0;
    Phase phase = Phase::NONE;
    double dist_lr = 0.0;  // ||x - x_lr||_2 after the adjustment
};

struct SamplerTrace {
    std::vector<TraceRecord> records;
};

struct SampleResult {
    ImageBuffer image;
    SamplerTrace trace;
    Tensor4 final_latent;
    Tensor4 x_lr;
};

// Spaced DDPM sampling from noise, conditioned on the LR image through the
// control branches, with the LSA adjustment applied to each step's output.
// snapshot_dir, when set, receives decoded PPM snapshots every 10 steps.
SampleResult sample(ParamStore& ps, const RunConfig& cfg, const ImageBuffer& lr,
                    const NoiseSchedule& base, const LSAConfig& lsa,
                    const std::string& snapshot_dir = "");

double l2_distance(const Tensor4& a, const Tensor4& b);

void write_trace_csv(const std::string& path, const SamplerTrace& trace);

}  // namespace csr

#endif
