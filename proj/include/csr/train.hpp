#ifndef CSR_TRAIN_HPP
#define CSR_TRAIN_HPP

#include <string>
#include <vector>

#include "csr/params.hpp"
#include "csr/schedule.hpp"
#include "csr/store.hpp"

namespace csr {

// Three-stage training. Frozen tensors never enter the optimizer (enforced
// by the trainable flags); the freeze audit in the tests hashes frozen
// tensors across steps.
struct TrainState {
    RunConfig cfg;
    ParamStore params;
    Stage stage = Stage::Vae;
    Rng rng{0};
    int64_t step = 0;
};

struct ToyDataset {
    std::vector<ImageBuffer> hr;
    std::vector<ImageBuffer> lr;
};
ToyDataset make_toy_dataset(const RunConfig& cfg, int n_images, uint64_t seed);

// Builds models for the stage, loads the resume checkpoint, sets the
// stage's freeze table. resume may be null only for stage 1.
void setup_stage(TrainState& st, Stage stage, const Checkpoint* resume);

// One optimization step each; losses returned.
double pretrain_vae_step(TrainState& st, const Tensor4& batch_hr);
// hr_latents: frozen-encoder latents of the HR batch.
double pretrain_backbone_step(TrainState& st, const Tensor4& hr_latents,
                              const NoiseSchedule& sched);
double controlsr_step(TrainState& st, const Tensor4& hr_latents,
                      const std::vector<ImageBuffer>& batch_lr, const NoiseSchedule& sched);

// Loss without an optimizer step (consumes the state rng the same way).
double controlsr_loss(TrainState& st, const std::vector<ImageBuffer>& batch_hr,
                      const std::vector<ImageBuffer>& batch_lr, const NoiseSchedule& sched);

double eps_mse(const Tensor4& eps, const Tensor4& eps_hat);

// Deterministic held-out evaluations (fixed draws from eval_seed).
double eval_vae_recon_mse(TrainState& st, const std::vector<ImageBuffer>& hr);
double eval_backbone_loss(TrainState& st, const Tensor4& hr_latents, const NoiseSchedule& sched,
                          uint64_t eval_seed, int draws = 8);
double eval_controlsr_loss(TrainState& st, const Tensor4& hr_latents,
                           const std::vector<ImageBuffer>& lr, const NoiseSchedule& sched,
                           uint64_t eval_seed, int draws = 8);

// Runs the stage for cfg.iters steps with Adam, writes metrics.csv and
// periodic checkpoints into out_dir, returns the final checkpoint path.
std::string train_loop(const RunConfig& cfg, Stage stage, const std::string& resume_path,
                       const std::string& out_dir);

uint64_t hash_tensors(const ParamStore& ps, bool frozen_only);

}  // namespace csr

#endif
