#ifndef CSR_BACKBONE_HPP
#define CSR_BACKBONE_HPP

#include <optional>
#include <vector>

#include "csr/autograd.hpp"
#include "csr/params.hpp"
#include "csr/store.hpp"

namespace csr {

// Epsilon-prediction UNet over two resolution levels (latent, latent/2),
// ResBlocks with timestep embedding, self-attention at the lowest
// resolution, condition cross-attention in every decoder block, and one
// control injection point per decoder skip plus the middle (5 total).

inline constexpr int kControlPoints = 5;

void build_backbone(ParamStore& ps, const RunConfig& cfg, Rng& rng);
// "cond.*": 4-layer conv embedder plus the zero-initialized injector that
// adds the image feature onto the learned null token.
void build_condition_embedder(ParamStore& ps, const RunConfig& cfg, Rng& rng);
// LoRA on every decoder attention projection and decoder ResBlock conv.
void create_backbone_decoder_lora(ParamStore& ps, const RunConfig& cfg, Rng& rng);
std::vector<std::string> backbone_decoder_lora_layers();

// Channel widths of the 5 injection points, in order.
std::vector<int> control_channels(const RunConfig& cfg);

// Conv stack + global average pool over the raw LR image -> (B, cond_dim, 1, 1).
ag::Var embed_condition_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& lr_images);
Tensor4 embed_condition(ParamStore& ps, const RunConfig& cfg, const Tensor4& lr_images);

// Token consumed by the cross-attentions: null_token + in_proj(p), or the
// bare null token when p is absent. Shape (B, 1, cond_dim, 1).
ag::Var cond_token_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& p, int batch);

// skip + c_k, shapes must match.
Tensor4 inject_control(const Tensor4& skip, const Tensor4& c_k);

// Full denoiser. controls: exactly kControlPoints tensors shaped like the
// decoder skips, or empty for the unconditional pass.
ag::Var predict_eps_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                          const std::vector<int>& t, const std::vector<ag::Var>& controls,
                          const ag::Var& cond_token, bool use_dec_lora);
Tensor4 predict_eps(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                    const std::vector<int>& t, const std::vector<Tensor4>& controls,
                    const Tensor4* p, bool use_dec_lora);

// temb MLP over the sinusoidal embedding -> (B, temb_dim, 1, 1).
ag::Var time_embedding_graph(ParamStore& ps, const RunConfig& cfg, const std::vector<int>& t,
                             const std::string& prefix);

}  // namespace csr

#endif
