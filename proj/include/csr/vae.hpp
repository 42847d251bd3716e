#ifndef CSR_VAE_HPP
#define CSR_VAE_HPP

#include <vector>

#include "csr/autograd.hpp"
#include "csr/params.hpp"
#include "csr/store.hpp"

namespace csr {

// Tiny convolutional autoencoder: RGB -> 4-channel latent at 1/8 spatial
// resolution and back. Three stride-2 stages with widths from the config.
// The encoder is deterministic (predicts the mean; logvar only feeds the
// KL regularizer during pretraining).

void build_vae(ParamStore& ps, const RunConfig& cfg, Rng& rng);
// LoRA adapters on every encoder convolution ("vae.encoder.*.lora.{A,B}").
void create_vae_encoder_lora(ParamStore& ps, const RunConfig& cfg, Rng& rng);
std::vector<std::string> vae_encoder_conv_layers(const RunConfig& cfg);

struct VaeEncodeOut {
    ag::Var mean;    // (B, latent, H/8, W/8)
    ag::Var logvar;  // same shape
};
VaeEncodeOut vae_encode_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& images,
                              bool use_lora);
// Raw decode (unclamped); clamping happens at the image boundary.
ag::Var vae_decode_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& latent);

// Deterministic latent of an image batch. H and W must be divisible by 8.
Tensor4 vae_encode(ParamStore& ps, const RunConfig& cfg, const Tensor4& images, bool use_lora);
// RGB at 8x latent size, clamped to [0, 1].
std::vector<ImageBuffer> vae_decode(ParamStore& ps, const RunConfig& cfg, const Tensor4& latent);
Tensor4 vae_decode_tensor(ParamStore& ps, const RunConfig& cfg, const Tensor4& latent);

// Bicubic upsample of the LR image to the HR grid, then the LoRA-adapted
// encoder. Yields the latent LR embeddings.
Tensor4 encode_lr(ParamStore& ps, const RunConfig& cfg, const std::vector<ImageBuffer>& lr,
                  int scale);

}  // namespace csr

#endif
