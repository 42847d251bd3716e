#ifndef CSR_DEGRADE_HPP
#define CSR_DEGRADE_HPP

#include "csr/store.hpp"
#include "csr/tensor.hpp"

namespace csr {

struct DegradeConfig {
    double blur_sigma_min = 0.2, blur_sigma_max = 2.0;
    int scale = 4;  // 1, 2 or 4
    double noise_sigma_min = 0.0, noise_sigma_max = 0.04;
    double quality_min = 40.0, quality_max = 95.0;  // 100 bypasses quantization
};

DegradeConfig degrade_config_from(const RunConfig& cfg);

// Keys bicubic kernel, a = -0.5, clamp-to-edge sampling,
// source coordinate (dst + 0.5) * in/out - 0.5.
double bicubic_weight(double x);
ImageBuffer bicubic_resize(const ImageBuffer& img, int out_h, int out_w);

ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma);

// 8x8 orthonormal block DCT, coefficients quantized with a step linear in
// (100 - quality); quality 100 is a bypass.
ImageBuffer block_dct_quantize(const ImageBuffer& img, double quality);

// Gaussian blur -> bicubic downsample by cfg.scale -> additive Gaussian
// noise (clamped) -> block-DCT quantization. Deterministic given the rng.
ImageBuffer degrade_image(const ImageBuffer& hr, const DegradeConfig& cfg, Rng& rng);

// Procedural toy image: random linear gradient base, anti-aliased ellipses
// and rectangles, band-limited noise texture. Values in [0, 1].
ImageBuffer synth_toy_image(int size, Rng& rng);

}  // namespace csr

#endif
