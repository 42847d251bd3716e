#ifndef CSR_PROBE_HPP
#define CSR_PROBE_HPP

#include <utility>
#include <vector>

#include "csr/store.hpp"
#include "csr/tensor.hpp"

namespace csr {

// Nonnegative spatial distribution summing to 1 (floored at 1e-12).
struct SpatialDistribution {
    int h = 0, w = 0;
    std::vector<double> p;
};

// channel-mean -> bilinear resize to target -> spatial softmax -> floor+renorm
SpatialDistribution to_distribution(const Tensor4& x, int batch_item, int target_h, int target_w);

// sum P log(P/Q), nats
double kl_divergence(const SpatialDistribution& P, const SpatialDistribution& Q);
double diff_kl(double kl_baseline, double kl_ours);

// Positions as samples over channel vectors, top-3 principal components by
// power iteration with deflation, each min-max normalized into an RGB plane.
ImageBuffer pca_project(const Tensor4& x, int batch_item = 0);

struct RadialSpectrum {
    std::vector<std::pair<int, double>> bins;  // (radius, mean log10 power)
};

// 2-D DFT of the channel mean, |.|^2, integer-radius bins up to Nyquist.
RadialSpectrum power_spectrum(const Tensor4& x, int batch_item = 0);

// Energy at radius > Nyquist/2 over total non-DC energy.
double hf_energy_fraction(const Tensor4& x, int batch_item = 0);
double hf_energy_fraction(const ImageBuffer& img);

// Raw power grid helper (signed frequencies), plus total energy, for tests.
std::vector<double> dft_power_grid(const std::vector<double>& img, int h, int w);

double psnr(const ImageBuffer& a, const ImageBuffer& b, bool on_y);
double ssim(const ImageBuffer& a, const ImageBuffer& b, bool on_y);

double luma(double r, double g, double b);  // BT.601

double bilinear_sample(const std::vector<double>& grid, int h, int w, double fy, double fx);

}  // namespace csr

#endif
