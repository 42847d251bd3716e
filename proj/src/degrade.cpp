#include "csr/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace csr {

DegradeConfig degrade_config_from(const RunConfig& cfg) {
    DegradeConfig d;
    d.blur_sigma_min = cfg.degrade_blur_min;
    d.blur_sigma_max = cfg.degrade_blur_max;
    d.scale = cfg.scale;
    d.noise_sigma_min = cfg.degrade_noise_min;
    d.noise_sigma_max = cfg.degrade_noise_max;
    d.quality_min = cfg.degrade_quality_min;
    d.quality_max = cfg.degrade_quality_max;
    return d;
}

double bicubic_weight(double x) {
    constexpr double a = -0.5;
    x = std::fabs(x);
    if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
    return 0.0;
}

ImageBuffer bicubic_resize(const ImageBuffer& img, int out_h, int out_w) {
    ImageBuffer out(out_h, out_w);
    const double sy = (double)img.height / out_h;
    const double sx = (double)img.width / out_w;
    for (int oy = 0; oy < out_h; ++oy) {
        const double fy = (oy + 0.5) * sy - 0.5;
        const int iy = (int)std::floor(fy);
        double wy[4];
        for (int t = 0; t < 4; ++t) wy[t] = bicubic_weight(fy - (iy - 1 + t));
        for (int ox = 0; ox < out_w; ++ox) {
            const double fx = (ox + 0.5) * sx - 0.5;
            const int ix = (int)std::floor(fx);
            double wx[4];
            for (int t = 0; t < 4; ++t) wx[t] = bicubic_weight(fx - (ix - 1 + t));
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0, wsum = 0.0;
                for (int t = 0; t < 4; ++t)
                    for (int u = 0; u < 4; ++u) {
                        const int yy = std::clamp(iy - 1 + t, 0, img.height - 1);
                        const int xx = std::clamp(ix - 1 + u, 0, img.width - 1);
                        const double w = wy[t] * wx[u];
                        acc += w * img.at(c, yy, xx);
                        wsum += w;
                    }
                out.at(c, oy, ox) = acc / wsum;
            }
        }
    }
    return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, (int)std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (double)i * i / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    ImageBuffer tmp(img.height, img.width), out(img.height, img.width);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * img.at(c, y, std::clamp(x + i, 0, img.width - 1));
                tmp.at(c, y, x) = acc;
            }
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    acc += kernel[i + radius] * tmp.at(c, std::clamp(y + i, 0, img.height - 1), x);
                out.at(c, y, x) = acc;
            }
    }
    return out;
}

namespace {

// 1-D orthonormal DCT-II basis for N=8
struct DctBasis8 {
    double b[8][8];
    DctBasis8() {
        for (int k = 0; k < 8; ++k)
            for (int n = 0; n < 8; ++n) {
                const double c = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
                b[k][n] = c * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
            }
    }
};
const DctBasis8 kDct;

}  // namespace

ImageBuffer block_dct_quantize(const ImageBuffer& img, double quality) {
    if (quality >= 100.0) return img;
    const double step = (100.0 - quality) * 0.004;
    ImageBuffer out(img.height, img.width);
    const int by = img.height / 8, bx = img.width / 8;
    double block[8][8], coef[8][8], tmp[8][8];
    for (int c = 0; c < 3; ++c)
        for (int y0 = 0; y0 < by; ++y0)
            for (int x0 = 0; x0 < bx; ++x0) {
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x)
                        block[y][x] = img.at(c, y0 * 8 + y, x0 * 8 + x) - 0.5;
                // rows then columns
                for (int y = 0; y < 8; ++y)
                    for (int k = 0; k < 8; ++k) {
                        double acc = 0.0;
                        for (int x = 0; x < 8; ++x) acc += kDct.b[k][x] * block[y][x];
                        tmp[y][k] = acc;
                    }
                for (int k = 0; k < 8; ++k)
                    for (int j = 0; j < 8; ++j) {
                        double acc = 0.0;
                        for (int y = 0; y < 8; ++y) acc += kDct.b[j][y] * tmp[y][k];
                        coef[j][k] = acc;
                    }
                for (int j = 0; j < 8; ++j)
                    for (int k = 0; k < 8; ++k)
                        coef[j][k] = std::round(coef[j][k] / step) * step;
                // inverse
                for (int k = 0; k < 8; ++k)
                    for (int y = 0; y < 8; ++y) {
                        double acc = 0.0;
                        for (int j = 0; j < 8; ++j) acc += kDct.b[j][y] * coef[j][k];
                        tmp[y][k] = acc;
                    }
                for (int y = 0; y < 8; ++y)
                    for (int x = 0; x < 8; ++x) {
                        double acc = 0.0;
                        for (int k = 0; k < 8; ++k) acc += kDct.b[k][x] * tmp[y][k];
                        out.at(c, y0 * 8 + y, x0 * 8 + x) = std::clamp(acc + 0.5, 0.0, 1.0);
                    }
            }
    return out;
}

ImageBuffer degrade_image(const ImageBuffer& hr, const DegradeConfig& cfg, Rng& rng) {
    if (hr.height % (8 * cfg.scale) != 0 || hr.width % (8 * cfg.scale) != 0)
        throw ValidationError("degrade_image: HR dims must be divisible by 8*scale");
    const double sigma =
        cfg.blur_sigma_min + (cfg.blur_sigma_max - cfg.blur_sigma_min) * rng.uniform();
    ImageBuffer x = gaussian_blur(hr, sigma);
    if (cfg.scale > 1) x = bicubic_resize(x, hr.height / cfg.scale, hr.width / cfg.scale);
    const double nsigma =
        cfg.noise_sigma_min + (cfg.noise_sigma_max - cfg.noise_sigma_min) * rng.uniform();
    if (nsigma > 0.0)
        for (double& v : x.values) v = std::clamp(v + rng.normal(0.0, nsigma), 0.0, 1.0);
    const double quality =
        cfg.quality_min + (cfg.quality_max - cfg.quality_min) * rng.uniform();
    return block_dct_quantize(x, quality);
}

ImageBuffer synth_toy_image(int size, Rng& rng) {
    if (size % 8 != 0) throw ValidationError("synth_toy_image: size must be divisible by 8");
    ImageBuffer img(size, size);

    // linear gradient between two mid-range colors along a random direction
    double c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = 0.25 + 0.5 * rng.uniform();
        c1[c] = 0.25 + 0.5 * rng.uniform();
    }
    const double ang = 2.0 * std::numbers::pi * rng.uniform();
    const double gx = std::cos(ang), gy = std::sin(ang);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = ((x * gx + y * gy) / size + 1.0) * 0.5;
            for (int c = 0; c < 3; ++c) img.at(c, y, x) = c0[c] + (c1[c] - c0[c]) * u;
        }

    // anti-aliased shapes (2x2 coverage supersampling)
    const int n_shapes = (int)rng.uniform_int(2, 5);
    for (int i = 0; i < n_shapes; ++i) {
        const bool ellipse = rng.uniform() < 0.5;
        const double cx = size * rng.uniform(), cy = size * rng.uniform();
        const double rx = size * (0.08 + 0.2 * rng.uniform());
        const double ry = size * (0.08 + 0.2 * rng.uniform());
        double col[3];
        for (int c = 0; c < 3; ++c) col[c] = 0.1 + 0.8 * rng.uniform();
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double cov = 0.0;
                for (int sy = 0; sy < 2; ++sy)
                    for (int sx = 0; sx < 2; ++sx) {
                        const double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
                        bool inside;
                        if (ellipse) {
                            const double dx = (px - cx) / rx, dy = (py - cy) / ry;
                            inside = dx * dx + dy * dy <= 1.0;
                        } else {
                            inside = std::fabs(px - cx) <= rx && std::fabs(py - cy) <= ry;
                        }
                        if (inside) cov += 0.25;
                    }
                if (cov > 0.0)
                    for (int c = 0; c < 3; ++c)
                        img.at(c, y, x) = img.at(c, y, x) * (1.0 - cov) + col[c] * cov;
            }
    }

    // band-limited texture: white noise under a small blur, zero-mean
    ImageBuffer noise(size, size);
    for (double& v : noise.values) v = rng.uniform();
    noise = gaussian_blur(noise, 0.6);
    const double amp = 0.08 + 0.12 * rng.uniform();
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    std::clamp(img.at(c, y, x) + amp * (noise.at(c, y, x) - 0.5), 0.0, 1.0);
    return img;
}

}  // namespace csr
