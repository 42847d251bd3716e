#include "csr/probe.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <numbers>

namespace csr {

double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

double bilinear_sample(const std::vector<double>& grid, int h, int w, double fy, double fx) {
    fy = std::clamp(fy, 0.0, (double)h - 1);
    fx = std::clamp(fx, 0.0, (double)w - 1);
    const int y0 = (int)std::floor(fy), x0 = (int)std::floor(fx);
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double ay = fy - y0, ax = fx - x0;
    return grid[(size_t)y0 * w + x0] * (1 - ay) * (1 - ax) +
           grid[(size_t)y0 * w + x1] * (1 - ay) * ax +
           grid[(size_t)y1 * w + x0] * ay * (1 - ax) +
           grid[(size_t)y1 * w + x1] * ay * ax;
}

namespace {

std::vector<double> channel_mean(const Tensor4& x, int b) {
    const int C = x.shape.c, H = x.shape.h, W = x.shape.w;
    std::vector<double> out((size_t)H * W, 0.0);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) out[(size_t)y * W + xx] += x.at(b, c, y, xx);
    for (double& v : out) v /= C;
    return out;
}

}  // namespace

SpatialDistribution to_distribution(const Tensor4& x, int b, int th, int tw) {
    if (b < 0 || b >= x.shape.n) throw ValidationError("to_distribution: batch item out of range");
    auto mean = channel_mean(x, b);
    const int H = x.shape.h, W = x.shape.w;
    std::vector<double> resized((size_t)th * tw);
    if (th == H && tw == W) {
        resized = mean;
    } else {
        const double sy = (double)H / th, sx = (double)W / tw;
        for (int y = 0; y < th; ++y)
            for (int xx = 0; xx < tw; ++xx)
                resized[(size_t)y * tw + xx] =
                    bilinear_sample(mean, H, W, (y + 0.5) * sy - 0.5, (xx + 0.5) * sx - 0.5);
    }
    double m = *std::max_element(resized.begin(), resized.end());
    double sum = 0.0;
    for (double& v : resized) {
        v = std::exp(v - m);
        sum += v;
    }
    SpatialDistribution d;
    d.h = th;
    d.w = tw;
    d.p.resize(resized.size());
    double renorm = 0.0;
    for (size_t i = 0; i < resized.size(); ++i) {
        d.p[i] = std::max(resized[i] / sum, 1e-12);
        renorm += d.p[i];
    }
    for (double& v : d.p) v /= renorm;
    return d;
}

double kl_divergence(const SpatialDistribution& P, const SpatialDistribution& Q) {
    if (P.h != Q.h || P.w != Q.w)
        throw ValidationError("kl_divergence: grids differ");
    double kl = 0.0;
    for (size_t i = 0; i < P.p.size(); ++i) kl += P.p[i] * std::log(P.p[i] / Q.p[i]);
    return kl;
}

double diff_kl(double kl_baseline, double kl_ours) { return kl_baseline - kl_ours; }

// ---- PCA ----------------------------------------------------------------

ImageBuffer pca_project(const Tensor4& x, int b) {
    const int C = x.shape.c, H = x.shape.h, W = x.shape.w;
    if (C < 3) throw ValidationError("pca_project: need at least 3 channels");
    const int n = H * W;

    // center per channel
    std::vector<double> mean(C, 0.0);
    for (int c = 0; c < C; ++c) {
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) mean[c] += x.at(b, c, y, xx);
        mean[c] /= n;
    }
    // covariance C x C over positions
    std::vector<double> cov((size_t)C * C, 0.0);
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
            for (int ci = 0; ci < C; ++ci) {
                const double vi = x.at(b, ci, y, xx) - mean[ci];
                for (int cj = ci; cj < C; ++cj)
                    cov[(size_t)ci * C + cj] += vi * (x.at(b, cj, y, xx) - mean[cj]);
            }
    for (int ci = 0; ci < C; ++ci)
        for (int cj = ci; cj < C; ++cj) {
            cov[(size_t)ci * C + cj] /= n;
            cov[(size_t)cj * C + ci] = cov[(size_t)ci * C + cj];
        }

    double trace = 0.0;
    for (int c = 0; c < C; ++c) trace += cov[(size_t)c * C + c];
    ImageBuffer out(H, W);
    if (!(trace > 1e-12)) {
        std::fprintf(stderr, "pca_project: degenerate covariance, falling back to raw channels\n");
        for (int c = 0; c < 3; ++c) {
            double lo = 1e300, hi = -1e300;
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    lo = std::min(lo, x.at(b, c, y, xx));
                    hi = std::max(hi, x.at(b, c, y, xx));
                }
            const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx)
                    out.at(c, y, xx) = (x.at(b, c, y, xx) - lo) / span;
        }
        return out;
    }

    // top-3 eigenvectors by power iteration with deflation
    std::vector<double> work = cov;
    for (int comp = 0; comp < 3; ++comp) {
        std::vector<double> v(C);
        for (int c = 0; c < C; ++c) v[c] = 1.0 + 1e-3 * (c + 1);
        double nv = 0.0;
        for (double e : v) nv += e * e;
        for (double& e : v) e /= std::sqrt(nv);
        double lambda = 0.0;
        for (int it = 0; it < 100; ++it) {
            std::vector<double> av(C, 0.0);
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < C; ++j) av[i] += work[(size_t)i * C + j] * v[j];
            double norm = 0.0;
            for (double e : av) norm += e * e;
            norm = std::sqrt(norm);
            if (norm < 1e-300) break;
            double diff = 0.0;
            for (int i = 0; i < C; ++i) {
                av[i] /= norm;
                diff += std::fabs(av[i] - v[i]);
            }
            v = av;
            lambda = norm;
            if (diff < 1e-8) break;
        }
        // project positions onto v -> one component plane
        std::vector<double> plane((size_t)H * W);
        double lo = 1e300, hi = -1e300;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) acc += (x.at(b, c, y, xx) - mean[c]) * v[c];
                plane[(size_t)y * W + xx] = acc;
                lo = std::min(lo, acc);
                hi = std::max(hi, acc);
            }
        const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx)
                out.at(comp, y, xx) = (plane[(size_t)y * W + xx] - lo) / span;
        // deflate
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < C; ++j) work[(size_t)i * C + j] -= lambda * v[i] * v[j];
    }
    return out;
}

// ---- spectra --------------------------------------------------------------

std::vector<double> dft_power_grid(const std::vector<double>& img, int h, int w) {
    using cd = std::complex<double>;
    // row-column 1-D DFTs
    std::vector<cd> rows((size_t)h * w), full((size_t)h * w);
    for (int y = 0; y < h; ++y)
        for (int k = 0; k < w; ++k) {
            cd acc(0.0, 0.0);
            for (int x = 0; x < w; ++x) {
                const double ang = -2.0 * std::numbers::pi * k * x / w;
                acc += img[(size_t)y * w + x] * cd(std::cos(ang), std::sin(ang));
            }
            rows[(size_t)y * w + k] = acc;
        }
    for (int k = 0; k < w; ++k)
        for (int j = 0; j < h; ++j) {
            cd acc(0.0, 0.0);
            for (int y = 0; y < h; ++y) {
                const double ang = -2.0 * std::numbers::pi * j * y / h;
                acc += rows[(size_t)y * w + k] * cd(std::cos(ang), std::sin(ang));
            }
            full[(size_t)j * w + k] = acc;
        }
    std::vector<double> power((size_t)h * w);
    for (size_t i = 0; i < power.size(); ++i) power[i] = std::norm(full[i]);
    return power;
}

RadialSpectrum power_spectrum(const Tensor4& x, int b) {
    const int H = x.shape.h, W = x.shape.w;
    auto img = channel_mean(x, b);
    auto power = dft_power_grid(img, H, W);
    const int nyq = std::min(H, W) / 2;
    std::vector<double> sum(nyq + 1, 0.0);
    std::vector<int> count(nyq + 1, 0);
    for (int j = 0; j < H; ++j)
        for (int k = 0; k < W; ++k) {
            const int fy = j <= H / 2 ? j : j - H;
            const int fx = k <= W / 2 ? k : k - W;
            const int r = (int)std::lround(std::sqrt((double)fy * fy + (double)fx * fx));
            if (r > nyq) continue;
            sum[r] += std::log10(power[(size_t)j * W + k] + 1e-12);
            ++count[r];
        }
    RadialSpectrum out;
    for (int r = 0; r <= nyq; ++r)
        if (count[r] > 0) out.bins.emplace_back(r, sum[r] / count[r]);
    return out;
}

namespace {

double hf_fraction_of(const std::vector<double>& img, int h, int w) {
    auto power = dft_power_grid(img, h, w);
    const double half_nyq = std::min(h, w) / 2.0 / 2.0;
    double total = 0.0, high = 0.0;
    for (int j = 0; j < h; ++j)
        for (int k = 0; k < w; ++k) {
            if (j == 0 && k == 0) continue;  // skip DC
            const int fy = j <= h / 2 ? j : j - h;
            const int fx = k <= w / 2 ? k : k - w;
            const double r = std::sqrt((double)fy * fy + (double)fx * fx);
            total += power[(size_t)j * w + k];
            if (r > half_nyq) high += power[(size_t)j * w + k];
        }
    return total > 0.0 ? high / total : 0.0;
}

}  // namespace

double hf_energy_fraction(const Tensor4& x, int b) {
    return hf_fraction_of(channel_mean(x, b), x.shape.h, x.shape.w);
}

double hf_energy_fraction(const ImageBuffer& img) {
    std::vector<double> grey((size_t)img.height * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            grey[(size_t)y * img.width + x] =
                luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));
    return hf_fraction_of(grey, img.height, img.width);
}

// ---- fidelity metrics -------------------------------------------------

namespace {

std::vector<double> metric_plane(const ImageBuffer& img, bool on_y, int channel) {
    std::vector<double> out((size_t)img.height * img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            out[(size_t)y * img.width + x] =
                on_y ? luma(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x))
                     : img.at(channel, y, x);
    return out;
}

}  // namespace

double psnr(const ImageBuffer& a, const ImageBuffer& b, bool on_y) {
    if (a.height != b.height || a.width != b.width)
        throw ValidationError("psnr: image shapes differ");
    double mse = 0.0;
    int64_t n = 0;
    const int nplanes = on_y ? 1 : 3;
    for (int c = 0; c < nplanes; ++c) {
        auto pa = metric_plane(a, on_y, c), pb = metric_plane(b, on_y, c);
        for (size_t i = 0; i < pa.size(); ++i) {
            const double d = pa[i] - pb[i];
            mse += d * d;
            ++n;
        }
    }
    mse /= (double)n;
    if (mse <= 0.0) return 99.0;
    return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const ImageBuffer& a, const ImageBuffer& b, bool on_y) {
    if (a.height != b.height || a.width != b.width)
        throw ValidationError("ssim: image shapes differ");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    constexpr int win = 8;
    const int nplanes = on_y ? 1 : 3;
    double total = 0.0;
    int64_t count = 0;
    for (int c = 0; c < nplanes; ++c) {
        auto pa = metric_plane(a, on_y, c), pb = metric_plane(b, on_y, c);
        const int H = a.height, W = a.width;
        const int wh = std::min(win, H), ww = std::min(win, W);
        for (int y0 = 0; y0 + wh <= H; ++y0)
            for (int x0 = 0; x0 + ww <= W; ++x0) {
                double ma = 0.0, mb = 0.0;
                for (int y = 0; y < wh; ++y)
                    for (int x = 0; x < ww; ++x) {
                        ma += pa[(size_t)(y0 + y) * W + x0 + x];
                        mb += pb[(size_t)(y0 + y) * W + x0 + x];
                    }
                const int nn = wh * ww;
                ma /= nn;
                mb /= nn;
                double va = 0.0, vb = 0.0, cab = 0.0;
                for (int y = 0; y < wh; ++y)
                    for (int x = 0; x < ww; ++x) {
                        const double da = pa[(size_t)(y0 + y) * W + x0 + x] - ma;
                        const double db = pb[(size_t)(y0 + y) * W + x0 + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cab += da * db;
                    }
                va /= nn;
                vb /= nn;
                cab /= nn;
                total += ((2 * ma * mb + C1) * (2 * cab + C2)) /
                         ((ma * ma + mb * mb + C1) * (va + vb + C2));
                ++count;
            }
    }
    return total / (double)count;
}

}  // namespace csr
