#include "csr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numbers>

#include <omp.h>

namespace csr {

std::string Shape4::str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
}

Tensor4 Tensor4::full(int n, int c, int h, int w, double value) {
    Tensor4 t(n, c, h, w);
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
}

double Rng::uniform() {
    // 53-bit mantissa from the top bits
    return (double)(gen_() >> 11) * 0x1.0p-53;
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = (uint64_t)(hi - lo) + 1;
    return lo + (int64_t)(gen_() % span);
}

double Rng::normal(double mean, double stddev) {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * std::numbers::pi * u2);
}

Rng Rng::fork(uint64_t stream) const {
    // splitmix-style mix of the generator's next output with the stream id
    std::mt19937_64 g = gen_;
    uint64_t z = g() + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return Rng(z ^ (z >> 31));
}

void fill_normal(Tensor4& t, Rng& rng, double mean, double stddev) {
    for (double& x : t.v) x = rng.normal(mean, stddev);
}

void fill_uniform(Tensor4& t, Rng& rng, double lo, double hi) {
    for (double& x : t.v) x = lo + (hi - lo) * rng.uniform();
}

void configure_threads() {
    if (const char* env = std::getenv("CONTROLSR_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) omp_set_num_threads(n);
    }
}

// ---- GEMM kernels ---------------------------------------------------------

namespace {
constexpr int kJT = 512;  // n-tile
constexpr int kKT = 64;   // k-tile
constexpr int kIT = 8;    // m-tile
}  // namespace

void mat_mul(double* C, const double* A, const double* B, int m, int k, int n) {
#pragma omp parallel for schedule(static) collapse(2)
    for (int i0 = 0; i0 < m; i0 += kIT)
        for (int j0 = 0; j0 < n; j0 += kJT) {
            int i1 = std::min(i0 + kIT, m), j1 = std::min(j0 + kJT, n);
            for (int k0 = 0; k0 < k; k0 += kKT) {
                int k1 = std::min(k0 + kKT, k);
                for (int i = i0; i < i1; ++i) {
                    double* c = C + (size_t)i * n;
                    const double* a = A + (size_t)i * k;
                    for (int kk = k0; kk < k1; ++kk) {
                        const double av = a[kk];
                        const double* b = B + (size_t)kk * n;
                        for (int j = j0; j < j1; ++j) c[j] += av * b[j];
                    }
                }
            }
        }
}

void mat_mul_abt(double* C, const double* A, const double* B, int m, int n, int k) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* a = A + (size_t)i * n;
        double* c = C + (size_t)i * k;
        for (int j = 0; j < k; ++j) {
            const double* b = B + (size_t)j * n;
            double acc = 0.0;
            for (int l = 0; l < n; ++l) acc += a[l] * b[l];
            c[j] += acc;
        }
    }
}

void mat_mul_atb(double* C, const double* A, const double* B, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < k; ++j) {
        double* c = C + (size_t)j * n;
        for (int i = 0; i < m; ++i) {
            const double av = A[(size_t)i * k + j];
            const double* b = B + (size_t)i * n;
            for (int l = 0; l < n; ++l) c[l] += av * b[l];
        }
    }
}

// ---- conv2d ---------------------------------------------------------------

int conv_out_dim(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

// col buffer layout: (Cin*kh*kw) rows x (Hout*Wout) cols
void im2col(const Tensor4& x, int b, int kh, int kw, ConvSpec spec,
            int ho, int wo, std::vector<double>& col) {
    const int ci = x.shape.c, h = x.shape.h, w = x.shape.w;
    const int n = ho * wo;
    col.assign((size_t)ci * kh * kw * n, 0.0);
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ci; ++c) {
        const double* xc = x.data() + ((size_t)b * ci + c) * h * w;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                double* row = col.data() + (((size_t)c * kh + ky) * kw + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * spec.stride + ky - spec.pad;
                    if (iy < 0 || iy >= h) continue;
                    const double* xr = xc + (size_t)iy * w;
                    double* rr = row + (size_t)oy * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * spec.stride + kx - spec.pad;
                        if (ix >= 0 && ix < w) rr[ox] = xr[ix];
                    }
                }
            }
    }
}

void col2im(const std::vector<double>& col, int b, int kh, int kw, ConvSpec spec,
            int ho, int wo, Tensor4& dx) {
    const int ci = dx.shape.c, h = dx.shape.h, w = dx.shape.w;
    const int n = ho * wo;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < ci; ++c) {
        double* xc = dx.data() + ((size_t)b * ci + c) * h * w;
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const double* row = col.data() + (((size_t)c * kh + ky) * kw + kx) * n;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * spec.stride + ky - spec.pad;
                    if (iy < 0 || iy >= h) continue;
                    double* xr = xc + (size_t)iy * w;
                    const double* rr = row + (size_t)oy * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * spec.stride + kx - spec.pad;
                        if (ix >= 0 && ix < w) xr[ix] += rr[ox];
                    }
                }
            }
    }
}

thread_local std::vector<double> g_col;

}  // namespace

Tensor4 conv2d_fwd(const Tensor4& x, const Tensor4& w, const Tensor4& bias, ConvSpec spec) {
    const int co = w.shape.n, ci = w.shape.c, kh = w.shape.h, kw = w.shape.w;
    if (x.shape.c != ci)
        throw ValidationError("conv2d: input channels " + std::to_string(x.shape.c) +
                              " do not match weight " + std::to_string(ci));
    const int ho = conv_out_dim(x.shape.h, kh, spec.stride, spec.pad);
    const int wo = conv_out_dim(x.shape.w, kw, spec.stride, spec.pad);
    const int n = ho * wo, k = ci * kh * kw;
    Tensor4 y(x.shape.n, co, ho, wo);
    for (int b = 0; b < x.shape.n; ++b) {
        im2col(x, b, kh, kw, spec, ho, wo, g_col);
        double* yb = y.data() + (size_t)b * co * n;
        if (bias.size() > 0) {
#pragma omp parallel for schedule(static)
            for (int c = 0; c < co; ++c)
                std::fill(yb + (size_t)c * n, yb + (size_t)(c + 1) * n, bias.v[c]);
        }
        mat_mul(yb, w.data(), g_col.data(), co, k, n);
    }
    return y;
}

Tensor4 conv2d_bwd_x(const Tensor4& dy, const Tensor4& w, Shape4 x_shape, ConvSpec spec) {
    const int co = w.shape.n, ci = w.shape.c, kh = w.shape.h, kw = w.shape.w;
    const int ho = dy.shape.h, wo = dy.shape.w;
    const int n = ho * wo, k = ci * kh * kw;
    Tensor4 dx(x_shape);
    std::vector<double> dcol;
    for (int b = 0; b < dy.shape.n; ++b) {
        dcol.assign((size_t)k * n, 0.0);
        mat_mul_atb(dcol.data(), w.data(), dy.data() + (size_t)b * co * n, co, k, n);
        col2im(dcol, b, kh, kw, spec, ho, wo, dx);
    }
    return dx;
}

void conv2d_bwd_w(const Tensor4& dy, const Tensor4& x, Tensor4& dw, Tensor4* dbias, ConvSpec spec) {
    const int co = dw.shape.n, ci = dw.shape.c, kh = dw.shape.h, kw = dw.shape.w;
    const int ho = dy.shape.h, wo = dy.shape.w;
    const int n = ho * wo, k = ci * kh * kw;
    for (int b = 0; b < dy.shape.n; ++b) {
        im2col(x, b, kh, kw, spec, ho, wo, g_col);
        const double* dyb = dy.data() + (size_t)b * co * n;
        mat_mul_abt(dw.data(), dyb, g_col.data(), co, n, k);
        if (dbias) {
            for (int c = 0; c < co; ++c) {
                double acc = 0.0;
                const double* r = dyb + (size_t)c * n;
                for (int i = 0; i < n; ++i) acc += r[i];
                dbias->v[c] += acc;
            }
        }
    }
}

}  // namespace csr
