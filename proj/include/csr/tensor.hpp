#ifndef CSR_TENSOR_HPP
#define CSR_TENSOR_HPP

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace csr {

// Thrown when an input violates an operation's contract.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown on malformed files, truncated payloads and the like.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return (int64_t)n * c * h * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

// Rank-4 row-major tensor (n, c, h, w), the universal numeric carrier.
// All computation runs in double; files store 32-bit floats.
struct Tensor4 {
    Shape4 shape;
    std::vector<double> v;

    Tensor4() = default;
    explicit Tensor4(Shape4 s) : shape(s), v((size_t)s.numel(), 0.0) {}
    Tensor4(int n, int c, int h, int w) : Tensor4(Shape4{n, c, h, w}) {}

    static Tensor4 zeros(int n, int c, int h, int w) { return Tensor4(n, c, h, w); }
    static Tensor4 full(int n, int c, int h, int w, double value);

    int64_t size() const { return (int64_t)v.size(); }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    size_t idx(int i, int j, int k, int l) const {
        return (((size_t)i * shape.c + j) * shape.h + k) * shape.w + l;
    }
    double& at(int i, int j, int k, int l) { return v[idx(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return v[idx(i, j, k, l)]; }

    bool same_shape(const Tensor4& o) const { return shape == o.shape; }
};

// Deterministic RNG: mt19937_64 plus an explicit Box-Muller transform so the
// normal stream does not depend on the C++ standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    // uniform in [0, 1)
    double uniform();
    // uniform integer in [lo, hi]
    int64_t uniform_int(int64_t lo, int64_t hi);
    double normal(double mean = 0.0, double stddev = 1.0);

    // Independent child stream (per-image seeds etc.).
    Rng fork(uint64_t stream) const;

private:
    std::mt19937_64 gen_;
};

void fill_normal(Tensor4& t, Rng& rng, double mean = 0.0, double stddev = 1.0);
void fill_uniform(Tensor4& t, Rng& rng, double lo, double hi);

// ---- dense kernels (row-major) ------------------------------------------
// All loops accumulate each output element serially in a fixed order, so
// results are identical for any OpenMP thread count.

// C(m x n) += A(m x k) * B(k x n)
void mat_mul(double* C, const double* A, const double* B, int m, int k, int n);
// C(m x k) += A(m x n) * B(k x n)^T
void mat_mul_abt(double* C, const double* A, const double* B, int m, int n, int k);
// C(k x n) += A(m x k)^T * B(m x n)
void mat_mul_atb(double* C, const double* A, const double* B, int m, int k, int n);

struct ConvSpec {
    int stride = 1;
    int pad = 1;  // zero padding, same on both sides
};

int conv_out_dim(int in, int kernel, int stride, int pad);

// x(B,Cin,H,W), w(Cout,Cin,kh,kw), bias(1,Cout,1,1) or empty
Tensor4 conv2d_fwd(const Tensor4& x, const Tensor4& w, const Tensor4& bias, ConvSpec spec);
Tensor4 conv2d_bwd_x(const Tensor4& dy, const Tensor4& w, Shape4 x_shape, ConvSpec spec);
void conv2d_bwd_w(const Tensor4& dy, const Tensor4& x, Tensor4& dw, Tensor4* dbias, ConvSpec spec);

// Called once at start-up; honours the CONTROLSR_THREADS env var.
void configure_threads();

}  // namespace csr

#endif
