#include <doctest.h>

#include "csr/autograd.hpp"
#include "csr/layers.hpp"
#include "csr/tensor.hpp"

#include "gradcheck.hpp"

using namespace csr;
using csrtest::grad_check;
using csrtest::max_abs_diff;

namespace {

Tensor4 randn(int n, int c, int h, int w, uint64_t seed) {
    Tensor4 t(n, c, h, w);
    Rng rng(seed);
    fill_normal(t, rng);
    return t;
}

// random projection makes every output element matter
ag::Var proj_loss(const ag::Var& out, uint64_t seed) {
    Tensor4 r(out->val.shape);
    Rng rng(seed);
    fill_normal(r, rng);
    return ag::mean_all(ag::mul(out, ag::constant(std::move(r))));
}

}  // namespace

TEST_CASE("gemm kernels agree with naive loops") {
    const int m = 5, k = 7, n = 6;
    Tensor4 A = randn(1, 1, m, k, 1), B = randn(1, 1, k, n, 2);
    std::vector<double> C((size_t)m * n, 0.0), ref((size_t)m * n, 0.0);
    mat_mul(C.data(), A.data(), B.data(), m, k, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int l = 0; l < k; ++l) ref[i * n + j] += A.v[i * k + l] * B.v[l * n + j];
    for (size_t i = 0; i < C.size(); ++i) CHECK(C[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    // abt: C(m x k) = A(m x n) * B(k x n)^T
    Tensor4 A2 = randn(1, 1, m, n, 3), B2 = randn(1, 1, k, n, 4);
    std::vector<double> C2((size_t)m * k, 0.0), ref2((size_t)m * k, 0.0);
    mat_mul_abt(C2.data(), A2.data(), B2.data(), m, n, k);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
            for (int l = 0; l < n; ++l) ref2[i * k + j] += A2.v[i * n + l] * B2.v[j * n + l];
    for (size_t i = 0; i < C2.size(); ++i) CHECK(C2[i] == doctest::Approx(ref2[i]).epsilon(1e-12));

    // atb: C(k x n) = A(m x k)^T * B(m x n)
    Tensor4 A3 = randn(1, 1, m, k, 5), B3 = randn(1, 1, m, n, 6);
    std::vector<double> C3((size_t)k * n, 0.0), ref3((size_t)k * n, 0.0);
    mat_mul_atb(C3.data(), A3.data(), B3.data(), m, k, n);
    for (int j = 0; j < k; ++j)
        for (int l = 0; l < n; ++l)
            for (int i = 0; i < m; ++i) ref3[j * n + l] += A3.v[i * k + j] * B3.v[i * n + l];
    for (size_t i = 0; i < C3.size(); ++i) CHECK(C3[i] == doctest::Approx(ref3[i]).epsilon(1e-12));
}

TEST_CASE("conv2d forward matches direct convolution") {
    Tensor4 x = randn(2, 3, 5, 5, 10);
    Tensor4 w = randn(4, 3, 3, 3, 11);
    Tensor4 b = randn(1, 4, 1, 1, 12);
    Tensor4 y = conv2d_fwd(x, w, b, ConvSpec{1, 1});
    REQUIRE(y.shape == Shape4{2, 4, 5, 5});
    for (int bi = 0; bi < 2; ++bi)
        for (int co = 0; co < 4; ++co)
            for (int oy = 0; oy < 5; ++oy)
                for (int ox = 0; ox < 5; ++ox) {
                    double acc = b.v[co];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                int iy = oy + ky - 1, ix = ox + kx - 1;
                                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                                acc += x.at(bi, ci, iy, ix) * w.at(co, ci, ky, kx);
                            }
                    CHECK(y.at(bi, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
                }
}

TEST_CASE("autograd gradients match finite differences per op") {
    ParamStore ps;
    Rng rng(42);

    SUBCASE("conv2d stride 1") {
        Tensor4 w = randn(4, 3, 3, 3, 20);
        ps.create("w", w, true);
        ps.create("b", randn(1, 4, 1, 1, 21), true);
        Tensor4 x = randn(2, 3, 6, 6, 22);
        auto build = [&] {
            auto out = ag::conv2d(ag::constant(x), ps.borrow("w"), ps.borrow("b"), ConvSpec{1, 1});
            return proj_loss(out, 99);
        };
        CHECK(grad_check(ps, "w", build) < 1e-4);
        CHECK(grad_check(ps, "b", build) < 1e-4);
    }
    SUBCASE("conv2d stride 2 input grad") {
        ps.create("x", randn(1, 3, 6, 6, 23), true);
        Tensor4 w = randn(5, 3, 3, 3, 24);
        auto build = [&] {
            auto out = ag::conv2d(ps.borrow("x"), ag::constant(w), nullptr, ConvSpec{2, 1});
            return proj_loss(out, 98);
        };
        CHECK(grad_check(ps, "x", build) < 1e-4);
    }
    SUBCASE("linear_tokens") {
        ps.create("w", randn(5, 7, 1, 1, 25), true);
        ps.create("b", randn(1, 5, 1, 1, 26), true);
        ps.create("t", randn(3, 4, 7, 1, 27), true);
        auto build = [&] {
            auto out = ag::linear_tokens(ps.borrow("t"), ps.borrow("w"), ps.borrow("b"));
            return proj_loss(out, 97);
        };
        CHECK(grad_check(ps, "w", build) < 1e-4);
        CHECK(grad_check(ps, "b", build) < 1e-4);
        CHECK(grad_check(ps, "t", build) < 1e-4);
    }
    SUBCASE("group_norm") {
        ps.create("x", randn(2, 8, 3, 3, 28), true);
        ps.create("g", Tensor4::full(1, 8, 1, 1, 1.3), true);
        ps.create("be", randn(1, 8, 1, 1, 29), true);
        auto build = [&] {
            auto out = ag::group_norm(ps.borrow("x"), 4, ps.borrow("g"), ps.borrow("be"));
            return proj_loss(out, 96);
        };
        CHECK(grad_check(ps, "x", build) < 1e-4);
        CHECK(grad_check(ps, "g", build) < 1e-4);
        CHECK(grad_check(ps, "be", build) < 1e-4);
    }
    SUBCASE("layer_norm_tokens") {
        ps.create("t", randn(2, 5, 6, 1, 30), true);
        ps.create("g", Tensor4::full(1, 6, 1, 1, 0.8), true);
        ps.create("be", randn(1, 6, 1, 1, 31), true);
        auto build = [&] {
            auto out = ag::layer_norm_tokens(ps.borrow("t"), ps.borrow("g"), ps.borrow("be"));
            return proj_loss(out, 95);
        };
        CHECK(grad_check(ps, "t", build) < 1e-4);
        CHECK(grad_check(ps, "g", build) < 1e-4);
    }
    SUBCASE("softmax + bmm attention core") {
        ps.create("q", randn(3, 4, 5, 1, 32), true);
        ps.create("k", randn(3, 6, 5, 1, 33), true);
        ps.create("v", randn(3, 6, 5, 1, 34), true);
        auto build = [&] {
            auto logits = ag::scale(ag::bmm_abt(ps.borrow("q"), ps.borrow("k")), 0.4);
            auto attn = ag::softmax_dim2(logits);
            return proj_loss(ag::bmm_ab(attn, ps.borrow("v")), 94);
        };
        CHECK(grad_check(ps, "q", build) < 1e-4);
        CHECK(grad_check(ps, "k", build) < 1e-4);
        CHECK(grad_check(ps, "v", build) < 1e-4);
    }
    SUBCASE("elementwise and reductions") {
        ps.create("a", randn(2, 3, 4, 4, 35), true);
        ps.create("b", randn(2, 3, 4, 4, 36), true);
        auto build = [&] {
            auto x = ag::silu(ps.borrow("a"));
            auto y = ag::exp_(ag::scale(ps.borrow("b"), 0.3));
            auto z = ag::sub(ag::mul(x, y), ag::add_const(ps.borrow("a"), 0.1));
            return ag::mse(z, ag::constant(randn(2, 3, 4, 4, 37)));
        };
        CHECK(grad_check(ps, "a", build) < 1e-4);
        CHECK(grad_check(ps, "b", build) < 1e-4);
    }
    SUBCASE("structure ops") {
        ps.create("a", randn(2, 3, 4, 4, 38), true);
        ps.create("b", randn(2, 2, 4, 4, 39), true);
        ps.create("v", randn(2, 3, 1, 1, 40), true);
        auto build = [&] {
            auto x = ag::add_channel_vec(ps.borrow("a"), ps.borrow("v"));
            auto cat = ag::concat_channels(x, ps.borrow("b"));
            auto up = ag::nearest_up2(ag::slice_channels(cat, 1, 4));
            auto pooled = ag::global_avg_pool(up);
            return proj_loss(pooled, 93);
        };
        CHECK(grad_check(ps, "a", build) < 1e-4);
        CHECK(grad_check(ps, "b", build) < 1e-4);
        CHECK(grad_check(ps, "v", build) < 1e-4);
    }
    SUBCASE("token layout ops") {
        ps.create("x", randn(2, 4, 4, 4, 41), true);
        auto build = [&] {
            auto t = ag::to_tokens(ps.borrow("x"));
            auto h = ag::split_heads(t, 2);
            auto back = ag::merge_heads(h, 2);
            auto f = ag::from_tokens(back, 4, 4);
            auto wp = ag::window_partition(f, 2);
            auto wm = ag::window_merge(wp, 2, 2, 4, 4);
            return proj_loss(wm, 92);
        };
        CHECK(grad_check(ps, "x", build) < 1e-4);
        // pure permutations: round trip must be exact
        ps.end_step();
        auto t = ag::to_tokens(ps.borrow("x"));
        auto back = ag::from_tokens(t, 4, 4);
        CHECK(max_abs_diff(back->val, ps.get("x").value) == 0.0);
    }
    SUBCASE("repeat_batch") {
        ps.create("x", randn(1, 3, 2, 2, 43), true);
        auto build = [&] { return proj_loss(ag::repeat_batch(ps.borrow("x"), 3), 91); };
        CHECK(grad_check(ps, "x", build) < 1e-4);
    }
}

TEST_CASE("rng determinism and normality") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c(7);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (double& x : xs) x = c.normal();
    for (double x : xs) mean += x;
    mean /= n;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= n;
    CHECK(std::fabs(mean) < 0.03);
    CHECK(std::fabs(var - 1.0) < 0.05);
}
