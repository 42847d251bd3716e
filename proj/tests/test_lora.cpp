#include <doctest.h>

#include "csr/lora.hpp"

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

}  // namespace

TEST_CASE("lora_apply: fresh adapter is exact identity") {
    Rng rng(1);
    Tensor4 w = randn(6, 4, 1, 1, 2);
    Tensor4 x = randn(2, 4, 3, 3, 3);
    LoraAdapter a = make_lora(w.shape, 16, rng);
    CHECK(a.rank == 4);  // clamped to min(in, out)
    // up starts all-zero
    for (double v : a.up.v) CHECK(v == 0.0);
    Tensor4 base = conv2d_fwd(x, w, Tensor4(), ConvSpec{1, 0});
    Tensor4 out = lora_apply(base, x, a);
    CHECK(max_abs_diff(out, base) == 0.0);
}

TEST_CASE("lora_apply: full-rank identity-down adapter adds Bx") {
    Rng rng(5);
    const int f = 4;
    Tensor4 w = randn(f, f, 1, 1, 6);
    Tensor4 x = randn(1, f, 2, 2, 7);
    LoraAdapter a = make_lora(w.shape, f, rng);
    // down = identity
    a.down = Tensor4(f, f, 1, 1);
    for (int i = 0; i < f; ++i) a.down.at(i, i, 0, 0) = 1.0;
    fill_normal(a.up, rng);
    Tensor4 base = conv2d_fwd(x, w, Tensor4(), ConvSpec{1, 0});
    Tensor4 out = lora_apply(base, x, a);
    Tensor4 bx = conv2d_fwd(x, a.up, Tensor4(), ConvSpec{1, 0});
    for (int64_t i = 0; i < out.size(); ++i)
        CHECK(out.v[i] == doctest::Approx(base.v[i] + bx.v[i]).epsilon(1e-12));
}

TEST_CASE("lora_merge: equals unmerged forward, and double-merge doubles the delta") {
    Rng rng(9);
    Tensor4 w = randn(4, 4, 1, 1, 10);
    Tensor4 x = randn(3, 4, 2, 2, 11);
    LoraAdapter a = make_lora(w.shape, 2, rng);
    fill_normal(a.up, rng, 0.0, 0.2);
    a.scale = 0.7;

    Tensor4 merged = lora_merge(w, a);
    Tensor4 via_merged = conv2d_fwd(x, merged, Tensor4(), ConvSpec{1, 0});
    Tensor4 base = conv2d_fwd(x, w, Tensor4(), ConvSpec{1, 0});
    Tensor4 via_apply = lora_apply(base, x, a);
    CHECK(max_abs_diff(via_merged, via_apply) < 1e-5);

    // merge with zero up leaves W untouched
    LoraAdapter fresh = make_lora(w.shape, 2, rng);
    CHECK(max_abs_diff(lora_merge(w, fresh), w) == 0.0);

    // merging twice doubles the update
    Tensor4 twice = lora_merge(merged, a);
    for (int64_t i = 0; i < w.size(); ++i) {
        const double delta = merged.v[i] - w.v[i];
        CHECK(twice.v[i] == doctest::Approx(w.v[i] + 2.0 * delta).epsilon(1e-9));
    }
}

TEST_CASE("lora_merge works on 3x3 conv weights") {
    Rng rng(13);
    Tensor4 w = randn(5, 3, 3, 3, 14);
    Tensor4 x = randn(1, 3, 6, 6, 15);
    LoraAdapter a = make_lora(w.shape, 3, rng);
    fill_normal(a.up, rng, 0.0, 0.1);
    Tensor4 base = conv2d_fwd(x, w, Tensor4(), ConvSpec{1, 1});
    Tensor4 via_apply = lora_apply(base, x, a, ConvSpec{1, 1});
    Tensor4 via_merged = conv2d_fwd(x, lora_merge(w, a), Tensor4(), ConvSpec{1, 1});
    CHECK(max_abs_diff(via_merged, via_apply) < 1e-5);
}

TEST_CASE("lora shape validation") {
    Rng rng(17);
    Tensor4 w = randn(4, 4, 1, 1, 18);
    LoraAdapter a = make_lora(w.shape, 2, rng);
    Tensor4 bad = randn(1, 5, 2, 2, 19);
    Tensor4 base = randn(1, 4, 2, 2, 20);
    CHECK_THROWS_AS(lora_apply(base, bad, a), ValidationError);
    Tensor4 w2 = randn(4, 6, 1, 1, 21);
    CHECK_THROWS_AS(lora_merge(w2, a), ValidationError);
}

TEST_CASE("lora gradients flow through store-managed adapters") {
    ParamStore ps;
    Rng rng(23);
    Tensor4 w = randn(6, 4, 3, 3, 24);
    ps.create("layer.w", w, false);
    ps.create("layer.b", Tensor4(1, 6, 1, 1), false);
    create_lora(ps, "layer", 2, rng);
    ps.set_trainable("layer.lora.A", true);
    ps.set_trainable("layer.lora.B", true);
    // nonzero up so gradients reach A as well
    {
        auto& up = ps.get("layer.lora.B").value;
        Rng r2(25);
        fill_normal(up, r2, 0.0, 0.1);
    }
    Tensor4 x = randn(2, 4, 4, 4, 26);
    Tensor4 target = randn(2, 6, 4, 4, 27);
    auto build = [&] {
        auto base = ag::conv2d(ag::constant(x), ps.borrow("layer.w"), ps.borrow("layer.b"),
                               ConvSpec{1, 1});
        auto out = ag::add(base, lora_delta(ps, "layer", ag::constant(x), ConvSpec{1, 1}));
        return ag::mse(out, ag::constant(target));
    };
    CHECK(grad_check(ps, "layer.lora.A", build) < 1e-4);
    CHECK(grad_check(ps, "layer.lora.B", build) < 1e-4);
}
