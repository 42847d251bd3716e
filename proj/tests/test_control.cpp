#include <doctest.h>

#include "csr/backbone.hpp"
#include "csr/control.hpp"
#include "csr/degrade.hpp"
#include "csr/train.hpp"
#include "csr/vae.hpp"

#include "gradcheck.hpp"

using namespace csr;
using csrtest::max_abs_diff;

namespace {

RunConfig tiny_cfg() {
    RunConfig cfg;
    cfg.vae_widths = {4, 6, 8};
    cfg.unet_width = 8;
    cfg.heads = 2;
    cfg.temb_dim = 8;
    cfg.cond_dim = 8;
    cfg.lora_rank = 2;
    cfg.window_s = 4;
    return cfg;
}

Tensor4 randn(int n, int c, int h, int w, uint64_t seed) {
    Tensor4 t(n, c, h, w);
    Rng rng(seed);
    fill_normal(t, rng);
    return t;
}

struct Fixture {
    RunConfig cfg = tiny_cfg();
    ParamStore ps;
    Fixture() {
        Rng rng(1);
        build_backbone(ps, cfg, rng);
        build_condition_embedder(ps, cfg, rng);
        build_control(ps, cfg, rng, /*copy_from_backbone=*/true);
    }
};

}  // namespace

TEST_CASE("zero-conv init: both branches emit exact zeros") {
    Fixture f;
    Tensor4 x_t = randn(1, 4, 8, 8, 2), x_lr = randn(1, 4, 8, 8, 3);
    Tensor4 p = randn(1, f.cfg.cond_dim, 1, 1, 4);
    ControlSignals d = dpm_forward(f.ps, f.cfg, x_t, x_lr, {3}, &p);
    ControlSignals g = gspm_forward(f.ps, f.cfg, x_t, x_lr, {3});
    REQUIRE(d.c.size() == kControlPoints);
    REQUIRE(g.c.size() == kControlPoints);
    for (const auto& c : d.c)
        for (double v : c.v) CHECK(v == 0.0);
    for (const auto& c : g.c)
        for (double v : c.v) CHECK(v == 0.0);
}

TEST_CASE("signal shapes match the decoder skip shapes at every index") {
    Fixture f;
    Tensor4 x_t = randn(2, 4, 8, 8, 5), x_lr = randn(2, 4, 8, 8, 6);
    Tensor4 p = randn(2, f.cfg.cond_dim, 1, 1, 7);
    ControlSignals d = dpm_forward(f.ps, f.cfg, x_t, x_lr, {1, 2}, &p);
    ControlSignals g = gspm_forward(f.ps, f.cfg, x_t, x_lr, {1, 2});
    auto ch = control_channels(f.cfg);
    const int sides[5] = {8, 8, 4, 4, 4};
    for (int k = 0; k < kControlPoints; ++k) {
        CHECK(d.c[k].shape == Shape4{2, ch[k], sides[k], sides[k]});
        CHECK(d.c[k].shape == g.c[k].shape);
    }
    CHECK_THROWS_AS(dpm_forward(f.ps, f.cfg, x_t, randn(2, 4, 4, 4, 8), {1, 2}, &p),
                    ValidationError);
}

TEST_CASE("parameter census: GSPM has no attention tensors, DPM one wx per block") {
    Fixture f;
    int gspm_attn = 0, dpm_wx = 0, dpm_ca = 0;
    for (const auto& name : f.ps.names()) {
        if (name.rfind("gspm.", 0) == 0 &&
            (name.find(".attn") != std::string::npos || name.find(".q.") != std::string::npos ||
             name.find(".wx") != std::string::npos || name.find(".ca") != std::string::npos))
            ++gspm_attn;
        if (name.rfind("dpm.wx", 0) == 0 && name.find(".q.w") != std::string::npos) ++dpm_wx;
        if (name.rfind("dpm.ca", 0) == 0 && name.find(".q.w") != std::string::npos) ++dpm_ca;
    }
    CHECK(gspm_attn == 0);
    CHECK(dpm_wx == 3);  // one window cross-attention per encoder block
    CHECK(dpm_ca == 3);
}

TEST_CASE("branches copy the stage-2 encoder weights") {
    Fixture f;
    CHECK(max_abs_diff(f.ps.get("dpm.enc.conv_in.w").value,
                       f.ps.get("unet.enc.conv_in.w").value) == 0.0);
    CHECK(max_abs_diff(f.ps.get("gspm.mid.block1.conv1.w").value,
                       f.ps.get("unet.mid.block1.conv1.w").value) == 0.0);
    CHECK(max_abs_diff(f.ps.get("dpm.mid.attn.q.w").value,
                       f.ps.get("unet.mid.attn.q.w").value) == 0.0);
    // hint and zero convs start at zero
    for (double v : f.ps.get("dpm.hint.w").value.v) CHECK(v == 0.0);
    for (double v : f.ps.get("gspm.zero.3.w").value.v) CHECK(v == 0.0);
}

TEST_CASE("fuse_control: identity, commutativity, cancellation") {
    Fixture f;
    ControlSignals a, b, zero;
    for (int k = 0; k < 3; ++k) {
        a.c.push_back(randn(1, 4, 4, 4, 10 + k));
        b.c.push_back(randn(1, 4, 4, 4, 20 + k));
        zero.c.emplace_back(1, 4, 4, 4);
    }
    ControlSignals ab = fuse_control(a, b), ba = fuse_control(b, a);
    for (int k = 0; k < 3; ++k) CHECK(max_abs_diff(ab.c[k], ba.c[k]) == 0.0);
    ControlSignals az = fuse_control(a, zero);
    for (int k = 0; k < 3; ++k) CHECK(max_abs_diff(az.c[k], a.c[k]) == 0.0);
    ControlSignals neg = a;
    for (auto& c : neg.c)
        for (double& v : c.v) v = -v;
    ControlSignals cancel = fuse_control(a, neg);
    for (const auto& c : cancel.c)
        for (double v : c.v) CHECK(v == 0.0);

    ControlSignals shorter;
    shorter.c.push_back(a.c[0]);
    CHECK_THROWS_AS(fuse_control(a, shorter), ValidationError);
}

TEST_CASE("gradient reaches every branch tensor after one warmup step") {
    RunConfig cfg = tiny_cfg();
    cfg.image_size = 32;
    cfg.scale = 4;
    cfg.T = 20;
    cfg.lr = 1e-3;
    cfg.batch = 1;
    cfg.data_images = 1;

    TrainState st;
    st.cfg = cfg;
    Rng rng(2);
    build_vae(st.params, cfg, rng);
    build_backbone(st.params, cfg, rng);

    Checkpoint ck;
    ck.stage = Stage::Backbone;
    ck.records = st.params.to_records();
    TrainState st2;
    st2.cfg = cfg;
    setup_stage(st2, Stage::Control, &ck);

    ToyDataset ds = make_toy_dataset(cfg, 1, 3);
    NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    Tensor4 lat = vae_encode(st2.params, cfg, images_to_tensor({ds.hr[0]}), false);

    // warmup step so zero-convs move off zero, then check gradient presence
    controlsr_step(st2, lat, {ds.lr[0]}, sched);
    st2.params.end_step();
    {
        Rng r(5);
        std::vector<int> t{(int)r.uniform_int(0, cfg.T - 1)};
        Tensor4 eps(lat.shape);
        fill_normal(eps, r);
        Tensor4 x_t = add_noise(lat, t[0], eps, sched);
        auto x_lr_up = ag::constant(images_to_tensor(
            {bicubic_resize(ds.lr[0], cfg.image_size, cfg.image_size)}));
        auto x_lr = vae_encode_graph(st2.params, cfg, x_lr_up, true).mean;
        auto p = embed_condition_graph(st2.params, cfg, ag::constant(images_to_tensor({ds.lr[0]})));
        auto tok = cond_token_graph(st2.params, cfg, p, 1);
        auto controls = control_signals_graph(st2.params, cfg, ag::constant(x_t), x_lr, t, tok);
        auto eps_hat = predict_eps_graph(st2.params, cfg, ag::constant(x_t), t, controls, tok, true);
        auto loss = ag::mse(ag::constant(eps), eps_hat);
        ag::backward(loss);
    }
    int missing = 0;
    for (const auto& name : st2.params.trainable_names()) {
        // the branch invariant: no dead parameters in DPM/GSPM (or the
        // condition path) once the zero convs have taken their first step
        if (name.rfind("dpm.", 0) != 0 && name.rfind("gspm.", 0) != 0 &&
            name.rfind("cond.", 0) != 0)
            continue;
        const auto& p = st2.params.get(name);
        bool has = p.node && p.node->grad.size() > 0;
        double mag = 0.0;
        if (has)
            for (double v : p.node->grad.v) mag = std::max(mag, std::fabs(v));
        if (!has || mag == 0.0) {
            ++missing;
            MESSAGE("no gradient: " << name);
        }
    }
    CHECK(missing == 0);
}
