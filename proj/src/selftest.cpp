#include <cmath>
#include <cstdio>
#include <filesystem>

#include "csr/backbone.hpp"
#include "csr/cli.hpp"
#include "csr/control.hpp"
#include "csr/degrade.hpp"
#include "csr/lora.hpp"
#include "csr/probe.hpp"
#include "csr/sampler.hpp"
#include "csr/schedule.hpp"
#include "csr/train.hpp"
#include "csr/vae.hpp"
#include "csr/wxattn.hpp"

namespace csr {

namespace {

struct Suite {
    int failed = 0;
    void check(const char* name, bool ok) {
        std::printf("  [%s] %s\n", ok ? "ok" : "FAIL", name);
        if (!ok) ++failed;
    }
};

RunConfig tiny_config() {
    RunConfig cfg;
    cfg.vae_widths = {8, 12, 16};
    cfg.unet_width = 8;
    cfg.heads = 2;
    cfg.temb_dim = 16;
    cfg.cond_dim = 16;
    cfg.lora_rank = 4;
    cfg.image_size = 32;
    cfg.T = 40;
    cfg.steps = 10;
    cfg.batch = 2;
    cfg.data_images = 2;
    return cfg;
}

double max_abs_diff(const Tensor4& a, const Tensor4& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.v[i] - b.v[i]));
    return m;
}

}  // namespace

int run_selftest() {
    Suite s;
    Rng rng(7);
    namespace fs = std::filesystem;
    const std::string tmp = (fs::temp_directory_path() / "csr_selftest").string();
    fs::create_directories(tmp);

    std::printf("schedule\n");
    {
        NoiseSchedule sc = make_schedule(1000, 1e-4, 0.02);
        double prod = 1.0;
        double worst = 0.0;
        for (int t = 0; t < sc.T; ++t) {
            prod *= 1.0 - sc.beta[t];
            worst = std::max(worst, std::fabs(prod - sc.alpha_bar[t]));
        }
        s.check("alpha_bar matches cumulative product", worst < 1e-6);
        s.check("alpha_bar[999] near 4.04e-5", std::fabs(sc.alpha_bar[999] - 4.04e-5) < 2e-7);
        bool mono = true;
        for (int t = 1; t < sc.T; ++t) mono &= sc.alpha_bar[t] < sc.alpha_bar[t - 1];
        s.check("alpha_bar strictly decreasing", mono);

        NoiseSchedule sp = space_schedule(make_schedule(10, 0.01, 0.1), 5);
        s.check("spaced indices {0,2,4,6,8}", sp.spaced_map == std::vector<int>({0, 2, 4, 6, 8}));

        NoiseSchedule idt = space_schedule(sc, sc.T);
        double bd = 0.0;
        for (int t = 0; t < sc.T; ++t) bd = std::max(bd, std::fabs(idt.beta[t] - sc.beta[t]));
        s.check("identity spacing keeps betas", bd < 1e-6);

        Tensor4 x0(1, 2, 4, 4), eps(1, 2, 4, 4);
        fill_normal(x0, rng);
        fill_normal(eps, rng);
        NoiseSchedule one = space_schedule(sc, 1);
        Tensor4 xt = add_noise(x0, 0, eps, one);
        Rng r2(1);
        Tensor4 rec = ddpm_step(xt, eps, 0, one, r2);
        s.check("single-step inversion recovers x0", max_abs_diff(rec, x0) < 1e-4);
    }

    std::printf("store\n");
    {
        Checkpoint ck;
        ck.stage = Stage::Backbone;
        ck.rng_seed = 0x12345678abcdefULL;
        TensorRecord r;
        r.name = "t";
        r.dims = {1, 2, 2, 1};
        r.data = {1.5f, -2.25f, 0.0f, 3.75f};
        r.trainable = true;
        ck.records.push_back(r);
        write_checkpoint(tmp + "/a.csrk", ck);
        Checkpoint rd = read_checkpoint(tmp + "/a.csrk");
        s.check("checkpoint round trip", rd.stage == ck.stage && rd.rng_seed == ck.rng_seed &&
                                             rd.records.size() == 1 &&
                                             rd.records[0].data == r.data);
        ImageBuffer img(8, 8);
        Rng ir(3);
        for (double& v : img.values) v = ir.uniform();
        write_ppm(tmp + "/a.ppm", img);
        ImageBuffer back = read_ppm(tmp + "/a.ppm");
        double worst = 0.0;
        for (size_t i = 0; i < img.values.size(); ++i)
            worst = std::max(worst, std::fabs(img.values[i] - back.values[i]));
        s.check("ppm round trip within 1/510", worst <= 1.0 / 510 + 1e-12);
        RunConfig def = parse_config("{}");
        s.check("config defaults", def.steps == 50 && def.alpha == 0.01 && def.beta == 0.01);
        bool threw = false;
        try {
            parse_config("{\"steps\": -1}");
        } catch (const ValidationError&) {
            threw = true;
        }
        s.check("config rejects steps=-1", threw);
    }

    std::printf("lora / windows\n");
    {
        Rng r(11);
        Tensor4 x(1, 4, 3, 3), w(6, 4, 1, 1);
        fill_normal(x, r);
        fill_normal(w, r);
        LoraAdapter a = make_lora(w.shape, 2, r);
        Tensor4 base = conv2d_fwd(x, w, Tensor4(), ConvSpec{1, 0});
        s.check("fresh lora is identity", max_abs_diff(lora_apply(base, x, a), base) == 0.0);
        fill_normal(a.up, r, 0.0, 0.1);
        Tensor4 merged = lora_merge(w, a);
        Tensor4 via_merge = conv2d_fwd(x, merged, Tensor4(), ConvSpec{1, 0});
        s.check("merged weight equals lora_apply",
                max_abs_diff(via_merge, lora_apply(base, x, a)) < 1e-5);

        Tensor4 f(2, 3, 8, 8);
        fill_normal(f, r);
        Tensor4 round = window_merge(window_partition(f, 4), 4, 2, 8, 8);
        s.check("window partition/merge round trip", max_abs_diff(round, f) == 0.0);
        auto [ty, tx] = aligned_bias_index(2, 4, 4, 0, 0, 3, 3);
        s.check("aligned bias hand index (6,6)", ty == 6 && tx == 6);
    }

    std::printf("model init identity\n");
    {
        RunConfig cfg = tiny_config();
        TrainState st;
        st.cfg = cfg;
        Rng ir(5);
        build_vae(st.params, cfg, ir);
        build_backbone(st.params, cfg, ir);
        build_condition_embedder(st.params, cfg, ir);
        create_vae_encoder_lora(st.params, cfg, ir);
        create_backbone_decoder_lora(st.params, cfg, ir);
        build_control(st.params, cfg, ir, true);

        Tensor4 x_t(1, cfg.latent_channels, 4, 4), x_lr(1, cfg.latent_channels, 4, 4);
        fill_normal(x_t, ir);
        fill_normal(x_lr, ir);
        Tensor4 lr_img(1, 3, 8, 8);
        fill_normal(lr_img, ir, 0.5, 0.1);
        Tensor4 p = embed_condition(st.params, cfg, lr_img);

        ControlSignals d = dpm_forward(st.params, cfg, x_t, x_lr, {3}, &p);
        ControlSignals g = gspm_forward(st.params, cfg, x_t, x_lr, {3});
        ControlSignals fused = fuse_control(d, g);
        bool all_zero = true;
        for (const auto& c : fused.c)
            for (double v : c.v) all_zero &= v == 0.0;
        s.check("zero-conv init gives zero control signals", all_zero);

        Tensor4 uncond = predict_eps(st.params, cfg, x_t, {3}, {}, nullptr, false);
        Tensor4 cond = predict_eps(st.params, cfg, x_t, {3}, fused.c, &p, true);
        s.check("init identity: conditional equals backbone", max_abs_diff(uncond, cond) <= 1e-6);
        ControlSignals g2 = fuse_control(g, d);
        double fd = 0.0;
        for (size_t i = 0; i < fused.c.size(); ++i) fd = std::max(fd, max_abs_diff(fused.c[i], g2.c[i]));
        s.check("fuse commutative", fd == 0.0);
    }

    std::printf("lsa\n");
    {
        LSAConfig lc;
        lc.n_steps = 50;
        int ela_n = 0, none_n = 0, lla_n = 0;
        for (int i = 0; i < 50; ++i) {
            Phase ph = assign_phase(i, lc);
            ela_n += ph == Phase::ELA;
            none_n += ph == Phase::NONE;
            lla_n += ph == Phase::LLA;
        }
        s.check("phase split 20/20/10 at defaults", ela_n == 20 && none_n == 20 && lla_n == 10);
        Tensor4 x(1, 2, 3, 3), xl(1, 2, 3, 3);
        Rng r(9);
        fill_normal(x, r);
        fill_normal(xl, r);
        Tensor4 e = ela(x, xl, 0.25);
        s.check("ela contracts distance by (1-a)",
                std::fabs(l2_distance(e, xl) - 0.75 * l2_distance(x, xl)) < 1e-9);
        Tensor4 l = lla(x, xl, 0.25);
        s.check("lla expands distance by (1+b)",
                std::fabs(l2_distance(l, xl) - 1.25 * l2_distance(x, xl)) < 1e-9);
        s.check("ela fixed point", max_abs_diff(ela(xl, xl, 0.7), xl) < 1e-12);
    }

    std::printf("probe\n");
    {
        SpatialDistribution P{1, 2, {0.5, 0.5}}, Q{1, 2, {0.9, 0.1}};
        s.check("KL hand value 0.5108", std::fabs(kl_divergence(P, Q) - 0.5108256) < 1e-4);
        s.check("KL(P,P)=0", kl_divergence(P, P) == 0.0);
        ImageBuffer a(8, 8), b(8, 8);
        for (double& v : b.values) v = 16.0 / 255.0;
        s.check("PSNR 24.05 for uniform 16/255", std::fabs(psnr(a, b, false) - 24.0483) < 0.01);
        s.check("PSNR identical capped at 99", psnr(a, a, true) == 99.0);
        s.check("SSIM identical = 1", std::fabs(ssim(a, a, true) - 1.0) < 1e-12);

        Tensor4 t(1, 1, 16, 16);
        Rng r(13);
        fill_normal(t, r);
        std::vector<double> plane(t.v.begin(), t.v.end());
        auto power = dft_power_grid(plane, 16, 16);
        double lhs = 0.0, rhs = 0.0;
        for (double pw : power) lhs += pw;
        lhs /= 16.0 * 16.0;
        for (double v : plane) rhs += v * v;
        s.check("Parseval within 1e-4 relative", std::fabs(lhs - rhs) / rhs < 1e-4);

        Tensor4 cst = Tensor4::full(1, 1, 8, 8, 0.7);
        s.check("constant image has zero hf fraction", hf_energy_fraction(cst) == 0.0);
        auto dist = to_distribution(t, 0, 8, 8);
        double sum = 0.0;
        for (double pv : dist.p) sum += pv;
        s.check("distribution sums to 1", std::fabs(sum - 1.0) < 1e-6);
    }

    std::printf("degrade\n");
    {
        Rng r(21);
        ImageBuffer hr = synth_toy_image(32, r);
        DegradeConfig dc;
        dc.blur_sigma_min = dc.blur_sigma_max = 0.0;
        dc.scale = 1;
        dc.noise_sigma_min = dc.noise_sigma_max = 0.0;
        dc.quality_min = dc.quality_max = 100.0;
        Rng r1(4), r2(4);
        ImageBuffer out = degrade_image(hr, dc, r1);
        double worst = 0.0;
        for (size_t i = 0; i < hr.values.size(); ++i)
            worst = std::max(worst, std::fabs(out.values[i] - hr.values[i]));
        s.check("identity pipeline within 1/510", worst <= 1.0 / 510);
        DegradeConfig dc2;
        Rng r3(4);
        ImageBuffer a = degrade_image(hr, dc2, r2), b2 = degrade_image(hr, dc2, r3);
        s.check("degradation deterministic under seed", a.values == b2.values);
        s.check("scale 4 shape", a.height == 8 && a.width == 8);
    }

    std::printf("%s: %d failed\n", s.failed ? "SELFTEST FAILED" : "selftest passed", s.failed);
    return s.failed;
}

}  // namespace csr
