#include "csr/sampler.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "csr/backbone.hpp"
#include "csr/control.hpp"
#include "csr/vae.hpp"

namespace csr {

LSAConfig lsa_from(const RunConfig& cfg) {
    LSAConfig l;
    l.alpha = cfg.alpha;
    l.beta = cfg.beta;
    l.n_steps = cfg.steps;
    l.early_frac = cfg.early_frac;
    l.late_frac = cfg.late_frac;
    l.seed = cfg.seed;
    return l;
}

const char* phase_name(Phase p) {
    switch (p) {
        case Phase::ELA: return "ELA";
        case Phase::NONE: return "NONE";
        case Phase::LLA: return "LLA";
    }
    return "?";
}

Phase assign_phase(int i, const LSAConfig& cfg) {
    if (i < 0 || i >= cfg.n_steps) throw ValidationError("assign_phase: step index out of range");
    const int early_end = (int)std::ceil(cfg.early_frac * cfg.n_steps);
    const int late_begin = (int)std::ceil(cfg.late_frac * cfg.n_steps);
    if (i < early_end) return Phase::ELA;
    if (i >= late_begin) return Phase::LLA;
    return Phase::NONE;
}

Tensor4 ela(const Tensor4& x, const Tensor4& x_lr, double alpha) {
    if (!x.same_shape(x_lr))
        throw ValidationError("ela: shape mismatch " + x.shape.str() + " vs " + x_lr.shape.str());
    if (alpha == 0.0) return x;
    Tensor4 out(x.shape);
    for (int64_t i = 0; i < x.size(); ++i)
        out.v[i] = (1.0 - alpha) * x.v[i] + alpha * x_lr.v[i];
    return out;
}

Tensor4 lla(const Tensor4& x, const Tensor4& x_lr, double beta) {
    if (!x.same_shape(x_lr))
        throw ValidationError("lla: shape mismatch " + x.shape.str() + " vs " + x_lr.shape.str());
    if (beta == 0.0) return x;
    Tensor4 out(x.shape);
    for (int64_t i = 0; i < x.size(); ++i)
        out.v[i] = (1.0 + beta) * x.v[i] - beta * x_lr.v[i];
    return out;
}

double l2_distance(const Tensor4& a, const Tensor4& b) {
    if (!a.same_shape(b)) throw ValidationError("l2_distance: shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        const double d = a.v[i] - b.v[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

SampleResult sample(ParamStore& ps, const RunConfig& cfg, const ImageBuffer& lr,
                    const NoiseSchedule& base, const LSAConfig& lsa,
                    const std::string& snapshot_dir) {
    NoiseSchedule spaced = space_schedule(base, lsa.n_steps);
    const int n = spaced.T;
    LSAConfig phase_cfg = lsa;
    phase_cfg.n_steps = n;  // dedup may shorten the executed chain

    Tensor4 x_lr = encode_lr(ps, cfg, {lr}, cfg.scale);
    Tensor4 p = embed_condition(ps, cfg, images_to_tensor({lr}));

    Rng rng(lsa.seed);
    Tensor4 x(x_lr.shape);
    fill_normal(x, rng);

    if (!snapshot_dir.empty()) std::filesystem::create_directories(snapshot_dir);

    SampleResult res;
    for (int i = 0; i < n; ++i) {
        const int k = n - 1 - i;
        ps.end_step();
        auto tok = cond_token_graph(ps, cfg, ag::constant(p), 1);
        auto controls = control_signals_graph(ps, cfg, ag::constant(x), ag::constant(x_lr),
                                              {k}, tok);
        auto eps_hat =
            predict_eps_graph(ps, cfg, ag::constant(x), {k}, controls, tok, /*use_dec_lora=*/true);
        x = ddpm_step(x, eps_hat->val, k, spaced, rng);
        ps.end_step();

        const Phase phase = assign_phase(i, phase_cfg);
        if (phase == Phase::ELA) x = ela(x, x_lr, lsa.alpha);
        if (phase == Phase::LLA) x = lla(x, x_lr, lsa.beta);

        TraceRecord rec;
        rec.step = i;
        rec.phase = phase;
        rec.dist_lr = l2_distance(x, x_lr);
        res.trace.records.push_back(rec);

        if (!snapshot_dir.empty() && (i % 10 == 0 || i == n - 1)) {
            auto imgs = vae_decode(ps, cfg, x);
            char name[32];
            std::snprintf(name, sizeof(name), "step_%03d.ppm", i);
            write_ppm(snapshot_dir + "/" + name, imgs[0]);
        }
    }
    res.final_latent = x;
    res.x_lr = x_lr;
    res.image = vae_decode(ps, cfg, x)[0];
    return res;
}

void write_trace_csv(const std::string& path, const SamplerTrace& trace) {
    std::ofstream os(path);
    os << "step,phase,dist_lr\n";
    for (const auto& r : trace.records)
        os << r.step << "," << phase_name(r.phase) << "," << r.dist_lr << "\n";
}

}  // namespace csr
