#include "csr/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "csr/backbone.hpp"
#include "csr/control.hpp"
#include "csr/degrade.hpp"
#include "csr/lora.hpp"
#include "csr/probe.hpp"
#include "csr/sampler.hpp"
#include "csr/schedule.hpp"
#include "csr/train.hpp"
#include "csr/vae.hpp"
#include "csr/wxattn.hpp"

namespace fs = std::filesystem;

namespace csr {

namespace {

// Loads a stage-3 checkpoint into a ready-to-sample state.
TrainState load_control_state(const std::string& ckpt_path) {
    Checkpoint ck = read_checkpoint(ckpt_path);
    if (ck.stage != Stage::Control)
        throw ValidationError("checkpoint " + ckpt_path + " is from stage '" +
                              stage_name(ck.stage) + "'; inference needs a stage-3 checkpoint");
    if (!ck.has_config)
        throw ValidationError("checkpoint " + ckpt_path + " carries no embedded config");
    TrainState st;
    st.cfg = ck.config;
    Rng init_rng(0);
    build_vae(st.params, st.cfg, init_rng);
    build_backbone(st.params, st.cfg, init_rng);
    build_condition_embedder(st.params, st.cfg, init_rng);
    create_vae_encoder_lora(st.params, st.cfg, init_rng);
    create_backbone_decoder_lora(st.params, st.cfg, init_rng);
    build_control(st.params, st.cfg, init_rng, /*copy_from_backbone=*/false);
    st.params.load_records(ck.records);
    st.stage = Stage::Control;
    return st;
}

std::vector<double> parse_list(const std::string& csv) {
    std::vector<double> out;
    size_t pos = 0;
    while (pos < csv.size()) {
        size_t next = csv.find(',', pos);
        if (next == std::string::npos) next = csv.size();
        out.push_back(std::stod(csv.substr(pos, next - pos)));
        pos = next + 1;
    }
    return out;
}

int cmd_train(const std::string& stage, const std::string& config_path,
              const std::string& resume, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    std::string path = train_loop(cfg, stage_from_name(stage), resume, out_dir);
    std::cout << "final checkpoint: " << path << "\n";
    return 0;
}

int cmd_infer(const std::string& ckpt, const std::string& lr_path, const std::string& out_path,
              double alpha, double beta, int steps, uint64_t seed,
              const std::string& trace_dir) {
    TrainState st = load_control_state(ckpt);
    if (alpha >= 0) st.cfg.alpha = alpha;
    if (beta >= 0) st.cfg.beta = beta;
    if (steps > 0) st.cfg.steps = steps;
    st.cfg.seed = seed;
    validate_config(st.cfg);

    ImageBuffer lr = read_ppm(lr_path);
    NoiseSchedule sched = make_schedule(st.cfg.T, st.cfg.beta_start, st.cfg.beta_end);
    LSAConfig lsa = lsa_from(st.cfg);
    SampleResult res = sample(st.params, st.cfg, lr, sched, lsa, trace_dir);
    write_ppm(out_path, res.image);
    if (!trace_dir.empty()) write_trace_csv(trace_dir + "/trace.csv", res.trace);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_sweep(const std::string& ckpt, const std::string& lr_dir, const std::string& hr_dir,
              const std::string& alphas_csv, const std::string& betas_csv,
              const std::string& csv_out, uint64_t seed) {
    TrainState st = load_control_state(ckpt);
    auto alphas = parse_list(alphas_csv);
    auto betas = parse_list(betas_csv);

    std::vector<std::string> lr_files;
    for (const auto& e : fs::directory_iterator(lr_dir))
        if (e.path().extension() == ".ppm") lr_files.push_back(e.path().filename().string());
    std::sort(lr_files.begin(), lr_files.end());
    if (lr_files.empty()) throw ValidationError("sweep: no .ppm files in " + lr_dir);

    NoiseSchedule sched = make_schedule(st.cfg.T, st.cfg.beta_start, st.cfg.beta_end);
    std::ofstream os(csv_out);
    os << "alpha,beta,psnr,hf_energy,dist_lr,n_images\n";
    for (double a : alphas)
        for (double b : betas) {
            LSAConfig lsa = lsa_from(st.cfg);
            lsa.alpha = a;
            lsa.beta = b;
            double psnr_sum = 0.0, hf_sum = 0.0, dist_sum = 0.0;
            int psnr_n = 0;
            for (size_t i = 0; i < lr_files.size(); ++i) {
                lsa.seed = seed + i;  // per-image stream, shared across cells
                ImageBuffer lr = read_ppm(lr_dir + "/" + lr_files[i]);
                SampleResult res = sample(st.params, st.cfg, lr, sched, lsa);
                hf_sum += hf_energy_fraction(res.image);
                dist_sum += l2_distance(res.final_latent, res.x_lr);
                if (!hr_dir.empty() && fs::exists(hr_dir + "/" + lr_files[i])) {
                    ImageBuffer hr = read_ppm(hr_dir + "/" + lr_files[i]);
                    psnr_sum += psnr(res.image, hr, /*on_y=*/true);
                    ++psnr_n;
                }
            }
            const double n = (double)lr_files.size();
            os << a << "," << b << "," << (psnr_n ? psnr_sum / psnr_n : std::nan(""))
               << "," << hf_sum / n << "," << dist_sum / n << "," << lr_files.size() << "\n";
            std::cout << "cell alpha=" << a << " beta=" << b << " done\n";
        }
    std::cout << "wrote " << csv_out << "\n";
    return 0;
}

// Control signals evaluated at a fixed mid-chain point: x_t is x_lr noised
// to the middle spaced step with a seeded draw.
struct ProbeSignals {
    std::vector<Tensor4> fused, dpm, gspm;
    Tensor4 x_lr;
};

ProbeSignals probe_signals(TrainState& st, const ImageBuffer& lr, uint64_t seed) {
    ProbeSignals out;
    out.x_lr = encode_lr(st.params, st.cfg, {lr}, st.cfg.scale);
    Tensor4 p = embed_condition(st.params, st.cfg, images_to_tensor({lr}));

    NoiseSchedule base = make_schedule(st.cfg.T, st.cfg.beta_start, st.cfg.beta_end);
    NoiseSchedule spaced = space_schedule(base, st.cfg.steps);
    const int k = spaced.T / 2;
    Rng rng(seed);
    Tensor4 eps(out.x_lr.shape);
    fill_normal(eps, rng);
    Tensor4 x_t = add_noise(out.x_lr, k, eps, spaced);

    ControlSignals dpm = dpm_forward(st.params, st.cfg, x_t, out.x_lr, {k}, &p);
    out.dpm = dpm.c;
    if (st.cfg.gspm_enabled) {
        ControlSignals gspm = gspm_forward(st.params, st.cfg, x_t, out.x_lr, {k});
        out.gspm = gspm.c;
        out.fused = fuse_control(dpm, gspm).c;
    } else {
        out.fused = dpm.c;
    }
    return out;
}

// D_kl between a control signal and x_lr, per scale against x_lr resized to
// that scale, averaged over scales.
double mean_signal_kl(const std::vector<Tensor4>& signals, const Tensor4& x_lr) {
    double acc = 0.0;
    for (const auto& c : signals) {
        auto pd = to_distribution(x_lr, 0, c.shape.h, c.shape.w);
        auto qd = to_distribution(c, 0, c.shape.h, c.shape.w);
        acc += kl_divergence(pd, qd);
    }
    return acc / (double)signals.size();
}

int cmd_probe(const std::string& ckpt, const std::string& baseline_ckpt,
              const std::string& lr_path, const std::string& outdir, uint64_t seed) {
    fs::create_directories(outdir);
    TrainState st = load_control_state(ckpt);
    ImageBuffer lr = read_ppm(lr_path);
    ProbeSignals ours = probe_signals(st, lr, seed);

    const double kl_ours = mean_signal_kl(ours.fused, ours.x_lr);
    double kl_base = std::nan("");
    if (!baseline_ckpt.empty()) {
        TrainState bst = load_control_state(baseline_ckpt);
        ProbeSignals base = probe_signals(bst, lr, seed);
        kl_base = mean_signal_kl(base.fused, base.x_lr);
    }
    {
        std::ofstream os(outdir + "/kl.csv");
        os << "image,kl_dpm_gspm,kl_baseline,diff\n";
        os << fs::path(lr_path).filename().string() << "," << kl_ours << "," << kl_base << ",";
        if (std::isnan(kl_base))
            os << "\n";
        else
            os << diff_kl(kl_base, kl_ours) << "\n";
    }

    // radial spectra per tap
    {
        std::ofstream os(outdir + "/spectrum.csv");
        os << "radius";
        for (size_t k = 0; k < ours.fused.size(); ++k) os << ",fused_" << k;
        for (size_t k = 0; k < ours.dpm.size(); ++k) os << ",dpm_" << k;
        for (size_t k = 0; k < ours.gspm.size(); ++k) os << ",gspm_" << k;
        os << ",xlr\n";
        std::vector<RadialSpectrum> specs;
        for (const auto& c : ours.fused) specs.push_back(power_spectrum(c));
        for (const auto& c : ours.dpm) specs.push_back(power_spectrum(c));
        for (const auto& c : ours.gspm) specs.push_back(power_spectrum(c));
        specs.push_back(power_spectrum(ours.x_lr));
        size_t max_bins = 0;
        for (const auto& s : specs) max_bins = std::max(max_bins, s.bins.size());
        for (size_t r = 0; r < max_bins; ++r) {
            os << specs.back().bins[std::min(r, specs.back().bins.size() - 1)].first;
            for (const auto& s : specs)
                if (r < s.bins.size())
                    os << "," << s.bins[r].second;
                else
                    os << ",";
            os << "\n";
        }
    }

    for (size_t k = 0; k < ours.fused.size(); ++k)
        write_ppm(outdir + "/pca_c" + std::to_string(k + 1) + ".ppm",
                  pca_project(ours.fused[k]));
    write_ppm(outdir + "/pca_xlr.ppm", pca_project(ours.x_lr));
    std::cout << "wrote probe outputs to " << outdir << " (kl_ours=" << kl_ours << ")\n";
    return 0;
}

int cmd_degrade(const std::string& hr_dir, const std::string& out_dir,
                const std::string& config_path) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    DegradeConfig dc = degrade_config_from(cfg);
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(hr_dir))
        if (e.path().extension() == ".ppm") files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError("degrade: no .ppm files in " + hr_dir);
    Rng base(cfg.seed);
    for (size_t i = 0; i < files.size(); ++i) {
        ImageBuffer hr = read_ppm(hr_dir + "/" + files[i]);
        Rng rng = base.fork(i);
        write_ppm(out_dir + "/" + files[i], degrade_image(hr, dc, rng));
    }
    std::cout << "degraded " << files.size() << " images into " << out_dir << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    std::vector<char*> argv;
    std::vector<std::string> owned = args;
    for (auto& s : owned) argv.push_back(s.data());
    return run_cli((int)argv.size(), argv.data());
}

int run_cli(int argc, char** argv) {
    configure_threads();
    CLI::App app{"controlsr: LR-constrained latent-diffusion super-resolution"};
    app.require_subcommand(1);

    std::string stage, config_path, resume, out_dir = ".";
    auto* train = app.add_subcommand("train", "run one training stage");
    train->add_option("--stage", stage, "vae|backbone|control")->required();
    train->add_option("--config", config_path)->required();
    train->add_option("--resume", resume, "checkpoint to start from");
    train->add_option("--out-dir", out_dir);

    std::string ckpt, lr_path, out_path, trace_dir;
    double alpha = -1.0, beta = -1.0;
    int steps = 0;
    uint64_t seed = 0;
    auto* infer = app.add_subcommand("infer", "super-resolve one LR image");
    infer->add_option("--ckpt", ckpt)->required();
    infer->add_option("--lr", lr_path)->required();
    infer->add_option("--out", out_path)->required();
    infer->add_option("--alpha", alpha);
    infer->add_option("--beta", beta);
    infer->add_option("--steps", steps);
    infer->add_option("--seed", seed);
    infer->add_option("--trace", trace_dir, "directory for trace.csv and snapshots");

    std::string lr_dir, hr_dir, alphas = "0,0.01,0.03,0.05", betas = "0,0.01,0.03", csv_out;
    auto* sweep = app.add_subcommand("sweep", "grid over alpha/beta, PSNR + hf energy per cell");
    sweep->add_option("--ckpt", ckpt)->required();
    sweep->add_option("--lr-dir", lr_dir)->required();
    sweep->add_option("--hr-dir", hr_dir, "matching HR images for PSNR");
    sweep->add_option("--alphas", alphas);
    sweep->add_option("--betas", betas);
    sweep->add_option("--csv", csv_out)->required();
    sweep->add_option("--seed", seed);

    std::string baseline_ckpt, outdir;
    auto* probe = app.add_subcommand("probe", "KL/Diff, spectra and PCA of control signals");
    probe->add_option("--ckpt", ckpt)->required();
    probe->add_option("--baseline-ckpt", baseline_ckpt, "ControlNet-only checkpoint for Diff");
    probe->add_option("--lr", lr_path)->required();
    probe->add_option("--outdir", outdir)->required();
    probe->add_option("--seed", seed);

    std::string deg_hr_dir, deg_out_dir, deg_config;
    auto* degrade = app.add_subcommand("degrade", "synthesize LR images from HR");
    degrade->add_option("--hr-dir", deg_hr_dir)->required();
    degrade->add_option("--out-dir", deg_out_dir)->required();
    degrade->add_option("--config", deg_config);

    auto* selftest = app.add_subcommand("selftest", "run the built-in invariant suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) return cmd_train(stage, config_path, resume, out_dir);
        if (infer->parsed())
            return cmd_infer(ckpt, lr_path, out_path, alpha, beta, steps, seed, trace_dir);
        if (sweep->parsed())
            return cmd_sweep(ckpt, lr_dir, hr_dir, alphas, betas, csv_out, seed);
        if (probe->parsed()) return cmd_probe(ckpt, baseline_ckpt, lr_path, outdir, seed);
        if (degrade->parsed()) return cmd_degrade(deg_hr_dir, deg_out_dir, deg_config);
        if (selftest->parsed()) return run_selftest() == 0 ? 0 : 1;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

}  // namespace csr
