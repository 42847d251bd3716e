#include "csr/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "csr/backbone.hpp"
#include "csr/control.hpp"
#include "csr/degrade.hpp"
#include "csr/layers.hpp"
#include "csr/lora.hpp"
#include "csr/vae.hpp"

namespace csr {

ToyDataset make_toy_dataset(const RunConfig& cfg, int n_images, uint64_t seed) {
    ToyDataset ds;
    Rng base(seed);
    DegradeConfig dc = degrade_config_from(cfg);
    for (int i = 0; i < n_images; ++i) {
        Rng img_rng = base.fork((uint64_t)i * 2);
        Rng deg_rng = base.fork((uint64_t)i * 2 + 1);
        ds.hr.push_back(synth_toy_image(cfg.image_size, img_rng));
        ds.lr.push_back(degrade_image(ds.hr.back(), dc, deg_rng));
    }
    return ds;
}

namespace {

void set_stage_freeze(TrainState& st) {
    auto& ps = st.params;
    ps.freeze_all();
    switch (st.stage) {
        case Stage::Vae:
            ps.set_trainable_by_prefix({"vae."}, true);
            break;
        case Stage::Backbone:
            ps.set_trainable_by_prefix({"unet."}, true);
            break;
        case Stage::Control: {
            ps.set_trainable_by_prefix({"dpm.", "gspm.", "cond."}, true);
            for (const auto& name : ps.names()) {
                const bool is_lora = name.find(".lora.") != std::string::npos;
                if (!is_lora) continue;
                if (name.rfind("vae.encoder.", 0) == 0 || name.rfind("unet.dec.", 0) == 0)
                    ps.set_trainable(name, true);
            }
            break;
        }
    }
}

}  // namespace

void setup_stage(TrainState& st, Stage stage, const Checkpoint* resume) {
    st.stage = stage;
    st.rng = Rng(st.cfg.seed);
    Rng init_rng(st.cfg.seed ^ 0x632be59bd9b4e019ULL);
    build_vae(st.params, st.cfg, init_rng);
    if (stage != Stage::Vae) build_backbone(st.params, st.cfg, init_rng);

    if (resume) {
        st.params.load_records(resume->records);
    } else if (stage != Stage::Vae) {
        throw std::runtime_error(std::string("stage '") + stage_name(stage) +
                                 "' requires the previous stage's checkpoint (--resume)");
    }
    if (stage == Stage::Control) {
        if (!resume || resume->stage < Stage::Backbone)
            throw std::runtime_error(
                "stage 'control' requires a checkpoint from stage 'backbone' or later");
        build_condition_embedder(st.params, st.cfg, init_rng);
        create_vae_encoder_lora(st.params, st.cfg, init_rng);
        create_backbone_decoder_lora(st.params, st.cfg, init_rng);
        build_control(st.params, st.cfg, init_rng,
                      /*copy_from_backbone=*/resume->stage < Stage::Control);
    }
    if (stage == Stage::Backbone && resume && resume->stage < Stage::Vae)
        throw std::runtime_error("stage 'backbone' requires a stage 'vae' checkpoint");
    set_stage_freeze(st);
    st.params.reset_optimizer();
    st.step = 0;
}

double eps_mse(const Tensor4& eps, const Tensor4& eps_hat) {
    if (!eps.same_shape(eps_hat))
        throw ValidationError("eps_mse: shape mismatch");
    double acc = 0.0;
    for (int64_t i = 0; i < eps.size(); ++i) {
        const double d = eps.v[i] - eps_hat.v[i];
        acc += d * d;
    }
    return acc / (double)eps.size();
}

namespace {

ag::Var vae_loss_graph(TrainState& st, const Tensor4& batch_hr) {
    auto x = ag::constant(batch_hr);
    auto enc = vae_encode_graph(st.params, st.cfg, x, /*use_lora=*/false);
    auto recon = vae_decode_graph(st.params, st.cfg, enc.mean);
    auto rec_loss = ag::mse(recon, x);
    // KL(mean, logvar) = -0.5 * mean(1 + logvar - mean^2 - exp(logvar))
    auto kl_terms = ag::sub(ag::sub(ag::add_const(enc.logvar, 1.0),
                                    ag::mul(enc.mean, enc.mean)),
                            ag::exp_(enc.logvar));
    auto kl = ag::scale(ag::mean_all(kl_terms), -0.5);
    return ag::add(rec_loss, ag::scale(kl, 1e-6));
}

struct Eq1Draw {
    std::vector<int> t;
    Tensor4 eps;
};

Eq1Draw draw_eq1(Rng& rng, Shape4 latent_shape, int T) {
    Eq1Draw d;
    for (int b = 0; b < latent_shape.n; ++b) d.t.push_back((int)rng.uniform_int(0, T - 1));
    d.eps = Tensor4(latent_shape);
    fill_normal(d.eps, rng);
    return d;
}

// x_t built per batch item with its own timestep.
Tensor4 add_noise_batch(const Tensor4& x0, const std::vector<int>& t, const Tensor4& eps,
                        const NoiseSchedule& sched) {
    Tensor4 out(x0.shape);
    const size_t item = (size_t)x0.shape.c * x0.shape.h * x0.shape.w;
    for (int b = 0; b < x0.shape.n; ++b) {
        const double a = std::sqrt(sched.alpha_bar[t[b]]);
        const double s = std::sqrt(1.0 - sched.alpha_bar[t[b]]);
        for (size_t i = 0; i < item; ++i)
            out.v[b * item + i] = a * x0.v[b * item + i] + s * eps.v[b * item + i];
    }
    return out;
}

ag::Var backbone_loss_graph(TrainState& st, const Tensor4& hr_latents,
                            const NoiseSchedule& sched, const Eq1Draw& d) {
    Tensor4 x_t = add_noise_batch(hr_latents, d.t, d.eps, sched);
    auto eps_hat = predict_eps_graph(st.params, st.cfg, ag::constant(x_t), d.t, {}, nullptr,
                                     /*use_dec_lora=*/false);
    return ag::mse(ag::constant(d.eps), eps_hat);
}

Tensor4 upsample_lr_batch(const std::vector<ImageBuffer>& lr, int scale) {
    std::vector<ImageBuffer> up;
    up.reserve(lr.size());
    for (const auto& img : lr)
        up.push_back(scale == 1 ? img
                                : bicubic_resize(img, img.height * scale, img.width * scale));
    return images_to_tensor(up);
}

ag::Var controlsr_loss_graph(TrainState& st, const Tensor4& hr_latents,
                             const std::vector<ImageBuffer>& batch_lr,
                             const NoiseSchedule& sched, const Eq1Draw& d) {
    auto& ps = st.params;
    const auto& cfg = st.cfg;
    Tensor4 x_t_plain = add_noise_batch(hr_latents, d.t, d.eps, sched);
    auto x_t = ag::constant(x_t_plain);

    // latent LR embeddings through the LoRA-adapted encoder (trainable path)
    auto lr_up = ag::constant(upsample_lr_batch(batch_lr, cfg.scale));
    auto x_lr = vae_encode_graph(ps, cfg, lr_up, /*use_lora=*/true).mean;

    // image-level feature replaces the null prompt
    auto lr_raw = ag::constant(images_to_tensor(batch_lr));
    auto p = embed_condition_graph(ps, cfg, lr_raw);
    auto tok = cond_token_graph(ps, cfg, p, x_t_plain.shape.n);

    auto controls = control_signals_graph(ps, cfg, x_t, x_lr, d.t, tok);
    auto eps_hat = predict_eps_graph(ps, cfg, x_t, d.t, controls, tok, /*use_dec_lora=*/true);
    return ag::mse(ag::constant(d.eps), eps_hat);
}

}  // namespace

double pretrain_vae_step(TrainState& st, const Tensor4& batch_hr) {
    if (st.stage != Stage::Vae) throw ValidationError("pretrain_vae_step: state is not in stage vae");
    st.params.end_step();
    auto loss = vae_loss_graph(st, batch_hr);
    ag::backward(loss);
    st.params.adam_step(st.cfg.lr);
    ++st.step;
    return loss->val.v[0];
}

double pretrain_backbone_step(TrainState& st, const Tensor4& hr_latents,
                              const NoiseSchedule& sched) {
    if (st.stage != Stage::Backbone)
        throw ValidationError("pretrain_backbone_step: state is not in stage backbone");
    st.params.end_step();
    Eq1Draw d = draw_eq1(st.rng, hr_latents.shape, sched.T);
    auto loss = backbone_loss_graph(st, hr_latents, sched, d);
    ag::backward(loss);
    st.params.adam_step(st.cfg.lr);
    ++st.step;
    return loss->val.v[0];
}

double controlsr_step(TrainState& st, const Tensor4& hr_latents,
                      const std::vector<ImageBuffer>& batch_lr, const NoiseSchedule& sched) {
    if (st.stage != Stage::Control)
        throw ValidationError("controlsr_step: state is not in stage control");
    st.params.end_step();
    Eq1Draw d = draw_eq1(st.rng, hr_latents.shape, sched.T);
    auto loss = controlsr_loss_graph(st, hr_latents, batch_lr, sched, d);
    ag::backward(loss);
    st.params.adam_step(st.cfg.lr);
    ++st.step;
    return loss->val.v[0];
}

double controlsr_loss(TrainState& st, const std::vector<ImageBuffer>& batch_hr,
                      const std::vector<ImageBuffer>& batch_lr, const NoiseSchedule& sched) {
    if (st.stage != Stage::Control)
        throw ValidationError("controlsr_loss: state is not in stage control");
    Tensor4 x0 = vae_encode(st.params, st.cfg, images_to_tensor(batch_hr), false);
    st.params.end_step();
    Eq1Draw d = draw_eq1(st.rng, x0.shape, sched.T);
    auto loss = controlsr_loss_graph(st, x0, batch_lr, sched, d);
    st.params.end_step();
    return loss->val.v[0];
}

double eval_vae_recon_mse(TrainState& st, const std::vector<ImageBuffer>& hr) {
    Tensor4 x = images_to_tensor(hr);
    Tensor4 latent = vae_encode(st.params, st.cfg, x, false);
    Tensor4 recon = vae_decode_tensor(st.params, st.cfg, latent);
    double acc = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) {
        const double d = std::clamp(recon.v[i], 0.0, 1.0) - x.v[i];
        acc += d * d;
    }
    return acc / (double)x.size();
}

double eval_backbone_loss(TrainState& st, const Tensor4& hr_latents, const NoiseSchedule& sched,
                          uint64_t eval_seed, int draws) {
    Rng rng(eval_seed);
    double acc = 0.0;
    for (int i = 0; i < draws; ++i) {
        st.params.end_step();
        Eq1Draw d = draw_eq1(rng, hr_latents.shape, sched.T);
        Tensor4 x_t = add_noise_batch(hr_latents, d.t, d.eps, sched);
        Tensor4 eps_hat = predict_eps(st.params, st.cfg, x_t, d.t, {}, nullptr, false);
        acc += eps_mse(d.eps, eps_hat);
    }
    return acc / draws;
}

double eval_controlsr_loss(TrainState& st, const Tensor4& hr_latents,
                           const std::vector<ImageBuffer>& lr, const NoiseSchedule& sched,
                           uint64_t eval_seed, int draws) {
    Rng rng(eval_seed);
    double acc = 0.0;
    for (int i = 0; i < draws; ++i) {
        st.params.end_step();
        Eq1Draw d = draw_eq1(rng, hr_latents.shape, sched.T);
        auto loss = controlsr_loss_graph(st, hr_latents, lr, sched, d);
        st.params.end_step();
        acc += loss->val.v[0];
    }
    return acc / draws;
}

uint64_t hash_tensors(const ParamStore& ps, bool frozen_only) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t x) {
        h ^= x;
        h *= 0x100000001b3ULL;
    };
    for (const auto& name : ps.names()) {
        const auto& p = ps.get(name);
        if (frozen_only && p.trainable) continue;
        for (char c : name) mix((uint64_t)(unsigned char)c);
        for (double v : p.value.v) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            mix(bits);
        }
    }
    return h;
}

std::string train_loop(const RunConfig& cfg, Stage stage, const std::string& resume_path,
                       const std::string& out_dir) {
    validate_config(cfg);
    std::filesystem::create_directories(out_dir);

    TrainState st;
    st.cfg = cfg;
    Checkpoint resume;
    bool have_resume = false;
    if (!resume_path.empty()) {
        resume = read_checkpoint(resume_path);
        have_resume = true;
    }
    setup_stage(st, stage, have_resume ? &resume : nullptr);

    ToyDataset ds = make_toy_dataset(cfg, cfg.data_images, cfg.seed + 17);
    NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

    // frozen-path latents reused across steps (deterministic encoder)
    std::vector<Tensor4> hr_latents;
    if (stage != Stage::Vae) {
        for (const auto& img : ds.hr)
            hr_latents.push_back(vae_encode(st.params, cfg, images_to_tensor({img}), false));
    }

    std::ofstream metrics(out_dir + "/metrics.csv");
    metrics << "step,stage,loss,wall_ms\n";

    const int nb = std::min(cfg.batch, cfg.data_images);
    auto pick_batch = [&](std::vector<int>& idx) {
        idx.clear();
        if (cfg.data_images <= cfg.batch) {
            for (int i = 0; i < cfg.data_images; ++i) idx.push_back(i);
        } else {
            for (int i = 0; i < nb; ++i)
                idx.push_back((int)st.rng.uniform_int(0, cfg.data_images - 1));
        }
    };

    auto save = [&](const std::string& path) {
        Checkpoint ck;
        ck.stage = stage;
        ck.rng_seed = cfg.seed;
        ck.has_config = true;
        ck.config = cfg;
        ck.records = st.params.to_records();
        write_checkpoint(path, ck);
    };

    std::vector<int> idx;
    for (int64_t it = 0; it < cfg.iters; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        pick_batch(idx);
        double loss = 0.0;
        if (stage == Stage::Vae) {
            std::vector<ImageBuffer> batch;
            for (int i : idx) batch.push_back(ds.hr[i]);
            loss = pretrain_vae_step(st, images_to_tensor(batch));
        } else {
            Tensor4 lat((int)idx.size(), hr_latents[0].shape.c, hr_latents[0].shape.h,
                        hr_latents[0].shape.w);
            const size_t item = (size_t)lat.shape.c * lat.shape.h * lat.shape.w;
            for (size_t i = 0; i < idx.size(); ++i)
                std::copy_n(hr_latents[idx[i]].data(), item, lat.data() + i * item);
            if (stage == Stage::Backbone) {
                loss = pretrain_backbone_step(st, lat, sched);
            } else {
                std::vector<ImageBuffer> batch_lr;
                for (int i : idx) batch_lr.push_back(ds.lr[i]);
                loss = controlsr_step(st, lat, batch_lr, sched);
            }
        }
        const auto t1 = std::chrono::steady_clock::now();
        const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        metrics << st.step << "," << stage_name(stage) << "," << loss << "," << (int64_t)ms
                << "\n";
        if (cfg.ckpt_every > 0 && st.step % cfg.ckpt_every == 0 && it + 1 < cfg.iters)
            save(out_dir + "/ckpt_" + stage_name(stage) + "_" + std::to_string(st.step) +
                 ".csrk");
    }
    metrics.flush();

    const std::string final_path = out_dir + "/ckpt_" + stage_name(stage) + "_final.csrk";
    save(final_path);
    return final_path;
}

}  // namespace csr
