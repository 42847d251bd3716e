#include "csr/control.hpp"

#include "csr/backbone.hpp"
#include "csr/layers.hpp"
#include "csr/wxattn.hpp"

namespace csr {

namespace {

const char* kCopied[] = {
    "enc.conv_in.w", "enc.conv_in.b",
    "enc.block0.norm1.g", "enc.block0.norm1.b", "enc.block0.conv1.w", "enc.block0.conv1.b",
    "enc.block0.temb.w", "enc.block0.temb.b",
    "enc.down.w", "enc.down.b",
    "enc.block1.norm1.g", "enc.block1.norm1.b", "enc.block1.conv1.w", "enc.block1.conv1.b",
    "enc.block1.temb.w", "enc.block1.temb.b", "enc.block1.skip.w", "enc.block1.skip.b",
    "mid.block0.norm1.g", "mid.block0.norm1.b", "mid.block0.conv1.w", "mid.block0.conv1.b",
    "mid.block0.temb.w", "mid.block0.temb.b",
    "mid.block1.norm1.g", "mid.block1.norm1.b", "mid.block1.conv1.w", "mid.block1.conv1.b",
    "mid.block1.temb.w", "mid.block1.temb.b",
    "temb.lin0.w", "temb.lin0.b", "temb.lin1.w", "temb.lin1.b",
};

const char* kCopiedAttn[] = {
    "mid.attn.norm.g", "mid.attn.norm.b", "mid.attn.q.w", "mid.attn.q.b",
    "mid.attn.k.w", "mid.attn.k.b", "mid.attn.v.w", "mid.attn.v.b",
    "mid.attn.out.w", "mid.attn.out.b",
};

void build_branch(ParamStore& ps, const RunConfig& cfg, Rng& rng, const std::string& branch,
                  bool with_attention) {
    const int W = cfg.unet_width, lc = cfg.latent_channels, td = cfg.temb_dim;
    create_linear(ps, branch + ".temb.lin0", td, td, rng);
    create_linear(ps, branch + ".temb.lin1", td, td, rng);
    create_conv(ps, branch + ".hint", W, lc, 3, rng, /*zero_init=*/true);
    create_conv(ps, branch + ".enc.conv_in", W, lc, 3, rng);
    create_resblock(ps, branch + ".enc.block0", W, W, td, rng);
    create_conv(ps, branch + ".enc.down", W, W, 3, rng);
    create_resblock(ps, branch + ".enc.block1", W, 2 * W, td, rng);
    create_resblock(ps, branch + ".mid.block0", 2 * W, 2 * W, td, rng);
    if (with_attention) create_attention(ps, branch + ".mid.attn", 2 * W, 2 * W, rng);
    create_resblock(ps, branch + ".mid.block1", 2 * W, 2 * W, td, rng);
    if (with_attention && cfg.dpm_cross_attn) {
        const int dims[3] = {W, 2 * W, 2 * W};
        for (int i = 0; i < 3; ++i) {
            const std::string tag = std::to_string(i);
            create_attention(ps, branch + ".ca" + tag, dims[i], cfg.cond_dim, rng);
            create_window_cross_attention(ps, branch + ".wx" + tag, dims[i], lc,
                                          cfg.heads, cfg.window_s, rng);
        }
    }
    const auto ch = control_channels(cfg);
    for (int k = 0; k < kControlPoints; ++k)
        create_conv(ps, branch + ".zero." + std::to_string(k), ch[k], ch[k], 1, rng,
                    /*zero_init=*/true);
}

void copy_from_unet(ParamStore& ps, const std::string& branch, bool with_attention) {
    for (const char* suffix : kCopied)
        ps.get(branch + "." + suffix).value = ps.get(std::string("unet.") + suffix).value;
    if (with_attention)
        for (const char* suffix : kCopiedAttn)
            ps.get(branch + "." + suffix).value = ps.get(std::string("unet.") + suffix).value;
}

struct BranchTaps {
    std::vector<ag::Var> taps;
};

// Shared trunk of both branches; attention hooks differ per branch.
BranchTaps branch_forward(ParamStore& ps, const RunConfig& cfg, const std::string& branch,
                          const ag::Var& x_t, const ag::Var& x_lr, const std::vector<int>& t,
                          const ag::Var& cond_token, bool with_attention) {
    if (x_t->val.shape.h != x_lr->val.shape.h || x_t->val.shape.w != x_lr->val.shape.w)
        throw ValidationError("control branch: x_t grid " + x_t->val.shape.str() +
                              " vs x_lr " + x_lr->val.shape.str());
    const int W = cfg.unet_width, heads = cfg.heads;
    const bool attn = with_attention && cfg.dpm_cross_attn;
    auto temb = time_embedding_graph(ps, cfg, t, branch + ".temb");

    auto hook = [&](ag::Var h, int i) {
        if (!attn) return h;
        const std::string tag = std::to_string(i);
        h = cond_cross_attention(ps, branch + ".ca" + tag, h, cond_token, heads);
        WindowSpec spec = make_window_spec(h->val.shape.h, x_lr->val.shape.h, cfg.window_s,
                                           cfg.dpm_window_partition);
        return window_cross_attention(ps, branch + ".wx" + tag, h, x_lr, spec, heads);
    };

    BranchTaps out;
    auto h0 = ag::add(conv(ps, branch + ".enc.conv_in", x_t, ConvSpec{1, 1}),
                      conv(ps, branch + ".hint", x_lr, ConvSpec{1, 1}));
    out.taps.push_back(h0);
    auto h1 = hook(resblock(ps, branch + ".enc.block0", h0, W, temb), 0);
    out.taps.push_back(h1);
    auto h2 = conv(ps, branch + ".enc.down", ag::silu(h1), ConvSpec{2, 1});
    out.taps.push_back(h2);
    auto h3 = hook(resblock(ps, branch + ".enc.block1", h2, 2 * W, temb), 1);
    out.taps.push_back(h3);
    auto m = resblock(ps, branch + ".mid.block0", h3, 2 * W, temb);
    if (with_attention) m = self_attention(ps, branch + ".mid.attn", m, heads);
    m = resblock(ps, branch + ".mid.block1", m, 2 * W, temb);
    m = hook(m, 2);
    out.taps.push_back(m);
    return out;
}

std::vector<ag::Var> apply_zero_convs(ParamStore& ps, const std::string& branch,
                                      const BranchTaps& taps) {
    std::vector<ag::Var> out;
    out.reserve(taps.taps.size());
    for (size_t k = 0; k < taps.taps.size(); ++k)
        out.push_back(conv(ps, branch + ".zero." + std::to_string(k), taps.taps[k],
                           ConvSpec{1, 0}));
    return out;
}

}  // namespace

void build_control(ParamStore& ps, const RunConfig& cfg, Rng& rng, bool copy_from_backbone) {
    build_branch(ps, cfg, rng, "dpm", /*with_attention=*/true);
    if (cfg.gspm_enabled) build_branch(ps, cfg, rng, "gspm", /*with_attention=*/false);
    if (copy_from_backbone) {
        copy_from_unet(ps, "dpm", true);
        if (cfg.gspm_enabled) copy_from_unet(ps, "gspm", false);
    }
}

std::vector<ag::Var> dpm_forward_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                                       const ag::Var& x_lr, const std::vector<int>& t,
                                       const ag::Var& cond_token) {
    auto taps = branch_forward(ps, cfg, "dpm", x_t, x_lr, t, cond_token, true);
    return apply_zero_convs(ps, "dpm", taps);
}

std::vector<ag::Var> gspm_forward_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                                        const ag::Var& x_lr, const std::vector<int>& t) {
    auto taps = branch_forward(ps, cfg, "gspm", x_t, x_lr, t, nullptr, false);
    return apply_zero_convs(ps, "gspm", taps);
}

std::vector<ag::Var> fuse_control_graph(const std::vector<ag::Var>& a,
                                        const std::vector<ag::Var>& b) {
    if (a.size() != b.size())
        throw ValidationError("fuse_control: branch signal counts differ");
    std::vector<ag::Var> out;
    out.reserve(a.size());
    for (size_t i = 0; i < a.size(); ++i) out.push_back(ag::add(a[i], b[i]));
    return out;
}

std::vector<ag::Var> control_signals_graph(ParamStore& ps, const RunConfig& cfg,
                                           const ag::Var& x_t, const ag::Var& x_lr,
                                           const std::vector<int>& t, const ag::Var& cond_token) {
    auto dpm = dpm_forward_graph(ps, cfg, x_t, x_lr, t, cond_token);
    if (!cfg.gspm_enabled) return dpm;
    return fuse_control_graph(dpm, gspm_forward_graph(ps, cfg, x_t, x_lr, t));
}

namespace {

ControlSignals to_plain(const std::vector<ag::Var>& v) {
    ControlSignals out;
    for (const auto& x : v) out.c.push_back(x->val);
    return out;
}

}  // namespace

ControlSignals dpm_forward(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                           const Tensor4& x_lr, const std::vector<int>& t, const Tensor4* p) {
    ps.end_step();
    ag::Var tok = cond_token_graph(ps, cfg, p ? ag::constant(*p) : nullptr, x_t.shape.n);
    auto out = to_plain(dpm_forward_graph(ps, cfg, ag::constant(x_t), ag::constant(x_lr), t, tok));
    ps.end_step();
    return out;
}

ControlSignals gspm_forward(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                            const Tensor4& x_lr, const std::vector<int>& t) {
    ps.end_step();
    auto out = to_plain(gspm_forward_graph(ps, cfg, ag::constant(x_t), ag::constant(x_lr), t));
    ps.end_step();
    return out;
}

ControlSignals fuse_control(const ControlSignals& a, const ControlSignals& b) {
    if (a.c.size() != b.c.size())
        throw ValidationError("fuse_control: branch signal counts differ");
    ControlSignals out;
    for (size_t i = 0; i < a.c.size(); ++i) {
        if (!a.c[i].same_shape(b.c[i]))
            throw ValidationError("fuse_control: shape mismatch at index " + std::to_string(i));
        Tensor4 s = a.c[i];
        for (int64_t j = 0; j < s.size(); ++j) s.v[j] += b.c[i].v[j];
        out.c.push_back(std::move(s));
    }
    return out;
}

}  // namespace csr
