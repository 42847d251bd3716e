#include "csr/backbone.hpp"

#include "csr/layers.hpp"
#include "csr/lora.hpp"

namespace csr {

void build_backbone(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int W = cfg.unet_width, lc = cfg.latent_channels;
    const int td = cfg.temb_dim;
    create_linear(ps, "unet.temb.lin0", td, td, rng);
    create_linear(ps, "unet.temb.lin1", td, td, rng);
    if (!ps.has("unet.null_token")) {
        Tensor4 nt(1, cfg.cond_dim, 1, 1);
        fill_normal(nt, rng, 0.0, 0.02);
        ps.create("unet.null_token", std::move(nt), false);
    }
    // encoder
    create_conv(ps, "unet.enc.conv_in", W, lc, 3, rng);
    create_resblock(ps, "unet.enc.block0", W, W, td, rng);
    create_conv(ps, "unet.enc.down", W, W, 3, rng);
    create_resblock(ps, "unet.enc.block1", W, 2 * W, td, rng);
    // middle
    create_resblock(ps, "unet.mid.block0", 2 * W, 2 * W, td, rng);
    create_attention(ps, "unet.mid.attn", 2 * W, 2 * W, rng);
    create_resblock(ps, "unet.mid.block1", 2 * W, 2 * W, td, rng);
    // decoder
    create_resblock(ps, "unet.dec.block0", 4 * W, 2 * W, td, rng);
    create_attention(ps, "unet.dec.attn0", 2 * W, cfg.cond_dim, rng);
    create_resblock(ps, "unet.dec.block1", 3 * W, 2 * W, td, rng);
    create_attention(ps, "unet.dec.attn1", 2 * W, cfg.cond_dim, rng);
    create_conv(ps, "unet.dec.up", W, 2 * W, 3, rng);
    create_resblock(ps, "unet.dec.block2", 2 * W, W, td, rng);
    create_attention(ps, "unet.dec.attn2", W, cfg.cond_dim, rng);
    create_resblock(ps, "unet.dec.block3", 2 * W, W, td, rng);
    create_attention(ps, "unet.dec.attn3", W, cfg.cond_dim, rng);
    create_norm(ps, "unet.out.norm", W);
    create_conv(ps, "unet.out.conv", lc, W, 3, rng);
}

void build_condition_embedder(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    const int cd = cfg.cond_dim;
    create_conv(ps, "cond.embed.conv0", cd / 4, 3, 3, rng);
    create_conv(ps, "cond.embed.conv1", cd / 2, cd / 4, 3, rng);
    create_conv(ps, "cond.embed.conv2", cd, cd / 2, 3, rng);
    create_conv(ps, "cond.embed.conv3", cd, cd, 3, rng);
    // zero-initialized so a fresh embedder leaves the null token untouched
    create_linear(ps, "cond.in_proj", cd, cd, rng, /*zero_init=*/true);
}

std::vector<std::string> backbone_decoder_lora_layers() {
    std::vector<std::string> out;
    for (int i = 0; i < 4; ++i) {
        const std::string a = "unet.dec.attn" + std::to_string(i);
        out.push_back(a + ".q");
        out.push_back(a + ".k");
        out.push_back(a + ".v");
        out.push_back(a + ".out");
        const std::string b = "unet.dec.block" + std::to_string(i);
        out.push_back(b + ".conv1");
        out.push_back(b + ".skip");
    }
    return out;
}

void create_backbone_decoder_lora(ParamStore& ps, const RunConfig& cfg, Rng& rng) {
    for (const auto& layer : backbone_decoder_lora_layers())
        if (ps.has(layer + ".w")) create_lora(ps, layer, cfg.lora_rank, rng);
}

std::vector<int> control_channels(const RunConfig& cfg) {
    const int W = cfg.unet_width;
    return {W, W, W, 2 * W, 2 * W};
}

ag::Var embed_condition_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& lr_images) {
    (void)cfg;
    auto h = ag::silu(conv(ps, "cond.embed.conv0", lr_images, ConvSpec{2, 1}));
    h = ag::silu(conv(ps, "cond.embed.conv1", h, ConvSpec{2, 1}));
    h = ag::silu(conv(ps, "cond.embed.conv2", h, ConvSpec{2, 1}));
    h = ag::silu(conv(ps, "cond.embed.conv3", h, ConvSpec{1, 1}));
    return ag::global_avg_pool(h);
}

Tensor4 embed_condition(ParamStore& ps, const RunConfig& cfg, const Tensor4& lr_images) {
    ps.end_step();
    auto out = embed_condition_graph(ps, cfg, ag::constant(lr_images));
    ps.end_step();
    return out->val;
}

ag::Var cond_token_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& p, int batch) {
    auto null_tok = ag::reshape(ps.borrow("unet.null_token"), Shape4{1, 1, cfg.cond_dim, 1});
    auto tok = ag::repeat_batch(null_tok, batch);
    if (p) {
        auto pt = ag::reshape(p, Shape4{batch, 1, cfg.cond_dim, 1});
        tok = ag::add(tok, linear(ps, "cond.in_proj", pt));
    }
    return tok;
}

Tensor4 inject_control(const Tensor4& skip, const Tensor4& c_k) {
    if (!skip.same_shape(c_k))
        throw ValidationError("inject_control: skip shape " + skip.shape.str() + " vs control " +
                              c_k.shape.str());
    Tensor4 out = skip;
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] += c_k.v[i];
    return out;
}

ag::Var time_embedding_graph(ParamStore& ps, const RunConfig& cfg, const std::vector<int>& t,
                             const std::string& prefix) {
    auto emb = ag::constant(timestep_embedding(t, cfg.temb_dim));
    auto tv = ag::reshape(emb, Shape4{(int)t.size(), 1, cfg.temb_dim, 1});
    tv = ag::silu(linear(ps, prefix + ".lin0", tv));
    tv = linear(ps, prefix + ".lin1", tv);
    return ag::reshape(tv, Shape4{(int)t.size(), cfg.temb_dim, 1, 1});
}

ag::Var predict_eps_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                          const std::vector<int>& t, const std::vector<ag::Var>& controls,
                          const ag::Var& cond_token, bool use_dec_lora) {
    if (!controls.empty() && (int)controls.size() != kControlPoints)
        throw ValidationError("predict_eps: expected " + std::to_string(kControlPoints) +
                              " control signals, got " + std::to_string(controls.size()));
    if ((int)t.size() != x_t->val.shape.n)
        throw ValidationError("predict_eps: timestep count does not match batch");
    const int B = x_t->val.shape.n, heads = cfg.heads;
    const bool lora = use_dec_lora;

    auto temb = time_embedding_graph(ps, cfg, t, "unet.temb");
    auto tok = cond_token ? cond_token : cond_token_graph(ps, cfg, nullptr, B);

    auto inject = [&](ag::Var h, int k) {
        return controls.empty() ? h : ag::add(h, controls[k]);
    };

    // encoder
    auto h0 = conv(ps, "unet.enc.conv_in", x_t, ConvSpec{1, 1});
    auto h1 = resblock(ps, "unet.enc.block0", h0, cfg.unet_width, temb);
    auto h2 = conv(ps, "unet.enc.down", ag::silu(h1), ConvSpec{2, 1});
    auto h3 = resblock(ps, "unet.enc.block1", h2, 2 * cfg.unet_width, temb);
    // middle
    auto m = resblock(ps, "unet.mid.block0", h3, 2 * cfg.unet_width, temb);
    m = self_attention(ps, "unet.mid.attn", m, heads);
    m = resblock(ps, "unet.mid.block1", m, 2 * cfg.unet_width, temb);

    // decoder with control injection on skips and middle
    auto d = inject(m, 4);
    d = resblock(ps, "unet.dec.block0", ag::concat_channels(d, inject(h3, 3)),
                 2 * cfg.unet_width, temb, lora);
    d = cond_cross_attention(ps, "unet.dec.attn0", d, tok, heads, lora);
    d = resblock(ps, "unet.dec.block1", ag::concat_channels(d, inject(h2, 2)),
                 2 * cfg.unet_width, temb, lora);
    d = cond_cross_attention(ps, "unet.dec.attn1", d, tok, heads, lora);
    d = conv(ps, "unet.dec.up", ag::nearest_up2(d), ConvSpec{1, 1});
    d = resblock(ps, "unet.dec.block2", ag::concat_channels(d, inject(h1, 1)),
                 cfg.unet_width, temb, lora);
    d = cond_cross_attention(ps, "unet.dec.attn2", d, tok, heads, lora);
    d = resblock(ps, "unet.dec.block3", ag::concat_channels(d, inject(h0, 0)),
                 cfg.unet_width, temb, lora);
    d = cond_cross_attention(ps, "unet.dec.attn3", d, tok, heads, lora);

    d = ag::silu(norm_feature(ps, "unet.out.norm", d));
    return conv(ps, "unet.out.conv", d, ConvSpec{1, 1});
}

Tensor4 predict_eps(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                    const std::vector<int>& t, const std::vector<Tensor4>& controls,
                    const Tensor4* p, bool use_dec_lora) {
    ps.end_step();
    std::vector<ag::Var> cv;
    cv.reserve(controls.size());
    for (const auto& c : controls) cv.push_back(ag::constant(c));
    ag::Var tok;
    if (p) tok = cond_token_graph(ps, cfg, ag::constant(*p), x_t.shape.n);
    auto out = predict_eps_graph(ps, cfg, ag::constant(x_t), t, cv, tok, use_dec_lora);
    ps.end_step();
    return out->val;
}

}  // namespace csr
