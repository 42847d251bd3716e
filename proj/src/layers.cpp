#include "csr/layers.hpp"

#include <cmath>
#include <numbers>

#include "csr/lora.hpp"

namespace csr {

int norm_groups_for(int channels) {
    for (int g : {8, 4, 2, 1})
        if (channels % g == 0) return g;
    return 1;
}

void create_conv(ParamStore& ps, const std::string& name, int cout, int cin, int k,
                 Rng& rng, bool zero_init) {
    if (ps.has(name + ".w")) return;
    Tensor4 w(cout, cin, k, k);
    if (!zero_init) {
        const double std = std::sqrt(2.0 / ((double)cin * k * k));
        fill_normal(w, rng, 0.0, std);
    }
    ps.create(name + ".w", std::move(w), false);
    ps.create(name + ".b", Tensor4(1, cout, 1, 1), false);
}

void create_linear(ParamStore& ps, const std::string& name, int cout, int cin,
                   Rng& rng, bool zero_init, bool with_bias) {
    if (ps.has(name + ".w")) return;
    Tensor4 w(cout, cin, 1, 1);
    if (!zero_init) {
        const double std = std::sqrt(1.0 / (double)cin);
        fill_normal(w, rng, 0.0, std);
    }
    ps.create(name + ".w", std::move(w), false);
    if (with_bias) ps.create(name + ".b", Tensor4(1, cout, 1, 1), false);
}

void create_norm(ParamStore& ps, const std::string& name, int channels) {
    if (ps.has(name + ".g")) return;
    ps.create(name + ".g", Tensor4::full(1, channels, 1, 1, 1.0), false);
    ps.create(name + ".b", Tensor4(1, channels, 1, 1), false);
}

void create_resblock(ParamStore& ps, const std::string& prefix, int cin, int cout,
                     int temb_dim, Rng& rng) {
    create_norm(ps, prefix + ".norm1", cin);
    create_conv(ps, prefix + ".conv1", cout, cin, 3, rng);
    if (temb_dim > 0) create_linear(ps, prefix + ".temb", cin, temb_dim, rng);
    if (cin != cout) create_conv(ps, prefix + ".skip", cout, cin, 1, rng);
}

void create_attention(ParamStore& ps, const std::string& prefix, int dim, int kv_dim,
                      Rng& rng) {
    create_norm(ps, prefix + ".norm", dim);
    create_linear(ps, prefix + ".q", dim, dim, rng);
    create_linear(ps, prefix + ".k", dim, kv_dim, rng);
    create_linear(ps, prefix + ".v", dim, kv_dim, rng);
    create_linear(ps, prefix + ".out", dim, dim, rng);
}

ag::Var conv(ParamStore& ps, const std::string& name, const ag::Var& x, ConvSpec spec,
             bool use_lora) {
    auto y = ag::conv2d(x, ps.borrow(name + ".w"), ps.borrow(name + ".b"), spec);
    if (use_lora && has_lora(ps, name)) y = ag::add(y, lora_delta(ps, name, x, spec));
    return y;
}

ag::Var linear(ParamStore& ps, const std::string& name, const ag::Var& tokens,
               bool use_lora) {
    auto b = ps.has(name + ".b") ? ps.borrow(name + ".b") : nullptr;
    auto y = ag::linear_tokens(tokens, ps.borrow(name + ".w"), b);
    if (use_lora && has_lora(ps, name)) y = ag::add(y, lora_delta_tokens(ps, name, tokens));
    return y;
}

ag::Var norm_feature(ParamStore& ps, const std::string& name, const ag::Var& x) {
    return ag::group_norm(x, norm_groups_for(x->val.shape.c), ps.borrow(name + ".g"),
                          ps.borrow(name + ".b"));
}

ag::Var norm_tokens(ParamStore& ps, const std::string& name, const ag::Var& t) {
    return ag::layer_norm_tokens(t, ps.borrow(name + ".g"), ps.borrow(name + ".b"));
}

ag::Var resblock(ParamStore& ps, const std::string& prefix, const ag::Var& x, int cout,
                 const ag::Var& temb, bool use_lora) {
    auto h = norm_feature(ps, prefix + ".norm1", x);
    if (temb) {
        // temb: (B, temb_dim, 1, 1) -> per-channel shift
        auto tv = ag::reshape(temb, Shape4{temb->val.shape.n, 1, temb->val.shape.c, 1});
        auto shift = linear(ps, prefix + ".temb", tv);
        shift = ag::reshape(shift, Shape4{temb->val.shape.n, x->val.shape.c, 1, 1});
        h = ag::add_channel_vec(h, shift);
    }
    h = ag::silu(h);
    h = conv(ps, prefix + ".conv1", h, ConvSpec{1, 1}, use_lora);
    auto skip = x;
    if (x->val.shape.c != cout)
        skip = conv(ps, prefix + ".skip", x, ConvSpec{1, 0}, use_lora);
    return ag::add(skip, h);
}

namespace {

ag::Var attention_core(ParamStore& ps, const std::string& prefix, const ag::Var& q_tokens,
                       const ag::Var& kv_tokens, int heads, bool use_lora) {
    const int dim = q_tokens->val.shape.h;
    auto q = linear(ps, prefix + ".q", q_tokens, use_lora);
    auto k = linear(ps, prefix + ".k", kv_tokens, use_lora);
    auto v = linear(ps, prefix + ".v", kv_tokens, use_lora);
    q = ag::split_heads(q, heads);
    k = ag::split_heads(k, heads);
    v = ag::split_heads(v, heads);
    const double dk = (double)dim / heads;
    auto logits = ag::scale(ag::bmm_abt(q, k), 1.0 / std::sqrt(dk));
    auto attn = ag::softmax_dim2(logits);
    auto ctx = ag::merge_heads(ag::bmm_ab(attn, v), heads);
    return linear(ps, prefix + ".out", ctx, use_lora);
}

}  // namespace

ag::Var self_attention(ParamStore& ps, const std::string& prefix, const ag::Var& x, int heads) {
    auto t = ag::to_tokens(norm_feature(ps, prefix + ".norm", x));
    auto out = attention_core(ps, prefix, t, t, heads, false);
    return ag::add(x, ag::from_tokens(out, x->val.shape.h, x->val.shape.w));
}

ag::Var cond_cross_attention(ParamStore& ps, const std::string& prefix, const ag::Var& x,
                             const ag::Var& cond_token, int heads, bool use_lora) {
    auto t = ag::to_tokens(norm_feature(ps, prefix + ".norm", x));
    auto out = attention_core(ps, prefix, t, cond_token, heads, use_lora);
    return ag::add(x, ag::from_tokens(out, x->val.shape.h, x->val.shape.w));
}

Tensor4 timestep_embedding(const std::vector<int>& t, int dim, int max_period) {
    const int half = dim / 2;
    Tensor4 out((int)t.size(), dim, 1, 1);
    for (size_t b = 0; b < t.size(); ++b)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log((double)max_period) * i / half);
            out.v[b * dim + i] = std::cos(t[b] * freq);
            out.v[b * dim + half + i] = std::sin(t[b] * freq);
        }
    return out;
}

}  // namespace csr
