#include "csr/lora.hpp"

#include <algorithm>

namespace csr {

LoraAdapter make_lora(Shape4 ws, int rank, Rng& rng, double scale) {
    const int in_features = ws.c * ws.h * ws.w;
    LoraAdapter a;
    a.rank = std::clamp(rank, 1, std::min(in_features, ws.n));
    a.scale = scale;
    a.down = Tensor4(a.rank, ws.c, ws.h, ws.w);
    fill_normal(a.down, rng, 0.0, 0.02);
    a.up = Tensor4(ws.n, a.rank, 1, 1);
    return a;
}

Tensor4 lora_apply(const Tensor4& base_out, const Tensor4& x, const LoraAdapter& a,
                   ConvSpec spec) {
    if (x.shape.c != a.down.shape.c)
        throw ValidationError("lora_apply: input features " + std::to_string(x.shape.c) +
                              " vs adapter " + std::to_string(a.down.shape.c));
    Tensor4 mid = conv2d_fwd(x, a.down, Tensor4(), spec);
    Tensor4 delta = conv2d_fwd(mid, a.up, Tensor4(), ConvSpec{1, 0});
    if (!delta.same_shape(base_out))
        throw ValidationError("lora_apply: base_out shape " + base_out.shape.str() +
                              " vs adapter output " + delta.shape.str());
    Tensor4 out = base_out;
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] += a.scale * delta.v[i];
    return out;
}

Tensor4 lora_merge(const Tensor4& w, const LoraAdapter& a) {
    const int cout = w.shape.n;
    const int k = w.shape.c * w.shape.h * w.shape.w;
    if (a.up.shape.n != cout || a.down.shape.c != w.shape.c ||
        a.down.shape.h != w.shape.h || a.down.shape.w != w.shape.w)
        throw ValidationError("lora_merge: adapter does not match weight " + w.shape.str());
    Tensor4 out = w;
    // out += scale * up (cout x r) * down (r x k)
    std::vector<double> delta((size_t)cout * k, 0.0);
    mat_mul(delta.data(), a.up.data(), a.down.data(), cout, a.rank, k);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] += a.scale * delta[(size_t)i];
    return out;
}

void create_lora(ParamStore& ps, const std::string& layer, int rank, Rng& rng, double scale) {
    const std::string an = layer + ".lora.A", bn = layer + ".lora.B";
    if (ps.has(an)) return;
    LoraAdapter a = make_lora(ps.get(layer + ".w").value.shape, rank, rng, scale);
    ps.create(an, std::move(a.down), false);
    ps.create(bn, std::move(a.up), false);
}

bool has_lora(const ParamStore& ps, const std::string& layer) {
    return ps.has(layer + ".lora.A");
}

ag::Var lora_delta(ParamStore& ps, const std::string& layer, const ag::Var& x, ConvSpec spec) {
    auto mid = ag::conv2d(x, ps.borrow(layer + ".lora.A"), nullptr, spec);
    return ag::conv2d(mid, ps.borrow(layer + ".lora.B"), nullptr, ConvSpec{1, 0});
}

ag::Var lora_delta_tokens(ParamStore& ps, const std::string& layer, const ag::Var& tokens) {
    auto mid = ag::linear_tokens(tokens, ps.borrow(layer + ".lora.A"), nullptr);
    return ag::linear_tokens(mid, ps.borrow(layer + ".lora.B"), nullptr);
}

}  // namespace csr
