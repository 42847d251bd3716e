#include "csr/wxattn.hpp"

#include <cmath>

#include "csr/layers.hpp"

namespace csr {

WindowSpec make_window_spec(int feature_side, int lr_side, int window_s, bool use_partition) {
    WindowSpec spec;
    if (!use_partition) {
        spec.S = feature_side;
        spec.s = lr_side;
        spec.N = 1;
        return spec;
    }
    spec.s = std::min(window_s, lr_side);
    if (lr_side % spec.s != 0)
        throw ValidationError("make_window_spec: LR side " + std::to_string(lr_side) +
                              " not divisible by key window side " + std::to_string(spec.s));
    const int nwin_side = lr_side / spec.s;
    if (feature_side % nwin_side != 0)
        throw ValidationError("make_window_spec: feature side " + std::to_string(feature_side) +
                              " does not partition into " + std::to_string(nwin_side) +
                              " windows per axis");
    spec.S = feature_side / nwin_side;
    spec.N = nwin_side * nwin_side;
    return spec;
}

Tensor4 window_partition(const Tensor4& x, int side) {
    return ag::window_partition(ag::constant(x), side)->val;
}

Tensor4 window_merge(const Tensor4& windows, int side, int b, int h, int w) {
    return ag::window_merge(ag::constant(windows), side, b, h, w)->val;
}

std::pair<int, int> aligned_bias_index(int S, int s, int s_table,
                                       int qi, int qj, int ki, int kj) {
    const int mi = (int)std::lround((double)qi * s / S);
    const int mj = (int)std::lround((double)qj * s / S);
    int dy = ki - mi, dx = kj - mj;
    dy = std::clamp(dy, -(s_table - 1), s_table - 1);
    dx = std::clamp(dx, -(s_table - 1), s_table - 1);
    return {dy + s_table - 1, dx + s_table - 1};
}

Tensor4 aligned_bias(const Tensor4& table, int S, int s) {
    const int ts = (table.shape.c + 1) / 2;  // table is (1, 2*ts-1, 2*ts-1, 1)
    Tensor4 b(1, S * S, s * s, 1);
    for (int qi = 0; qi < S; ++qi)
        for (int qj = 0; qj < S; ++qj)
            for (int ki = 0; ki < s; ++ki)
                for (int kj = 0; kj < s; ++kj) {
                    auto [ty, tx] = aligned_bias_index(S, s, ts, qi, qj, ki, kj);
                    b.at(0, qi * S + qj, ki * s + kj, 0) = table.at(0, ty, tx, 0);
                }
    return b;
}

namespace ag_ops {

csr::ag::Var aligned_bias(const csr::ag::Var& table, int S, int s) {
    using namespace csr::ag;
    const Shape4 st = table->val.shape;  // (heads, 2*ts-1, 2*ts-1, 1)
    const int heads = st.n;
    const int ts = (st.c + 1) / 2;
    Tensor4 out(heads, S * S, s * s, 1);
    // gather indices shared across heads
    std::vector<int> gather((size_t)S * S * s * s);
    for (int qi = 0; qi < S; ++qi)
        for (int qj = 0; qj < S; ++qj)
            for (int ki = 0; ki < s; ++ki)
                for (int kj = 0; kj < s; ++kj) {
                    auto [ty, tx] = aligned_bias_index(S, s, ts, qi, qj, ki, kj);
                    gather[((size_t)(qi * S + qj) * s + ki) * s + kj] = ty * (2 * ts - 1) + tx;
                }
    const size_t tsz = (size_t)st.c * st.h;
    const size_t bsz = (size_t)S * S * s * s;
    for (int hh = 0; hh < heads; ++hh)
        for (size_t i = 0; i < bsz; ++i)
            out.v[hh * bsz + i] = table->val.v[hh * tsz + gather[i]];
    auto n = std::make_shared<Node>();
    n->val = std::move(out);
    n->op = "aligned_bias";
    if (table->requires_grad) {
        n->requires_grad = true;
        n->inputs = {table};
        n->backprop = [table, gather, heads, tsz, bsz](Node& nn) {
            auto& g = table->grad_buf();
            for (int hh = 0; hh < heads; ++hh)
                for (size_t i = 0; i < bsz; ++i)
                    g.v[hh * tsz + gather[i]] += nn.grad.v[hh * bsz + i];
        };
    }
    return n;
}

}  // namespace ag_ops

void create_window_cross_attention(ParamStore& ps, const std::string& prefix, int dim,
                                   int lr_channels, int heads, int s_table, Rng& rng) {
    create_attention(ps, prefix, dim, lr_channels, rng);
    create_norm(ps, prefix + ".lrnorm", lr_channels);
    if (!ps.has(prefix + ".bias_table"))
        ps.create(prefix + ".bias_table", Tensor4(heads, 2 * s_table - 1, 2 * s_table - 1, 1),
                  false);
}

ag::Var window_cross_attention(ParamStore& ps, const std::string& prefix,
                               const ag::Var& x_d, const ag::Var& x_lr,
                               WindowSpec spec, int heads) {
    using namespace csr::ag;
    const Shape4 sf = x_d->val.shape, sl = x_lr->val.shape;
    if (sf.h % spec.S != 0 || sf.w % spec.S != 0 || sl.h % spec.s != 0 || sl.w % spec.s != 0)
        throw ValidationError("window_cross_attention: geometry mismatch between spec and inputs");
    if ((sf.h / spec.S) * (sf.w / spec.S) != (sl.h / spec.s) * (sl.w / spec.s))
        throw ValidationError("window_cross_attention: query and key window counts differ");
    const int dim = sf.c;

    // query path: pre-norm, window partition, linear
    auto qt = window_partition(norm_feature(ps, prefix + ".norm", x_d), spec.S);
    auto q = linear(ps, prefix + ".q", qt);

    // key/value path from the LR latent
    auto lt = window_partition(norm_feature(ps, prefix + ".lrnorm", x_lr), spec.s);
    auto k = linear(ps, prefix + ".k", lt);
    auto v = linear(ps, prefix + ".v", lt);

    q = split_heads(q, heads);
    k = split_heads(k, heads);
    v = split_heads(v, heads);

    const double dk = (double)dim / heads;
    auto logits = scale(bmm_abt(q, k), 1.0 / std::sqrt(dk));
    auto bias = ag_ops::aligned_bias(ps.borrow(prefix + ".bias_table"), spec.S, spec.s);
    logits = add_head_bias(logits, bias, heads);
    auto attn = softmax_dim2(logits);
    auto ctx = merge_heads(bmm_ab(attn, v), heads);
    auto out = linear(ps, prefix + ".out", ctx);
    auto merged = window_merge(out, spec.S, sf.n, sf.h, sf.w);
    return add(x_d, merged);
}

}  // namespace csr
