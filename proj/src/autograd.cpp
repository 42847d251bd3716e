#include "csr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace csr::ag {

namespace {

Var make(Tensor4 val, std::vector<Var> inputs, std::function<void(Node&)> bp, const char* op) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->op = op;
    for (auto& in : inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->inputs = std::move(inputs);
        n->backprop = std::move(bp);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw ValidationError(std::string(op) + ": shape mismatch " + a->val.shape.str() +
                              " vs " + b->val.shape.str());
}

}  // namespace

Var leaf(Tensor4 value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->val = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Tensor4 value) { return leaf(std::move(value), false); }

void backward(const Var& root) {
    if (root->val.size() != 1)
        throw ValidationError("backward: root must be a scalar");
    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->inputs.size()) {
            Node* in = n->inputs[i++].get();
            if (in->requires_grad && seen.insert(in).second) stack.push_back({in, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->grad_buf().v[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() != 0) n->backprop(*n);
    }
}

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->val.v[i] + b->val.v[i];
    return make(std::move(out), {a, b},
                [a, b](Node& n) {
                    if (a->requires_grad) {
                        auto& g = a->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                    }
                    if (b->requires_grad) {
                        auto& g = b->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                    }
                },
                "add");
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->val.v[i] - b->val.v[i];
    return make(std::move(out), {a, b},
                [a, b](Node& n) {
                    if (a->requires_grad) {
                        auto& g = a->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                    }
                    if (b->requires_grad) {
                        auto& g = b->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] -= n.grad.v[i];
                    }
                },
                "sub");
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->val.v[i] * b->val.v[i];
    return make(std::move(out), {a, b},
                [a, b](Node& n) {
                    if (a->requires_grad) {
                        auto& g = a->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i] * b->val.v[i];
                    }
                    if (b->requires_grad) {
                        auto& g = b->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i] * a->val.v[i];
                    }
                },
                "mul");
}

Var scale(const Var& a, double s) {
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->val.v[i] * s;
    return make(std::move(out), {a},
                [a, s](Node& n) {
                    auto& g = a->grad_buf();
                    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i] * s;
                },
                "scale");
}

Var add_const(const Var& a, double c) {
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = a->val.v[i] + c;
    return make(std::move(out), {a},
                [a](Node& n) {
                    auto& g = a->grad_buf();
                    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                },
                "add_const");
}

Var exp_(const Var& a) {
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) out.v[i] = std::exp(a->val.v[i]);
    return make(std::move(out), {a},
                [a](Node& n) {
                    auto& g = a->grad_buf();
                    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i] * n.val.v[i];
                },
                "exp");
}

Var silu(const Var& a) {
    Tensor4 out(a->val.shape);
    for (int64_t i = 0; i < out.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-a->val.v[i]));
        out.v[i] = a->val.v[i] * s;
    }
    return make(std::move(out), {a},
                [a](Node& n) {
                    auto& g = a->grad_buf();
                    for (int64_t i = 0; i < g.size(); ++i) {
                        double x = a->val.v[i];
                        double s = 1.0 / (1.0 + std::exp(-x));
                        g.v[i] += n.grad.v[i] * (s * (1.0 + x * (1.0 - s)));
                    }
                },
                "silu");
}

Var mean_all(const Var& a) {
    Tensor4 out(1, 1, 1, 1);
    double acc = 0.0;
    for (double x : a->val.v) acc += x;
    const double inv_n = 1.0 / (double)a->val.size();
    out.v[0] = acc * inv_n;
    return make(std::move(out), {a},
                [a, inv_n](Node& n) {
                    auto& g = a->grad_buf();
                    const double gy = n.grad.v[0] * inv_n;
                    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += gy;
                },
                "mean_all");
}

Var mse(const Var& a, const Var& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

// ---- structural -------------------------------------------------------

Var reshape(const Var& a, Shape4 s) {
    if (s.numel() != a->val.size())
        throw ValidationError("reshape: numel mismatch " + a->val.shape.str() + " -> " + s.str());
    Tensor4 out(s);
    out.v = a->val.v;
    return make(std::move(out), {a},
                [a](Node& n) {
                    auto& g = a->grad_buf();
                    for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                },
                "reshape");
}

Var repeat_batch(const Var& a, int times) {
    const Shape4 s = a->val.shape;
    if (s.n != 1) throw ValidationError("repeat_batch: expected batch dim 1");
    Tensor4 out(times, s.c, s.h, s.w);
    const size_t item = (size_t)s.c * s.h * s.w;
    for (int b = 0; b < times; ++b)
        std::copy_n(a->val.data(), item, out.data() + (size_t)b * item);
    return make(std::move(out), {a},
                [a, times, item](Node& n) {
                    auto& g = a->grad_buf();
                    for (int b = 0; b < times; ++b) {
                        const double* gy = n.grad.data() + (size_t)b * item;
                        for (size_t i = 0; i < item; ++i) g.v[i] += gy[i];
                    }
                },
                "repeat_batch");
}

Var concat_channels(const Var& a, const Var& b) {
    const Shape4 sa = a->val.shape, sb = b->val.shape;
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw ValidationError("concat_channels: shape mismatch " + sa.str() + " vs " + sb.str());
    Tensor4 out(sa.n, sa.c + sb.c, sa.h, sa.w);
    const size_t plane = (size_t)sa.h * sa.w;
    for (int bi = 0; bi < sa.n; ++bi) {
        std::copy_n(a->val.data() + (size_t)bi * sa.c * plane, (size_t)sa.c * plane,
                    out.data() + (size_t)bi * (sa.c + sb.c) * plane);
        std::copy_n(b->val.data() + (size_t)bi * sb.c * plane, (size_t)sb.c * plane,
                    out.data() + ((size_t)bi * (sa.c + sb.c) + sa.c) * plane);
    }
    return make(std::move(out), {a, b},
                [a, b, sa, sb, plane](Node& n) {
                    for (int bi = 0; bi < sa.n; ++bi) {
                        const double* gy = n.grad.data() + (size_t)bi * (sa.c + sb.c) * plane;
                        if (a->requires_grad) {
                            double* g = a->grad_buf().data() + (size_t)bi * sa.c * plane;
                            for (size_t i = 0; i < (size_t)sa.c * plane; ++i) g[i] += gy[i];
                        }
                        if (b->requires_grad) {
                            double* g = b->grad_buf().data() + (size_t)bi * sb.c * plane;
                            const double* gyb = gy + (size_t)sa.c * plane;
                            for (size_t i = 0; i < (size_t)sb.c * plane; ++i) g[i] += gyb[i];
                        }
                    }
                },
                "concat_channels");
}

Var slice_channels(const Var& a, int c0, int c1) {
    const Shape4 s = a->val.shape;
    if (c0 < 0 || c1 > s.c || c0 >= c1)
        throw ValidationError("slice_channels: bad range");
    Tensor4 out(s.n, c1 - c0, s.h, s.w);
    const size_t plane = (size_t)s.h * s.w;
    for (int bi = 0; bi < s.n; ++bi)
        std::copy_n(a->val.data() + ((size_t)bi * s.c + c0) * plane, (size_t)(c1 - c0) * plane,
                    out.data() + (size_t)bi * (c1 - c0) * plane);
    return make(std::move(out), {a},
                [a, s, c0, c1, plane](Node& n) {
                    auto& g = a->grad_buf();
                    for (int bi = 0; bi < s.n; ++bi) {
                        double* gp = g.data() + ((size_t)bi * s.c + c0) * plane;
                        const double* gy = n.grad.data() + (size_t)bi * (c1 - c0) * plane;
                        for (size_t i = 0; i < (size_t)(c1 - c0) * plane; ++i) gp[i] += gy[i];
                    }
                },
                "slice_channels");
}

Var add_channel_vec(const Var& x, const Var& v) {
    const Shape4 s = x->val.shape, sv = v->val.shape;
    if (sv.n != s.n || sv.c != s.c || sv.h != 1 || sv.w != 1)
        throw ValidationError("add_channel_vec: vec shape " + sv.str() + " vs x " + s.str());
    Tensor4 out(s);
    const size_t plane = (size_t)s.h * s.w;
    for (int bi = 0; bi < s.n; ++bi)
        for (int c = 0; c < s.c; ++c) {
            const double add = v->val.v[(size_t)bi * s.c + c];
            const double* xi = x->val.data() + ((size_t)bi * s.c + c) * plane;
            double* yo = out.data() + ((size_t)bi * s.c + c) * plane;
            for (size_t i = 0; i < plane; ++i) yo[i] = xi[i] + add;
        }
    return make(std::move(out), {x, v},
                [x, v, s, plane](Node& n) {
                    if (x->requires_grad) {
                        auto& g = x->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                    }
                    if (v->requires_grad) {
                        auto& g = v->grad_buf();
                        for (int bi = 0; bi < s.n; ++bi)
                            for (int c = 0; c < s.c; ++c) {
                                const double* gy = n.grad.data() + ((size_t)bi * s.c + c) * plane;
                                double acc = 0.0;
                                for (size_t i = 0; i < plane; ++i) acc += gy[i];
                                g.v[(size_t)bi * s.c + c] += acc;
                            }
                    }
                },
                "add_channel_vec");
}

// ---- conv / pooling -----------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, ConvSpec spec) {
    Tensor4 out = conv2d_fwd(x->val, w->val, b ? b->val : Tensor4(), spec);
    std::vector<Var> inputs{x, w};
    if (b) inputs.push_back(b);
    return make(std::move(out), std::move(inputs),
                [x, w, b, spec](Node& n) {
                    if (x->requires_grad) {
                        Tensor4 dx = conv2d_bwd_x(n.grad, w->val, x->val.shape, spec);
                        auto& g = x->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += dx.v[i];
                    }
                    if (w->requires_grad) {
                        Tensor4* db = nullptr;
                        if (b && b->requires_grad) db = &b->grad_buf();
                        conv2d_bwd_w(n.grad, x->val, w->grad_buf(), db, spec);
                    }
                },
                "conv2d");
}

Var nearest_up2(const Var& x) {
    const Shape4 s = x->val.shape;
    Tensor4 out(s.n, s.c, s.h * 2, s.w * 2);
    for (int bi = 0; bi < s.n; ++bi)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx) {
                    double v = x->val.at(bi, c, y, xx);
                    out.at(bi, c, 2 * y, 2 * xx) = v;
                    out.at(bi, c, 2 * y, 2 * xx + 1) = v;
                    out.at(bi, c, 2 * y + 1, 2 * xx) = v;
                    out.at(bi, c, 2 * y + 1, 2 * xx + 1) = v;
                }
    return make(std::move(out), {x},
                [x, s](Node& n) {
                    auto& g = x->grad_buf();
                    for (int bi = 0; bi < s.n; ++bi)
                        for (int c = 0; c < s.c; ++c)
                            for (int y = 0; y < s.h; ++y)
                                for (int xx = 0; xx < s.w; ++xx)
                                    g.at(bi, c, y, xx) += n.grad.at(bi, c, 2 * y, 2 * xx) +
                                                          n.grad.at(bi, c, 2 * y, 2 * xx + 1) +
                                                          n.grad.at(bi, c, 2 * y + 1, 2 * xx) +
                                                          n.grad.at(bi, c, 2 * y + 1, 2 * xx + 1);
                },
                "nearest_up2");
}

Var global_avg_pool(const Var& x) {
    const Shape4 s = x->val.shape;
    const size_t plane = (size_t)s.h * s.w;
    Tensor4 out(s.n, s.c, 1, 1);
    for (int bi = 0; bi < s.n; ++bi)
        for (int c = 0; c < s.c; ++c) {
            const double* xp = x->val.data() + ((size_t)bi * s.c + c) * plane;
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) acc += xp[i];
            out.v[(size_t)bi * s.c + c] = acc / (double)plane;
        }
    return make(std::move(out), {x},
                [x, s, plane](Node& n) {
                    auto& g = x->grad_buf();
                    for (int bi = 0; bi < s.n; ++bi)
                        for (int c = 0; c < s.c; ++c) {
                            const double gy = n.grad.v[(size_t)bi * s.c + c] / (double)plane;
                            double* gp = g.data() + ((size_t)bi * s.c + c) * plane;
                            for (size_t i = 0; i < plane; ++i) gp[i] += gy;
                        }
                },
                "global_avg_pool");
}

// ---- token layout ---------------------------------------------------------
// Token tensors are (B, T, C, 1) stored in Shape4 as n=B, c=T, h=C, w=1,
// i.e. channels contiguous per token.

Var to_tokens(const Var& x) {
    const Shape4 s = x->val.shape;
    Tensor4 out(s.n, s.h * s.w, s.c, 1);
    for (int bi = 0; bi < s.n; ++bi)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx)
                    out.at(bi, y * s.w + xx, c, 0) = x->val.at(bi, c, y, xx);
    return make(std::move(out), {x},
                [x, s](Node& n) {
                    auto& g = x->grad_buf();
                    for (int bi = 0; bi < s.n; ++bi)
                        for (int c = 0; c < s.c; ++c)
                            for (int y = 0; y < s.h; ++y)
                                for (int xx = 0; xx < s.w; ++xx)
                                    g.at(bi, c, y, xx) += n.grad.at(bi, y * s.w + xx, c, 0);
                },
                "to_tokens");
}

Var from_tokens(const Var& t, int h, int w) {
    const Shape4 s = t->val.shape;
    if (s.w != 1) throw ValidationError("from_tokens: expected trailing dim 1");
    if (h * w != s.c) throw ValidationError("from_tokens: token count mismatch");
    const int C = s.h;
    Tensor4 out(s.n, C, h, w);
    for (int bi = 0; bi < s.n; ++bi)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    out.at(bi, c, y, xx) = t->val.at(bi, y * w + xx, c, 0);
    return make(std::move(out), {t},
                [t, h, w, C](Node& n) {
                    auto& g = t->grad_buf();
                    for (int bi = 0; bi < n.val.shape.n; ++bi)
                        for (int c = 0; c < C; ++c)
                            for (int y = 0; y < h; ++y)
                                for (int xx = 0; xx < w; ++xx)
                                    g.at(bi, y * w + xx, c, 0) += n.grad.at(bi, c, y, xx);
                },
                "from_tokens");
}

Var window_partition(const Var& x, int side) {
    const Shape4 s = x->val.shape;
    if (side < 1 || s.h % side != 0 || s.w % side != 0)
        throw ValidationError("window_partition: spatial dims " + s.str() +
                              " not divisible by side " + std::to_string(side));
    const int ny = s.h / side, nx = s.w / side, N = ny * nx;
    Tensor4 out(s.n * N, side * side, s.c, 1);
    for (int bi = 0; bi < s.n; ++bi)
        for (int wy = 0; wy < ny; ++wy)
            for (int wx = 0; wx < nx; ++wx) {
                const int g = (bi * N) + wy * nx + wx;
                for (int ly = 0; ly < side; ++ly)
                    for (int lx = 0; lx < side; ++lx)
                        for (int c = 0; c < s.c; ++c)
                            out.at(g, ly * side + lx, c, 0) =
                                x->val.at(bi, c, wy * side + ly, wx * side + lx);
            }
    return make(std::move(out), {x},
                [x, s, side, ny, nx, N](Node& n) {
                    auto& g = x->grad_buf();
                    for (int bi = 0; bi < s.n; ++bi)
                        for (int wy = 0; wy < ny; ++wy)
                            for (int wx = 0; wx < nx; ++wx) {
                                const int gi = (bi * N) + wy * nx + wx;
                                for (int ly = 0; ly < side; ++ly)
                                    for (int lx = 0; lx < side; ++lx)
                                        for (int c = 0; c < s.c; ++c)
                                            g.at(bi, c, wy * side + ly, wx * side + lx) +=
                                                n.grad.at(gi, ly * side + lx, c, 0);
                            }
                },
                "window_partition");
}

Var window_merge(const Var& t, int side, int b, int h, int w) {
    const Shape4 s = t->val.shape;
    const int ny = h / side, nx = w / side, N = ny * nx;
    if (side < 1 || h % side != 0 || w % side != 0 || s.n != b * N ||
        s.c != side * side || s.w != 1)
        throw ValidationError("window_merge: inconsistent geometry");
    const int C = s.h;
    Tensor4 out(b, C, h, w);
    for (int bi = 0; bi < b; ++bi)
        for (int wy = 0; wy < ny; ++wy)
            for (int wx = 0; wx < nx; ++wx) {
                const int g = (bi * N) + wy * nx + wx;
                for (int ly = 0; ly < side; ++ly)
                    for (int lx = 0; lx < side; ++lx)
                        for (int c = 0; c < C; ++c)
                            out.at(bi, c, wy * side + ly, wx * side + lx) =
                                t->val.at(g, ly * side + lx, c, 0);
            }
    return make(std::move(out), {t},
                [t, side, b, ny, nx, N, C](Node& n) {
                    auto& g = t->grad_buf();
                    for (int bi = 0; bi < b; ++bi)
                        for (int wy = 0; wy < ny; ++wy)
                            for (int wx = 0; wx < nx; ++wx) {
                                const int gi = (bi * N) + wy * nx + wx;
                                for (int ly = 0; ly < side; ++ly)
                                    for (int lx = 0; lx < side; ++lx)
                                        for (int c = 0; c < C; ++c)
                                            g.at(gi, ly * side + lx, c, 0) +=
                                                n.grad.at(bi, c, wy * side + ly, wx * side + lx);
                            }
                },
                "window_merge");
}

Var split_heads(const Var& t, int heads) {
    const Shape4 s = t->val.shape;  // (G, T, C, 1)
    if (s.h % heads != 0)
        throw ValidationError("split_heads: channels not divisible by head count");
    const int T = s.c, ch = s.h / heads;
    Tensor4 out(s.n * heads, T, ch, 1);
    for (int g = 0; g < s.n; ++g)
        for (int tt = 0; tt < T; ++tt)
            for (int hh = 0; hh < heads; ++hh)
                for (int c = 0; c < ch; ++c)
                    out.at(g * heads + hh, tt, c, 0) = t->val.at(g, tt, hh * ch + c, 0);
    return make(std::move(out), {t},
                [t, s, heads, ch, T](Node& n) {
                    auto& g = t->grad_buf();
                    for (int gi = 0; gi < s.n; ++gi)
                        for (int tt = 0; tt < T; ++tt)
                            for (int hh = 0; hh < heads; ++hh)
                                for (int c = 0; c < ch; ++c)
                                    g.at(gi, tt, hh * ch + c, 0) +=
                                        n.grad.at(gi * heads + hh, tt, c, 0);
                },
                "split_heads");
}

Var merge_heads(const Var& t, int heads) {
    const Shape4 s = t->val.shape;  // (G*heads, T, C/heads, 1)
    if (s.n % heads != 0)
        throw ValidationError("merge_heads: group count not divisible by head count");
    const int G = s.n / heads, T = s.c, ch = s.h;
    Tensor4 out(G, T, ch * heads, 1);
    for (int g = 0; g < G; ++g)
        for (int tt = 0; tt < T; ++tt)
            for (int hh = 0; hh < heads; ++hh)
                for (int c = 0; c < ch; ++c)
                    out.at(g, tt, hh * ch + c, 0) = t->val.at(g * heads + hh, tt, c, 0);
    return make(std::move(out), {t},
                [t, G, T, heads, ch](Node& n) {
                    auto& g = t->grad_buf();
                    for (int gi = 0; gi < G; ++gi)
                        for (int tt = 0; tt < T; ++tt)
                            for (int hh = 0; hh < heads; ++hh)
                                for (int c = 0; c < ch; ++c)
                                    g.at(gi * heads + hh, tt, c, 0) +=
                                        n.grad.at(gi, tt, hh * ch + c, 0);
                },
                "merge_heads");
}

// ---- token math -------------------------------------------------------

Var linear_tokens(const Var& t, const Var& w, const Var& b) {
    const Shape4 s = t->val.shape;  // (G, T, Cin, 1)
    const int cin = w->val.shape.c, cout = w->val.shape.n;
    if (s.h != cin)
        throw ValidationError("linear_tokens: feature dim " + std::to_string(s.h) +
                              " vs weight in_features " + std::to_string(cin));
    const int rows = s.n * s.c;
    Tensor4 out(s.n, s.c, cout, 1);
    if (b) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cout; ++c) out.v[(size_t)r * cout + c] = b->val.v[c];
    }
    mat_mul_abt(out.data(), t->val.data(), w->val.data(), rows, cin, cout);
    std::vector<Var> inputs{t, w};
    if (b) inputs.push_back(b);
    return make(std::move(out), std::move(inputs),
                [t, w, b, rows, cin, cout](Node& n) {
                    if (t->requires_grad)
                        mat_mul(t->grad_buf().data(), n.grad.data(), w->val.data(), rows, cout, cin);
                    if (w->requires_grad)
                        mat_mul_atb(w->grad_buf().data(), n.grad.data(), t->val.data(), rows, cout, cin);
                    if (b && b->requires_grad) {
                        auto& g = b->grad_buf();
                        for (int r = 0; r < rows; ++r)
                            for (int c = 0; c < cout; ++c) g.v[c] += n.grad.v[(size_t)r * cout + c];
                    }
                },
                "linear_tokens");
}

Var layer_norm_tokens(const Var& t, const Var& gamma, const Var& beta, double eps) {
    const Shape4 s = t->val.shape;  // (G, T, C, 1)
    const int C = s.h, rows = s.n * s.c;
    if (gamma->val.size() != C || beta->val.size() != C)
        throw ValidationError("layer_norm_tokens: affine size mismatch");
    Tensor4 out(s);
    std::vector<double> inv_std(rows), mean(rows);
    for (int r = 0; r < rows; ++r) {
        const double* x = t->val.data() + (size_t)r * C;
        double m = 0.0;
        for (int c = 0; c < C; ++c) m += x[c];
        m /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) var += (x[c] - m) * (x[c] - m);
        var /= C;
        const double is = 1.0 / std::sqrt(var + eps);
        mean[r] = m;
        inv_std[r] = is;
        double* y = out.data() + (size_t)r * C;
        for (int c = 0; c < C; ++c) y[c] = (x[c] - m) * is * gamma->val.v[c] + beta->val.v[c];
    }
    return make(std::move(out), {t, gamma, beta},
                [t, gamma, beta, rows, C, mean, inv_std](Node& n) {
                    for (int r = 0; r < rows; ++r) {
                        const double* x = t->val.data() + (size_t)r * C;
                        const double* gy = n.grad.data() + (size_t)r * C;
                        const double m = mean[r], is = inv_std[r];
                        if (gamma->requires_grad) {
                            auto& gg = gamma->grad_buf();
                            for (int c = 0; c < C; ++c) gg.v[c] += gy[c] * (x[c] - m) * is;
                        }
                        if (beta->requires_grad) {
                            auto& gb = beta->grad_buf();
                            for (int c = 0; c < C; ++c) gb.v[c] += gy[c];
                        }
                        if (t->requires_grad) {
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (int c = 0; c < C; ++c) {
                                const double gc = gy[c] * gamma->val.v[c];
                                sum_g += gc;
                                sum_gx += gc * (x[c] - m) * is;
                            }
                            auto& gt = t->grad_buf();
                            double* go = gt.data() + (size_t)r * C;
                            for (int c = 0; c < C; ++c) {
                                const double gc = gy[c] * gamma->val.v[c];
                                const double xh = (x[c] - m) * is;
                                go[c] += is * (gc - sum_g / C - xh * sum_gx / C);
                            }
                        }
                    }
                },
                "layer_norm_tokens");
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    const Shape4 s = x->val.shape;
    if (s.c % groups != 0)
        throw ValidationError("group_norm: channels not divisible by groups");
    if (gamma->val.size() != s.c || beta->val.size() != s.c)
        throw ValidationError("group_norm: affine size mismatch");
    const int cg = s.c / groups;
    const size_t plane = (size_t)s.h * s.w;
    const size_t gsize = (size_t)cg * plane;
    Tensor4 out(s);
    std::vector<double> mean((size_t)s.n * groups), inv_std((size_t)s.n * groups);
    for (int bi = 0; bi < s.n; ++bi)
        for (int g = 0; g < groups; ++g) {
            const double* xp = x->val.data() + ((size_t)bi * s.c + (size_t)g * cg) * plane;
            double m = 0.0;
            for (size_t i = 0; i < gsize; ++i) m += xp[i];
            m /= (double)gsize;
            double var = 0.0;
            for (size_t i = 0; i < gsize; ++i) var += (xp[i] - m) * (xp[i] - m);
            var /= (double)gsize;
            const double is = 1.0 / std::sqrt(var + eps);
            mean[(size_t)bi * groups + g] = m;
            inv_std[(size_t)bi * groups + g] = is;
            for (int cc = 0; cc < cg; ++cc) {
                const int c = g * cg + cc;
                const double* xr = x->val.data() + ((size_t)bi * s.c + c) * plane;
                double* yr = out.data() + ((size_t)bi * s.c + c) * plane;
                const double ga = gamma->val.v[c], be = beta->val.v[c];
                for (size_t i = 0; i < plane; ++i) yr[i] = (xr[i] - m) * is * ga + be;
            }
        }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, s, groups, cg, plane, gsize, mean, inv_std](Node& n) {
                    for (int bi = 0; bi < s.n; ++bi)
                        for (int g = 0; g < groups; ++g) {
                            const double m = mean[(size_t)bi * groups + g];
                            const double is = inv_std[(size_t)bi * groups + g];
                            double sum_g = 0.0, sum_gx = 0.0;
                            for (int cc = 0; cc < cg; ++cc) {
                                const int c = g * cg + cc;
                                const double* xr = x->val.data() + ((size_t)bi * s.c + c) * plane;
                                const double* gy = n.grad.data() + ((size_t)bi * s.c + c) * plane;
                                const double ga = gamma->val.v[c];
                                if (gamma->requires_grad || beta->requires_grad) {
                                    double acc_g = 0.0, acc_b = 0.0;
                                    for (size_t i = 0; i < plane; ++i) {
                                        acc_g += gy[i] * (xr[i] - m) * is;
                                        acc_b += gy[i];
                                    }
                                    if (gamma->requires_grad) gamma->grad_buf().v[c] += acc_g;
                                    if (beta->requires_grad) beta->grad_buf().v[c] += acc_b;
                                }
                                if (x->requires_grad) {
                                    for (size_t i = 0; i < plane; ++i) {
                                        const double gc = gy[i] * ga;
                                        sum_g += gc;
                                        sum_gx += gc * (xr[i] - m) * is;
                                    }
                                }
                            }
                            if (x->requires_grad) {
                                auto& gt = x->grad_buf();
                                const double mg = sum_g / (double)gsize;
                                const double mgx = sum_gx / (double)gsize;
                                for (int cc = 0; cc < cg; ++cc) {
                                    const int c = g * cg + cc;
                                    const double* xr = x->val.data() + ((size_t)bi * s.c + c) * plane;
                                    const double* gy = n.grad.data() + ((size_t)bi * s.c + c) * plane;
                                    double* go = gt.data() + ((size_t)bi * s.c + c) * plane;
                                    const double ga = gamma->val.v[c];
                                    for (size_t i = 0; i < plane; ++i) {
                                        const double gc = gy[i] * ga;
                                        const double xh = (xr[i] - m) * is;
                                        go[i] += is * (gc - mg - xh * mgx);
                                    }
                                }
                            }
                        }
                },
                "group_norm");
}

Var bmm_abt(const Var& a, const Var& b) {
    const Shape4 sa = a->val.shape, sb = b->val.shape;  // (G,Ta,C), (G,Tb,C)
    if (sa.n != sb.n || sa.h != sb.h)
        throw ValidationError("bmm_abt: shape mismatch " + sa.str() + " vs " + sb.str());
    const int G = sa.n, Ta = sa.c, Tb = sb.c, C = sa.h;
    Tensor4 out(G, Ta, Tb, 1);
#pragma omp parallel for schedule(static)
    for (int g = 0; g < G; ++g) {
        const double* ap = a->val.data() + (size_t)g * Ta * C;
        const double* bp = b->val.data() + (size_t)g * Tb * C;
        double* op = out.data() + (size_t)g * Ta * Tb;
        for (int i = 0; i < Ta; ++i)
            for (int j = 0; j < Tb; ++j) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) acc += ap[(size_t)i * C + c] * bp[(size_t)j * C + c];
                op[(size_t)i * Tb + j] = acc;
            }
    }
    return make(std::move(out), {a, b},
                [a, b, G, Ta, Tb, C](Node& n) {
                    if (a->requires_grad) {
                        auto& g = a->grad_buf();
#pragma omp parallel for schedule(static)
                        for (int gi = 0; gi < G; ++gi) {
                            const double* gy = n.grad.data() + (size_t)gi * Ta * Tb;
                            const double* bp = b->val.data() + (size_t)gi * Tb * C;
                            double* gp = g.data() + (size_t)gi * Ta * C;
                            for (int i = 0; i < Ta; ++i)
                                for (int j = 0; j < Tb; ++j) {
                                    const double gv = gy[(size_t)i * Tb + j];
                                    for (int c = 0; c < C; ++c)
                                        gp[(size_t)i * C + c] += gv * bp[(size_t)j * C + c];
                                }
                        }
                    }
                    if (b->requires_grad) {
                        auto& g = b->grad_buf();
#pragma omp parallel for schedule(static)
                        for (int gi = 0; gi < G; ++gi) {
                            const double* gy = n.grad.data() + (size_t)gi * Ta * Tb;
                            const double* ap = a->val.data() + (size_t)gi * Ta * C;
                            double* gp = g.data() + (size_t)gi * Tb * C;
                            for (int i = 0; i < Ta; ++i)
                                for (int j = 0; j < Tb; ++j) {
                                    const double gv = gy[(size_t)i * Tb + j];
                                    for (int c = 0; c < C; ++c)
                                        gp[(size_t)j * C + c] += gv * ap[(size_t)i * C + c];
                                }
                        }
                    }
                },
                "bmm_abt");
}

Var bmm_ab(const Var& a, const Var& b) {
    const Shape4 sa = a->val.shape, sb = b->val.shape;  // (G,Ta,Tb), (G,Tb,C)
    if (sa.n != sb.n || sa.h != sb.c)
        throw ValidationError("bmm_ab: shape mismatch " + sa.str() + " vs " + sb.str());
    const int G = sa.n, Ta = sa.c, Tb = sa.h, C = sb.h;
    Tensor4 out(G, Ta, C, 1);
#pragma omp parallel for schedule(static)
    for (int g = 0; g < G; ++g) {
        const double* ap = a->val.data() + (size_t)g * Ta * Tb;
        const double* bp = b->val.data() + (size_t)g * Tb * C;
        double* op = out.data() + (size_t)g * Ta * C;
        for (int i = 0; i < Ta; ++i)
            for (int j = 0; j < Tb; ++j) {
                const double av = ap[(size_t)i * Tb + j];
                for (int c = 0; c < C; ++c) op[(size_t)i * C + c] += av * bp[(size_t)j * C + c];
            }
    }
    return make(std::move(out), {a, b},
                [a, b, G, Ta, Tb, C](Node& n) {
                    if (a->requires_grad) {
                        auto& g = a->grad_buf();
#pragma omp parallel for schedule(static)
                        for (int gi = 0; gi < G; ++gi) {
                            const double* gy = n.grad.data() + (size_t)gi * Ta * C;
                            const double* bp = b->val.data() + (size_t)gi * Tb * C;
                            double* gp = g.data() + (size_t)gi * Ta * Tb;
                            for (int i = 0; i < Ta; ++i)
                                for (int j = 0; j < Tb; ++j) {
                                    double acc = 0.0;
                                    for (int c = 0; c < C; ++c)
                                        acc += gy[(size_t)i * C + c] * bp[(size_t)j * C + c];
                                    gp[(size_t)i * Tb + j] += acc;
                                }
                        }
                    }
                    if (b->requires_grad) {
                        auto& g = b->grad_buf();
#pragma omp parallel for schedule(static)
                        for (int gi = 0; gi < G; ++gi) {
                            const double* gy = n.grad.data() + (size_t)gi * Ta * C;
                            const double* ap = a->val.data() + (size_t)gi * Ta * Tb;
                            double* gp = g.data() + (size_t)gi * Tb * C;
                            for (int i = 0; i < Ta; ++i)
                                for (int j = 0; j < Tb; ++j) {
                                    const double av = ap[(size_t)i * Tb + j];
                                    for (int c = 0; c < C; ++c)
                                        gp[(size_t)j * C + c] += av * gy[(size_t)i * C + c];
                                }
                        }
                    }
                },
                "bmm_ab");
}

Var softmax_dim2(const Var& a) {
    const Shape4 s = a->val.shape;
    // layout is (G, T1, T2, 1): row-major rows of length T2
    const int G = s.n, T1 = s.c, T2 = s.h;
    Tensor4 out(s);
    for (int r = 0; r < G * T1; ++r) {
        const double* x = a->val.data() + (size_t)r * T2;
        double* y = out.data() + (size_t)r * T2;
        double m = x[0];
        for (int j = 1; j < T2; ++j) m = std::max(m, x[j]);
        double sum = 0.0;
        for (int j = 0; j < T2; ++j) {
            y[j] = std::exp(x[j] - m);
            sum += y[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < T2; ++j) y[j] *= inv;
    }
    return make(std::move(out), {a},
                [a, G, T1, T2](Node& n) {
                    auto& g = a->grad_buf();
                    for (int r = 0; r < G * T1; ++r) {
                        const double* y = n.val.data() + (size_t)r * T2;
                        const double* gy = n.grad.data() + (size_t)r * T2;
                        double dot = 0.0;
                        for (int j = 0; j < T2; ++j) dot += gy[j] * y[j];
                        double* gp = g.data() + (size_t)r * T2;
                        for (int j = 0; j < T2; ++j) gp[j] += y[j] * (gy[j] - dot);
                    }
                },
                "softmax_dim2");
}

Var add_head_bias(const Var& logits, const Var& bias, int heads) {
    const Shape4 s = logits->val.shape, sb = bias->val.shape;
    if (s.n % heads != 0 || sb.n != heads || sb.h != s.h || sb.c != s.c)
        throw ValidationError("add_head_bias: geometry mismatch");
    const size_t block = (size_t)s.h * s.c;
    Tensor4 out(s);
    for (int g = 0; g < s.n; ++g) {
        const int hh = g % heads;
        const double* lp = logits->val.data() + (size_t)g * block;
        const double* bp = bias->val.data() + (size_t)hh * block;
        double* op = out.data() + (size_t)g * block;
        for (size_t i = 0; i < block; ++i) op[i] = lp[i] + bp[i];
    }
    return make(std::move(out), {logits, bias},
                [logits, bias, heads, block](Node& n) {
                    const int G = n.val.shape.n;
                    if (logits->requires_grad) {
                        auto& g = logits->grad_buf();
                        for (int64_t i = 0; i < g.size(); ++i) g.v[i] += n.grad.v[i];
                    }
                    if (bias->requires_grad) {
                        auto& g = bias->grad_buf();
                        for (int gi = 0; gi < G; ++gi) {
                            const int hh = gi % heads;
                            const double* gy = n.grad.data() + (size_t)gi * block;
                            double* gp = g.data() + (size_t)hh * block;
                            for (size_t i = 0; i < block; ++i) gp[i] += gy[i];
                        }
                    }
                },
                "add_head_bias");
}

}  // namespace csr::ag
