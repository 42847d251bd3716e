#ifndef CSR_AUTOGRAD_HPP
#define CSR_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <vector>

#include "csr/tensor.hpp"

namespace csr::ag {

// Define-by-run reverse-mode tape over Tensor4. Ops compute forward eagerly
// and record a closure that scatters the output gradient into the inputs.
struct Node {
    Tensor4 val;
    Tensor4 grad;  // allocated on first use during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backprop;
    const char* op = "leaf";

    Tensor4& grad_buf() {
        if (grad.size() == 0) grad = Tensor4(val.shape);
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor4 value, bool requires_grad = false);
Var constant(Tensor4 value);

// Seeds d(root)=1 (root must be scalar) and propagates in reverse
// topological order.
void backward(const Var& root);

// ---- elementwise / scalar ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);
Var exp_(const Var& a);
Var silu(const Var& a);
Var mean_all(const Var& a);
Var mse(const Var& a, const Var& b);

// ---- structural ----
Var reshape(const Var& a, Shape4 s);  // same element order
Var repeat_batch(const Var& a, int times);  // (1,c,h,w) -> (times,c,h,w)
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& a, int c0, int c1);
// x:(B,C,H,W) + v:(B,C,1,1), broadcast over spatial dims
Var add_channel_vec(const Var& x, const Var& v);

// ---- conv / pooling ----
Var conv2d(const Var& x, const Var& w, const Var& b, ConvSpec spec);
Var nearest_up2(const Var& x);
Var global_avg_pool(const Var& x);  // (B,C,H,W) -> (B,C,1,1)

// ---- token layout ----
// (B,C,H,W) <-> (B,H*W,C,1)
Var to_tokens(const Var& x);
Var from_tokens(const Var& t, int h, int w);
// (B,C,H,W) -> (B*N, side^2, C, 1), row-major windows and positions
Var window_partition(const Var& x, int side);
Var window_merge(const Var& t, int side, int b, int h, int w);
// (G,T,C,1) <-> (G*heads, T, C/heads, 1)
Var split_heads(const Var& t, int heads);
Var merge_heads(const Var& t, int heads);

// ---- token math ----
// t:(G,T,Cin,1), w:(Cout,Cin,1,1), b:(1,Cout,1,1) or null
Var linear_tokens(const Var& t, const Var& w, const Var& b);
Var layer_norm_tokens(const Var& t, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);
// (G,Ta,C) x (G,Tb,C) -> (G,Ta,Tb)
Var bmm_abt(const Var& a, const Var& b);
// (G,Ta,Tb) x (G,Tb,C) -> (G,Ta,C)
Var bmm_ab(const Var& a, const Var& b);
Var softmax_dim2(const Var& a);
// logits:(G*heads,Tq,Tk,1), bias:(heads,Tq,Tk,1)
Var add_head_bias(const Var& logits, const Var& bias, int heads);

}  // namespace csr::ag

#endif
