#ifndef CSR_WXATTN_HPP
#define CSR_WXATTN_HPP

#include <string>

#include "csr/autograd.hpp"
#include "csr/params.hpp"

namespace csr {

// Geometry of one window cross-attention: S-sided query windows over the
// feature grid, s-sided key/value windows over the LR latent grid, equal
// window counts on both sides.
struct WindowSpec {
    int S = 0;  // query window side
    int s = 0;  // key/value window side
    int N = 0;  // windows per image
};

// Picks S so the feature and LR grids partition into the same N windows.
// use_partition=false collapses to a single window per image.
WindowSpec make_window_spec(int feature_side, int lr_side, int window_s, bool use_partition);

// Plain-tensor window ops (thin wrappers over the autograd versions).
// x:(B,C,H,W) -> (B*N, side^2, C, 1), row-major windows and positions.
Tensor4 window_partition(const Tensor4& x, int side);
Tensor4 window_merge(const Tensor4& windows, int side, int b, int h, int w);

// Table index of the aligned relative position bias: query (qi,qj) on the
// S-grid maps to key-grid coordinates by nearest rounding of (qi*s/S),
// deltas clamped to the table range. Returns (ty, tx) into a
// (2*s_table-1)^2 table.
std::pair<int, int> aligned_bias_index(int S, int s, int s_table,
                                       int qi, int qj, int ki, int kj);

// Bias matrix B (S^2 x s^2) gathered from one head's table ((2*s_table-1)^2).
Tensor4 aligned_bias(const Tensor4& table, int S, int s);

namespace ag_ops {
// Gathered bias for all heads: table (heads, ts, ts, 1) -> (heads, S^2, s^2, 1).
csr::ag::Var aligned_bias(const csr::ag::Var& table, int S, int s);
}  // namespace ag_ops

// Creates the projections, pre-norms and per-head bias table for one window
// cross-attention layer. s_table fixes the bias table size.
void create_window_cross_attention(ParamStore& ps, const std::string& prefix, int dim,
                                   int lr_channels, int heads, int s_table, Rng& rng);

// softmax(Q K^T / sqrt(d_k) + B) V per window and head, output projection,
// residual added to x_d.
ag::Var window_cross_attention(ParamStore& ps, const std::string& prefix,
                               const ag::Var& x_d, const ag::Var& x_lr,
                               WindowSpec spec, int heads);

}  // namespace csr

#endif
