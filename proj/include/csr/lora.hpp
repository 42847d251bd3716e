#ifndef CSR_LORA_HPP
#define CSR_LORA_HPP

#include <string>

#include "csr/autograd.hpp"
#include "csr/params.hpp"

namespace csr {

// Low-rank adapter of a linear or convolution layer. `down` maps the layer
// input to rank channels with the host layer's kernel geometry, `up` is a
// 1x1 map from rank to the output channels. `up` starts all-zero, so a fresh
// adapter leaves the host layer's output unchanged.
struct LoraAdapter {
    int rank = 16;
    double scale = 1.0;
    Tensor4 down;  // (rank, cin, kh, kw)
    Tensor4 up;    // (cout, rank, 1, 1)
};

// Fresh adapter for a weight of shape (cout, cin, kh, kw). The requested rank
// is clamped to min(in_features, out_features). down ~ N(0, 0.02^2), up = 0.
LoraAdapter make_lora(Shape4 weight_shape, int rank, Rng& rng, double scale = 1.0);

// base_out + scale * up(down(x)); base_out must be the host layer's output
// for the same x and conv geometry.
Tensor4 lora_apply(const Tensor4& base_out, const Tensor4& x, const LoraAdapter& a,
                   ConvSpec spec = {1, 0});

// W + scale * (up . down), flattened over (cin*kh*kw). Applying the merged
// weight equals lora_apply; merging twice doubles the update, so callers own
// the merged/unmerged bookkeeping.
Tensor4 lora_merge(const Tensor4& w, const LoraAdapter& a);

// Parameter-store plumbing: adapters live as "<layer>.lora.A" / "<layer>.lora.B".
void create_lora(ParamStore& ps, const std::string& layer, int rank, Rng& rng,
                 double scale = 1.0);
bool has_lora(const ParamStore& ps, const std::string& layer);
// scale * B(A(x)) as a graph node, with the host layer's conv geometry.
ag::Var lora_delta(ParamStore& ps, const std::string& layer, const ag::Var& x, ConvSpec spec);
ag::Var lora_delta_tokens(ParamStore& ps, const std::string& layer, const ag::Var& tokens);

}  // namespace csr

#endif
