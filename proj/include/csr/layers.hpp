#ifndef CSR_LAYERS_HPP
#define CSR_LAYERS_HPP

#include <string>

#include "csr/autograd.hpp"
#include "csr/params.hpp"

namespace csr {

// Parameter creation. All helpers are no-ops when the tensors already exist
// (checkpoint resume re-creates models over loaded stores).
void create_conv(ParamStore& ps, const std::string& name, int cout, int cin, int k,
                 Rng& rng, bool zero_init = false);
void create_linear(ParamStore& ps, const std::string& name, int cout, int cin,
                   Rng& rng, bool zero_init = false, bool with_bias = true);
void create_norm(ParamStore& ps, const std::string& name, int channels);
// ResBlock tensors: norm1/conv1 (+ skip projection when cin != cout,
// + temb projection when temb_dim > 0)
void create_resblock(ParamStore& ps, const std::string& prefix, int cin, int cout,
                     int temb_dim, Rng& rng);
// q/k/v/out projections with a pre-norm; kv_dim defaults to the feature dim
void create_attention(ParamStore& ps, const std::string& prefix, int dim, int kv_dim,
                      Rng& rng);

// Graph builders. `name` addresses tensors created by the helpers above.
ag::Var conv(ParamStore& ps, const std::string& name, const ag::Var& x, ConvSpec spec,
             bool use_lora = false);
ag::Var linear(ParamStore& ps, const std::string& name, const ag::Var& tokens,
               bool use_lora = false);
ag::Var norm_feature(ParamStore& ps, const std::string& name, const ag::Var& x);   // group norm
ag::Var norm_tokens(ParamStore& ps, const std::string& name, const ag::Var& t);    // layer norm

// h = conv1(silu(norm1(x [+ temb]))); out = skip(x) + h
ag::Var resblock(ParamStore& ps, const std::string& prefix, const ag::Var& x, int cout,
                 const ag::Var& temb, bool use_lora = false);

// Global self-attention over feature positions.
ag::Var self_attention(ParamStore& ps, const std::string& prefix, const ag::Var& x, int heads);
// Cross-attention from feature positions to a single condition token
// (B,1,C_kv,1); LoRA flag covers the q/k/v/out projections.
ag::Var cond_cross_attention(ParamStore& ps, const std::string& prefix, const ag::Var& x,
                             const ag::Var& cond_token, int heads, bool use_lora = false);

// Sinusoidal embedding of per-batch timesteps -> (B, dim, 1, 1).
Tensor4 timestep_embedding(const std::vector<int>& t, int dim, int max_period = 10000);

int norm_groups_for(int channels);

}  // namespace csr

#endif
