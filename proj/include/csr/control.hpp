#ifndef CSR_CONTROL_HPP
#define CSR_CONTROL_HPP

#include <vector>

#include "csr/autograd.hpp"
#include "csr/params.hpp"
#include "csr/store.hpp"

namespace csr {

// The two control branches. DPM is a trainable copy of the backbone
// encoder+middle with a condition cross-attention and a window
// cross-attention against x_lr after each block; GSPM is the same copy with
// every attention removed. Both enter through a zero-initialized hint conv
// and exit through zero-initialized 1x1 taps, so the whole control path is a
// no-op at training start.

struct ControlSignals {
    std::vector<Tensor4> c;  // one per injection point
};

// Creates dpm.* / gspm.* / zero convs; copies encoder+middle weights from
// the loaded backbone when copy_from_backbone is set (the ControlNet recipe).
void build_control(ParamStore& ps, const RunConfig& cfg, Rng& rng, bool copy_from_backbone);

std::vector<ag::Var> dpm_forward_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                                       const ag::Var& x_lr, const std::vector<int>& t,
                                       const ag::Var& cond_token);
std::vector<ag::Var> gspm_forward_graph(ParamStore& ps, const RunConfig& cfg, const ag::Var& x_t,
                                        const ag::Var& x_lr, const std::vector<int>& t);
std::vector<ag::Var> fuse_control_graph(const std::vector<ag::Var>& a,
                                        const std::vector<ag::Var>& b);

ControlSignals dpm_forward(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                           const Tensor4& x_lr, const std::vector<int>& t, const Tensor4* p);
ControlSignals gspm_forward(ParamStore& ps, const RunConfig& cfg, const Tensor4& x_t,
                            const Tensor4& x_lr, const std::vector<int>& t);
ControlSignals fuse_control(const ControlSignals& a, const ControlSignals& b);

// Full control path as configured (DPM, optional GSPM, fusion).
std::vector<ag::Var> control_signals_graph(ParamStore& ps, const RunConfig& cfg,
                                           const ag::Var& x_t, const ag::Var& x_lr,
                                           const std::vector<int>& t, const ag::Var& cond_token);

}  // namespace csr

#endif
