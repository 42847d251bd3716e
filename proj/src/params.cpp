#include "csr/params.hpp"

#include <cmath>

namespace csr {

std::vector<uint32_t> shape_dims(Shape4 s) {
    return {(uint32_t)s.n, (uint32_t)s.c, (uint32_t)s.h, (uint32_t)s.w};
}

Shape4 dims_shape(const std::vector<uint32_t>& dims) {
    if (dims.size() != 4) throw ValidationError("expected 4 dims in record");
    return Shape4{(int)dims[0], (int)dims[1], (int)dims[2], (int)dims[3]};
}

ParamStore::Param& ParamStore::create(const std::string& name, Tensor4 value, bool trainable) {
    if (index_.count(name)) throw ValidationError("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Param>();
    p->name = name;
    p->value = std::move(value);
    p->trainable = trainable;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

ParamStore::Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return *params_[it->second];
}

const ParamStore::Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return *params_[it->second];
}

ag::Var ParamStore::borrow(const std::string& name) {
    Param& p = get(name);
    if (!p.node) p.node = ag::leaf(p.value, p.trainable);
    return p.node;
}

void ParamStore::end_step() {
    for (auto& p : params_) p->node.reset();
}

void ParamStore::set_trainable(const std::string& name, bool flag) {
    get(name).trainable = flag;
}

void ParamStore::set_trainable_by_prefix(const std::vector<std::string>& prefixes, bool flag) {
    for (auto& p : params_)
        for (const auto& pre : prefixes)
            if (p->name.rfind(pre, 0) == 0) {
                p->trainable = flag;
                break;
            }
}

void ParamStore::freeze_all() {
    for (auto& p : params_) p->trainable = false;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    for (const auto& p : params_) out.push_back(p->name);
    return out;
}

std::vector<std::string> ParamStore::trainable_names() const {
    std::vector<std::string> out;
    for (const auto& p : params_)
        if (p->trainable) out.push_back(p->name);
    return out;
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps) {
    ++adam_t_;
    const double bc1 = 1.0 - std::pow(beta1, (double)adam_t_);
    const double bc2 = 1.0 - std::pow(beta2, (double)adam_t_);
    for (auto& p : params_) {
        if (!p->trainable || !p->node || p->node->grad.size() == 0) continue;
        if (p->m.size() == 0) {
            p->m = Tensor4(p->value.shape);
            p->v = Tensor4(p->value.shape);
        }
        const Tensor4& g = p->node->grad;
        for (int64_t i = 0; i < p->value.size(); ++i) {
            p->m.v[i] = beta1 * p->m.v[i] + (1.0 - beta1) * g.v[i];
            p->v.v[i] = beta2 * p->v.v[i] + (1.0 - beta2) * g.v[i] * g.v[i];
            const double mhat = p->m.v[i] / bc1;
            const double vhat = p->v.v[i] / bc2;
            p->value.v[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

void ParamStore::reset_optimizer() {
    adam_t_ = 0;
    for (auto& p : params_) {
        p->m = Tensor4();
        p->v = Tensor4();
    }
}

std::vector<TensorRecord> ParamStore::to_records() const {
    std::vector<TensorRecord> out;
    for (const auto& p : params_) {
        TensorRecord r;
        r.name = p->name;
        r.dims = shape_dims(p->value.shape);
        r.trainable = p->trainable;
        r.data.resize((size_t)p->value.size());
        for (int64_t i = 0; i < p->value.size(); ++i) r.data[(size_t)i] = (float)p->value.v[i];
        out.push_back(std::move(r));
    }
    return out;
}

void ParamStore::load_records(const std::vector<TensorRecord>& records) {
    for (const auto& r : records) {
        Shape4 s = dims_shape(r.dims);
        Tensor4 t(s);
        for (size_t i = 0; i < r.data.size(); ++i) t.v[i] = (double)r.data[i];
        if (has(r.name)) {
            Param& p = get(r.name);
            if (!(p.value.shape == s))
                throw ValidationError("checkpoint tensor '" + r.name + "' has shape " + s.str() +
                                      " but model expects " + p.value.shape.str());
            p.value = std::move(t);
            p.trainable = r.trainable;
        } else {
            create(r.name, std::move(t), r.trainable);
        }
    }
}

}  // namespace csr
