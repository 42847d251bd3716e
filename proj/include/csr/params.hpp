#ifndef CSR_PARAMS_HPP
#define CSR_PARAMS_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "csr/autograd.hpp"
#include "csr/store.hpp"
#include "csr/tensor.hpp"

namespace csr {

// Named-tensor registry with trainable flags and Adam moments. Insertion
// order is the serialization order, so checkpoints are reproducible.
class ParamStore {
public:
    struct Param {
        std::string name;
        Tensor4 value;
        bool trainable = false;
        Tensor4 m, v;        // Adam moments, allocated when first trained
        ag::Var node;        // leaf for the current graph, set by borrow()
    };

    // Registers a tensor; errors on duplicate names.
    Param& create(const std::string& name, Tensor4 value, bool trainable);
    bool has(const std::string& name) const;
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;

    // Leaf node for the current step's graph (cached per step).
    ag::Var borrow(const std::string& name);
    // Drops all cached nodes; grads live in the nodes, so this also clears them.
    void end_step();

    void set_trainable(const std::string& name, bool flag);
    // Applies `flag` to every param whose name starts with one of the prefixes.
    void set_trainable_by_prefix(const std::vector<std::string>& prefixes, bool flag);
    void freeze_all();

    std::vector<std::string> names() const;                // insertion order
    std::vector<std::string> trainable_names() const;

    // One Adam update over all trainable tensors with gradients this step.
    void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    int64_t step_count() const { return adam_t_; }
    void reset_optimizer();

    // Checkpoint conversion (f32 on disk, f64 in memory).
    std::vector<TensorRecord> to_records() const;
    // Loads values/flags for all records; creates params that do not exist yet.
    void load_records(const std::vector<TensorRecord>& records);

private:
    std::vector<std::unique_ptr<Param>> params_;
    std::map<std::string, size_t> index_;
    int64_t adam_t_ = 0;
};

// dims helper for records
std::vector<uint32_t> shape_dims(Shape4 s);
Shape4 dims_shape(const std::vector<uint32_t>& dims);

}  // namespace csr

#endif
