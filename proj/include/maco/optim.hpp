#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "maco/tensor.hpp"

namespace maco {

struct Parameter {
    std::string name;
    Tensor value;
    bool decay = true;  // participates in decoupled weight decay
};

/// Ordered, name-addressable set of learnable tensors.
class ParameterSet {
public:
    Parameter& add(std::string name, Tensor value, bool decay = true);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    std::vector<Parameter>& items() { return params_; }
    const std::vector<Parameter>& items() const { return params_; }
    std::size_t index_of(const std::string& name) const;

private:
    std::vector<Parameter> params_;
};

using Gradients = std::vector<std::vector<double>>;

struct AdamWConfig {
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

struct OptimizerState {
    std::vector<std::vector<double>> first;   // AdamW m, or SGD velocity
    std::vector<std::vector<double>> second;  // AdamW v; empty for SGD
    std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update with bias-corrected moments.
/// grads[i] aligns with params.items()[i]; an empty entry means the parameter took no
/// part in the loss and is left untouched, moments included.
void adamw_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, double lr,
                const AdamWConfig& cfg = {});

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 0.0;
};

void sgd_momentum_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, double lr,
                       const SgdConfig& cfg = {});

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0 at total_steps.
double lr_schedule(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double base_lr);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::vector<double> analytic;
    std::vector<double> numeric;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Central-difference check of the tape gradient of f at x.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, floor).
GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h = 1e-4, double floor = 1e-5);

struct GradCheckCase {
    std::string name;
    ScalarFn fn;
    Tensor input;
};

/// Every differentiable primitive wrapped as a scalar function on a random input.
std::vector<GradCheckCase> registered_op_checks(std::uint64_t seed);

}  // namespace maco
