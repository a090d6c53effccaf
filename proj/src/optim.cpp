#include "maco/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "maco/errors.hpp"
#include "maco/ops.hpp"
#include "maco/rng.hpp"

namespace maco {

Parameter& ParameterSet::add(std::string name, Tensor value, bool decay) {
    if (contains(name)) throw StateError("duplicate parameter name " + name);
    params_.push_back(Parameter{std::move(name), std::move(value), decay});
    return params_.back();
}

std::size_t ParameterSet::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return i;
    throw StateError("unknown parameter " + name);
}

Parameter& ParameterSet::get(const std::string& name) { return params_[index_of(name)]; }
const Parameter& ParameterSet::get(const std::string& name) const { return params_[index_of(name)]; }

bool ParameterSet::contains(const std::string& name) const {
    return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

namespace {

void check_grads(const ParameterSet& params, const Gradients& grads, double lr) {
    if (grads.size() != params.size())
        throw ShapeError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params.size()) + " parameters");
    if (!(lr >= 0.0)) throw ParameterError("optimizer: learning rate must be non-negative");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        const auto& p = params.items()[i];
        if (!grads[i].empty() && grads[i].size() != p.value.size())
            throw ShapeError("optimizer: gradient for " + p.name + " has " + std::to_string(grads[i].size()) +
                             " entries, parameter " + shape_str(p.value.shape()));
        for (double g : grads[i])
            if (!std::isfinite(g)) throw TrainingError("non-finite gradient for parameter " + p.name);
    }
}

void ensure_slots(std::vector<std::vector<double>>& slots, const ParameterSet& params) {
    if (slots.empty())
        for (const auto& p : params.items()) slots.emplace_back(p.value.size(), 0.0);
    if (slots.size() != params.size()) throw StateError("optimizer state does not match parameter set");
}

}  // namespace

void adamw_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, double lr,
                const AdamWConfig& cfg) {
    check_grads(params, grads, lr);
    ensure_slots(state.first, params);
    ensure_slots(state.second, params);
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].empty()) continue;
        auto& p = params.items()[i];
        auto& m = state.first[i];
        auto& v = state.second[i];
        auto values = p.value.values();
        const double decay = p.decay ? lr * cfg.weight_decay : 0.0;
        for (std::size_t j = 0; j < values.size(); ++j) {
            const double g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            values[j] -= decay * values[j];
            values[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
        }
    }
}

void sgd_momentum_step(ParameterSet& params, const Gradients& grads, OptimizerState& state, double lr,
                       const SgdConfig& cfg) {
    check_grads(params, grads, lr);
    ensure_slots(state.first, params);
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].empty()) continue;
        auto& p = params.items()[i];
        auto& vel = state.first[i];
        auto values = p.value.values();
        for (std::size_t j = 0; j < values.size(); ++j) {
            double g = grads[i][j];
            if (p.decay) g += cfg.weight_decay * values[j];
            vel[j] = cfg.momentum * vel[j] + g;
            values[j] -= lr * vel[j];
        }
    }
}

double lr_schedule(std::uint64_t step, std::uint64_t warmup_steps, std::uint64_t total_steps, double base_lr) {
    if (warmup_steps >= total_steps && total_steps > 0)
        throw ParameterError("lr_schedule: warmup_steps must be below total_steps");
    if (step > total_steps) throw ParameterError("lr_schedule: step beyond total_steps");
    if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps == 0) return base_lr;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

GradCheckResult finite_diff_check(const ScalarFn& f, const Tensor& x, double h, double floor) {
    if (!(h > 0.0)) throw ParameterError("finite_diff_check: step must be positive");
    GradCheckResult res;
    {
        Tape tape;
        Var xv = tape.parameter(x);
        Var y = f(tape, xv);
        if (!std::isfinite(y.item())) throw OracleError("finite_diff_check: non-finite function value");
        tape.backward(y);
        const auto& g = tape.grad(xv);
        res.analytic = g.empty() ? std::vector<double>(x.size(), 0.0) : g;
    }
    auto eval = [&](const Tensor& at) {
        Tape tape;
        const double v = f(tape, tape.constant(at)).item();
        if (!std::isfinite(v)) throw OracleError("finite_diff_check: non-finite function value");
        return v;
    };
    res.numeric.resize(x.size());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = eval(probe);
        probe[i] = orig - h;
        const double fm = eval(probe);
        probe[i] = orig;
        res.numeric[i] = (fp - fm) / (2.0 * h);
        const double a = res.analytic[i], n = res.numeric[i];
        const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_index = i;
        }
    }
    return res;
}

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Fixed random projection so that every output coordinate carries a distinct weight.
Var weighted_sum(Tape& tape, Var y, std::uint64_t seed) {
    Rng rng(seed);
    Var w = tape.constant(random_tensor(rng, y.shape()));
    return ops::sum(ops::mul(y, w));
}

}  // namespace

std::vector<GradCheckCase> registered_op_checks(std::uint64_t seed) {
    using namespace ops;
    Rng rng(seed);
    const std::uint64_t ws = derive_seed(seed, 1000);
    std::vector<GradCheckCase> cases;
    auto add_case = [&](std::string name, ScalarFn fn, Tensor input) {
        cases.push_back({std::move(name), std::move(fn), std::move(input)});
    };
    const Tensor other34 = random_tensor(rng, {3, 4});
    const Tensor other42 = random_tensor(rng, {4, 2});
    const Tensor bias4 = random_tensor(rng, {4});

    add_case("matmul_left", [=](Tape& t, Var x) { return weighted_sum(t, matmul(x, t.constant(other42)), ws); },
             random_tensor(rng, {3, 4}));
    add_case("matmul_right", [=](Tape& t, Var x) { return weighted_sum(t, matmul(t.constant(other34), x), ws); },
             random_tensor(rng, {4, 2}));
    add_case("add", [=](Tape& t, Var x) { return weighted_sum(t, add(x, t.constant(other34)), ws); },
             random_tensor(rng, {3, 4}));
    add_case("add_fanout", [=](Tape& t, Var x) { return weighted_sum(t, add(x, x), ws); }, random_tensor(rng, {3, 4}));
    add_case("sub", [=](Tape& t, Var x) { return weighted_sum(t, sub(t.constant(other34), x), ws); },
             random_tensor(rng, {3, 4}));
    add_case("mul", [=](Tape& t, Var x) { return weighted_sum(t, mul(x, x), ws); }, random_tensor(rng, {3, 4}));
    add_case("scale", [=](Tape& t, Var x) { return weighted_sum(t, scale(x, -1.7), ws); }, random_tensor(rng, {3, 4}));
    add_case("mul_scalar", [=](Tape& t, Var x) {
        return weighted_sum(t, mul_scalar(t.constant(other34), x), ws);
    }, random_tensor(rng, {1}));
    add_case("add_row_vector", [=](Tape& t, Var x) {
        return weighted_sum(t, add_row_vector(t.constant(other34), x), ws);
    }, random_tensor(rng, {4}));
    add_case("mul_rows", [=](Tape& t, Var x) { return weighted_sum(t, mul_rows(t.constant(other34), x), ws); },
             random_tensor(rng, {3}));
    add_case("transpose", [=](Tape& t, Var x) { return weighted_sum(t, transpose(x), ws); }, random_tensor(rng, {3, 4}));
    add_case("exp", [=](Tape& t, Var x) { return weighted_sum(t, exp(x), ws); }, random_tensor(rng, {3, 4}));
    add_case("log", [=](Tape& t, Var x) { return weighted_sum(t, log(x), ws); }, random_tensor(rng, {3, 4}, 0.5, 2.0));
    add_case("reciprocal", [=](Tape& t, Var x) { return weighted_sum(t, reciprocal(x), ws); },
             random_tensor(rng, {3, 4}, 0.5, 2.0));
    add_case("square", [=](Tape& t, Var x) { return weighted_sum(t, square(x), ws); }, random_tensor(rng, {3, 4}));
    add_case("softplus", [=](Tape& t, Var x) { return weighted_sum(t, softplus(x), ws); },
             random_tensor(rng, {3, 4}, -4.0, 4.0));
    add_case("gelu", [=](Tape& t, Var x) { return weighted_sum(t, gelu(x), ws); }, random_tensor(rng, {3, 4}, -3.0, 3.0));
    add_case("mean", [=](Tape&, Var x) { return mean(mul(x, x)); }, random_tensor(rng, {3, 4}));
    add_case("row_sum", [=](Tape& t, Var x) { return weighted_sum(t, row_sum(x), ws); }, random_tensor(rng, {3, 4}));
    add_case("softmax_rows", [=](Tape& t, Var x) { return weighted_sum(t, softmax_rows(x, 0.5), ws); },
             random_tensor(rng, {3, 4}));
    add_case("log_softmax_rows", [=](Tape& t, Var x) { return weighted_sum(t, log_softmax_rows(x), ws); },
             random_tensor(rng, {3, 4}));
    add_case("softmax_cross_entropy", [=](Tape&, Var x) { return scale(sum(diag(log_softmax_rows(x))), -1.0 / 4); },
             random_tensor(rng, {4, 4}, -2.0, 2.0));
    add_case("diag", [=](Tape& t, Var x) { return weighted_sum(t, diag(x), ws); }, random_tensor(rng, {3, 3}));
    add_case("layer_norm_input", [=](Tape& t, Var x) {
        return weighted_sum(t, layer_norm(x, t.constant(bias4), t.constant(bias4)), ws);
    }, random_tensor(rng, {3, 4}));
    add_case("layer_norm_gain", [=](Tape& t, Var x) {
        return weighted_sum(t, layer_norm(t.constant(other34), x, t.constant(bias4)), ws);
    }, random_tensor(rng, {4}));
    add_case("layer_norm_bias", [=](Tape& t, Var x) {
        return weighted_sum(t, layer_norm(t.constant(other34), t.constant(bias4), x), ws);
    }, random_tensor(rng, {4}));
    add_case("l2_normalize_rows", [=](Tape& t, Var x) { return weighted_sum(t, l2_normalize_rows(x), ws); },
             random_tensor(rng, {3, 4}));
    add_case("gather_rows", [=](Tape& t, Var x) {
        const std::size_t rows[] = {2, 0, 2};
        return weighted_sum(t, gather_rows(x, rows), ws);
    }, random_tensor(rng, {3, 4}));
    add_case("scatter_rows", [=](Tape& t, Var x) {
        const std::size_t rows[] = {4, 1, 2};
        return weighted_sum(t, scatter_rows(x, rows, 5, t.constant(bias4)), ws);
    }, random_tensor(rng, {3, 4}));
    add_case("scatter_rows_fill", [=](Tape& t, Var x) {
        const std::size_t rows[] = {4, 1, 2};
        return weighted_sum(t, scatter_rows(t.constant(other34), rows, 5, x), ws);
    }, random_tensor(rng, {4}));
    add_case("concat_rows", [=](Tape& t, Var x) {
        const Var parts[] = {x, t.constant(other34), x};
        return weighted_sum(t, concat_rows(parts), ws);
    }, random_tensor(rng, {3, 4}));
    add_case("segment_mean", [=](Tape& t, Var x) { return weighted_sum(t, segment_mean(x, 2), ws); },
             random_tensor(rng, {4, 3}));
    add_case("reshape", [=](Tape& t, Var x) { return weighted_sum(t, reshape(x, {2, 6}), ws); },
             random_tensor(rng, {3, 4}));
    add_case("bilinear_upsample", [=](Tape& t, Var x) { return weighted_sum(t, bilinear_upsample(x, 7, 5), ws); },
             random_tensor(rng, {3, 3}));
    const Tensor kv = random_tensor(rng, {6, 4});
    const std::vector<std::uint8_t> mask = {1, 1, 0, 1, 0, 1};
    add_case("attention_query", [=](Tape& t, Var x) {
        Var k = t.constant(kv);
        return weighted_sum(t, attention(x, k, k, 2, 3, 2, mask), ws);
    }, random_tensor(rng, {6, 4}));
    add_case("attention_key", [=](Tape& t, Var x) {
        Var q = t.constant(kv);
        return weighted_sum(t, attention(q, x, q, 2, 3, 2), ws);
    }, random_tensor(rng, {6, 4}));
    add_case("attention_value", [=](Tape& t, Var x) {
        Var q = t.constant(kv);
        return weighted_sum(t, attention(q, q, x, 2, 3, 2, mask), ws);
    }, random_tensor(rng, {6, 4}));
    add_case("attention_self", [=](Tape& t, Var x) { return weighted_sum(t, attention(x, x, x, 3, 2, 2), ws); },
             random_tensor(rng, {6, 4}));
    return cases;
}

}  // namespace maco
