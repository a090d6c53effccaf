#include "maco/tensor.hpp"

#include <sstream>

#include "maco/errors.hpp"

namespace maco {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != numel(shape_))
        throw ShapeError("tensor of shape " + shape_str(shape_) + " given " + std::to_string(values_.size()) +
                         " values");
}

std::size_t Tensor::rows() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return 1;
    return values_.size() / shape_.back();
}

std::size_t Tensor::cols() const { return shape_.empty() ? 1 : shape_.back(); }

Tensor Tensor::reshaped(Shape shape) const {
    if (numel(shape) != values_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
}

const Tensor& Var::value() const { return tape->value(id); }

double Var::item() const {
    const auto& v = value();
    if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(v.shape()));
    return v[0];
}

bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
    return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].requires_grad;
    if (!needs) {
        parents.clear();
        backward = nullptr;
    }
    nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(backward), needs});
    return Var{this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_buffer(std::size_t id) {
    auto& node = nodes_[id];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
}

void Tape::backward(Var root) {
    if (root.tape != this) throw StateError("backward root belongs to another tape");
    if (nodes_[root.id].value.size() != 1)
        throw ShapeError("backward root must be scalar, got " + shape_str(nodes_[root.id].value.shape()));
    for (auto& n : nodes_) n.grad.clear();
    grad_buffer(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
        auto& node = nodes_[i];
        if (node.grad.empty() || !node.backward) continue;
        node.backward(*this, i);
    }
}

}  // namespace maco
