#include "rectattn/graph.hpp"

#include <algorithm>

#include "rectattn/error.hpp"

namespace rectattn {

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }
std::span<const double> Var::grad() const {
    const Graph& g = *graph_;
    return g.grad(id_);
}

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Var Graph::parameter(const Tensor& tensor) {
    Node n;
    n.value = Tensor(tensor.shape(), std::vector<double>(tensor.values().begin(), tensor.values().end()));
    n.requires_grad = tensor.requires_grad();
    Var v = push(std::move(n));
    bindings_.push_back({&tensor, v});
    return v;
}

Var Graph::record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [this](std::uint32_t i) { return nodes_[i].requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
    n.inputs = std::move(inputs);
    return push(std::move(n));
}

std::span<double> Graph::grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

std::span<const double> Graph::grad(std::uint32_t id) const {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty()) return {};
    return n.grad;
}

void Graph::backward(Var root) {
    if (&root.graph() != this) throw Error("backward root belongs to another graph");
    if (nodes_[root.id()].value.size() != 1) {
        throw DimensionError("backward root must be scalar, got " +
                             shape_str(nodes_[root.id()].value.shape()));
    }
    for (Node& n : nodes_) n.grad.clear();
    if (!nodes_[root.id()].requires_grad) return;
    grad(root.id())[0] = 1.0;
    backward_visits_ = 0;
    for (std::uint32_t id = root.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.backward || n.grad.empty()) continue;
        ++backward_visits_;
        n.backward(*this, id);
    }
}

} // namespace rectattn
