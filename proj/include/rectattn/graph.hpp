#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rectattn/tensor.hpp"

namespace rectattn {

class Graph;

// Handle to a node recorded in a Graph. Cheap to copy; valid for the
// lifetime of the graph that produced it.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    // Gradient of the last backward() root w.r.t. this node; empty if the
    // node does not require grad.
    std::span<const double> grad() const;

private:
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

// Tape for reverse-mode differentiation.
//
// Nodes are appended in evaluation order, so the tape is topologically sorted
// by construction. backward() walks it once in reverse. A graph belongs to
// one thread from forward through backward.
class Graph {
public:
    // Receives the graph and the id of the node being differentiated; reads
    // the node's grad and accumulates into its inputs' grads.
    using BackwardFn = std::function<void(Graph&, std::uint32_t)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value, bool requires_grad = true);
    // Binds an external tensor; the node requires grad iff the tensor does.
    // After backward(), parameter_grads() exposes the gradient per binding.
    Var parameter(const Tensor& tensor);

    // Appends an op node. `backward` is dropped when no input requires grad.
    Var record(Tensor value, std::vector<std::uint32_t> inputs, BackwardFn backward);

    // Seeds d(root)/d(root) = 1 and propagates. root must hold one element.
    void backward(Var root);

    const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    std::span<double> grad(std::uint32_t id);
    std::span<const double> grad(std::uint32_t id) const;
    std::uint32_t input(std::uint32_t id, std::size_t k) const { return nodes_[id].inputs[k]; }

    struct Binding {
        const Tensor* tensor;
        Var var;
    };
    const std::vector<Binding>& bindings() const { return bindings_; }

    std::size_t size() const { return nodes_.size(); }
    std::size_t backward_visits() const { return backward_visits_; }

private:
    struct Node {
        Tensor value;
        std::vector<std::uint32_t> inputs;
        BackwardFn backward;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Var push(Node node);

    std::vector<Node> nodes_;
    std::vector<Binding> bindings_;
    std::size_t backward_visits_ = 0;
};

} // namespace rectattn
