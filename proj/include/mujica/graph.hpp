// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mujica/tensor.hpp"

namespace mujica {

class Graph;

/// Handle to a node on a Graph tape. Values are computed eagerly when ops are
/// applied; gradients exist after Graph::backward.
class Var {
public:
    Var() = default;

    bool defined() const { return graph_ != nullptr; }
    Graph* graph() const { return graph_; }
    int id() const { return id_; }

    const Tensor& val() const;
    const std::vector<int>& shape() const;
    bool requires_grad() const;
    /// Gradient accumulated by backward(); zeros if this node never received one.
    Tensor grad() const;

private:
    friend class Graph;
    Var(Graph* graph, int id) : graph_(graph), id_(id) {}

    Graph* graph_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so iterating
/// ids backwards from the loss is a valid topological order.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, int)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Appends an op node. `backward` reads grad(self) and accumulates into
    /// the parents via grad_acc(); it runs only when self received gradient.
    Var make(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    /// Backpropagates from a scalar (size-1) node.
    void backward(const Var& root);

    const Tensor& val(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad_ready; }

    /// Gradient accumulation buffer, zero-allocated on first use.
    Tensor& grad_acc(int id);
    const Tensor& grad_ref(int id) const { return nodes_[static_cast<size_t>(id)].grad; }

    size_t node_count() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_ready = false;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
};

/// Creates at most one leaf per parameter tensor within a graph and records
/// the binding so gradients can be read back after backward().
class Binder {
public:
    explicit Binder(Graph& graph) : graph_(&graph) {}

    Var operator()(Tensor& parameter, bool requires_grad = true);
    Var constant(const Tensor& value) { return graph_->constant(value); }

    Graph& graph() { return *graph_; }

    /// Gradient of a bound parameter (zeros when it never entered the graph
    /// or received no gradient).
    Tensor grad_of(const Tensor& parameter) const;
    bool bound(const Tensor& parameter) const;

private:
    Graph* graph_;
    std::unordered_map<const Tensor*, Var> bindings_;
};

} // namespace mujica
