// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/graph.hpp"

#include "mujica/error.hpp"

namespace mujica {

const Tensor& Var::val() const { return graph_->val(id_); }
const std::vector<int>& Var::shape() const { return graph_->val(id_).shape(); }
bool Var::requires_grad() const { return graph_->needs_grad(id_); }

Tensor Var::grad() const {
    if (graph_->has_grad(id_)) return graph_->grad_ref(id_);
    return Tensor(shape());
}

Var Graph::leaf(Tensor value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::make(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
    Node node;
    node.value = std::move(value);
    for (const Var& p : parents) {
        if (p.graph() != this) throw runtime_error("graph: op mixes nodes from different tapes");
        node.requires_grad = node.requires_grad || needs_grad(p.id());
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Graph::grad_acc(int id) {
    Node& node = nodes_[static_cast<size_t>(id)];
    if (!node.grad_ready) {
        node.grad = Tensor(node.value.shape());
        node.grad_ready = true;
    }
    return node.grad;
}

void Graph::backward(const Var& root) {
    if (root.graph() != this) throw runtime_error("graph: backward on foreign node");
    const Node& r = nodes_[static_cast<size_t>(root.id())];
    if (r.value.size() != 1) throw runtime_error("graph: backward root must be scalar");
    grad_acc(root.id())[0] = 1.0;
    for (int id = root.id(); id >= 0; --id) {
        Node& node = nodes_[static_cast<size_t>(id)];
        if (node.requires_grad && node.grad_ready && node.backward) node.backward(*this, id);
    }
}

Var Binder::operator()(Tensor& parameter, bool requires_grad) {
    auto it = bindings_.find(&parameter);
    if (it != bindings_.end()) return it->second;
    Var v = graph_->leaf(parameter, requires_grad);
    bindings_.emplace(&parameter, v);
    return v;
}

Tensor Binder::grad_of(const Tensor& parameter) const {
    auto it = bindings_.find(&parameter);
    if (it == bindings_.end()) return Tensor(parameter.shape());
    return it->second.grad();
}

bool Binder::bound(const Tensor& parameter) const {
    return bindings_.find(&parameter) != bindings_.end();
}

} // namespace mujica
