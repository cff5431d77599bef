// Copyright (c) 2026 The femasr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace femasr::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Propagates `grad_out` (gradient w.r.t. this node's value) into the
/// gradient buffers of the parents. Entries of `parent_grads` are null for
/// parents that do not require gradients.
template <class T>
using BackwardFn =
    std::function<void(const Node<T>& self, std::span<const T> grad_out, std::span<std::vector<T>*> parent_grads)>;

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr<T>> parents;
    BackwardFn<T> backward;
};

/// Dense tensor handle. Copies share the underlying node; values are never
/// modified after construction except through `mutable_data()` on leaves
/// (the optimizer path).
template <class T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        if (ad::numel(shape) != data.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(NodePtr<T> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = ad::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }
    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = ad::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }
    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }
    T item() const {
        if (numel() != 1) throw std::invalid_argument("Tensor::item on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return !node_->backward; }
    const char* op() const { return node_->op; }
    const NodePtr<T>& node() const { return node_; }

    /// Leaf-only in-place access for parameter updates.
    std::vector<T>& mutable_data() {
        if (!is_leaf()) throw std::logic_error("Tensor::mutable_data on non-leaf tensor");
        return node_->data;
    }

    /// New leaf holding a copy of the values, detached from any graph.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    /// New leaf holding a copy of the values with requires_grad set.
    Tensor clone_leaf(bool requires_grad = true) const { return Tensor(shape(), node_->data, requires_grad); }

private:
    NodePtr<T> node_;
};

/// Builds an op result. The graph edge is only recorded when some parent
/// requires a gradient.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op, std::vector<NodePtr<T>> parents,
                      BackwardFn<T> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

/// Gradients of a scalar with respect to every requires_grad leaf reached.
template <class T>
class Gradients {
public:
    bool has(const Tensor<T>& t) const { return t.defined() && grads_.count(t.node().get()) > 0; }

    /// Gradient for `t`; all zeros when no path from the output reaches it.
    std::vector<T> operator[](const Tensor<T>& t) const {
        auto it = grads_.find(t.node().get());
        if (it == grads_.end()) return std::vector<T>(t.numel(), T(0));
        return it->second;
    }

    const std::vector<T>* find(const Tensor<T>& t) const {
        auto it = grads_.find(t.node().get());
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::vector<T>* find(const Tensor<T>& t) {
        auto it = grads_.find(t.node().get());
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::size_t size() const { return grads_.size(); }
    bool empty() const { return grads_.empty(); }

private:
    template <class U>
    friend Gradients<U> backward(const Tensor<U>& output);

    std::unordered_map<const Node<T>*, std::vector<T>> grads_;
    // Keys are raw pointers; the leaves are held so addresses cannot be reused.
    std::vector<NodePtr<T>> keep_alive_;
};

/// Reverse-mode sweep from a scalar output.
template <class T>
Gradients<T> backward(const Tensor<T>& output) {
    if (output.numel() != 1)
        throw std::invalid_argument("backward: output must be a scalar, got shape " + shape_str(output.shape()));
    Gradients<T> result;
    if (!output.requires_grad()) return result;

    // Iterative post-order DFS; graphs can be a few hundred nodes deep.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    visited.insert(output.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            const NodePtr<T>& pp = n->parents[next++];
            Node<T>* p = pp.get();
            if (p->requires_grad && visited.insert(p).second) {
                if (!p->backward) result.keep_alive_.push_back(pp);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    std::unordered_map<Node<T>*, std::vector<T>> grads;
    grads[output.node().get()] = std::vector<T>(1, T(1));
    std::vector<std::vector<T>*> parent_grads;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        auto g = grads.find(n);
        if (g == grads.end()) continue;
        if (!n->backward) continue;  // leaf
        // References into the map survive rehashing; iterators do not.
        const std::vector<T>& gout = g->second;
        parent_grads.assign(n->parents.size(), nullptr);
        for (std::size_t i = 0; i < n->parents.size(); ++i) {
            Node<T>* p = n->parents[i].get();
            if (!p->requires_grad) continue;
            auto& buf = grads[p];
            if (buf.empty()) buf.assign(p->data.size(), T(0));
            parent_grads[i] = &buf;
        }
        n->backward(*n, gout, parent_grads);
        grads.erase(n);
    }
    for (auto& [n, g] : grads) {
        if (n->backward) continue;
        result.grads_.emplace(n, std::move(g));
    }
    return result;
}

}  // namespace femasr::ad
