#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "san/tensor.hpp"

namespace san {

namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording for its lifetime (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into its parents' grads.
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.empty()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a value in the dynamic computation graph. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T(0));
    }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates the result node of an op. When recording is off, or no input needs
/// a gradient, the node is a plain constant and `backward` is dropped.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node());
        node->backward_fn = std::move(backward);
    }
    return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar. Gradients accumulate into every reachable
/// node that requires one; leaf grads (parameters) persist until zeroed.
template <class T>
void backward(const Var<T>& root) {
    if (!root.requires_grad()) return;
    if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root, got " + root.shape().str());

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    // Interior grads are scratch; drop them so a second sweep starts clean.
    for (Node<T>* node : order)
        if (!node->parents.empty()) node->grad = Tensor<T>();
}

}  // namespace san
