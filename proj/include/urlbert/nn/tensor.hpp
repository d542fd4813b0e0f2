// Reverse-mode differentiable tensor.
//
// A Tensor is a shared handle to a node in a dynamically built tape. Ops
// create new nodes whose backward closure accumulates into the parents'
// gradient buffers; Tensor::backward() walks the tape in reverse
// topological order. The scalar type is a template parameter so the same
// graph code runs at 32-bit for training and 64-bit for gradient checks.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace urlbert::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + std::string(why));
}

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables tape recording for the enclosing scope (evaluation passes).
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T{0});
    }
};

template <class T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (numel(shape) != data.size()) {
            throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                             std::to_string(numel(shape)) + " elements, got " +
                             std::to_string(data.size()));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T v) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{v}, requires_grad);
    }

    /// Wraps an op result; records the backward closure only when some input
    /// requires a gradient and recording is enabled.
    static Tensor from_op(Shape shape, std::vector<T> value, std::vector<Tensor> inputs,
                          std::function<void(Node<T>&)> backward_fn) {
        Tensor out(std::move(shape), std::move(value));
        if (!grad_enabled()) return out;
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        if (!any) return out;
        out.node_->requires_grad = true;
        out.node_->leaf = false;
        for (auto& in : inputs) {
            if (in.defined()) out.node_->parents.push_back(in.node_);
        }
        out.node_->backward_fn = std::move(backward_fn);
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    /// Empty span when no gradient has been accumulated.
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool is_leaf() const { return node_->leaf; }

    T item() const {
        if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->value[0];
    }

    void zero_grad() { node_->grad.clear(); }

    /// Leaf copy sharing no history.
    Tensor detach() const { return Tensor(shape(), node_->value); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

    /// Reverse sweep from a scalar. Intermediate gradients are reset at the
    /// start of every sweep; leaf gradients accumulate until zero_grad().
    void backward() const {
        if (size() != 1) throw ShapeError("backward: root " + shape_str(shape()) + " is not a scalar");
        if (!node_->requires_grad) return;
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node<T>* p = n->parents[idx++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        for (auto* n : order) {
            if (!n->leaf) n->grad.assign(n->value.size(), T{0});
        }
        node_->ensure_grad();
        node_->grad[0] += T{1};
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward_fn) (*it)->backward_fn(**it);
        }
    }

  private:
    std::shared_ptr<Node<T>> node_;
};

}  // namespace urlbert::nn
