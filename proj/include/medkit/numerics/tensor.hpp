#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "medkit/errors.hpp"

namespace medkit {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

// One vertex of the define-by-run graph. Children own their parents, never the
// other way round, so dropping the loss frees the whole step's graph.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

// Disables graph construction in the current thread while alive (evaluation,
// decoding, finite differences).
class NoGradGuard {
public:
    NoGradGuard() : previous_{detail::grad_enabled()} { detail::grad_enabled() = false; }
    ~NoGradGuard() { detail::grad_enabled() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Dense row-major f64 tensor with reverse-mode gradient support. Copies share
// the underlying buffer; a Tensor is a handle.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
        : node_{std::make_shared<detail::Node>()} {
        for (std::size_t d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
            }
        }
        if (shape_size(shape) != data.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return Tensor{std::move(shape), std::vector<double>(n, 0.0), requires_grad};
    }

    static Tensor full(Shape shape, double value) {
        const std::size_t n = shape_size(shape);
        return Tensor{std::move(shape), std::vector<double>(n, value)};
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor{Shape{}, {value}, requires_grad};
    }

    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        Shape s{values.size()};
        return Tensor{std::move(s), std::move(values), requires_grad};
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad = false) {
        std::vector<double> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols) {
                throw DimensionError("ragged matrix literal");
            }
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor{Shape{rows.size(), cols}, std::move(data), requires_grad};
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
    std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

    std::span<const double> data() const { return node_->data; }
    // Direct write access; only optimizers and initializers should use it.
    std::span<double> mutable_data() { return node_->data; }

    double item() const {
        if (size() != 1) {
            throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->data[0];
    }
    double operator[](std::size_t i) const { return node_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Same values, cut off from the graph.
    Tensor detach() const { return Tensor{shape(), node_->data}; }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

    // Builds an op result. Throws NumericError when a forward value is not
    // finite. The backward closure is attached only if some parent needs grad.
    static Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                              std::function<void(detail::Node&)> backward_fn, const char* op) {
        for (double v : data) {
            if (!std::isfinite(v)) {
                throw NumericError(std::string("non-finite value produced by ") + op);
            }
        }
        Tensor out;
        out.node_ = std::make_shared<detail::Node>();
        out.node_->shape = std::move(shape);
        out.node_->data = std::move(data);
        bool needs = false;
        if (!detail::grad_enabled()) {
            parents.clear();
        }
        for (const auto& p : parents) {
            needs = needs || p.requires_grad();
        }
        if (needs) {
            out.node_->requires_grad = true;
            for (auto& p : parents) {
                out.node_->parents.push_back(p.node_);
            }
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; intermediate gradients are recomputed from scratch each call.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        return;
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (detail::Node* n : order) {
        if (!n->is_leaf()) {
            n->grad.assign(n->data.size(), 0.0);
        }
    }
    loss.node().ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (!n->is_leaf()) {
            for (auto& p : n->parents) {
                if (p->requires_grad) {
                    p->ensure_grad();
                }
            }
            n->backward_fn(*n);
        }
    }
    for (detail::Node* n : order) {
        if (!n->is_leaf()) {
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

}  // namespace medkit
