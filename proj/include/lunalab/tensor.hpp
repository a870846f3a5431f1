#pragma once

// Dense tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a cheap handle onto a shared node. Operations (see ops.hpp)
// create new nodes that remember their parents and a closure that pushes the
// node's gradient back into them. The graph is rebuilt on every forward pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lunalab/errors.hpp"

namespace lunalab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Multiply-add accounting. A counter is activated for the current thread with
// FlopCounter::Activate; FlopScope pushes a name segment so that records land
// under "block0.pack.scores"-style keys.

class FlopCounter {
public:
    class Activate {
    public:
        explicit Activate(FlopCounter& counter) : previous_(current()) { current() = &counter; }
        ~Activate() { current() = previous_; }
        Activate(const Activate&) = delete;
        Activate& operator=(const Activate&) = delete;

    private:
        FlopCounter* previous_;
    };

    void record(std::uint64_t multiply_adds) { counts_[scope_name()] += multiply_adds; }

    std::uint64_t total() const {
        std::uint64_t sum = 0;
        for (const auto& [name, count] : counts_) sum += count;
        return sum;
    }

    // Sum over every layer whose name ends with `suffix`.
    std::uint64_t total_matching(const std::string& suffix) const {
        std::uint64_t sum = 0;
        for (const auto& [name, count] : counts_) {
            if (name.size() >= suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
                sum += count;
            }
        }
        return sum;
    }

    const std::map<std::string, std::uint64_t>& by_layer() const { return counts_; }
    void reset() { counts_.clear(); }

    static FlopCounter*& current() {
        thread_local FlopCounter* active = nullptr;
        return active;
    }

    static std::vector<std::string>& scope_stack() {
        thread_local std::vector<std::string> stack;
        return stack;
    }

private:
    static std::string scope_name() {
        std::string name;
        for (const auto& part : scope_stack()) {
            if (!name.empty()) name += '.';
            name += part;
        }
        return name.empty() ? std::string("<root>") : name;
    }

    std::map<std::string, std::uint64_t> counts_;
};

class FlopScope {
public:
    explicit FlopScope(std::string name) { FlopCounter::scope_stack().push_back(std::move(name)); }
    ~FlopScope() { FlopCounter::scope_stack().pop_back(); }
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;
};

inline void record_flops(std::uint64_t multiply_adds) {
    if (auto* counter = FlopCounter::current()) counter->record(multiply_adds);
}

// Records the shape of every tensor produced by an operation while active.
class AllocationProbe {
public:
    class Activate {
    public:
        explicit Activate(AllocationProbe& probe) : previous_(current()) { current() = &probe; }
        ~Activate() { current() = previous_; }
        Activate(const Activate&) = delete;
        Activate& operator=(const Activate&) = delete;

    private:
        AllocationProbe* previous_;
    };

    void record(const Shape& shape) { shapes_.push_back(shape); }
    const std::vector<Shape>& shapes() const { return shapes_; }

    std::size_t largest() const {
        std::size_t best = 0;
        for (const auto& s : shapes_) best = std::max(best, shape_numel(s));
        return best;
    }

    bool saw_matrix(std::size_t rows, std::size_t cols) const {
        for (const auto& s : shapes_) {
            if (s.size() == 2 && s[0] == rows && s[1] == cols) return true;
        }
        return false;
    }

    static AllocationProbe*& current() {
        thread_local AllocationProbe* active = nullptr;
        return active;
    }

private:
    std::vector<Shape> shapes_;
};

// ---------------------------------------------------------------------------
// Gradient recording switch (thread-local). Evaluation passes disable it.

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---------------------------------------------------------------------------

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a backward pass reaches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorNode&)> propagate;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape.empty()) shape = {1};
        for (auto extent : shape) {
            if (extent == 0) throw ConfigError("tensor extents must be positive, got " + shape_str(shape));
        }
        if (shape_numel(shape) != values.size()) {
            throw ConfigError("tensor data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, fill), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values,
                         bool requires_grad = false) {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    static Tensor identity(std::size_t n) {
        std::vector<T> v(n * n, T(0));
        for (std::size_t i = 0; i < n; ++i) v[i * n + i] = T(1);
        return matrix(n, n, std::move(v));
    }

    // Builds an operation result. Parents and the propagate closure are kept
    // only if gradients are being recorded and some parent needs them.
    static Tensor from_op(Shape shape, std::vector<T> values,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void(Node&)> propagate) {
        Tensor out;
        out.node_ = std::make_shared<Node>();
        out.node_->shape = std::move(shape);
        out.node_->value = std::move(values);
        bool needs = false;
        if (grad_enabled()) {
            for (const auto& p : parents) needs = needs || (p && p->requires_grad);
        }
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->parents = std::move(parents);
            out.node_->propagate = std::move(propagate);
        }
        if (auto* probe = AllocationProbe::current()) probe->record(out.node_->shape);
        return out;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.size() >= 2 ? node_->shape[node_->shape.size() - 2] : 1; }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const T> data() const { return node_->value; }
    std::span<T> mutable_data() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    // Value copy without graph history.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;
};

// Populates grad on every requires_grad ancestor of a scalar loss.
// Leaf gradients accumulate across calls; call zero_grad() between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
        throw UsageError("backward() requires a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;

    using Node = TensorNode<T>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* node : order) {
        // Intermediate results start from zero; leaves keep what they have.
        if (node->propagate) node->grad.assign(node->value.size(), T(0));
        else node->ensure_grad();
    }
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->propagate) {
            for (auto& p : node->parents) {
                if (p->requires_grad) p->ensure_grad();
            }
            node->propagate(*node);
        }
    }
}

} // namespace lunalab
