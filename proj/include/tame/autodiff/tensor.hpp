#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tame::ad {

// Dense row-major double matrix. Every tensor in the engine is rank 2;
// vectors are 1xN rows and scalars are 1x1.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Shape {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;

    Eigen::Index size() const { return rows * cols; }
    bool operator==(const Shape&) const = default;
    std::string str() const;
};

inline Shape shape_of(const Matrix& m) { return {m.rows(), m.cols()}; }

// Raised for incompatible operand shapes; carries both offending shapes.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& op, Shape a, Shape b);
    Shape lhs;
    Shape rhs;
};

namespace detail {

struct Node {
    Matrix value;
    Matrix grad;  // empty until backward touches the node
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
};

std::uint64_t next_sequence();
bool grad_enabled();

}  // namespace detail

// RAII guard: operations inside the scope record no backward closures.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Handle to a node of the define-by-run graph. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    Shape shape() const { return shape_of(node_->value); }
    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return node_ && !node_->backward; }
    // Gradient from the most recent backward pass; zero-filled if untouched.
    Matrix grad() const;
    double item() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

Var constant(Matrix value);
Var parameter(Matrix value);
Var scalar(double v);

// Builds a result node. If any parent requires grad (and grad mode is on)
// the node keeps its parents and the given vector-Jacobian product.
Var make_result(Matrix value, std::vector<Var> parents, std::function<void(detail::Node&)> vjp);

// Reachable requires-grad subgraph of `loss` in construction order.
class ComputationTape {
public:
    explicit ComputationTape(const Var& loss);
    const std::vector<detail::Node*>& nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<detail::Node*> nodes_;
};

// Leaf gradients produced by backward(), keyed by node identity.
class Gradients {
public:
    bool contains(const Var& v) const { return grads_.count(v.node()) != 0; }
    const Matrix& at(const Var& v) const;
    std::size_t size() const { return grads_.size(); }
    bool empty() const { return grads_.empty(); }

    void insert(detail::Node* n, Matrix g) { grads_[n] = std::move(g); }

private:
    std::unordered_map<const detail::Node*, Matrix> grads_;
};

// Reverse pass from a 1x1 loss. Leaf grads are reset, then filled.
Gradients backward(const Var& loss);

}  // namespace tame::ad
