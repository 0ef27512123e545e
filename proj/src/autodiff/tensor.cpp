#include "tame/autodiff/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace tame::ad {

std::string Shape::str() const {
    std::ostringstream os;
    os << "[" << rows << "x" << cols << "]";
    return os.str();
}

ShapeError::ShapeError(const std::string& op, Shape a, Shape b)
    : std::invalid_argument(op + ": shape mismatch " + a.str() + " vs " + b.str()), lhs(a), rhs(b) {}

namespace detail {

namespace {
std::atomic<std::uint64_t> g_sequence{0};
thread_local int g_no_grad_depth = 0;
}  // namespace

std::uint64_t next_sequence() { return g_sequence.fetch_add(1, std::memory_order_relaxed) + 1; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }

Matrix Var::grad() const {
    if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
    return node_->grad;
}

double Var::item() const {
    if (rows() != 1 || cols() != 1) throw ShapeError("item", shape(), Shape{1, 1});
    return node_->value(0, 0);
}

Var constant(Matrix value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->seq = detail::next_sequence();
    return Var(std::move(n));
}

Var parameter(Matrix value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->seq = detail::next_sequence();
    return Var(std::move(n));
}

Var scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Var make_result(Matrix value, std::vector<Var> parents, std::function<void(detail::Node&)> vjp) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->seq = detail::next_sequence();
    if (detail::grad_enabled()) {
        bool any = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.ptr());
            n->backward = std::move(vjp);
        }
    }
    return Var(std::move(n));
}

ComputationTape::ComputationTape(const Var& loss) {
    if (!loss.requires_grad()) return;
    std::unordered_set<detail::Node*> seen;
    std::vector<detail::Node*> stack{loss.node()};
    seen.insert(loss.node());
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        nodes_.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes_.begin(), nodes_.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
}

const Matrix& Gradients::at(const Var& v) const {
    auto it = grads_.find(v.node());
    if (it == grads_.end()) throw std::out_of_range("Gradients::at: tensor has no gradient");
    return it->second;
}

Gradients backward(const Var& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward (loss must be scalar)", loss.shape(), Shape{1, 1});

    Gradients out;
    ComputationTape tape(loss);
    if (tape.size() == 0) return out;

    for (auto* n : tape.nodes()) n->grad.resize(0, 0);
    loss.node()->grad = Matrix::Ones(1, 1);

    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        detail::Node* n = *it;
        if (n->grad.size() == 0) continue;
        if (n->backward) {
            n->backward(*n);
        } else {
            out.insert(n, n->grad);
        }
    }
    return out;
}

}  // namespace tame::ad
