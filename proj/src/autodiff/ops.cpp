#include "tame/autodiff/ops.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

namespace tame::ad {

namespace {

using detail::Node;

bool wants(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
const Matrix& in(const Node& n, std::size_t i) { return n.parents[i]->value; }
void acc(Node& n, std::size_t i, const Matrix& g) { n.parents[i]->accumulate(g); }

bool tracking(std::initializer_list<const Var*> vs) {
    if (!detail::grad_enabled()) return false;
    for (auto* v : vs)
        if (v->requires_grad()) return true;
    return false;
}

void same_shape(const char* op, const Var& a, const Var& b) {
    if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void check_axis(const char* op, int axis) {
    if (axis != 0 && axis != 1) throw std::invalid_argument(std::string(op) + ": axis must be 0 or 1");
}

Matrix softmax_rows(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        double m = x.row(r).maxCoeff();
        y.row(r) = (x.row(r).array() - m).exp();
        y.row(r) /= y.row(r).sum();
    }
    return y;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul", a.shape(), b.shape());
    Matrix v = a.value() * b.value();
    return make_result(std::move(v), {a, b}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad * in(n, 1).transpose());
        if (wants(n, 1)) acc(n, 1, in(n, 0).transpose() * n.grad);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt", a.shape(), b.shape());
    Matrix v = a.value() * b.value().transpose();
    return make_result(std::move(v), {a, b}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad * in(n, 1));
        if (wants(n, 1)) acc(n, 1, n.grad.transpose() * in(n, 0));
    });
}

Var transpose(const Var& a) {
    Matrix v = a.value().transpose();
    return make_result(std::move(v), {a}, [](Node& n) { acc(n, 0, n.grad.transpose()); });
}

Var add(const Var& a, const Var& b) {
    same_shape("add", a, b);
    Matrix v = a.value() + b.value();
    return make_result(std::move(v), {a, b}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad);
        if (wants(n, 1)) acc(n, 1, n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    same_shape("sub", a, b);
    Matrix v = a.value() - b.value();
    return make_result(std::move(v), {a, b}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad);
        if (wants(n, 1)) acc(n, 1, -n.grad);
    });
}

Var mul(const Var& a, const Var& b) {
    same_shape("mul", a, b);
    Matrix v = a.value().cwiseProduct(b.value());
    return make_result(std::move(v), {a, b}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad.cwiseProduct(in(n, 1)));
        if (wants(n, 1)) acc(n, 1, n.grad.cwiseProduct(in(n, 0)));
    });
}

Var scale(const Var& a, double s) {
    Matrix v = a.value() * s;
    return make_result(std::move(v), {a}, [s](Node& n) { acc(n, 0, n.grad * s); });
}

Var add_scalar(const Var& a, double s) {
    Matrix v = a.value().array() + s;
    return make_result(std::move(v), {a}, [](Node& n) { acc(n, 0, n.grad); });
}

Var add_row(const Var& a, const Var& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row", a.shape(), row.shape());
    Matrix v = a.value().rowwise() + row.value().row(0);
    return make_result(std::move(v), {a, row}, [](Node& n) {
        if (wants(n, 0)) acc(n, 0, n.grad);
        if (wants(n, 1)) acc(n, 1, n.grad.colwise().sum());
    });
}

Var softmax(const Var& a, int axis) {
    check_axis("softmax", axis);
    if (axis == 1) {
        Matrix y = softmax_rows(a.value());
        return make_result(y, {a}, [y](Node& n) {
            Eigen::VectorXd dot = n.grad.cwiseProduct(y).rowwise().sum();
            Matrix g = y.cwiseProduct(n.grad.colwise() - dot);
            acc(n, 0, g);
        });
    }
    Matrix y = softmax_rows(a.value().transpose()).transpose();
    return make_result(y, {a}, [y](Node& n) {
        Eigen::RowVectorXd dot = n.grad.cwiseProduct(y).colwise().sum();
        Matrix g = y.cwiseProduct(n.grad.rowwise() - dot);
        acc(n, 0, g);
    });
}

Var log(const Var& a) {
    if ((a.value().array() <= 0.0).any()) throw std::domain_error("log: non-positive input");
    Matrix v = a.value().array().log();
    return make_result(std::move(v), {a}, [](Node& n) { acc(n, 0, n.grad.cwiseQuotient(in(n, 0))); });
}

Var exp(const Var& a) {
    Matrix y = a.value().array().exp();
    return make_result(y, {a}, [y](Node& n) { acc(n, 0, n.grad.cwiseProduct(y)); });
}

Var relu(const Var& a) {
    Matrix v = a.value().cwiseMax(0.0);
    return make_result(std::move(v), {a}, [](Node& n) {
        Matrix g = (in(n, 0).array() > 0.0).select(n.grad, 0.0);
        acc(n, 0, g);
    });
}

Var gelu(const Var& a) {
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const Matrix& x = a.value();
    Matrix v(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
        double t = x.data()[i];
        v.data()[i] = 0.5 * t * (1.0 + std::erf(t * inv_sqrt2));
    }
    return make_result(std::move(v), {a}, [inv_sqrt2](Node& n) {
        const Matrix& x = in(n, 0);
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        Matrix g(x.rows(), x.cols());
        for (Index i = 0; i < x.size(); ++i) {
            double t = x.data()[i];
            double cdf = 0.5 * (1.0 + std::erf(t * inv_sqrt2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * t * t);
            g.data()[i] = n.grad.data()[i] * (cdf + t * pdf);
        }
        acc(n, 0, g);
    });
}

Var sum(const Var& a) {
    Matrix v = Matrix::Constant(1, 1, a.value().sum());
    return make_result(std::move(v), {a}, [](Node& n) {
        const Matrix& x = in(n, 0);
        acc(n, 0, Matrix::Constant(x.rows(), x.cols(), n.grad(0, 0)));
    });
}

Var sum(const Var& a, int axis) {
    check_axis("sum", axis);
    if (axis == 0) {
        Matrix v = a.value().colwise().sum();
        return make_result(std::move(v), {a}, [](Node& n) {
            Matrix g = n.grad.replicate(in(n, 0).rows(), 1);
            acc(n, 0, g);
        });
    }
    Matrix v = a.value().rowwise().sum();
    return make_result(std::move(v), {a}, [](Node& n) {
        Matrix g = n.grad.replicate(1, in(n, 0).cols());
        acc(n, 0, g);
    });
}

Var mean(const Var& a) {
    if (a.value().size() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var mean(const Var& a, int axis) {
    check_axis("mean", axis);
    Index n = axis == 0 ? a.rows() : a.cols();
    if (n == 0) throw std::invalid_argument("mean: empty axis");
    return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Var variance(const Var& a, int axis) {
    check_axis("variance", axis);
    // Work on columns; transpose axis-1 reductions through the same path.
    const Matrix x = axis == 0 ? a.value() : Matrix(a.value().transpose());
    const Index n = x.rows();
    if (n < 2) {
        throw std::invalid_argument("variance: need at least 2 elements along the reduced axis (denominator n-1), got " +
                                    std::to_string(n));
    }
    Eigen::RowVectorXd mu = x.colwise().mean();
    Matrix centered = x.rowwise() - mu;
    const double denom = static_cast<double>(n - 1);
    Matrix v = centered.colwise().squaredNorm() / denom;
    if (axis == 1) v.transposeInPlace();
    return make_result(std::move(v), {a}, [centered, denom, axis](Node& n) {
        // d/dx_i sum_j (x_j - mu)^2/(n-1) = 2(x_i - mu)/(n-1); the mean term cancels.
        if (axis == 0) {
            Matrix g = centered.array().rowwise() * (n.grad.row(0).array() * (2.0 / denom));
            acc(n, 0, g);
        } else {
            Matrix gt = centered.array().rowwise() * (n.grad.col(0).transpose().array() * (2.0 / denom));
            acc(n, 0, gt.transpose());
        }
    });
}

Var l1_distance(const Var& a, const Var& b) {
    same_shape("l1_distance", a, b);
    Matrix diff = a.value() - b.value();
    Matrix v = Matrix::Constant(1, 1, diff.cwiseAbs().sum());
    return make_result(std::move(v), {a, b}, [diff](Node& n) {
        // sign(0) = 0: subgradient midpoint at exact ties.
        Matrix s = diff.unaryExpr([](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); }) * n.grad(0, 0);
        if (wants(n, 0)) acc(n, 0, s);
        if (wants(n, 1)) acc(n, 1, -s);
    });
}

Var cosine_similarity(const Var& a, const Var& b) {
    if (a.value().size() != b.value().size()) throw ShapeError("cosine_similarity", a.shape(), b.shape());
    const auto av = a.value().reshaped<Eigen::RowMajor>();
    const auto bv = b.value().reshaped<Eigen::RowMajor>();
    const double na = av.norm();
    const double nb = bv.norm();
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
    const double c = av.dot(bv) / (na * nb);
    return make_result(Matrix::Constant(1, 1, c), {a, b}, [na, nb, c](Node& n) {
        const Matrix& x = in(n, 0);
        const Matrix& y = in(n, 1);
        const double g = n.grad(0, 0);
        if (wants(n, 0)) acc(n, 0, (y.reshaped<Eigen::RowMajor>(x.rows(), x.cols()) / (na * nb) - c * x / (na * na)) * g);
        if (wants(n, 1)) acc(n, 1, (x.reshaped<Eigen::RowMajor>(y.rows(), y.cols()) / (na * nb) - c * y / (nb * nb)) * g);
    });
}

Var l2_normalize_rows(const Var& a, double eps) {
    Eigen::VectorXd norms = a.value().rowwise().norm().cwiseMax(eps);
    Matrix y = a.value().array().colwise() / norms.array();
    return make_result(y, {a}, [y, norms](Node& n) {
        Eigen::VectorXd dot = n.grad.cwiseProduct(y).rowwise().sum();
        Matrix g = n.grad - (y.array().colwise() * dot.array()).matrix();
        g = g.array().colwise() / norms.array();
        acc(n, 0, g);
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    if (gain.rows() != 1 || gain.cols() != x.cols()) throw ShapeError("layer_norm gain", x.shape(), gain.shape());
    if (bias.shape() != gain.shape()) throw ShapeError("layer_norm bias", gain.shape(), bias.shape());
    const Matrix& xv = x.value();
    const Index cols = xv.cols();
    Eigen::VectorXd mu = xv.rowwise().mean();
    Matrix xc = xv.colwise() - mu;
    Eigen::VectorXd rstd = (xc.rowwise().squaredNorm() / static_cast<double>(cols)).array() + eps;
    rstd = rstd.array().rsqrt();
    Matrix xhat = xc.array().colwise() * rstd.array();
    Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    return make_result(std::move(y), {x, gain, bias}, [xhat, rstd](Node& n) {
        const Matrix& g = n.grad;
        if (wants(n, 1)) acc(n, 1, g.cwiseProduct(xhat).colwise().sum());
        if (wants(n, 2)) acc(n, 2, g.colwise().sum());
        if (wants(n, 0)) {
            Matrix dxhat = g.array().rowwise() * in(n, 1).row(0).array();
            Eigen::VectorXd m1 = dxhat.rowwise().mean();
            Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
            Matrix dx = dxhat.colwise() - m1;
            dx -= (xhat.array().colwise() * m2.array()).matrix();
            dx = dx.array().colwise() * rstd.array();
            acc(n, 0, dx);
        }
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const Index cols = parts.front().cols();
    Index rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows", parts.front().shape(), p.shape());
        rows += p.rows();
    }
    Matrix v(rows, cols);
    Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return make_result(std::move(v), parts, [](Node& n) {
        Index r = 0;
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            const Index k = n.parents[i]->value.rows();
            if (wants(n, i)) acc(n, i, n.grad.middleRows(r, k));
            r += k;
        }
    });
}

Var gather_rows(const Var& x, std::vector<Index> rows) {
    const Matrix& xv = x.value();
    Matrix v(static_cast<Index>(rows.size()), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
        v.row(static_cast<Index>(i)) = xv.row(rows[i]);
    }
    auto idx = std::make_shared<std::vector<Index>>(std::move(rows));
    return make_result(std::move(v), {x}, [idx](Node& n) {
        const Matrix& x = in(n, 0);
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) g.row((*idx)[i]) += n.grad.row(static_cast<Index>(i));
        acc(n, 0, g);
    });
}

Var gather(const Var& x, Index rows, Index cols, std::vector<std::ptrdiff_t> index) {
    if (static_cast<Index>(index.size()) != rows * cols) {
        throw std::invalid_argument("gather: index length does not match output shape");
    }
    const Matrix& xv = x.value();
    Matrix v(rows, cols);
    for (std::size_t k = 0; k < index.size(); ++k) {
        const auto i = index[k];
        if (i >= static_cast<std::ptrdiff_t>(xv.size())) throw std::out_of_range("gather: index out of range");
        v.data()[k] = i < 0 ? 0.0 : xv.data()[i];
    }
    auto idx = std::make_shared<std::vector<std::ptrdiff_t>>(std::move(index));
    return make_result(std::move(v), {x}, [idx](Node& n) {
        const Matrix& x = in(n, 0);
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t k = 0; k < idx->size(); ++k) {
            const auto i = (*idx)[k];
            if (i >= 0) g.data()[i] += n.grad.data()[k];
        }
        acc(n, 0, g);
    });
}

Var reshape(const Var& x, Index rows, Index cols) {
    if (rows * cols != x.value().size()) throw ShapeError("reshape", x.shape(), Shape{rows, cols});
    Matrix v = x.value().reshaped<Eigen::RowMajor>(rows, cols);
    return make_result(std::move(v), {x}, [](Node& n) {
        const Matrix& x = in(n, 0);
        Matrix g = n.grad.reshaped<Eigen::RowMajor>(x.rows(), x.cols());
        acc(n, 0, g);
    });
}

Var segment_mean_rows(const Var& x, Index segment) {
    if (segment <= 0 || x.rows() % segment != 0) {
        throw std::invalid_argument("segment_mean_rows: rows " + std::to_string(x.rows()) +
                                    " not divisible by segment " + std::to_string(segment));
    }
    const Index groups = x.rows() / segment;
    const Matrix& xv = x.value();
    Matrix v(groups, xv.cols());
    for (Index b = 0; b < groups; ++b) v.row(b) = xv.middleRows(b * segment, segment).colwise().mean();
    return make_result(std::move(v), {x}, [segment, groups](Node& n) {
        const Matrix& x = in(n, 0);
        Matrix g(x.rows(), x.cols());
        const double inv = 1.0 / static_cast<double>(segment);
        for (Index b = 0; b < groups; ++b) g.middleRows(b * segment, segment).rowwise() = n.grad.row(b) * inv;
        acc(n, 0, g);
    });
}

Var attention(const Var& qkv, Index seq_len, Index heads) {
    const Matrix& x = qkv.value();
    if (x.cols() % 3 != 0 || seq_len <= 0 || x.rows() % seq_len != 0) {
        throw ShapeError("attention (qkv must be (B*S) x 3D)", qkv.shape(), Shape{seq_len, 3 * heads});
    }
    const Index dim = x.cols() / 3;
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
    const Index dh = dim / heads;
    const Index batch = x.rows() / seq_len;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool keep = tracking({&qkv});

    Matrix out(x.rows(), dim);
    auto probs = std::make_shared<std::vector<Matrix>>();
    if (keep) probs->reserve(static_cast<std::size_t>(batch * heads));
    for (Index b = 0; b < batch; ++b) {
        for (Index h = 0; h < heads; ++h) {
            auto q = x.block(b * seq_len, h * dh, seq_len, dh);
            auto k = x.block(b * seq_len, dim + h * dh, seq_len, dh);
            auto v = x.block(b * seq_len, 2 * dim + h * dh, seq_len, dh);
            Matrix a = softmax_rows((q * k.transpose()) * inv_scale);
            out.block(b * seq_len, h * dh, seq_len, dh).noalias() = a * v;
            if (keep) probs->push_back(std::move(a));
        }
    }
    return make_result(std::move(out), {qkv}, [probs, seq_len, heads, dim, dh, batch, inv_scale](Node& n) {
        const Matrix& x = in(n, 0);
        Matrix g(x.rows(), x.cols());
        for (Index b = 0; b < batch; ++b) {
            for (Index h = 0; h < heads; ++h) {
                const Matrix& a = (*probs)[static_cast<std::size_t>(b * heads + h)];
                auto q = x.block(b * seq_len, h * dh, seq_len, dh);
                auto k = x.block(b * seq_len, dim + h * dh, seq_len, dh);
                auto v = x.block(b * seq_len, 2 * dim + h * dh, seq_len, dh);
                auto go = n.grad.block(b * seq_len, h * dh, seq_len, dh);
                g.block(b * seq_len, 2 * dim + h * dh, seq_len, dh).noalias() = a.transpose() * go;
                Matrix da = go * v.transpose();
                Eigen::VectorXd dot = da.cwiseProduct(a).rowwise().sum();
                Matrix ds = a.cwiseProduct(da.colwise() - dot) * inv_scale;
                g.block(b * seq_len, h * dh, seq_len, dh).noalias() = ds * k;
                g.block(b * seq_len, dim + h * dh, seq_len, dh).noalias() = ds.transpose() * q;
            }
        }
        acc(n, 0, g);
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Matrix& z = logits.value();
    if (static_cast<Index>(labels.size()) != z.rows()) {
        throw ShapeError("cross_entropy (one label per row)", logits.shape(), Shape{static_cast<Index>(labels.size()), 1});
    }
    Matrix p = softmax_rows(z);
    double total = 0.0;
    for (Index r = 0; r < z.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        if (y < 0 || y >= z.cols()) throw std::out_of_range("cross_entropy: label out of range");
        const double m = z.row(r).maxCoeff();
        const double lse = m + std::log((z.row(r).array() - m).exp().sum());
        total += lse - z(r, y);
    }
    const double inv_n = 1.0 / static_cast<double>(z.rows());
    return make_result(Matrix::Constant(1, 1, total * inv_n), {logits}, [p, labels, inv_n](Node& n) {
        Matrix g = p;
        for (std::size_t r = 0; r < labels.size(); ++r) g(static_cast<Index>(r), labels[r]) -= 1.0;
        acc(n, 0, g * (inv_n * n.grad(0, 0)));
    });
}

}  // namespace tame::ad
