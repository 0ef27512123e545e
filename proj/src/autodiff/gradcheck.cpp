#include "tame/autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tame::ad {

namespace {

std::vector<Index> pick_coordinates(Index n, const GradCheckOptions& opts, std::mt19937_64& rng) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    if (opts.max_coordinates == 0 || opts.max_coordinates >= all.size()) return all;
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(opts.max_coordinates);
    return all;
}

}  // namespace

double finite_difference_check(const MultiScalarFn& f, const std::vector<Matrix>& xs, const GradCheckOptions& opts) {
    if (opts.step <= 0.0) throw std::invalid_argument("finite_difference_check: step must be positive");

    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (const auto& x : xs) leaves.push_back(parameter(x));
    Var loss = f(leaves);
    Gradients grads = backward(loss);

    std::mt19937_64 rng(opts.seed);
    double worst = 0.0;
    std::vector<Matrix> probe = xs;
    NoGradGuard no_grad;
    auto eval = [&]() {
        std::vector<Var> cs;
        cs.reserve(probe.size());
        for (const auto& p : probe) cs.push_back(constant(p));
        return f(cs).item();
    };

    for (std::size_t k = 0; k < xs.size(); ++k) {
        const Matrix analytic = grads.contains(leaves[k]) ? grads.at(leaves[k]) : Matrix::Zero(xs[k].rows(), xs[k].cols());
        for (Index i : pick_coordinates(xs[k].size(), opts, rng)) {
            const double orig = probe[k].data()[i];
            auto at = [&](double off) {
                probe[k].data()[i] = orig + off;
                return eval();
            };
            const double h = opts.step;
            const double numeric = opts.fourth_order ? (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                                                     : (at(h) - at(-h)) / (2.0 * h);
            probe[k].data()[i] = orig;
            const double a = analytic.data()[i];
            if (std::abs(a) < opts.noise_floor && std::abs(numeric) < opts.noise_floor) continue;
            const double err = std::abs(a - numeric) / (std::abs(numeric) + 1e-12);
            worst = std::max(worst, std::isfinite(err) ? err : INFINITY);
        }
    }
    return worst;
}

double finite_difference_check(const ScalarFn& f, const Matrix& x, const GradCheckOptions& opts) {
    return finite_difference_check([&f](const std::vector<Var>& v) { return f(v[0]); }, std::vector<Matrix>{x}, opts);
}

}  // namespace tame::ad
