#pragma once

#include "tame/autodiff/ops.hpp"
#include "test_util.hpp"

#include <functional>
#include <string>
#include <vector>

namespace tame::testing {

// Every differentiable kernel with random (non-kink) inputs, each reduced to
// a scalar so finite differences apply.
struct KernelCase {
    std::string name;
    // Builds inputs for a given rng and returns f(inputs) -> scalar.
    std::function<std::vector<ad::Matrix>(std::mt19937_64&)> inputs;
    std::function<ad::Var(const std::vector<ad::Var>&)> fn;
};

inline std::vector<KernelCase> kernel_cases() {
    using namespace tame::ad;
    std::vector<KernelCase> cases;
    auto mat = [](ad::Index r, ad::Index c, double s = 1.0) {
        return [=](std::mt19937_64& rng) { return std::vector<ad::Matrix>{random_matrix(rng, r, c, s)}; };
    };
    auto shaped = [](std::function<std::vector<ad::Matrix>(std::mt19937_64&)> g) { return g; };

    cases.push_back({"matmul", shaped([](std::mt19937_64& rng) {
                         ad::Index m = random_extent(rng, 1, 5), k = random_extent(rng, 1, 5), n = random_extent(rng, 1, 5);
                         return std::vector<ad::Matrix>{random_matrix(rng, m, k), random_matrix(rng, k, n)};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(matmul(v[0], v[1]), 1); }});
    cases.push_back({"matmul_nt", shaped([](std::mt19937_64& rng) {
                         ad::Index m = random_extent(rng, 1, 5), k = random_extent(rng, 1, 5), n = random_extent(rng, 1, 5);
                         return std::vector<ad::Matrix>{random_matrix(rng, m, k), random_matrix(rng, n, k)};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(matmul_nt(v[0], v[1]), 2); }});
    cases.push_back({"transpose", mat(3, 4), [](const std::vector<ad::Var>& v) { return weighted_sum(transpose(v[0]), 3); }});
    cases.push_back({"add_sub_mul_scale", shaped([](std::mt19937_64& rng) {
                         ad::Index r = random_extent(rng, 1, 4), c = random_extent(rng, 1, 4);
                         return std::vector<ad::Matrix>{random_matrix(rng, r, c), random_matrix(rng, r, c)};
                     }),
                     [](const std::vector<ad::Var>& v) {
                         Var y = add(mul(v[0], v[1]), sub(scale(v[0], 0.7), add_scalar(v[1], 0.3)));
                         return weighted_sum(y, 4);
                     }});
    cases.push_back({"add_row", shaped([](std::mt19937_64& rng) {
                         ad::Index r = random_extent(rng, 1, 4), c = random_extent(rng, 1, 4);
                         return std::vector<ad::Matrix>{random_matrix(rng, r, c), random_matrix(rng, 1, c)};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(add_row(v[0], v[1]), 5); }});
    cases.push_back({"softmax_rows", mat(3, 5), [](const std::vector<ad::Var>& v) { return weighted_sum(softmax(v[0], 1), 6); }});
    cases.push_back({"softmax_cols", mat(4, 3), [](const std::vector<ad::Var>& v) { return weighted_sum(softmax(v[0], 0), 7); }});
    cases.push_back({"log_exp", mat(3, 3, 0.5), [](const std::vector<ad::Var>& v) {
                         return weighted_sum(log(add_scalar(exp(v[0]), 0.5)), 8);
                     }});
    cases.push_back({"mean_axes", mat(4, 3), [](const std::vector<ad::Var>& v) {
                         return add(weighted_sum(mean(v[0], 0), 9), add(weighted_sum(mean(v[0], 1), 10), mean(v[0])));
                     }});
    cases.push_back({"variance_axes", mat(4, 3), [](const std::vector<ad::Var>& v) {
                         return add(weighted_sum(variance(v[0], 0), 11), weighted_sum(variance(v[0], 1), 12));
                     }});
    cases.push_back({"l1_distance", shaped([](std::mt19937_64& rng) {
                         // Well-separated inputs stay away from the |0| kink.
                         ad::Matrix a = random_matrix(rng, 2, 4);
                         ad::Matrix b = a.array() + 0.5 * (random_matrix(rng, 2, 4).array() > 0).cast<double>().array() * 2.0 - 0.5;
                         return std::vector<ad::Matrix>{a, b};
                     }),
                     [](const std::vector<ad::Var>& v) { return l1_distance(v[0], v[1]); }});
    cases.push_back({"cosine_similarity", shaped([](std::mt19937_64& rng) {
                         return std::vector<ad::Matrix>{random_matrix(rng, 2, 3), random_matrix(rng, 3, 2)};
                     }),
                     [](const std::vector<ad::Var>& v) { return cosine_similarity(v[0], v[1]); }});
    cases.push_back({"relu", shaped([](std::mt19937_64& rng) {
                         ad::Matrix a = random_matrix(rng, 3, 4);
                         a = a.unaryExpr([](double x) { return x >= 0 ? x + 0.1 : x - 0.1; });
                         return std::vector<ad::Matrix>{a};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(relu(v[0]), 13); }});
    cases.push_back({"gelu", mat(3, 4, 1.5), [](const std::vector<ad::Var>& v) { return weighted_sum(gelu(v[0]), 14); }});
    cases.push_back({"layer_norm", shaped([](std::mt19937_64& rng) {
                         ad::Index c = random_extent(rng, 3, 6);
                         return std::vector<ad::Matrix>{random_matrix(rng, 3, c), random_matrix(rng, 1, c),
                                                    random_matrix(rng, 1, c)};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(layer_norm(v[0], v[1], v[2]), 15); }});
    cases.push_back({"l2_normalize_rows", mat(3, 4), [](const std::vector<ad::Var>& v) {
                         return weighted_sum(l2_normalize_rows(v[0]), 16);
                     }});
    cases.push_back({"concat_gather_reshape", shaped([](std::mt19937_64& rng) {
                         return std::vector<ad::Matrix>{random_matrix(rng, 2, 3), random_matrix(rng, 3, 3)};
                     }),
                     [](const std::vector<ad::Var>& v) {
                         Var c = concat_rows({v[0], v[1], v[0]});
                         Var g = gather_rows(c, {4, 0, 0, 2, 6});
                         Var r = reshape(g, 3, 5);
                         Var p = gather(v[1], 2, 3, {0, -1, 8, 8, 3, 5});
                         return add(weighted_sum(r, 17), weighted_sum(p, 18));
                     }});
    cases.push_back({"segment_mean_rows", mat(6, 3), [](const std::vector<ad::Var>& v) {
                         return weighted_sum(segment_mean_rows(v[0], 3), 19);
                     }});
    cases.push_back({"attention", shaped([](std::mt19937_64& rng) {
                         ad::Index b = random_extent(rng, 1, 3);
                         return std::vector<ad::Matrix>{random_matrix(rng, b * 3, 12)};
                     }),
                     [](const std::vector<ad::Var>& v) { return weighted_sum(attention(v[0], 3, 2), 20); }});
    cases.push_back({"cross_entropy", mat(4, 5, 2.0), [](const std::vector<ad::Var>& v) {
                         return cross_entropy(v[0], {0, 4, 2, 2});
                     }});
    return cases;
}


}  // namespace tame::testing
