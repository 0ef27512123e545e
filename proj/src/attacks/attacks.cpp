#include "tame/attacks/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace tame::attacks {

using ad::Index;
using ad::Matrix;
using ad::Var;

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::PGD: return "pgd";
        case Variant::CW: return "cw";
        case Variant::DI: return "di";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    if (s == "pgd" || s == "PGD") return Variant::PGD;
    if (s == "cw" || s == "CW") return Variant::CW;
    if (s == "di" || s == "DI") return Variant::DI;
    throw std::invalid_argument("attack.variant: unknown attack '" + s + "' (pgd|cw|di)");
}

void AttackConfig::validate() const {
    if (!(epsilon >= 0.0) || epsilon > 1.0) throw std::invalid_argument("attack.epsilon: must lie in [0, 1]");
    if (epsilon == 0.0) return;  // identity attack; step settings are irrelevant
    if (steps < 1) throw std::invalid_argument("attack.steps: must be >= 1");
    const double a = effective_step();
    if (!(a > 0.0) || a > epsilon) throw std::invalid_argument("attack.step_size: must satisfy 0 < step_size <= epsilon");
    if (di_probability < 0.0 || di_probability > 1.0) throw std::invalid_argument("attack.di_probability: must lie in [0, 1]");
    if (di_min_size < 1) throw std::invalid_argument("attack.di_min_size: must be >= 1");
    if (cw_kappa < 0.0) throw std::invalid_argument("attack.cw_kappa: must be >= 0");
}

LogitFn backbone_logits(const vlm::ToyDualEncoder& model, const std::vector<int>& classes) {
    Var text = ad::constant(model.class_embeddings(classes));
    const auto k = static_cast<Index>(classes.size());
    return [&model, text, k](const Var& pixels) {
        vlm::ImageEncoding enc = model.encode_images(pixels);
        return vlm::class_logits(enc.embeddings, text, k, model.spec().temperature);
    };
}

Matrix project(const Matrix& x, const Matrix& clean, double epsilon) {
    return x.array().max(clean.array() - epsilon).min(clean.array() + epsilon).max(0.0).min(1.0).matrix();
}

namespace {

std::mt19937_64 image_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x7a11u};
    return std::mt19937_64(seq);
}

Matrix random_start(const Matrix& clean, double eps, std::vector<std::mt19937_64>& rngs) {
    Matrix x = clean;
    for (Index r = 0; r < x.rows(); ++r) {
        std::uniform_real_distribution<double> u(-eps, eps);
        for (Index c = 0; c < x.cols(); ++c) x(r, c) += u(rngs[static_cast<std::size_t>(r)]);
    }
    return project(x, clean, eps);
}

void check_inputs(const Matrix& clean, const std::vector<int>& labels) {
    if (static_cast<std::size_t>(clean.rows()) != labels.size()) {
        throw std::invalid_argument("attack: image and label counts differ");
    }
    if (clean.size() > 0 && (clean.minCoeff() < 0.0 || clean.maxCoeff() > 1.0)) {
        throw std::invalid_argument("attack: image pixels must lie in [0, 1]");
    }
}

// Margin z_y - max_{j != y} z_j for every row, clipped below at -kappa. Rows
// already past the clip contribute nothing to the gradient.
Var margin_loss(const Var& logits, const std::vector<int>& labels, double kappa) {
    const Matrix& z = logits.value();
    const Index k = z.cols();
    std::vector<std::ptrdiff_t> true_idx, other_idx;
    for (Index r = 0; r < z.rows(); ++r) {
        const int y = labels[static_cast<std::size_t>(r)];
        Index best = -1;
        for (Index j = 0; j < k; ++j) {
            if (j == y) continue;
            if (best < 0 || z(r, j) > z(r, best)) best = j;
        }
        const double m = z(r, y) - z(r, best);
        if (m > -kappa) {
            true_idx.push_back(r * k + y);
            other_idx.push_back(r * k + best);
        }
    }
    if (true_idx.empty()) return ad::scale(ad::sum(logits), 0.0);
    const auto n = static_cast<Index>(true_idx.size());
    return ad::sum(ad::sub(ad::gather(logits, n, 1, true_idx), ad::gather(logits, n, 1, other_idx)));
}

template <class LossFn, class InputFn>
Matrix sign_attack(const Matrix& clean, const AttackConfig& cfg, std::uint64_t seed, std::uint64_t first,
                   LossFn loss_of, InputFn input_of, bool ascend) {
    std::vector<std::mt19937_64> rngs;
    for (Index r = 0; r < clean.rows(); ++r) rngs.push_back(image_rng(seed, first + static_cast<std::uint64_t>(r)));
    Matrix x = cfg.random_start ? random_start(clean, cfg.epsilon, rngs) : clean;
    const double a = cfg.effective_step();
    for (int s = 0; s < cfg.steps; ++s) {
        Var xv = ad::parameter(x);
        Var loss = loss_of(input_of(xv, rngs));
        ad::Gradients g = ad::backward(loss);
        const Matrix& grad = g.at(xv);
        const double dir = ascend ? a : -a;
        x = project(x + dir * grad.unaryExpr([](double v) { return double((v > 0) - (v < 0)); }), clean, cfg.epsilon);
    }
    return x;
}

}  // namespace

Matrix pgd(const LogitFn& f, const Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
           std::uint64_t seed, std::uint64_t first_index) {
    cfg.validate();
    check_inputs(clean, labels);
    if (cfg.epsilon == 0.0 || clean.rows() == 0) return clean;
    return sign_attack(
        clean, cfg, seed, first_index, [&](const Var& logits) { return ad::cross_entropy(logits, labels); },
        [&](const Var& x, std::vector<std::mt19937_64>&) { return f(x); }, true);
}

Matrix cw(const LogitFn& f, const Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
          std::uint64_t seed, std::uint64_t first_index) {
    cfg.validate();
    check_inputs(clean, labels);
    if (cfg.epsilon == 0.0 || clean.rows() == 0) return clean;
    return sign_attack(
        clean, cfg, seed, first_index, [&](const Var& logits) { return margin_loss(logits, labels, cfg.cw_kappa); },
        [&](const Var& x, std::vector<std::mt19937_64>&) { return f(x); }, false);
}

Var resize_pad(const Var& pixels, Index side, Index size, Index top, Index left) {
    if (size < 1 || size > side || top < 0 || left < 0 || top + size > side || left + size > side) {
        throw std::invalid_argument("resize_pad: placement outside the image");
    }
    const Index n = pixels.rows();
    std::vector<std::ptrdiff_t> idx(static_cast<std::size_t>(n * side * side), -1);
    for (Index b = 0; b < n; ++b)
        for (Index y = 0; y < size; ++y)
            for (Index x = 0; x < size; ++x) {
                const Index sy = (y * side) / size;
                const Index sx = (x * side) / size;
                idx[static_cast<std::size_t>(b * side * side + (top + y) * side + left + x)] = b * side * side + sy * side + sx;
            }
    return ad::gather(pixels, n, side * side, std::move(idx));
}

Matrix di(const LogitFn& f, const Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
          std::uint64_t seed, std::uint64_t first_index, Index side) {
    cfg.validate();
    check_inputs(clean, labels);
    if (cfg.epsilon == 0.0 || clean.rows() == 0) return clean;
    const Index lo = std::min<Index>(cfg.di_min_size, side);
    auto transform = [&](const Var& x, std::vector<std::mt19937_64>& rngs) {
        // Each image draws its own transform.
        std::vector<Var> parts;
        for (Index r = 0; r < x.rows(); ++r) {
            auto& rng = rngs[static_cast<std::size_t>(r)];
            std::uniform_real_distribution<double> u(0.0, 1.0);
            Var row = ad::gather_rows(x, {r});
            if (u(rng) < cfg.di_probability) {
                std::uniform_int_distribution<Index> sz(lo, side);
                const Index s = sz(rng);
                std::uniform_int_distribution<Index> off(0, side - s);
                const Index top = off(rng);
                const Index left = off(rng);
                row = resize_pad(row, side, s, top, left);
            }
            parts.push_back(row);
        }
        return f(ad::concat_rows(parts));
    };
    return sign_attack(
        clean, cfg, seed, first_index, [&](const Var& logits) { return ad::cross_entropy(logits, labels); }, transform,
        true);
}

Matrix run_attack(const LogitFn& f, const Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
                  std::uint64_t seed, std::size_t chunk) {
    cfg.validate();
    check_inputs(clean, labels);
    Matrix out(clean.rows(), clean.cols());
    const auto n = static_cast<std::size_t>(clean.rows());
    const Index side = static_cast<Index>(std::lround(std::sqrt(static_cast<double>(clean.cols()))));
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        const Matrix part = clean.middleRows(static_cast<Index>(start), static_cast<Index>(end - start));
        const std::vector<int> lab(labels.begin() + static_cast<std::ptrdiff_t>(start),
                                   labels.begin() + static_cast<std::ptrdiff_t>(end));
        Matrix adv;
        switch (cfg.variant) {
            case Variant::PGD: adv = pgd(f, part, lab, cfg, seed, start); break;
            case Variant::CW: adv = cw(f, part, lab, cfg, seed, start); break;
            case Variant::DI: adv = di(f, part, lab, cfg, seed, start, side); break;
        }
        out.middleRows(static_cast<Index>(start), static_cast<Index>(end - start)) = adv;
    }
    return out;
}

std::vector<double> per_sample_loss(const LogitFn& f, const Matrix& images, const std::vector<int>& labels) {
    ad::NoGradGuard guard;
    const Matrix z = f(ad::constant(images)).value();
    std::vector<double> out;
    for (Index r = 0; r < z.rows(); ++r) {
        const double m = z.row(r).maxCoeff();
        const double lse = m + std::log((z.row(r).array() - m).exp().sum());
        out.push_back(lse - z(r, labels[static_cast<std::size_t>(r)]));
    }
    return out;
}

std::vector<int> predictions(const LogitFn& f, const Matrix& images) {
    ad::NoGradGuard guard;
    std::vector<int> out;
    const std::size_t chunk = 256;
    for (Index start = 0; start < images.rows(); start += chunk) {
        const Index len = std::min<Index>(chunk, images.rows() - start);
        const Matrix z = f(ad::constant(images.middleRows(start, len))).value();
        for (Index r = 0; r < z.rows(); ++r) {
            Index arg = 0;
            z.row(r).maxCoeff(&arg);
            out.push_back(static_cast<int>(arg));
        }
    }
    return out;
}

std::string cache_key(std::uint64_t dataset_seed, Variant v, double epsilon, int steps) {
    char eps[32];
    std::snprintf(eps, sizeof eps, "%.6f", epsilon * 255.0);
    std::string e(eps);
    while (!e.empty() && e.back() == '0') e.pop_back();
    if (!e.empty() && e.back() == '.') e.pop_back();
    return "ds" + std::to_string(dataset_seed) + "-" + variant_name(v) + "-eps" + e + "-steps" + std::to_string(steps);
}

std::string AttackCache::key() const { return cache_key(dataset_seed, config.variant, config.epsilon, config.steps); }

io::Checkpoint to_checkpoint(const AttackCache& c) {
    io::Checkpoint ck;
    ck.kind = "attack-cache";
    ck.seed = c.attack_seed;
    ck.meta = {{"dataset_seed", c.dataset_seed},
               {"variant", variant_name(c.config.variant)},
               {"epsilon", c.config.epsilon},
               {"steps", c.config.steps},
               {"step_size", c.config.effective_step()},
               {"random_start", c.config.random_start},
               {"cw_kappa", c.config.cw_kappa},
               {"di_probability", c.config.di_probability},
               {"di_min_size", c.config.di_min_size},
               {"model_digest", c.model_digest},
               {"key", c.key()}};
    ck.add("images", c.images);
    Matrix lab(static_cast<Index>(c.labels.size()), 1);
    for (std::size_t i = 0; i < c.labels.size(); ++i) lab(static_cast<Index>(i), 0) = c.labels[i];
    ck.add("labels", lab);
    return ck;
}

AttackCache cache_from_checkpoint(const io::Checkpoint& ck) {
    if (ck.kind != "attack-cache") throw std::runtime_error("checkpoint kind '" + ck.kind + "' is not an attack cache");
    AttackCache c;
    c.attack_seed = ck.seed;
    c.dataset_seed = ck.meta.at("dataset_seed").get<std::uint64_t>();
    c.config.variant = parse_variant(ck.meta.at("variant").get<std::string>());
    c.config.epsilon = ck.meta.at("epsilon").get<double>();
    c.config.steps = ck.meta.at("steps").get<int>();
    c.config.step_size = ck.meta.at("step_size").get<double>();
    c.config.random_start = ck.meta.at("random_start").get<bool>();
    c.config.cw_kappa = ck.meta.at("cw_kappa").get<double>();
    c.config.di_probability = ck.meta.at("di_probability").get<double>();
    c.config.di_min_size = ck.meta.at("di_min_size").get<int>();
    c.model_digest = ck.meta.at("model_digest").get<std::string>();
    c.images = ck.get("images");
    const Matrix& lab = ck.get("labels");
    for (Index r = 0; r < lab.rows(); ++r) c.labels.push_back(static_cast<int>(lab(r, 0)));
    return c;
}

}  // namespace tame::attacks
