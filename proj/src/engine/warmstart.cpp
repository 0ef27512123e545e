#include "tame/engine/warmstart.hpp"

#include "tame/autodiff/adamw.hpp"
#include "tame/engine/engine.hpp"
#include "tame/io/hash.hpp"

#include <algorithm>
#include <iostream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tame::engine {

using ad::Index;
using ad::Matrix;
using ad::Var;

void AptConfig::validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("apt.epsilon: must lie in [0, 1]");
    if (epochs < 0) throw std::invalid_argument("apt.epochs: must be >= 0");
    if (batch < 1) throw std::invalid_argument("apt.batch: must be >= 1");
    if (!(lr >= 0.0)) throw std::invalid_argument("apt.lr: must be >= 0");
    if (adversarial && epsilon > 0.0 && (attack_steps < 1 || !(attack_step > 0.0))) {
        throw std::invalid_argument("apt.attack: need steps >= 1 and a positive step size");
    }
}

nlohmann::json AptConfig::to_json() const {
    return {{"epsilon", epsilon},     {"adversarial", adversarial}, {"attack_steps", attack_steps},
            {"attack_step", attack_step}, {"epochs", epochs},       {"batch", batch},
            {"lr", lr},               {"init_scale", init_scale},   {"eval_attack_steps", eval_attack_steps},
            {"eval_samples", eval_samples}, {"seed", seed}};
}

std::string bank_digest(const moe::MixtureOfPrompts& bank) { return io::sha256_hex(io::serialize(bank.to_checkpoint())); }

double prompted_accuracy(const vlm::ToyDualEncoder& model, const moe::MixtureOfPrompts& bank,
                         const std::vector<int>& classes, const Matrix& images, const std::vector<int>& labels) {
    if (images.rows() == 0) return 0.0;
    const auto pred = attacks::predictions(bank_logits(model, bank, classes), images);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

namespace {

struct EvalSplit {
    Matrix images;
    std::vector<int> labels;
};

EvalSplit eval_subset(const vlm::Dataset& ds, std::size_t n) {
    n = std::min(n, ds.size());
    EvalSplit s;
    std::vector<vlm::Image> imgs(ds.images.begin(), ds.images.begin() + static_cast<std::ptrdiff_t>(n));
    s.images = vlm::stack_images(imgs);
    for (std::size_t i = 0; i < n; ++i) s.labels.push_back(ds.task_label(i));
    return s;
}

std::pair<double, double> clean_and_robust(const vlm::ToyDualEncoder& model, const moe::MixtureOfPrompts& bank,
                                           const std::vector<int>& classes, const EvalSplit& split,
                                           const AptConfig& cfg) {
    const double clean = prompted_accuracy(model, bank, classes, split.images, split.labels);
    attacks::AttackConfig atk;
    atk.epsilon = cfg.epsilon;
    atk.steps = cfg.eval_attack_steps;
    // Robustness of the prompted model against attacks through the prompt.
    const Matrix adv = attacks::run_attack(bank_logits(model, bank, classes), split.images, split.labels, atk, cfg.seed ^ 0xe7a1ULL);
    return {clean, prompted_accuracy(model, bank, classes, adv, split.labels)};
}

}  // namespace

moe::MixtureOfPrompts apt_train(const vlm::ToyDualEncoder& model, const vlm::Dataset& public_split,
                                moe::BankShape shape, const AptConfig& cfg, AptReport* report) {
    cfg.validate();
    if (public_split.size() == 0) throw std::invalid_argument("apt_train: empty public split");
    shape.experts = 1;
    shape.dim = model.spec().dim;
    shape.text_layers = model.spec().text_layers;
    moe::MixtureOfPrompts bank = moe::MixtureOfPrompts::random(shape, cfg.seed, cfg.init_scale);
    AptReport rep;
    const auto& classes = public_split.classes;
    const auto k = static_cast<Index>(classes.size());
    const EvalSplit eval = eval_subset(public_split, cfg.eval_samples);
    const bool measure = cfg.eval_samples > 0 && cfg.epsilon > 0.0;
    if (measure) std::tie(rep.clean_before, rep.robust_before) = clean_and_robust(model, moe::MixtureOfPrompts(shape), classes, eval, cfg);

    std::vector<ad::Shape> shapes;
    for (const auto& v : bank.store().values()) shapes.push_back(ad::shape_of(v));
    ad::AdamW opt({.lr = cfg.lr}, shapes);
    std::mt19937_64 rng(cfg.seed ^ 0xa9717ULL);
    std::vector<std::size_t> order(public_split.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    attacks::AttackConfig inner;
    inner.epsilon = cfg.epsilon;
    inner.steps = cfg.attack_steps;
    inner.step_size = cfg.attack_step;
    std::uint64_t batch_counter = 0;

    for (int epoch = 0; epoch < cfg.epochs && !shape.empty(); ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            std::vector<vlm::Image> imgs;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                imgs.push_back(public_split.images[order[i]]);
                labels.push_back(public_split.task_label(order[i]));
            }
            Matrix x = vlm::stack_images(imgs);
            if (cfg.adversarial && cfg.epsilon > 0.0) {
                // Inner maximization against the current prompt.
                x = attacks::pgd(bank_logits(model, bank, classes), x, labels, inner, cfg.seed, batch_counter * 100003ULL);
            }
            ++batch_counter;
            moe::BoundMixture bound = moe::BoundMixture::bind(bank, true);
            moe::MixturePromptSource src(bound);
            vlm::ImageEncoding enc = model.encode_images(ad::constant(x), &src);
            Var text = prompted_text(model, bound, src, classes, enc.batch);
            Var loss = ad::cross_entropy(vlm::class_logits(enc.embeddings, text, k, model.spec().temperature), labels);
            ad::Gradients g = ad::backward(loss);
            std::vector<Matrix*> params;
            std::vector<Matrix> grads;
            for (std::size_t i = 0; i < bank.store().size(); ++i) {
                params.push_back(&bank.store().mutable_value(i));
                grads.push_back(g.contains(bound.all[i]) ? g.at(bound.all[i]) : Matrix());
            }
            opt.step(params, grads);
            total += loss.item() * static_cast<double>(end - start);
        }
        rep.epoch_loss.push_back(total / static_cast<double>(order.size()));
        if (cfg.verbose) std::cerr << "apt epoch " << epoch << " loss " << rep.epoch_loss.back() << "\n";
    }

    if (measure) {
        std::tie(rep.clean_after, rep.robust_after) = clean_and_robust(model, bank, classes, eval, cfg);
        rep.flagged = cfg.adversarial && !(rep.robust_after > rep.robust_before);
        if (rep.flagged) {
            std::cerr << "warning: adversarial prompt tuning did not beat the empty prompt (robust "
                      << rep.robust_after << " vs " << rep.robust_before << ")\n";
        }
    }
    if (report) *report = rep;
    return bank;
}

WelfordAccumulator::WelfordAccumulator(Index dim) : mean_(Matrix::Zero(1, dim)), m2_(Matrix::Zero(1, dim)) {}

void WelfordAccumulator::add(const Matrix& rows) {
    if (mean_.cols() == 0 && n_ == 0) {
        mean_ = Matrix::Zero(1, rows.cols());
        m2_ = Matrix::Zero(1, rows.cols());
    }
    if (rows.cols() != mean_.cols()) throw ad::ShapeError("WelfordAccumulator", ad::shape_of(rows), ad::shape_of(mean_));
    for (Index r = 0; r < rows.rows(); ++r) {
        ++n_;
        const Matrix delta = rows.row(r) - mean_;
        mean_ += delta / static_cast<double>(n_);
        m2_.array() += delta.array() * (rows.row(r) - mean_).array();
    }
}

Matrix WelfordAccumulator::variance() const {
    if (n_ < 2) throw std::invalid_argument("variance needs at least two observations");
    return m2_ / static_cast<double>(n_ - 1);
}

ReferenceStatistics precompute_references(const vlm::ToyDualEncoder& model, const vlm::Dataset& public_split,
                                          const moe::MixtureOfPrompts& robust, const moe::MixtureOfPrompts& clean,
                                          const ReferenceConfig& cfg) {
    if (public_split.size() < 2) throw std::invalid_argument("precompute_references: public split needs at least 2 images");
    const int layers = model.spec().image_layers;
    const Index dim = model.spec().dim;
    std::vector<int> labels;
    for (std::size_t i = 0; i < public_split.size(); ++i) labels.push_back(public_split.task_label(i));
    const Matrix images = vlm::stack_images(public_split.images);
    const Matrix adv = attacks::run_attack(attacks::backbone_logits(model, public_split.classes), images, labels, cfg.attack,
                                           cfg.seed, cfg.chunk);

    auto collect = [&](const Matrix& x, const moe::MixtureOfPrompts& bank) {
        ad::NoGradGuard guard;
        std::vector<WelfordAccumulator> acc(static_cast<std::size_t>(layers), WelfordAccumulator(dim));
        moe::BoundMixture bound = moe::BoundMixture::bind(bank, false);
        for (Index start = 0; start < x.rows(); start += static_cast<Index>(cfg.chunk)) {
            const Index len = std::min<Index>(static_cast<Index>(cfg.chunk), x.rows() - start);
            moe::MixturePromptSource src(bound);
            vlm::ImageEncoding enc = model.encode_images(ad::constant(x.middleRows(start, len)), &src);
            for (int l = 0; l < layers; ++l) acc[static_cast<std::size_t>(l)].add(enc.pooled(l, cfg.pooling).value());
        }
        LayerStatistics s;
        s.lo = 1;
        s.hi = layers;
        for (const auto& a : acc) {
            s.mean.push_back(a.mean());
            s.var.push_back(a.variance());
        }
        return s;
    };

    ReferenceStatistics r;
    r.adv = collect(adv, robust);
    r.clean = collect(images, clean);
    r.pooling = cfg.pooling;
    r.adv_prompt_sha = bank_digest(robust);
    r.clean_prompt_sha = bank_digest(clean);
    r.backbone_sha = model.parameters().digest();
    return r;
}

}  // namespace tame::engine
