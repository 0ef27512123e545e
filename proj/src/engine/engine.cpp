#include "tame/engine/engine.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace tame::engine {

using ad::Index;
using ad::Matrix;
using ad::Var;

void TameConfig::validate(int image_layers) const {
    auto bad = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("tame." + field + ": " + why);
    };
    if (!(alpha >= 0.0 && alpha <= 1.0)) bad("alpha", "must lie in [0, 1]");
    if (steps < 0) bad("steps", "must be >= 0");
    if (!(lr >= 0.0) || !std::isfinite(lr)) bad("lr", "must be a finite value >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) bad("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) bad("beta2", "must lie in [0, 1)");
    if (weight_decay < 0.0) bad("weight_decay", "must be >= 0");
    if (reset_interval < 0) bad("reset_interval", "must be >= 1, or 0 for never");
    if (experts < 1) bad("experts", "must be >= 1");
    if (!(tau > 0.0 && tau <= 1.0)) bad("tau", "must lie in (0, 1]");
    if (views < 1) bad("views", "must be >= 1");
    if (tau * (views + 1) < 1.0 - 1e-9) bad("tau", "tau * (views + 1) < 1 selects no view; raise tau or views");
    if (lambda_bal < 0.0) bad("lambda_bal", "must be >= 0");
    if (lambda_div < 0.0) bad("lambda_div", "must be >= 0");
    if (warmup_steps < 1) bad("warmup_steps", "must be >= 1");
    if (align_lo < 1 || align_hi > image_layers || align_lo > align_hi) {
        bad("align_layers", "must satisfy 1 <= lo <= hi <= " + std::to_string(image_layers));
    }
    if (use_alignment && selection_size(tau, static_cast<std::size_t>(views) + 1) < 2) {
        bad("tau", "alignment needs at least 2 selected views for the variance; raise tau or views");
    }
    if (steps > 0 && !use_entropy && !use_alignment && !use_moe) bad("losses", "at least one loss term is required");
    if (!(augment.crop_lo > 0.0 && augment.crop_lo <= augment.crop_hi && augment.crop_hi <= 1.0)) {
        bad("crop_scale", "must satisfy 0 < lo <= hi <= 1");
    }
    if (!(augment.flip_probability >= 0.0 && augment.flip_probability <= 1.0)) bad("flip_probability", "must lie in [0, 1]");
}

nlohmann::json TameConfig::to_json() const {
    return {{"alpha", alpha},
            {"steps", steps},
            {"lr", lr},
            {"beta1", beta1},
            {"beta2", beta2},
            {"weight_decay", weight_decay},
            {"reset_interval", reset_interval > 0 ? nlohmann::json(reset_interval) : nlohmann::json("inf")},
            {"experts", experts},
            {"tau", tau},
            {"views", views},
            {"lambda_bal", lambda_bal},
            {"lambda_div", lambda_div},
            {"warmup_steps", warmup_steps},
            {"align_layers", {align_lo, align_hi}},
            {"pooling", pooling_name(pooling)},
            {"crop_scale", {augment.crop_lo, augment.crop_hi}},
            {"flip_probability", augment.flip_probability},
            {"use_entropy", use_entropy},
            {"use_alignment", use_alignment},
            {"use_moe", use_moe},
            {"record_post_loss", record_post_loss}};
}

TameConfig TameConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "alpha", "steps", "lr", "beta1", "beta2", "weight_decay", "reset_interval", "experts", "tau", "views",
        "lambda_bal", "lambda_div", "warmup_steps", "align_layers", "pooling", "crop_scale", "flip_probability",
        "use_entropy", "use_alignment", "use_moe", "record_post_loss"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw std::invalid_argument("tame." + it.key() + ": unknown field");
        }
    }
    TameConfig c;
    auto get = [&](const char* k, auto& dst) {
        if (!j.contains(k)) return;
        try {
            j.at(k).get_to(dst);
        } catch (const nlohmann::json::exception&) {
            throw std::invalid_argument(std::string("tame.") + k + ": wrong type");
        }
    };
    get("alpha", c.alpha);
    get("steps", c.steps);
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("weight_decay", c.weight_decay);
    if (j.contains("reset_interval")) {
        const auto& r = j.at("reset_interval");
        if (r.is_string()) {
            const auto s = r.get<std::string>();
            if (s != "inf" && s != "all" && s != "never") throw std::invalid_argument("tame.reset_interval: expected a count or \"inf\"");
            c.reset_interval = 0;
        } else {
            get("reset_interval", c.reset_interval);
            if (c.reset_interval == 0) throw std::invalid_argument("tame.reset_interval: use \"inf\" for never");
        }
    }
    get("experts", c.experts);
    get("tau", c.tau);
    get("views", c.views);
    get("lambda_bal", c.lambda_bal);
    get("lambda_div", c.lambda_div);
    get("warmup_steps", c.warmup_steps);
    if (j.contains("align_layers")) {
        std::vector<int> r;
        get("align_layers", r);
        if (r.size() != 2) throw std::invalid_argument("tame.align_layers: expected [lo, hi]");
        c.align_lo = r[0];
        c.align_hi = r[1];
    }
    if (j.contains("pooling")) {
        std::string p;
        get("pooling", p);
        try {
            c.pooling = parse_pooling(p);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(std::string("tame.") + e.what());
        }
    }
    if (j.contains("crop_scale")) {
        std::vector<double> r;
        get("crop_scale", r);
        if (r.size() != 2) throw std::invalid_argument("tame.crop_scale: expected [lo, hi]");
        c.augment.crop_lo = r[0];
        c.augment.crop_hi = r[1];
    }
    get("flip_probability", c.augment.flip_probability);
    get("use_entropy", c.use_entropy);
    get("use_alignment", c.use_alignment);
    get("use_moe", c.use_moe);
    get("record_post_loss", c.record_post_loss);
    return c;
}

Var prompted_text(const vlm::ToyDualEncoder& model, const moe::BoundMixture& bound, moe::MixturePromptSource& src,
                  const std::vector<int>& classes, Index batch) {
    if (!src.has_textual()) return ad::constant(model.class_embeddings(classes));
    bool collapse = batch > 1;
    for (const auto& w : bound.router_w) collapse = collapse && !w.requires_grad();
    for (const auto& b : bound.router_b) collapse = collapse && !b.requires_grad();
    if (collapse) {
        for (const auto& pi : src.routing()) {
            const Matrix& p = pi.value();
            for (Index r = 1; r < p.rows() && collapse; ++r) collapse = (p.row(r).array() == p.row(0).array()).all();
        }
    }
    return model.encode_texts(classes, collapse ? 1 : batch, &src);
}

attacks::LogitFn bank_logits(const vlm::ToyDualEncoder& model, const moe::MixtureOfPrompts& bank,
                             const std::vector<int>& classes) {
    auto bound = std::make_shared<moe::BoundMixture>(moe::BoundMixture::bind(bank, false));
    const auto k = static_cast<Index>(classes.size());
    return [&model, bound, classes, k](const Var& pixels) {
        moe::MixturePromptSource src(*bound);
        vlm::ImageEncoding enc = model.encode_images(pixels, &src);
        Var text = prompted_text(model, *bound, src, classes, enc.batch);
        return vlm::class_logits(enc.embeddings, text, k, model.spec().temperature);
    };
}

TameEngine::TameEngine(const vlm::ToyDualEncoder& model, std::vector<int> classes, moe::MixtureOfPrompts warm_start,
                       std::optional<ReferenceStatistics> refs, TameConfig cfg)
    : model_(model), classes_(std::move(classes)), snapshot_(std::move(warm_start)), refs_(std::move(refs)), cfg_(cfg) {
    cfg_.validate(model_.spec().image_layers);
    if (classes_.empty()) throw std::invalid_argument("TameEngine: empty class set");
    if (snapshot_.shape().experts != cfg_.experts) {
        throw std::invalid_argument("tame.experts: bank holds " + std::to_string(snapshot_.shape().experts) +
                                    " experts but the config asks for " + std::to_string(cfg_.experts));
    }
    if (snapshot_.shape().dim != model_.spec().dim) throw std::invalid_argument("TameEngine: bank width differs from the model");
    if (cfg_.use_alignment) {
        if (!refs_) throw std::invalid_argument("TameEngine: alignment enabled but no reference statistics given");
        if (refs_->pooling != cfg_.pooling) throw std::invalid_argument("tame.pooling: reference statistics use a different pooling");
        refs_ = refs_->slice(cfg_.align_lo, cfg_.align_hi);
    }
    if (!snapshot_.shape().has_textual()) shared_text_ = ad::constant(model_.class_embeddings(classes_));
    reset();
}

void TameEngine::reset() {
    state_ = snapshot_;
    std::vector<ad::Shape> shapes;
    for (const auto& v : state_.store().values()) shapes.push_back(ad::shape_of(v));
    opt_ = ad::AdamW({.lr = cfg_.lr, .beta1 = cfg_.beta1, .beta2 = cfg_.beta2, .eps = 1e-8, .weight_decay = cfg_.weight_decay},
                     shapes);
    t_ = 0;
}

Matrix TameEngine::view_logits(const std::vector<vlm::Image>& views) const {
    ad::NoGradGuard guard;
    moe::BoundMixture bound = moe::BoundMixture::bind(state_, false);
    moe::MixturePromptSource src(bound);
    vlm::ImageEncoding enc = model_.encode_images(ad::constant(vlm::stack_images(views)), &src);
    Var text = shared_text_.defined() ? shared_text_ : prompted_text(model_, bound, src, classes_, enc.batch);
    return vlm::class_logits(enc.embeddings, text, static_cast<Index>(classes_.size()), model_.spec().temperature).value();
}

int TameEngine::predict(const vlm::Image& x) const {
    const Matrix z = view_logits({x});
    Index arg = 0;
    z.row(0).maxCoeff(&arg);
    return static_cast<int>(arg);
}

TameEngine::Objective TameEngine::objective(const moe::BoundMixture& bound, const Matrix& views, double gamma) const {
    moe::MixturePromptSource src(bound);
    vlm::ImageEncoding enc = model_.encode_images(ad::constant(views), &src);
    Var text = shared_text_.defined() ? shared_text_ : prompted_text(model_, bound, src, classes_, enc.batch);
    Var logits = vlm::class_logits(enc.embeddings, text, static_cast<Index>(classes_.size()), model_.spec().temperature);

    Objective o;
    auto accumulate = [&o](const Var& term) { o.total = o.total.defined() ? ad::add(o.total, term) : term; };
    if (cfg_.use_entropy) {
        o.entropy = entropy_loss(ad::softmax(logits, 1));
        accumulate(o.entropy);
    }
    if (cfg_.use_alignment) {
        o.alignment = alignment_loss(current_statistics(enc, cfg_.align_lo, cfg_.align_hi, cfg_.pooling), *refs_, cfg_.alpha);
        accumulate(o.alignment);
    }
    std::vector<Var> pbar;
    for (const auto& pi : src.routing()) {
        pbar.push_back(ad::mean(pi, 0));
        const Matrix& v = pbar.back().value();
        o.pbar.emplace_back(v.data(), v.data() + v.size());
    }
    if (cfg_.use_moe && !bound.shape.empty()) {
        std::vector<moe::BlockTerms> blocks;
        for (int l = 0; l < bound.shape.depth; ++l) {
            blocks.push_back({pbar[static_cast<std::size_t>(l)], bound.flattened_experts(l)});
        }
        o.moe = moe::moe_regularizer(blocks, cfg_.lambda_bal, cfg_.lambda_div, gamma);
        accumulate(o.moe);
    }
    if (!o.total.defined()) o.total = ad::scalar(0.0);
    return o;
}

void TameEngine::optimizer_step(const moe::BoundMixture& bound, const ad::Gradients& g) {
    auto& store = state_.store();
    std::vector<Matrix*> params;
    std::vector<Matrix> grads;
    for (std::size_t i = 0; i < store.size(); ++i) {
        params.push_back(&store.mutable_value(i));
        grads.push_back(g.contains(bound.all[i]) ? g.at(bound.all[i]) : Matrix());
    }
    opt_.step(params, grads);
}

SampleResult TameEngine::process(const vlm::Image& x, std::uint64_t view_seed) {
    SampleResult res;
    if (samples_ == 0 || (cfg_.reset_interval > 0 && samples_ % cfg_.reset_interval == 0)) {
        reset();
        res.reset_applied = true;
    }
    ++samples_;

    const bool adapt = cfg_.steps > 0;
    ViewSet vs;
    if (adapt) {
        vs = augment(x, cfg_.views, view_seed, cfg_.augment);
        const Matrix z = view_logits(vs.views);
        vs.entropies = row_entropies(z);
        vs.selected = select_views(vs.entropies, cfg_.tau);
        Index arg = 0;
        z.row(0).maxCoeff(&arg);
        res.prediction_before = static_cast<int>(arg);
    } else {
        res.prediction_before = predict(x);
    }
    res.prediction = res.prediction_before;
    res.selected = vs.selected.size();
    if (!adapt) return res;

    std::vector<vlm::Image> chosen;
    for (std::size_t i : vs.selected) chosen.push_back(vs.views[i]);
    const Matrix pixels = vlm::stack_images(chosen);

    for (int s = 0; s < cfg_.steps; ++s) {
        const double gamma = moe::warmup(t_, cfg_.warmup_steps);
        moe::BoundMixture bound = moe::BoundMixture::bind(state_, true);
        StepRecord rec;
        rec.gamma = gamma;
        Objective o = objective(bound, pixels, gamma);
        rec.loss = o.total.item();
        rec.entropy = o.entropy.defined() ? o.entropy.item() : 0.0;
        rec.alignment = o.alignment.defined() ? o.alignment.item() : 0.0;
        rec.moe = o.moe.defined() ? o.moe.item() : 0.0;
        if (!std::isfinite(rec.loss)) {
            res.aborted = true;
            res.error = "non-finite loss at step " + std::to_string(s);
            reset();
            res.prediction = predict(x);
            return res;
        }
        if (s == 0) res.pbar = o.pbar;
        const ad::Gradients g = ad::backward(o.total);
        optimizer_step(bound, g);
        ++t_;
        if (observer_) observer_(s, state_);
        if (cfg_.record_post_loss) {
            ad::NoGradGuard guard;
            rec.post_loss = objective(moe::BoundMixture::bind(state_, false), pixels, gamma).total.item();
        }
        rec.prediction = predict(x);
        res.steps.push_back(rec);
        res.prediction = rec.prediction;
    }
    return res;
}

}  // namespace tame::engine
