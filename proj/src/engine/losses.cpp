#include "tame/engine/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tame::engine {

using ad::Index;
using ad::Matrix;
using ad::Var;

ViewSet augment(const vlm::Image& image, int m, std::uint64_t seed, const AugmentConfig& cfg) {
    if (m < 1) throw std::invalid_argument("augment: need M >= 1 views");
    if (!(cfg.crop_lo > 0.0) || cfg.crop_hi > 1.0 || cfg.crop_lo > cfg.crop_hi) {
        throw std::invalid_argument("augment: crop scale range must satisfy 0 < lo <= hi <= 1");
    }
    ViewSet vs;
    vs.views.reserve(static_cast<std::size_t>(m) + 1);
    vs.views.push_back(image);
    vs.flipped.push_back(false);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int j = 0; j < m; ++j) {
        vlm::Image v = vlm::resized_crop(image, vlm::sample_crop(rng, image.rows(), cfg.crop_lo, cfg.crop_hi));
        const bool flip = u(rng) < cfg.flip_probability;
        vs.views.push_back(flip ? vlm::hflip(v) : std::move(v));
        vs.flipped.push_back(flip);
    }
    return vs;
}

std::size_t selection_size(double tau, std::size_t n) {
    if (!(tau > 0.0) || tau > 1.0) throw std::invalid_argument("tau: must lie in (0, 1]");
    const double raw = tau * static_cast<double>(n);
    const auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    if (raw < 1.0 - 1e-9) {
        throw std::invalid_argument("tau * (M + 1) < 1 selects no view; raise tau or M");
    }
    return std::min(k, n);
}

std::vector<std::size_t> select_views(const std::vector<double>& entropies, double tau) {
    const std::size_t k = selection_size(tau, entropies.size());
    std::vector<std::size_t> idx(entropies.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return entropies[a] < entropies[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> row_entropies(const Matrix& logits) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(logits.rows()));
    for (Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        const Eigen::ArrayXd z = (logits.row(r).array() - m).transpose();
        const double s = z.exp().sum();
        // H = log s - sum p z with p = exp(z) / s
        out.push_back(std::log(s) - (z.exp() * z).sum() / s);
    }
    return out;
}

Var entropy_loss(const Var& probs) {
    if (probs.rows() < 1) throw std::invalid_argument("entropy_loss: no selected views");
    Var p = ad::mean(probs, 0);
    // 0 log 0 = 0; the offset vanishes in rounding for any representable p.
    return ad::scale(ad::sum(ad::mul(p, ad::log(ad::add_scalar(p, 1e-300)))), -1.0);
}

LayerStatistics LayerStatistics::slice(int new_lo, int new_hi) const {
    if (new_lo < lo || new_hi > hi || new_lo > new_hi) {
        throw std::invalid_argument("layer range [" + std::to_string(new_lo) + ", " + std::to_string(new_hi) +
                                    "] is outside the stored range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
    LayerStatistics s;
    s.lo = new_lo;
    s.hi = new_hi;
    for (int l = new_lo; l <= new_hi; ++l) {
        s.mean.push_back(mean[static_cast<std::size_t>(l - lo)]);
        s.var.push_back(var[static_cast<std::size_t>(l - lo)]);
    }
    return s;
}

LayerStatistics StatisticsVars::values() const {
    LayerStatistics s;
    s.lo = lo;
    s.hi = hi;
    for (const auto& m : mean) s.mean.push_back(m.value());
    for (const auto& v : var) s.var.push_back(v.value());
    return s;
}

StatisticsVars current_statistics(const vlm::ImageEncoding& enc, int lo, int hi, vlm::Pooling pooling) {
    if (enc.batch < 2) {
        throw std::invalid_argument("current_statistics: need at least 2 selected views for the n-1 variance; raise tau or M");
    }
    const int layers = static_cast<int>(enc.hooks.size());
    if (lo < 1 || hi > layers || lo > hi) {
        throw std::invalid_argument("alignment layer range must satisfy 1 <= lo <= hi <= " + std::to_string(layers));
    }
    StatisticsVars s;
    s.lo = lo;
    s.hi = hi;
    for (int l = lo; l <= hi; ++l) {
        Var pooled = enc.pooled(l - 1, pooling);
        s.mean.push_back(ad::mean(pooled, 0));
        s.var.push_back(ad::variance(pooled, 0));
    }
    return s;
}

ReferenceStatistics ReferenceStatistics::slice(int lo, int hi) const {
    ReferenceStatistics r = *this;
    r.adv = adv.slice(lo, hi);
    r.clean = clean.slice(lo, hi);
    return r;
}

std::string pooling_name(vlm::Pooling p) { return p == vlm::Pooling::ClsOnly ? "cls" : "token-mean"; }

vlm::Pooling parse_pooling(const std::string& s) {
    if (s == "cls") return vlm::Pooling::ClsOnly;
    if (s == "token-mean") return vlm::Pooling::TokenMean;
    throw std::invalid_argument("pooling: expected 'token-mean' or 'cls', got '" + s + "'");
}

io::Checkpoint ReferenceStatistics::to_checkpoint() const {
    if (adv.lo != clean.lo || adv.hi != clean.hi) throw std::logic_error("reference statistics ranges differ");
    io::Checkpoint ck;
    ck.kind = "reference-stats";
    ck.meta = {{"layer_lo", adv.lo},
               {"layer_hi", adv.hi},
               {"pooling", pooling_name(pooling)},
               {"adv_prompt_sha256", adv_prompt_sha},
               {"clean_prompt_sha256", clean_prompt_sha},
               {"backbone_sha256", backbone_sha}};
    for (int l = adv.lo; l <= adv.hi; ++l) {
        const auto i = static_cast<std::size_t>(l - adv.lo);
        const std::string suffix = ".l" + std::to_string(l);
        ck.add("adv.mean" + suffix, adv.mean[i]);
        ck.add("adv.var" + suffix, adv.var[i]);
        ck.add("clean.mean" + suffix, clean.mean[i]);
        ck.add("clean.var" + suffix, clean.var[i]);
    }
    return ck;
}

ReferenceStatistics ReferenceStatistics::from_checkpoint(const io::Checkpoint& ck) {
    if (ck.kind != "reference-stats") throw std::runtime_error("checkpoint kind '" + ck.kind + "' is not reference statistics");
    ReferenceStatistics r;
    r.adv.lo = r.clean.lo = ck.meta.at("layer_lo").get<int>();
    r.adv.hi = r.clean.hi = ck.meta.at("layer_hi").get<int>();
    r.pooling = parse_pooling(ck.meta.at("pooling").get<std::string>());
    r.adv_prompt_sha = ck.meta.at("adv_prompt_sha256").get<std::string>();
    r.clean_prompt_sha = ck.meta.at("clean_prompt_sha256").get<std::string>();
    r.backbone_sha = ck.meta.at("backbone_sha256").get<std::string>();
    for (int l = r.adv.lo; l <= r.adv.hi; ++l) {
        const std::string suffix = ".l" + std::to_string(l);
        r.adv.mean.push_back(ck.get("adv.mean" + suffix));
        r.adv.var.push_back(ck.get("adv.var" + suffix));
        r.clean.mean.push_back(ck.get("clean.mean" + suffix));
        r.clean.var.push_back(ck.get("clean.var" + suffix));
    }
    return r;
}

Var reference_distance(const StatisticsVars& cur, const LayerStatistics& ref) {
    if (cur.lo != ref.lo || cur.hi != ref.hi) {
        throw std::invalid_argument("alignment: current layers [" + std::to_string(cur.lo) + ", " + std::to_string(cur.hi) +
                                    "] do not match reference layers [" + std::to_string(ref.lo) + ", " +
                                    std::to_string(ref.hi) + "]");
    }
    Var total;
    for (std::size_t i = 0; i < cur.mean.size(); ++i) {
        Var term = ad::add(ad::l1_distance(cur.mean[i], ad::constant(ref.mean[i])),
                           ad::l1_distance(cur.var[i], ad::constant(ref.var[i])));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::scale(total, 1.0 / static_cast<double>(cur.mean.size()));
}

Var alignment_loss(const StatisticsVars& cur, const ReferenceStatistics& ref, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha: must lie in [0, 1]");
    return ad::add(ad::scale(reference_distance(cur, ref.adv), alpha),
                   ad::scale(reference_distance(cur, ref.clean), 1.0 - alpha));
}

}  // namespace tame::engine
