#pragma once

#include "tame/autodiff/ops.hpp"
#include "tame/io/checkpoint.hpp"
#include "tame/vlm/toy_vlm.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tame::engine {

struct ViewSet {
    std::vector<vlm::Image> views;  // views[0] is the untouched input
    std::vector<bool> flipped;
    std::vector<double> entropies;  // filled by the caller
    std::vector<std::size_t> selected;
};

struct AugmentConfig {
    double crop_lo = 0.5;
    double crop_hi = 1.0;
    double flip_probability = 0.5;
};

// Original plus M random resized crops with optional horizontal flips.
ViewSet augment(const vlm::Image& image, int m, std::uint64_t seed, const AugmentConfig& cfg = {});

// ceil(tau * n), guarded against round-off in tau * n.
std::size_t selection_size(double tau, std::size_t n);
// Indices of the ceil(tau * n) lowest entropies; ties keep the lower index.
std::vector<std::size_t> select_views(const std::vector<double>& entropies, double tau);

// Shannon entropy of every row of softmax(logits), no gradient.
std::vector<double> row_entropies(const ad::Matrix& logits);
// Entropy of the mean of the probability rows (entropy of the average
// prediction, not the average entropy).
ad::Var entropy_loss(const ad::Var& probs);

// Per-layer mean and variance vectors; layers are 1-based, [lo, hi].
struct LayerStatistics {
    int lo = 1;
    int hi = 0;
    std::vector<ad::Matrix> mean;  // 1 x D each
    std::vector<ad::Matrix> var;

    int layers() const { return hi - lo + 1; }
    LayerStatistics slice(int new_lo, int new_hi) const;
};

struct StatisticsVars {
    int lo = 1;
    int hi = 0;
    std::vector<ad::Var> mean;
    std::vector<ad::Var> var;

    LayerStatistics values() const;
};

// Mean and unbiased variance across the batch of the pooled layer
// embeddings. Needs at least two views.
StatisticsVars current_statistics(const vlm::ImageEncoding& enc, int lo, int hi, vlm::Pooling pooling);

struct ReferenceStatistics {
    LayerStatistics adv;
    LayerStatistics clean;
    vlm::Pooling pooling = vlm::Pooling::TokenMean;
    std::string adv_prompt_sha;
    std::string clean_prompt_sha;
    std::string backbone_sha;

    ReferenceStatistics slice(int lo, int hi) const;
    io::Checkpoint to_checkpoint() const;
    static ReferenceStatistics from_checkpoint(const io::Checkpoint& ck);
};

// (1/|layers|) sum_l (|mu - mu_ref|_1 + |var - var_ref|_1).
ad::Var reference_distance(const StatisticsVars& cur, const LayerStatistics& ref);
// alpha * L_adv + (1 - alpha) * L_clean.
ad::Var alignment_loss(const StatisticsVars& cur, const ReferenceStatistics& ref, double alpha);

std::string pooling_name(vlm::Pooling p);
vlm::Pooling parse_pooling(const std::string& s);

}  // namespace tame::engine
