#pragma once

#include "tame/attacks/attacks.hpp"
#include "tame/engine/losses.hpp"
#include "tame/moe/prompt_moe.hpp"
#include "tame/vlm/dataset.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tame::engine {

struct AptConfig {
    double epsilon = 4.0 / 255.0;
    bool adversarial = true;  // false trains the clean prompt
    int attack_steps = 2;
    double attack_step = 1.0 / 255.0;
    int epochs = 10;
    int batch = 32;
    double lr = 0.01;
    double init_scale = 0.02;
    // Robust accuracy on the public split before and after training is
    // measured with PGD of this many steps at `epsilon`.
    int eval_attack_steps = 10;
    std::size_t eval_samples = 256;
    std::uint64_t seed = 0;
    bool verbose = false;

    void validate() const;
    nlohmann::json to_json() const;
};

struct AptReport {
    double clean_before = 0.0;
    double robust_before = 0.0;
    double clean_after = 0.0;
    double robust_after = 0.0;
    std::vector<double> epoch_loss;
    // Set when adversarial training failed to beat the empty prompt.
    bool flagged = false;
};

// Single-prompt (E = 1) adversarial prompt tuning on `public_split` with the
// backbone frozen. `shape.experts` is forced to 1.
moe::MixtureOfPrompts apt_train(const vlm::ToyDualEncoder& model, const vlm::Dataset& public_split,
                                moe::BankShape shape, const AptConfig& cfg, AptReport* report = nullptr);

// Accuracy of the prompted model on `images` (rows) against task labels.
double prompted_accuracy(const vlm::ToyDualEncoder& model, const moe::MixtureOfPrompts& bank,
                         const std::vector<int>& classes, const ad::Matrix& images, const std::vector<int>& labels);

struct ReferenceConfig {
    attacks::AttackConfig attack;  // applied to the empty-prompt backbone
    vlm::Pooling pooling = vlm::Pooling::TokenMean;
    std::uint64_t seed = 0;
    std::size_t chunk = 128;
};

// Per-layer statistics over every layer 1..L: adversarial images under
// `robust`, clean images under `clean`. Streaming (Welford) accumulation.
ReferenceStatistics precompute_references(const vlm::ToyDualEncoder& model, const vlm::Dataset& public_split,
                                          const moe::MixtureOfPrompts& robust, const moe::MixtureOfPrompts& clean,
                                          const ReferenceConfig& cfg);

// Streaming statistics of a sequence of D-vectors.
class WelfordAccumulator {
public:
    explicit WelfordAccumulator(ad::Index dim = 0);
    void add(const ad::Matrix& rows);  // each row is one observation
    std::size_t count() const { return n_; }
    ad::Matrix mean() const { return mean_; }
    // Unbiased (n - 1) variance; needs two observations.
    ad::Matrix variance() const;

private:
    std::size_t n_ = 0;
    ad::Matrix mean_;
    ad::Matrix m2_;
};

std::string bank_digest(const moe::MixtureOfPrompts& bank);

}  // namespace tame::engine
