#pragma once

#include "tame/attacks/attacks.hpp"
#include "tame/autodiff/adamw.hpp"
#include "tame/engine/losses.hpp"
#include "tame/moe/prompt_moe.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tame::engine {

struct TameConfig {
    double alpha = 0.5;
    int steps = 1;
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    long reset_interval = 1;  // 0 means never reset
    int experts = 5;
    double tau = 0.1;
    int views = 255;  // augmented views M, the original is added on top
    double lambda_bal = 0.1;
    double lambda_div = 0.01;
    long warmup_steps = 4;
    int align_lo = 1;
    int align_hi = 2;
    vlm::Pooling pooling = vlm::Pooling::TokenMean;
    AugmentConfig augment;
    bool use_entropy = true;
    bool use_alignment = true;
    bool use_moe = true;
    // Re-evaluate the objective after each step on the same views (with the
    // pre-step gamma) and record it.
    bool record_post_loss = false;

    // Throws std::invalid_argument naming the offending field.
    void validate(int image_layers) const;
    nlohmann::json to_json() const;
    static TameConfig from_json(const nlohmann::json& j);
};

// Text embeddings under a prompt source after its image pass. Identical
// routing rows are collapsed into one shared K x D block when no router
// parameter is being differentiated.
ad::Var prompted_text(const vlm::ToyDualEncoder& model, const moe::BoundMixture& bound,
                      moe::MixturePromptSource& src, const std::vector<int>& classes, ad::Index batch);

// Logits of a stack of images under a bank (constants), differentiable in
// the pixels. Used for attacks through the defense and for evaluation.
attacks::LogitFn bank_logits(const vlm::ToyDualEncoder& model, const moe::MixtureOfPrompts& bank,
                             const std::vector<int>& classes);

struct StepRecord {
    double loss = 0.0;
    double entropy = 0.0;
    double alignment = 0.0;
    double moe = 0.0;
    double gamma = 0.0;
    double post_loss = 0.0;  // valid when record_post_loss
    int prediction = -1;     // original view after this step
};

struct SampleResult {
    int prediction_before = -1;  // original view under the state at entry
    int prediction = -1;
    std::vector<StepRecord> steps;
    std::vector<std::vector<double>> pbar;  // per TAME block at the first step
    std::size_t selected = 0;
    bool reset_applied = false;
    bool aborted = false;
    std::string error;
};

class TameEngine {
public:
    // `refs` may be empty when alignment is disabled.
    TameEngine(const vlm::ToyDualEncoder& model, std::vector<int> classes, moe::MixtureOfPrompts warm_start,
               std::optional<ReferenceStatistics> refs, TameConfig cfg);

    // Applies the reset policy, adapts on x and predicts the original view.
    SampleResult process(const vlm::Image& x, std::uint64_t view_seed);

    struct Objective {
        ad::Var total, entropy, alignment, moe;
        std::vector<std::vector<double>> pbar;  // view-averaged routing per block
    };
    // L_TAME on a stack of selected views under `bound`.
    Objective objective(const moe::BoundMixture& bound, const ad::Matrix& views, double gamma) const;

    void reset();
    // Called after every optimizer step with the step index and new state.
    using StepObserver = std::function<void(int step, const moe::MixtureOfPrompts& state)>;
    void set_step_observer(StepObserver f) { observer_ = std::move(f); }
    int predict(const vlm::Image& x) const;
    // Class probabilities of every view under the current state.
    ad::Matrix view_logits(const std::vector<vlm::Image>& views) const;

    const moe::MixtureOfPrompts& state() const { return state_; }
    const moe::MixtureOfPrompts& snapshot() const { return snapshot_; }
    double drift() const { return state_.distance(snapshot_); }
    long step_counter() const { return t_; }
    long samples() const { return samples_; }
    const TameConfig& config() const { return cfg_; }

private:
    void optimizer_step(const moe::BoundMixture& bound, const ad::Gradients& g);

    const vlm::ToyDualEncoder& model_;
    std::vector<int> classes_;
    moe::MixtureOfPrompts snapshot_;
    moe::MixtureOfPrompts state_;
    std::optional<ReferenceStatistics> refs_;
    TameConfig cfg_;
    ad::AdamW opt_;
    ad::Var shared_text_;
    StepObserver observer_;
    long t_ = 0;
    long samples_ = 0;
};

}  // namespace tame::engine
