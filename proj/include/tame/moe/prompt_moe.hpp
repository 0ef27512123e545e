#pragma once

#include "tame/io/checkpoint.hpp"
#include "tame/vlm/toy_vlm.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace tame::moe {

enum class Design { V, VLJ, VLI };

std::string design_name(Design d);
Design parse_design(const std::string& s);

struct BankShape {
    Design design = Design::VLI;
    int experts = 5;
    int depth = 3;   // prompted image layers 1..depth
    int length = 2;  // tokens per prompt
    int dim = 32;
    int text_layers = 2;

    // Number of layers that carry a textual prompt.
    int textual_layers() const;
    bool has_textual() const { return design != Design::V && textual_layers() > 0; }
    bool empty() const { return depth == 0 || length == 0; }
    void validate() const;
    nlohmann::json to_json() const;
    static BankShape from_json(const nlohmann::json& j);
};

// One expert's per-layer prompt tokens (visual derived through f for VLJ).
struct ExpertPrompt {
    Design design = Design::VLI;
    std::vector<ad::Matrix> visual;   // depth entries, length x dim
    std::vector<ad::Matrix> textual;  // textual_layers entries or empty
};

// Expert bank, joint projection and one router per prompted layer.
//
// Tensor layout per prompted layer l (0-based):
//   visual.l  E x (C*D)   absent for VLJ
//   textual.l E x (C*D)   VLJ: every prompted layer; VLI: l < text_layers
//   router.l.w D x E, router.l.b 1 x E
// plus joint.w D x D and joint.b 1 x D for VLJ.
class MixtureOfPrompts {
public:
    MixtureOfPrompts() = default;
    explicit MixtureOfPrompts(BankShape shape);

    // Experts ~ N(0, scale^2), identity joint projection, zero routers.
    static MixtureOfPrompts random(const BankShape& shape, std::uint64_t seed, double scale = 0.1);
    // Every expert copies `single` (E must be 1 there) plus N(0, noise^2);
    // routers are zero.
    static MixtureOfPrompts warm_start(const MixtureOfPrompts& single, int experts, double noise, std::uint64_t seed);

    const BankShape& shape() const { return shape_; }
    const vlm::ParameterStore& store() const { return store_; }
    vlm::ParameterStore& store() { return store_; }
    ExpertPrompt expert(int e) const;

    // Euclidean distance between the flattened parameter lists.
    double distance(const MixtureOfPrompts& other) const;

    io::Checkpoint to_checkpoint() const;
    static MixtureOfPrompts from_checkpoint(const io::Checkpoint& ck);

private:
    BankShape shape_;
    vlm::ParameterStore store_;
};

// Graph handles of one forward pass.
struct BoundMixture {
    BankShape shape;
    std::vector<ad::Var> visual, textual, router_w, router_b;
    ad::Var joint_w, joint_b;
    std::vector<ad::Var> all;  // store order

    static BoundMixture bind(const MixtureOfPrompts& m, bool trainable);
    // Uses caller-supplied handles (store order) in place of the bank values.
    static BoundMixture bind(const MixtureOfPrompts& m, std::vector<ad::Var> handles);
    // Per-expert flattened prompt at layer l, E x F (visual then textual).
    ad::Var flattened_experts(int layer) const;
};

// pi = mean over the T token rows of softmax(tokens W + b); batched over
// consecutive blocks of `tokens_per_sample` rows, giving B x E.
ad::Var route(const ad::Var& tokens, const ad::Var& w, const ad::Var& b, ad::Index tokens_per_sample);
// Sum_e pi_e P^e for every row of pi; experts is E x (C*D). Result (B*C) x D.
ad::Var mix(const ad::Var& pi, const ad::Var& experts, ad::Index length, ad::Index dim);
// f applied row-wise.
ad::Var joint_project(const ad::Var& tokens, const ad::Var& w, const ad::Var& b);

// (1/E) sum_e (pbar_e - 1/E)^2 for a 1 x E row.
ad::Var balance_loss(const ad::Var& pbar);
// 2/(E(E-1)) sum_{i<j} max(0, cos(p_i, p_j)) over the rows of E x F; 0 if E = 1.
ad::Var diversity_loss(const ad::Var& experts);
double warmup(long t, long t_warm);

struct BlockTerms {
    ad::Var pbar;     // 1 x E view-averaged routing
    ad::Var experts;  // E x F flattened bank at that block
};
// gamma * sum_blocks (lambda_bal L_bal + lambda_div L_div).
ad::Var moe_regularizer(const std::vector<BlockTerms>& blocks, double lambda_bal, double lambda_div, double gamma);

// Prompt source for the toy encoder: routes on the content tokens entering
// each prompted layer and inserts the mixed prompts. The textual prompt of a
// text layer reuses the image router output of the same layer index.
class MixturePromptSource : public vlm::PromptSource {
public:
    explicit MixturePromptSource(const BoundMixture& m);
    ad::Var visual(int layer, const ad::Var& content, ad::Index batch) override;
    ad::Var textual(int layer, ad::Index batch) override;
    bool has_textual() const override { return m_.shape.has_textual() && !m_.shape.empty(); }

    // batch 1 in textual() mixes with the first routed row; callers use it
    // only when every row is identical.
    // B x E routing weights per prompted layer of the last image pass.
    const std::vector<ad::Var>& routing() const { return pi_; }

private:
    const BoundMixture& m_;
    std::vector<ad::Var> pi_;
    ad::Index tokens_ = 0;
};

}  // namespace tame::moe
