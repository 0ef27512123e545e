#pragma once

#include "tame/autodiff/ops.hpp"
#include "tame/io/checkpoint.hpp"
#include "tame/vlm/dataset.hpp"

#include <json.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tame::vlm {

struct ModelSpec {
    int image_size = 16;
    int patch = 4;
    int dim = 32;
    int heads = 4;
    int mlp_hidden = 64;
    int image_layers = 4;
    int text_layers = 2;
    int template_tokens = 4;
    int vocab = kShapeClassCount;
    double temperature = 10.0;

    ad::Index patch_tokens() const { return static_cast<ad::Index>((image_size / patch) * (image_size / patch)); }
    // CLS + patches: the non-prompt part of every image sequence.
    ad::Index image_content_tokens() const { return patch_tokens() + 1; }
    // Template tokens followed by the class token.
    ad::Index text_content_tokens() const { return template_tokens + 1; }
    ad::Index pixels() const { return static_cast<ad::Index>(image_size) * image_size; }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);
};

// Named parameter matrices in a fixed order.
class ParameterStore {
public:
    void add(std::string name, ad::Matrix value);
    const ad::Matrix& get(const std::string& name) const;
    ad::Matrix& mutable_value(std::size_t i) { return values_.at(i); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<ad::Matrix>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    std::size_t parameter_count() const;
    // SHA-256 over names, shapes and raw bytes.
    std::string digest() const;

private:
    std::vector<std::string> names_;
    std::vector<ad::Matrix> values_;
};

struct BlockWeights {
    ad::Var ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

// Graph handles for every backbone parameter of one forward pass.
struct Weights {
    ad::Var patch_w, patch_b, cls, image_pos;
    std::vector<BlockWeights> image_blocks;
    ad::Var image_ln_g, image_ln_b, image_proj;
    ad::Var template_tokens, class_tokens, text_pos;
    std::vector<BlockWeights> text_blocks;
    ad::Var text_ln_g, text_ln_b, text_proj;
    std::vector<ad::Var> all;  // in ParameterStore order

    static Weights bind(const ModelSpec& spec, const ParameterStore& store, bool trainable);
};

// Supplies prompt tokens layer by layer during one batched forward pass.
// Layers are 0-based. Returned rows are sequence-major: rows [b*C, (b+1)*C)
// belong to sequence b.
class PromptSource {
public:
    virtual ~PromptSource() = default;
    // Visual prompt inserted in front of image layer `layer`; `content` holds
    // the (B*T) x D non-prompt tokens entering that layer. An undefined Var
    // keeps the prompt tokens already in the sequence.
    virtual ad::Var visual(int layer, const ad::Var& content, ad::Index batch) = 0;
    // Textual prompt for text layer `layer`, one per image of the preceding
    // image pass. Undefined means no replacement.
    virtual ad::Var textual(int layer, ad::Index batch) = 0;
    virtual bool has_textual() const = 0;
};

// The same per-layer prompt for every sequence (single-prompt pipelines).
class FixedPrompt : public PromptSource {
public:
    FixedPrompt() = default;
    FixedPrompt(std::vector<ad::Var> visual, std::vector<ad::Var> textual);
    ad::Var visual(int layer, const ad::Var& content, ad::Index batch) override;
    ad::Var textual(int layer, ad::Index batch) override;
    bool has_textual() const override;

private:
    std::vector<ad::Var> visual_;
    std::vector<ad::Var> textual_;
};

enum class Pooling { TokenMean, ClsOnly };

struct ImageEncoding {
    ad::Var embeddings;          // B x D, unit rows
    std::vector<ad::Var> hooks;  // per layer output, (B*S_l) x D
    std::vector<ad::Index> seq_len;
    ad::Index batch = 0;
    ad::Index content_tokens = 0;

    // Per-sequence pooled layer embedding (B x D) over the non-prompt tokens.
    ad::Var pooled(int layer, Pooling mode) const;
    // Non-prompt rows of a layer's output, (B*T) x D.
    ad::Var content(int layer) const;
};

ImageEncoding encode_images(const ModelSpec& spec, const Weights& w, const ad::Var& pixels, PromptSource* prompts);
// (batch*K) x D unit rows, sequence (b, k) at row b*K + k. batch must be 1
// when the prompt source carries no textual prompt.
ad::Var encode_texts(const ModelSpec& spec, const Weights& w, const std::vector<int>& class_ids, ad::Index batch,
                     PromptSource* prompts);
// B x K logits; text is either K x D (shared) or (B*K) x D (per image).
ad::Var class_logits(const ad::Var& image_emb, const ad::Var& text_emb, ad::Index num_classes, double temperature);

// softmax(temperature * image . text^T) for one image embedding.
ad::Matrix classify(const ad::Matrix& image_embedding, const ad::Matrix& text_embeddings, double temperature);

class TrainingShortfall : public std::runtime_error {
public:
    TrainingShortfall(double accuracy, double target);
    double accuracy;
    double target;
};

struct TrainConfig {
    int epochs = 30;
    int batch = 64;
    double lr = 2e-3;
    bool augment = true;
    double target_accuracy = 0.90;
    bool verbose = false;
};

struct TrainReport {
    double heldout_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

// Frozen CLIP-style dual encoder. Parameters are fixed at construction.
class ToyDualEncoder {
public:
    ToyDualEncoder(ModelSpec spec, ParameterStore params, std::uint64_t seed);

    static ToyDualEncoder initialize(const ModelSpec& spec, std::uint64_t seed);
    static ToyDualEncoder from_checkpoint(const io::Checkpoint& ckpt);
    io::Checkpoint to_checkpoint() const;

    const ModelSpec& spec() const { return spec_; }
    const ParameterStore& parameters() const { return params_; }
    const Weights& frozen() const { return frozen_; }
    std::uint64_t seed() const { return seed_; }

    struct SingleImage {
        ad::Matrix embedding;              // 1 x D
        std::vector<ad::Matrix> hooks;     // L entries, S x D
    };
    // Shallow prompt (layer 1 only) or empty.
    SingleImage encode_image(const Image& image, const ad::Matrix& visual_prompt = {}) const;
    ad::Matrix encode_text(int class_id, const ad::Matrix& textual_prompt = {}) const;

    ImageEncoding encode_images(const ad::Var& pixels, PromptSource* prompts = nullptr) const;
    ad::Var encode_texts(const std::vector<int>& class_ids, ad::Index batch = 1, PromptSource* prompts = nullptr) const;
    // Frozen K x D text embeddings of the classes without prompts.
    ad::Matrix class_embeddings(const std::vector<int>& class_ids) const;

    // Zero-shot predictions (index into class_ids) with empty prompts.
    std::vector<int> predict(const std::vector<Image>& images, const std::vector<int>& class_ids) const;

private:
    ModelSpec spec_;
    ParameterStore params_;
    Weights frozen_;
    std::uint64_t seed_ = 0;
};

double zero_shot_accuracy(const ToyDualEncoder& model, const Dataset& data);

// Contrastive pre-training over every class in `train`; throws
// TrainingShortfall if held-out zero-shot accuracy misses the target.
ToyDualEncoder train_backbone(const Dataset& train, const Dataset& heldout, const ModelSpec& spec, std::uint64_t seed,
                              const TrainConfig& cfg, TrainReport* report = nullptr);

}  // namespace tame::vlm
