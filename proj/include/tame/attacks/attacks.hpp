#pragma once

#include "tame/io/checkpoint.hpp"
#include "tame/vlm/toy_vlm.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace tame::attacks {

enum class Variant { PGD, CW, DI };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct AttackConfig {
    double epsilon = 4.0 / 255.0;
    int steps = 100;
    // 0 means epsilon / 4.
    double step_size = 0.0;
    Variant variant = Variant::PGD;
    bool random_start = true;
    double cw_kappa = 0.0;
    // Input-diversity transform (DI only).
    double di_probability = 0.5;
    int di_min_size = 12;

    double effective_step() const { return step_size > 0.0 ? step_size : epsilon / 4.0; }
    // Throws std::invalid_argument naming the offending field.
    void validate() const;
};

// Differentiable logits for a stack of images (N x pixels) -> N x K.
using LogitFn = std::function<ad::Var(const ad::Var& pixels)>;

// Frozen backbone with empty prompts, classes as the K-way label space.
LogitFn backbone_logits(const vlm::ToyDualEncoder& model, const std::vector<int>& classes);

// Clamp into the epsilon ball around `clean` and into [0, 1].
ad::Matrix project(const ad::Matrix& x, const ad::Matrix& clean, double epsilon);

// Batched attacks. Rows of `clean` are images; image i draws its randomness
// from (seed, first_index + i) so results do not depend on batching.
ad::Matrix pgd(const LogitFn& f, const ad::Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
               std::uint64_t seed, std::uint64_t first_index = 0);
ad::Matrix cw(const LogitFn& f, const ad::Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
              std::uint64_t seed, std::uint64_t first_index = 0);
// PGD through the random resize-and-pad transform; `f` should be a surrogate.
ad::Matrix di(const LogitFn& f, const ad::Matrix& clean, const std::vector<int>& labels, const AttackConfig& cfg,
              std::uint64_t seed, std::uint64_t first_index = 0, ad::Index side = 16);

// Dispatch on cfg.variant, chunked so memory stays bounded.
ad::Matrix run_attack(const LogitFn& f, const ad::Matrix& clean, const std::vector<int>& labels,
                      const AttackConfig& cfg, std::uint64_t seed, std::size_t chunk = 128);

// Nearest-neighbour resize to `size` then zero-pad back to side x side at
// (top, left); rows are images.
ad::Var resize_pad(const ad::Var& pixels, ad::Index side, ad::Index size, ad::Index top, ad::Index left);

// Per-image cross-entropy under f (no gradient).
std::vector<double> per_sample_loss(const LogitFn& f, const ad::Matrix& images, const std::vector<int>& labels);
std::vector<int> predictions(const LogitFn& f, const ad::Matrix& images);

struct AttackCache {
    std::uint64_t dataset_seed = 0;
    std::uint64_t attack_seed = 0;
    AttackConfig config;
    std::string model_digest;
    ad::Matrix images;  // adversarial, one row per sample
    std::vector<int> labels;  // task labels

    std::string key() const;
};

std::string cache_key(std::uint64_t dataset_seed, Variant v, double epsilon, int steps);
io::Checkpoint to_checkpoint(const AttackCache& c);
AttackCache cache_from_checkpoint(const io::Checkpoint& ck);

}  // namespace tame::attacks
