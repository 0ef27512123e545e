#pragma once

#include "tame/attacks/attacks.hpp"
#include "tame/engine/engine.hpp"
#include "tame/engine/warmstart.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace tame::harness {

struct DataSpec {
    int backbone_per_class = 500;  // contrastive pre-training, all 16 classes
    int heldout_per_class = 50;
    int public_per_class = 100;    // warm-start and reference statistics
    int test_per_class = 64;       // downstream zero-shot task
    vlm::ShapeStyle style;
};

// Attack used on the public split for the adversarial statistics; pooling
// follows tame.pooling.
struct ReferenceSpec {
    double epsilon = 4.0 / 255.0;
    int attack_steps = 10;
};

struct EvalSpec {
    int samples = 512;
    int threads = 1;
    int bootstrap = 1000;
};

// Values of every sweep axis. epsilon is in units of 1/255; a reset of 0
// means never (written "inf" in JSON).
struct SweepSpec {
    std::vector<int> steps{0, 1, 2, 4};
    std::vector<double> epsilon{1, 2, 4};
    std::vector<int> experts{1, 3, 5, 7, 9};
    std::vector<int> depth{0, 1, 2, 3, 4};
    std::vector<int> length{0, 2, 4, 8, 32};
    std::vector<std::pair<int, int>> align{{1, 1}, {1, 2}, {1, 3}, {1, 4}, {2, 4}, {3, 4}};
    std::vector<long> reset{1, 2, 4, 8, 16, 32, 0};
    std::vector<moe::Design> design{moe::Design::V, moe::Design::VLJ, moe::Design::VLI};
    std::vector<std::string> ablation{"none", "entropy", "align", "both"};
};

inline const std::vector<std::string>& axis_names() {
    static const std::vector<std::string> names{"steps", "epsilon", "experts", "depth", "length",
                                                "align", "reset", "design", "ablation"};
    return names;
}

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DataSpec data;
    vlm::ModelSpec model;
    vlm::TrainConfig backbone;
    vlm::TrainConfig surrogate;  // independent model for transfer (DI) attacks
    engine::AptConfig apt;
    moe::BankShape bank;         // experts are taken from tame.experts
    double warm_noise = 0.02;
    ReferenceSpec references;
    attacks::AttackConfig attack;
    engine::TameConfig tame;
    EvalSpec eval;
    SweepSpec sweep;

    ExperimentConfig();
    // Checks every field and every sweep value; throws std::invalid_argument
    // whose message starts with the dotted field path.
    void validate() const;
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    static ExperimentConfig load(const std::string& path);
};

// Axis overrides of one evaluation cell, in axis_names() order.
using Overrides = std::map<std::string, std::string>;

std::string cell_id(const Overrides& o);
// Base config with the overrides applied (also "lr", "samples", "alpha").
ExperimentConfig apply_overrides(const ExperimentConfig& base, const Overrides& o);
// All cells of the cartesian product of the given axes.
std::vector<Overrides> plan_cells(const ExperimentConfig& cfg, const std::vector<std::string>& axes);
std::vector<std::string> axis_values(const ExperimentConfig& cfg, const std::string& axis);

// Stable 64-bit seed for a named stream.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag);

}  // namespace tame::harness
