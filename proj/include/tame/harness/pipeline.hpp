#pragma once

#include "tame/harness/config.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace tame::harness {

// Artifact store rooted at a work directory. Every artifact carries a
// provenance digest of the configuration that produced it in a JSON sidecar
// (<file>.json); a stage reuses a matching artifact, builds a missing one and
// refuses to touch one built from a different configuration.
class Workspace {
public:
    Workspace(std::string root, ExperimentConfig cfg, bool quiet = false);

    const ExperimentConfig& config() const { return cfg_; }
    const std::string& root() const { return root_; }
    bool quiet() const { return quiet_; }

    void gen_data();
    void train_backbone();
    void train_surrogate();
    void warmstart(const moe::BankShape& shape);
    void stats(const moe::BankShape& shape, vlm::Pooling pooling);
    void attack_cache(const attacks::AttackConfig& attack);
    // Every artifact a cell needs, built in dependency order.
    void prepare_cell(const ExperimentConfig& cell);

    // Loaders; safe to call from several threads once the artifacts exist.
    std::shared_ptr<const vlm::Dataset> dataset(const std::string& split);
    std::shared_ptr<const vlm::ToyDualEncoder> backbone();
    std::shared_ptr<const vlm::ToyDualEncoder> surrogate();
    moe::MixtureOfPrompts robust_prompt(const moe::BankShape& shape);
    moe::MixtureOfPrompts clean_prompt(const moe::BankShape& shape);
    engine::ReferenceStatistics references(const moe::BankShape& shape, vlm::Pooling pooling);
    std::shared_ptr<const attacks::AttackCache> attacked(const attacks::AttackConfig& attack);

    std::string backbone_path() const;
    std::string data_path(const std::string& split) const;
    std::string warmstart_dir(const moe::BankShape& shape) const;
    std::string stats_path(const moe::BankShape& shape, vlm::Pooling pooling) const;
    std::string attack_path(const attacks::AttackConfig& attack) const;

    // Provenance digests.
    std::string data_digest() const;
    std::string backbone_digest() const;
    std::string surrogate_digest() const;
    std::string warmstart_digest(const moe::BankShape& shape) const;
    std::string stats_digest(const moe::BankShape& shape, vlm::Pooling pooling) const;
    std::string attack_digest(const attacks::AttackConfig& attack) const;

    static const std::vector<std::string>& splits();

private:
    // True when the artifact exists with this digest; throws when it exists
    // with another one.
    bool current(const std::string& path, const std::string& digest) const;
    void stamp(const std::string& path, const std::string& digest, const nlohmann::json& report) const;
    void log(const std::string& msg) const;
    moe::BankShape full_shape(const moe::BankShape& shape) const;

    std::string root_;
    ExperimentConfig cfg_;
    bool quiet_;
    std::mutex mu_;
    std::map<std::string, std::shared_ptr<const vlm::Dataset>> datasets_;
    std::shared_ptr<const vlm::ToyDualEncoder> backbone_;
    std::shared_ptr<const vlm::ToyDualEncoder> surrogate_;
    std::map<std::string, std::shared_ptr<const attacks::AttackCache>> attacks_;
};

std::string shape_key(const moe::BankShape& shape);

// One evaluated test sample.
struct SampleRow {
    int sample_id = 0;
    int label = 0;
    int pred_no_defense = -1;
    int pred_frozen = -1;
    int pred_tame = -1;
    double loss_pre = 0.0;   // L_TAME before the first step (NaN without steps)
    double loss_post = 0.0;  // after the last step on the same views
    double entropy_pre = 0.0;
    double alignment_pre = 0.0;
    double moe_pre = 0.0;
    double drift = 0.0;      // L2 distance of the state from the snapshot
    int selected = 0;
    bool reset = false;
    bool aborted = false;
    std::string pbar;        // first-step routing, experts ':' joined, blocks ';' joined
    double wall_ms = 0.0;
};

std::string csv_header();
std::string csv_line(const SampleRow& r);
std::vector<SampleRow> read_samples_csv(const std::string& path);

struct CellContext {
    std::string id;
    std::uint64_t seed = 0;
    int bootstrap = 1000;
    int steps = 0;
};

// Aggregates rows into the cell summary (accuracies with paired bootstrap
// intervals, descent fraction, drift, aborts). Deterministic.
nlohmann::json summarize(const std::vector<SampleRow>& rows, const CellContext& ctx);

struct CellOutput {
    std::vector<SampleRow> rows;
    nlohmann::json summary;
};

// Runs one cell against prepared artifacts. `on_row` sees rows in order.
CellOutput evaluate_cell(Workspace& ws, const ExperimentConfig& cell, const std::string& id,
                         const std::function<void(const SampleRow&)>& on_row = {});

// Writes samples.csv, summary.json and config.json under dir.
void write_cell(const std::string& dir, const ExperimentConfig& cell, const CellOutput& out);

struct SweepResult {
    std::vector<std::string> cells;
    std::vector<std::string> failed;
};

// Cartesian sweep over `axes`; `base` holds fixed overrides applied to every
// cell. Cells already complete with the same configuration are kept.
SweepResult run_sweep(Workspace& ws, const std::vector<std::string>& axes, const Overrides& base,
                      const std::string& out_dir, int threads);

struct ReportResult {
    std::string markdown;
    std::vector<std::string> missing;
    std::vector<std::string> failed;
};

// Tables from a sweep directory; writes report.md and report.csv there.
ReportResult write_report(const std::string& results_dir);

struct VerifyResult {
    int checked = 0;
    std::vector<std::string> problems;
};

// Re-aggregates every samples.csv under a sweep or cell directory and
// compares it with the stored summary.
VerifyResult verify_results(const std::string& results_dir, double tolerance = 1e-9);

}  // namespace tame::harness
