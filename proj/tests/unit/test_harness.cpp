#include "tame/harness/config.hpp"
#include "tame/harness/pipeline.hpp"
#include "tame/io/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace tame;
using namespace tame::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.seed = 3;
    c.data.backbone_per_class = 12;
    c.data.heldout_per_class = 4;
    c.data.public_per_class = 6;
    c.data.test_per_class = 2;
    c.backbone.epochs = 1;
    c.backbone.target_accuracy = 0.0;
    c.surrogate.epochs = 1;
    c.surrogate.target_accuracy = 0.0;
    c.apt.epochs = 1;
    c.apt.eval_samples = 8;
    c.apt.eval_attack_steps = 1;
    c.attack.steps = 2;
    c.references.attack_steps = 1;
    c.tame.views = 31;
    c.eval.samples = 12;
    c.eval.bootstrap = 50;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("tame_harness_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    return p;
}

SampleRow row(int id, int label, int nd, int fr, int tm, double pre = 1.0, double post = 0.5) {
    SampleRow r;
    r.sample_id = id;
    r.label = label;
    r.pred_no_defense = nd;
    r.pred_frozen = fr;
    r.pred_tame = tm;
    r.loss_pre = pre;
    r.loss_post = post;
    r.drift = 0.1 * id;
    r.selected = 4;
    r.pbar = "0.5:0.5";
    return r;
}

}  // namespace

TEST(ExperimentConfig, DefaultsValidateAndRoundTrip) {
    ExperimentConfig c;
    EXPECT_NO_THROW(c.validate());
    const json j = c.to_json();
    EXPECT_EQ(ExperimentConfig::from_json(j).to_json(), j);
    EXPECT_EQ(j.at("tame").at("lr").get<double>(), 0.025);
    EXPECT_EQ(j.at("sweep").at("reset").back(), "inf");
    EXPECT_EQ(ExperimentConfig::from_json(json::object()).to_json(), j);
}

TEST(ExperimentConfig, ErrorsNameTheField) {
    EXPECT_EQ(error_of([] { ExperimentConfig::from_json({{"data", {{"bogus", 1}}}}); }), "data.bogus: unknown field");
    EXPECT_EQ(error_of([] { ExperimentConfig::from_json({{"tame", {{"lrr", 1}}}}); }), "tame.lrr: unknown field");
    EXPECT_TRUE(starts_with(error_of([] { ExperimentConfig::from_json({{"model", {{"dim", "wide"}}}}); }), "model.dim: wrong type"));
    EXPECT_TRUE(starts_with(error_of([] { ExperimentConfig::from_json({{"sweep", {{"reset", {4, 0}}}}}); }), "sweep.reset[1]"));
    EXPECT_TRUE(starts_with(error_of([] { ExperimentConfig::from_json({{"bank", {{"design", "XL"}}}}); }), "bank.design"));

    auto invalid = [](const json& j) { return error_of([&] { ExperimentConfig::from_json(j).validate(); }); };
    EXPECT_TRUE(starts_with(invalid({{"tame", {{"tau", 0.001}}}}), "tame.tau"));
    EXPECT_TRUE(starts_with(invalid({{"eval", {{"samples", 100000}}}}), "eval.samples"));
    EXPECT_TRUE(starts_with(invalid({{"sweep", {{"experts", {1, 0}}}}}), "sweep.experts[1]"));
    EXPECT_TRUE(starts_with(invalid({{"sweep", {{"depth", {2, 9}}}}}), "sweep.depth[1]"));
    EXPECT_TRUE(starts_with(invalid({{"sweep", {{"align", {{1, 2}, {3, 9}}}}}}), "sweep.align[1]"));
    EXPECT_TRUE(starts_with(invalid({{"sweep", {{"ablation", {"none", "dropout"}}}}}), "sweep.ablation[1]"));
    EXPECT_TRUE(starts_with(invalid({{"attack", {{"epsilon", 300}}}}), "attack.epsilon"));
    EXPECT_TRUE(starts_with(invalid({{"backbone", {{"batch", 0}}}}), "backbone.batch"));
}

TEST(Overrides, MapOntoTheConfig) {
    const ExperimentConfig base;
    auto c = apply_overrides(base, {{"experts", "7"}, {"epsilon", "2"}, {"reset", "inf"}, {"align", "2-4"}, {"design", "VLJ"}});
    EXPECT_EQ(c.tame.experts, 7);
    EXPECT_DOUBLE_EQ(c.attack.epsilon, 2.0 / 255.0);
    EXPECT_EQ(c.tame.reset_interval, 0);
    EXPECT_EQ(c.tame.align_lo, 2);
    EXPECT_EQ(c.tame.align_hi, 4);
    EXPECT_EQ(c.bank.design, moe::Design::VLJ);

    EXPECT_EQ(apply_overrides(base, {{"ablation", "none"}}).tame.steps, 0);
    const auto ent = apply_overrides(base, {{"ablation", "entropy"}}).tame;
    EXPECT_TRUE(ent.use_entropy && !ent.use_alignment && ent.use_moe);
    const auto al = apply_overrides(base, {{"ablation", "align"}}).tame;
    EXPECT_TRUE(!al.use_entropy && al.use_alignment && al.use_moe);
    const auto both = apply_overrides(base, {{"ablation", "both"}}).tame;
    EXPECT_TRUE(both.use_entropy && both.use_alignment && both.steps == base.tame.steps);

    EXPECT_TRUE(starts_with(error_of([&] { apply_overrides(base, {{"nope", "1"}}); }), "nope"));
    EXPECT_TRUE(starts_with(error_of([&] { apply_overrides(base, {{"steps", "1.5"}}); }), "steps"));
    EXPECT_TRUE(starts_with(error_of([&] { apply_overrides(base, {{"reset", "0"}}); }), "reset"));
}

TEST(Overrides, PlanIsTheCartesianProduct) {
    const ExperimentConfig c;
    EXPECT_EQ(plan_cells(c, {"reset"}).size(), 7u);
    EXPECT_EQ(plan_cells(c, {"experts"}).size(), 5u);
    const auto grid = plan_cells(c, {"steps", "epsilon"});
    ASSERT_EQ(grid.size(), 12u);
    std::set<std::string> ids;
    for (const auto& o : grid) ids.insert(cell_id(o));
    EXPECT_EQ(ids.size(), 12u);
    EXPECT_EQ(cell_id(grid.front()), "steps-0_epsilon-1");
    EXPECT_TRUE(plan_cells(c, {}).empty());
    EXPECT_ANY_THROW(plan_cells(c, {"steps", "steps"}));
    EXPECT_ANY_THROW(plan_cells(c, {"temperature"}));
}

TEST(Seeds, DerivedStreamsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(7, "views"), derive_seed(7, "views"));
    EXPECT_NE(derive_seed(7, "views"), derive_seed(8, "views"));
    EXPECT_NE(derive_seed(7, "views"), derive_seed(7, "bank"));
}

TEST(Summary, AccuraciesAndPairedIntervals) {
    std::vector<SampleRow> rows;
    // 10 samples: no defense right on 2, frozen on 4, tame on 7.
    for (int i = 0; i < 10; ++i) rows.push_back(row(i, 1, i < 2 ? 1 : 0, i < 4 ? 1 : 0, i < 7 ? 1 : 0, 1.0, i < 9 ? 0.5 : 2.0));
    const CellContext ctx{"cell", 5, 400, 1};
    const json s = summarize(rows, ctx);
    EXPECT_DOUBLE_EQ(s["accuracy"]["no_defense"]["mean"].get<double>(), 0.2);
    EXPECT_DOUBLE_EQ(s["accuracy"]["frozen"]["mean"].get<double>(), 0.4);
    EXPECT_DOUBLE_EQ(s["accuracy"]["tame"]["mean"].get<double>(), 0.7);
    EXPECT_NEAR(s["gap_tame_frozen"]["mean"].get<double>(), 0.3, 1e-15);
    EXPECT_DOUBLE_EQ(s["descent_fraction"].get<double>(), 0.9);
    // Nested predictions: the paired gap can never be negative.
    EXPECT_GE(s["gap_tame_frozen"]["lo"].get<double>(), 0.0);
    for (const char* k : {"no_defense", "frozen", "tame"}) {
        const auto& ci = s["accuracy"][k];
        EXPECT_LE(ci["lo"].get<double>(), ci["mean"].get<double>());
        EXPECT_GE(ci["hi"].get<double>(), ci["mean"].get<double>());
    }
    EXPECT_EQ(summarize(rows, ctx).dump(), s.dump());
    EXPECT_NE(summarize(rows, {"other", 5, 400, 1}).dump(), s.dump());

    std::vector<SampleRow> perfect(6, row(0, 2, 2, 2, 2));
    const json p = summarize(perfect, ctx);
    EXPECT_EQ(p["accuracy"]["tame"]["lo"].get<double>(), 1.0);
    EXPECT_EQ(p["gap_tame_frozen"]["hi"].get<double>(), 0.0);

    const json frozen_only = summarize(rows, {"c", 5, 10, 0});
    EXPECT_TRUE(frozen_only["descent_fraction"].is_null());
    EXPECT_ANY_THROW(summarize({}, ctx));
}

TEST(Summary, CsvRoundTripPreservesAggregates) {
    std::vector<SampleRow> rows;
    for (int i = 0; i < 9; ++i) {
        auto r = row(i, i % 3, (i + 1) % 3, i % 3, i % 2, 1.0 / (i + 3), 1.0 / (i + 7));
        r.entropy_pre = std::sqrt(2.0) * i;
        r.aborted = i == 4;
        rows.push_back(r);
    }
    const fs::path dir = scratch("csv");
    fs::create_directories(dir);
    std::string csv = csv_header() + "\n";
    for (const auto& r : rows) csv += csv_line(r) + "\n";
    io::write_file((dir / "samples.csv").string(), csv);
    const auto back = read_samples_csv((dir / "samples.csv").string());
    ASSERT_EQ(back.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].loss_pre, rows[i].loss_pre);
        EXPECT_EQ(back[i].entropy_pre, rows[i].entropy_pre);
        EXPECT_EQ(back[i].aborted, rows[i].aborted);
        EXPECT_EQ(back[i].pbar, rows[i].pbar);
    }
    const CellContext ctx{"x", 1, 100, 2};
    EXPECT_EQ(summarize(back, ctx).dump(), summarize(rows, ctx).dump());
    io::write_file((dir / "bad.csv").string(), "sample_id,label\n1,2\n");
    EXPECT_ANY_THROW(read_samples_csv((dir / "bad.csv").string()));
    fs::remove_all(dir);
}

TEST(Workspace, EvaluateIsReproducibleAndVerifiable) {
    const fs::path root = scratch("ws");
    Workspace ws((root / "work").string(), tiny_config(), true);
    const ExperimentConfig cell = apply_overrides(ws.config(), {{"steps", "2"}});
    ws.prepare_cell(cell);
    const auto a = evaluate_cell(ws, cell, "steps-2");
    const auto b = evaluate_cell(ws, cell, "steps-2");
    EXPECT_EQ(a.summary.dump(), b.summary.dump());
    EXPECT_TRUE(a.summary["backbone"]["unchanged"].get<bool>());
    ASSERT_EQ(a.rows.size(), 12u);
    for (const auto& r : a.rows) EXPECT_TRUE(std::isfinite(r.loss_pre) && std::isfinite(r.loss_post));

    const std::string out = (root / "cell").string();
    write_cell(out, cell, a);
    EXPECT_TRUE(verify_results(out).problems.empty());
    // A tampered loss must be caught.
    std::string csv = io::read_file(out + "/samples.csv");
    std::size_t field = csv.find('\n') + 1;
    for (int k = 0; k < 8; ++k) field = csv.find(',', field) + 1;
    csv.insert(field, "9");
    io::write_file(out + "/samples.csv", csv);
    EXPECT_FALSE(verify_results(out).problems.empty());

    // Same directory, different seed: refused rather than silently reused.
    ExperimentConfig other = tiny_config();
    other.seed = 4;
    Workspace ws2((root / "work").string(), other, true);
    EXPECT_NE(error_of([&] { ws2.gen_data(); }).find("different seed or configuration"), std::string::npos);
    fs::remove_all(root);
}

TEST(Workspace, SweepReportAndMissingCells) {
    const fs::path root = scratch("sweep");
    ExperimentConfig cfg = tiny_config();
    cfg.sweep.reset = {1, 0};
    Workspace ws((root / "work").string(), cfg, true);
    const std::string out = (root / "results").string();
    const auto res = run_sweep(ws, {"reset"}, {{"samples", "6"}}, out, 2);
    EXPECT_EQ(res.cells.size(), 2u);
    EXPECT_TRUE(res.failed.empty());
    auto rep = write_report(out);
    EXPECT_TRUE(rep.missing.empty());
    EXPECT_NE(rep.markdown.find("| inf |"), std::string::npos);
    EXPECT_TRUE(verify_results(out).problems.empty());

    const std::string serial = io::read_file(out + "/cells/reset-1/summary.json");
    fs::remove(out + "/cells/reset-inf/summary.json");
    rep = write_report(out);
    ASSERT_EQ(rep.missing.size(), 1u);
    EXPECT_EQ(rep.missing[0], "reset-inf");
    EXPECT_FALSE(verify_results(out).problems.empty());

    // Resuming completes the missing cell and leaves the finished one alone.
    run_sweep(ws, {"reset"}, {{"samples", "6"}}, out, 1);
    EXPECT_TRUE(write_report(out).missing.empty());
    EXPECT_EQ(io::read_file(out + "/cells/reset-1/summary.json"), serial);
    EXPECT_ANY_THROW(run_sweep(ws, {"reset"}, {{"samples", "5"}}, out, 1));
    EXPECT_ANY_THROW(run_sweep(ws, {"reset"}, {{"reset", "2"}}, (root / "r2").string(), 1));
    fs::remove_all(root);
}

TEST(Workspace, EmptyBankIsTheBareBackbone) {
    const fs::path root = scratch("empty");
    Workspace ws((root / "work").string(), tiny_config(), true);
    const ExperimentConfig cell = apply_overrides(ws.config(), {{"depth", "0"}, {"steps", "2"}});
    ws.prepare_cell(cell);
    const auto out = evaluate_cell(ws, cell, "depth-0");
    for (const auto& r : out.rows) {
        EXPECT_EQ(r.pred_frozen, r.pred_no_defense);
        EXPECT_EQ(r.pred_tame, r.pred_no_defense);
        EXPECT_EQ(r.drift, 0.0);
    }
    fs::remove_all(root);
}
