#include "tame/harness/config.hpp"
#include "tame/harness/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <optional>

using namespace tame;
using namespace tame::harness;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::string work;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> params;
    bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required) {
    cmd->add_option("--config", c.config, "experiment config (JSON); built-in defaults when omitted")->check(CLI::ExistingFile);
    cmd->add_option("--work", c.work, "artifact directory")->required();
    auto* seed = cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
    if (seed_required) seed->required();
    cmd->add_option("--param", c.params, "set a config field by dotted path, e.g. tame.lr=0.05 (repeatable)");
    cmd->add_flag("--quiet", c.quiet, "no progress output");
}

// Value text parsed as JSON when possible, otherwise taken as a string.
json param_value(const std::string& v) {
    try {
        return json::parse(v);
    } catch (const json::parse_error&) {
        return v;
    }
}

ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
    if (!c.params.empty()) {
        json j = cfg.to_json();
        for (const auto& p : c.params) {
            const auto eq = p.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("--param: expected path=value, got '" + p + "'");
            std::string path = "/" + p.substr(0, eq);
            std::replace(path.begin(), path.end(), '.', '/');
            j[json::json_pointer(path)] = param_value(p.substr(eq + 1));
        }
        cfg = ExperimentConfig::from_json(j);
    }
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

Overrides parse_sets(const std::vector<std::string>& sets) {
    Overrides o;
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("--set: expected key=value, got '" + s + "'");
        o[s.substr(0, eq)] = s.substr(eq + 1);
    }
    return o;
}

struct ShapeOpts {
    std::string design;
    std::optional<int> depth, length;
};

void add_shape(CLI::App* cmd, ShapeOpts& s) {
    cmd->add_option("--design", s.design, "prompt design (V, VLJ, VLI)");
    cmd->add_option("--depth", s.depth, "prompted image layers");
    cmd->add_option("--length", s.length, "tokens per prompt");
}

moe::BankShape shape_of(const ExperimentConfig& cfg, const ShapeOpts& s) {
    moe::BankShape b = cfg.bank;
    if (!s.design.empty()) b.design = moe::parse_design(s.design);
    if (s.depth) b.depth = *s.depth;
    if (s.length) b.length = *s.length;
    if (b.depth < 0 || b.depth > cfg.model.image_layers) throw std::invalid_argument("--depth: out of range");
    if (b.length < 0) throw std::invalid_argument("--length: must be >= 0");
    return b;
}

void print_summary(const json& s) {
    auto acc = [&](const char* k) {
        const auto& c = s.at("accuracy").at(k);
        std::printf("  %-11s %6.2f%%  [%.2f, %.2f]\n", k, 100 * c.at("mean").get<double>(), 100 * c.at("lo").get<double>(),
                    100 * c.at("hi").get<double>());
    };
    std::printf("cell %s: %d samples\n", s.at("cell").get<std::string>().c_str(), s.at("samples").get<int>());
    acc("no_defense");
    acc("frozen");
    acc("tame");
    const auto& g = s.at("gap_tame_frozen");
    std::printf("  gap        %+6.2f pts [%.2f, %.2f]\n", 100 * g.at("mean").get<double>(), 100 * g.at("lo").get<double>(),
                100 * g.at("hi").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Test-time adaptation of a mixture of prompts on a toy dual encoder"};
    app.require_subcommand(1);

    Common gen_c, bb_c, ws_c, st_c, ac_c, ev_c, sw_c;
    auto* gen = app.add_subcommand("gen-data", "generate the seeded datasets");
    add_common(gen, gen_c, false);

    auto* bb = app.add_subcommand("train-backbone", "pre-train the frozen dual encoder");
    add_common(bb, bb_c, false);
    bool with_surrogate = false;
    bb->add_flag("--surrogate", with_surrogate, "also train the transfer-attack surrogate");

    auto* wst = app.add_subcommand("warmstart", "adversarial and clean prompt tuning on the public split");
    add_common(wst, ws_c, false);
    ShapeOpts ws_shape;
    add_shape(wst, ws_shape);

    auto* st = app.add_subcommand("stats", "reference layer statistics");
    add_common(st, st_c, false);
    ShapeOpts st_shape;
    add_shape(st, st_shape);
    std::string pooling;
    st->add_option("--pooling", pooling, "token-mean or cls (default: tame.pooling)");

    auto* ac = app.add_subcommand("attack-cache", "attack the test split and cache the images");
    add_common(ac, ac_c, false);
    std::string variant;
    std::vector<double> eps;
    std::optional<int> attack_steps;
    ac->add_option("--variant", variant, "pgd, cw or di");
    ac->add_option("--epsilon", eps, "budget in units of 1/255 (repeatable)");
    ac->add_option("--steps", attack_steps, "attack iterations");

    auto* ev = app.add_subcommand("evaluate", "evaluate one cell");
    add_common(ev, ev_c, true);
    std::string ev_out;
    std::vector<std::string> ev_sets;
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--set", ev_sets, "cell override key=value (steps, epsilon, experts, depth, length, align, reset, design, "
                                     "ablation, lr, alpha, samples)");

    auto* sw = app.add_subcommand("sweep", "evaluate the cartesian product of sweep axes");
    add_common(sw, sw_c, true);
    std::string sw_out;
    std::vector<std::string> sw_axes, sw_sets;
    std::optional<int> threads;
    sw->add_option("--out", sw_out, "results directory")->required();
    sw->add_option("--axis", sw_axes, "sweep axis (repeatable)")->required();
    sw->add_option("--set", sw_sets, "override applied to every cell, key=value");
    sw->add_option("--threads", threads, "worker threads (default: eval.threads)");

    auto* rep = app.add_subcommand("report", "tables from a sweep directory");
    std::string rep_dir;
    rep->add_option("--results", rep_dir, "sweep results directory")->required()->check(CLI::ExistingDirectory);

    auto* ver = app.add_subcommand("verify", "re-aggregate stored samples and compare with the summaries");
    std::string ver_dir;
    double tol = 1e-9;
    ver->add_option("--results", ver_dir, "sweep or cell results directory")->required()->check(CLI::ExistingDirectory);
    ver->add_option("--tolerance", tol, "absolute tolerance");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            Workspace ws(gen_c.work, load_config(gen_c), gen_c.quiet);
            ws.gen_data();
        } else if (bb->parsed()) {
            Workspace ws(bb_c.work, load_config(bb_c), bb_c.quiet);
            ws.train_backbone();
            if (with_surrogate) ws.train_surrogate();
        } else if (wst->parsed()) {
            Workspace ws(ws_c.work, load_config(ws_c), ws_c.quiet);
            ws.warmstart(shape_of(ws.config(), ws_shape));
        } else if (st->parsed()) {
            Workspace ws(st_c.work, load_config(st_c), st_c.quiet);
            const auto p = pooling.empty() ? ws.config().tame.pooling : engine::parse_pooling(pooling);
            ws.stats(shape_of(ws.config(), st_shape), p);
        } else if (ac->parsed()) {
            Workspace ws(ac_c.work, load_config(ac_c), ac_c.quiet);
            attacks::AttackConfig a = ws.config().attack;
            if (!variant.empty()) a.variant = attacks::parse_variant(variant);
            if (attack_steps) a.steps = *attack_steps;
            if (eps.empty()) eps.push_back(a.epsilon * 255.0);
            for (double e : eps) {
                a.epsilon = e / 255.0;
                ws.attack_cache(a);
            }
        } else if (ev->parsed()) {
            Workspace ws(ev_c.work, load_config(ev_c), ev_c.quiet);
            const Overrides o = parse_sets(ev_sets);
            ExperimentConfig cell = apply_overrides(ws.config(), o);
            cell.validate();
            ws.prepare_cell(cell);
            const auto out = evaluate_cell(ws, cell, cell_id(o));
            write_cell(ev_out, cell, out);
            print_summary(out.summary);
        } else if (sw->parsed()) {
            Workspace ws(sw_c.work, load_config(sw_c), sw_c.quiet);
            const auto res = run_sweep(ws, sw_axes, parse_sets(sw_sets), sw_out, threads.value_or(ws.config().eval.threads));
            std::printf("%zu cells complete, %zu failed\n", res.cells.size(), res.failed.size());
            for (const auto& f : res.failed) std::printf("  failed: %s\n", f.c_str());
            return res.failed.empty() ? 0 : 1;
        } else if (rep->parsed()) {
            const auto r = write_report(rep_dir);
            std::cout << r.markdown;
            return r.missing.empty() && r.failed.empty() ? 0 : 1;
        } else if (ver->parsed()) {
            const auto r = verify_results(ver_dir, tol);
            for (const auto& p : r.problems) std::printf("MISMATCH %s\n", p.c_str());
            std::printf("%d cells checked, %zu problems\n", r.checked, r.problems.size());
            return r.problems.empty() ? 0 : 1;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
