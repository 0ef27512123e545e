#include "tame/harness/pipeline.hpp"

#include "tame/engine/engine.hpp"
#include "tame/engine/warmstart.hpp"
#include "tame/io/checkpoint.hpp"
#include "tame/io/hash.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tame::harness {

namespace fs = std::filesystem;
using ad::Index;
using ad::Matrix;
using nlohmann::json;

namespace {

std::string digest_of(const json& j) { return io::sha256_hex(j.dump()); }

void write_atomic(const std::string& path, const std::string& bytes) {
    fs::create_directories(fs::path(path).parent_path());
    const std::string tmp = path + ".tmp";
    io::write_file(tmp, bytes);
    fs::rename(tmp, path);
}

json read_json(const std::string& path) {
    try {
        return json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path + ": not valid JSON (" + e.what() + ")");
    }
}

std::vector<int> all_classes() {
    std::vector<int> c(vlm::kShapeClassCount);
    std::iota(c.begin(), c.end(), 0);
    return c;
}

std::vector<int> task_labels(const vlm::Dataset& ds, std::size_t n) {
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) y.push_back(ds.task_label(i));
    return y;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

}  // namespace

std::string shape_key(const moe::BankShape& shape) {
    return moe::design_name(shape.design) + "-d" + std::to_string(shape.depth) + "-c" + std::to_string(shape.length);
}

// ---------------------------------------------------------------- workspace

Workspace::Workspace(std::string root, ExperimentConfig cfg, bool quiet)
    : root_(std::move(root)), cfg_(std::move(cfg)), quiet_(quiet) {
    cfg_.validate();
    fs::create_directories(root_);
}

const std::vector<std::string>& Workspace::splits() {
    static const std::vector<std::string> s{"backbone_train", "backbone_heldout", "public", "test"};
    return s;
}

void Workspace::log(const std::string& msg) const {
    if (!quiet_) std::cerr << "[tame] " << msg << std::endl;
}

moe::BankShape Workspace::full_shape(const moe::BankShape& shape) const {
    moe::BankShape s = shape;
    s.experts = 1;
    s.dim = cfg_.model.dim;
    s.text_layers = cfg_.model.text_layers;
    return s;
}

std::string Workspace::data_path(const std::string& split) const { return root_ + "/data/" + split + ".ds"; }
std::string Workspace::backbone_path() const { return root_ + "/backbone.ckpt"; }
std::string Workspace::warmstart_dir(const moe::BankShape& shape) const { return root_ + "/warmstart/" + shape_key(shape); }
std::string Workspace::stats_path(const moe::BankShape& shape, vlm::Pooling pooling) const {
    return root_ + "/stats/" + shape_key(shape) + "-" + engine::pooling_name(pooling) + ".ckpt";
}
std::string Workspace::attack_path(const attacks::AttackConfig& a) const {
    const std::uint64_t ds = derive_seed(cfg_.seed, "data/test");
    return root_ + "/attacks/" + attacks::cache_key(ds, a.variant, a.epsilon, a.steps) + ".ckpt";
}

std::string Workspace::data_digest() const {
    return digest_of({{"seed", cfg_.seed}, {"data", cfg_.to_json().at("data")}});
}
std::string Workspace::backbone_digest() const {
    const json j = cfg_.to_json();
    return digest_of({{"data", data_digest()}, {"model", j.at("model")}, {"train", j.at("backbone")}});
}
std::string Workspace::surrogate_digest() const {
    const json j = cfg_.to_json();
    return digest_of({{"data", data_digest()}, {"model", j.at("model")}, {"train", j.at("surrogate")}});
}
std::string Workspace::warmstart_digest(const moe::BankShape& shape) const {
    return digest_of({{"backbone", backbone_digest()}, {"apt", cfg_.to_json().at("apt")}, {"shape", full_shape(shape).to_json()}});
}
std::string Workspace::stats_digest(const moe::BankShape& shape, vlm::Pooling pooling) const {
    return digest_of({{"warmstart", warmstart_digest(shape)},
                      {"references", cfg_.to_json().at("references")},
                      {"pooling", engine::pooling_name(pooling)}});
}
std::string Workspace::attack_digest(const attacks::AttackConfig& a) const {
    ExperimentConfig tmp = cfg_;
    tmp.attack = a;
    const bool transfer = a.variant == attacks::Variant::DI;
    return digest_of({{"model", transfer ? surrogate_digest() : backbone_digest()},
                      {"data", data_digest()},
                      {"attack", tmp.to_json().at("attack")}});
}

bool Workspace::current(const std::string& path, const std::string& digest) const {
    if (!fs::exists(path)) return false;
    const std::string side = path + ".json";
    if (!fs::exists(side)) {
        throw std::runtime_error(path + ": artifact has no provenance record; delete it or use another work directory");
    }
    const json j = read_json(side);
    const std::string have = j.value("provenance", "");
    if (have != digest) {
        throw std::runtime_error(path + ": built from a different seed or configuration (provenance " + have.substr(0, 12) +
                                 ", expected " + digest.substr(0, 12) + "); delete it or use another work directory");
    }
    return true;
}

void Workspace::stamp(const std::string& path, const std::string& digest, const json& report) const {
    json j{{"provenance", digest}, {"seed", cfg_.seed}, {"report", report}};
    write_atomic(path + ".json", j.dump(2) + "\n");
}

void Workspace::gen_data() {
    const std::string digest = data_digest();
    for (const auto& split : splits()) {
        const std::string path = data_path(split);
        if (current(path, digest)) continue;
        const std::uint64_t seed = derive_seed(cfg_.seed, "data/" + split);
        vlm::Dataset ds;
        if (split == "backbone_train") {
            ds = vlm::generate_dataset(all_classes(), cfg_.data.backbone_per_class, seed, cfg_.data.style);
        } else if (split == "backbone_heldout") {
            ds = vlm::generate_dataset(all_classes(), cfg_.data.heldout_per_class, seed, cfg_.data.style);
        } else if (split == "public") {
            ds = vlm::generate_dataset(vlm::public_classes(), cfg_.data.public_per_class, seed, cfg_.data.style);
        } else {
            ds = vlm::generate_dataset(vlm::downstream_classes(), cfg_.data.test_per_class, seed, cfg_.data.style);
        }
        fs::create_directories(fs::path(path).parent_path());
        vlm::save_dataset(ds, path);
        stamp(path, digest, {{"images", ds.size()}, {"classes", ds.classes}});
        log("wrote " + path + " (" + std::to_string(ds.size()) + " images)");
    }
}

void Workspace::train_backbone() {
    gen_data();
    const std::string path = backbone_path();
    const std::string digest = backbone_digest();
    if (current(path, digest)) return;
    log("training backbone (" + std::to_string(cfg_.backbone.epochs) + " epochs)");
    const auto train = vlm::load_dataset(data_path("backbone_train"));
    const auto held = vlm::load_dataset(data_path("backbone_heldout"));
    vlm::TrainConfig tc = cfg_.backbone;
    tc.verbose = !quiet_;
    vlm::TrainReport rep;
    const auto model = vlm::train_backbone(train, held, cfg_.model, derive_seed(cfg_.seed, "backbone"), tc, &rep);
    io::save_checkpoint(model.to_checkpoint(), path);
    stamp(path, digest,
          {{"heldout_accuracy", rep.heldout_accuracy}, {"epoch_loss", rep.epoch_loss},
           {"parameters", model.parameters().parameter_count()}, {"sha256", io::sha256_file(path)}});
    log("backbone held-out zero-shot accuracy " + fmt("%.3f", rep.heldout_accuracy));
}

void Workspace::train_surrogate() {
    gen_data();
    const std::string path = root_ + "/surrogate.ckpt";
    const std::string digest = surrogate_digest();
    if (current(path, digest)) return;
    log("training surrogate (" + std::to_string(cfg_.surrogate.epochs) + " epochs)");
    const auto train = vlm::load_dataset(data_path("backbone_train"));
    const auto held = vlm::load_dataset(data_path("backbone_heldout"));
    vlm::TrainConfig tc = cfg_.surrogate;
    tc.verbose = !quiet_;
    vlm::TrainReport rep;
    const auto model = vlm::train_backbone(train, held, cfg_.model, derive_seed(cfg_.seed, "surrogate"), tc, &rep);
    io::save_checkpoint(model.to_checkpoint(), path);
    stamp(path, digest, {{"heldout_accuracy", rep.heldout_accuracy}, {"epoch_loss", rep.epoch_loss}});
}

void Workspace::warmstart(const moe::BankShape& requested) {
    train_backbone();
    const moe::BankShape shape = full_shape(requested);
    const std::string dir = warmstart_dir(shape);
    const std::string digest = warmstart_digest(shape);
    if (current(dir + "/adv.ckpt", digest) && current(dir + "/clean.ckpt", digest)) return;
    fs::create_directories(dir);
    const auto model = backbone();
    moe::MixtureOfPrompts robust, clean;
    json report;
    if (shape.empty()) {
        // Nothing to tune: both prompts are the empty bank.
        robust = clean = moe::MixtureOfPrompts::random(shape, 0);
        report = {{"empty", true}};
    } else {
        const auto pub = dataset("public");
        engine::AptConfig ac = cfg_.apt;
        ac.seed = derive_seed(cfg_.seed, "apt/" + shape_key(shape));
        ac.verbose = !quiet_;
        log("adversarial prompt tuning for " + shape_key(shape));
        engine::AptReport rr;
        ac.adversarial = true;
        robust = engine::apt_train(*model, *pub, shape, ac, &rr);
        log("clean prompt tuning for " + shape_key(shape));
        engine::AptReport cr;
        ac.adversarial = false;
        clean = engine::apt_train(*model, *pub, shape, ac, &cr);
        auto rep = [](const engine::AptReport& r) {
            return json{{"clean_before", r.clean_before}, {"robust_before", r.robust_before},
                        {"clean_after", r.clean_after},   {"robust_after", r.robust_after},
                        {"epoch_loss", r.epoch_loss},     {"flagged", r.flagged}};
        };
        report = {{"adversarial", rep(rr)}, {"clean", rep(cr)}};
        log("robust public accuracy " + fmt("%.3f", rr.robust_before) + " -> " + fmt("%.3f", rr.robust_after));
    }
    io::save_checkpoint(robust.to_checkpoint(), dir + "/adv.ckpt");
    io::save_checkpoint(clean.to_checkpoint(), dir + "/clean.ckpt");
    stamp(dir + "/adv.ckpt", digest, report);
    stamp(dir + "/clean.ckpt", digest, report);
    write_atomic(dir + "/report.json", report.dump(2) + "\n");
}

void Workspace::stats(const moe::BankShape& requested, vlm::Pooling pooling) {
    warmstart(requested);
    const moe::BankShape shape = full_shape(requested);
    const std::string path = stats_path(shape, pooling);
    const std::string digest = stats_digest(shape, pooling);
    if (current(path, digest)) return;
    log("reference statistics for " + shape_key(shape) + " (" + engine::pooling_name(pooling) + ")");
    engine::ReferenceConfig rc;
    rc.attack.variant = attacks::Variant::PGD;
    rc.attack.epsilon = cfg_.references.epsilon;
    rc.attack.steps = cfg_.references.attack_steps;
    rc.pooling = pooling;
    rc.seed = derive_seed(cfg_.seed, "references/" + shape_key(shape));
    const auto refs =
        engine::precompute_references(*backbone(), *dataset("public"), robust_prompt(shape), clean_prompt(shape), rc);
    fs::create_directories(fs::path(path).parent_path());
    io::save_checkpoint(refs.to_checkpoint(), path);
    stamp(path, digest, {{"layers", {refs.adv.lo, refs.adv.hi}}});
}

void Workspace::attack_cache(const attacks::AttackConfig& a) {
    a.validate();
    if (a.epsilon == 0.0) return;
    train_backbone();
    const bool transfer = a.variant == attacks::Variant::DI;
    if (transfer) train_surrogate();
    const std::string path = attack_path(a);
    const std::string digest = attack_digest(a);
    if (current(path, digest)) return;
    const auto test = dataset("test");
    const auto model = transfer ? surrogate() : backbone();
    attacks::AttackCache c;
    c.dataset_seed = test->seed;
    c.config = a;
    c.model_digest = model->parameters().digest();
    c.labels = task_labels(*test, test->size());
    c.attack_seed = derive_seed(cfg_.seed, "attack/" + attacks::cache_key(c.dataset_seed, a.variant, a.epsilon, a.steps));
    log("attacking " + std::to_string(test->size()) + " test images: " + fs::path(path).stem().string());
    c.images = attacks::run_attack(attacks::backbone_logits(*model, test->classes), vlm::stack_images(test->images), c.labels,
                                   a, c.attack_seed);
    fs::create_directories(fs::path(path).parent_path());
    io::save_checkpoint(attacks::to_checkpoint(c), path);
    stamp(path, digest, {{"key", c.key()}, {"model_digest", c.model_digest}});
}

void Workspace::prepare_cell(const ExperimentConfig& cell) {
    warmstart(cell.bank);
    if (cell.tame.use_alignment) stats(cell.bank, cell.tame.pooling);
    attack_cache(cell.attack);
}

std::shared_ptr<const vlm::Dataset> Workspace::dataset(const std::string& split) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = datasets_.find(split);
    if (it != datasets_.end()) return it->second;
    const std::string path = data_path(split);
    if (!current(path, data_digest())) throw std::runtime_error(path + ": missing; run gen-data first");
    auto ds = std::make_shared<const vlm::Dataset>(vlm::load_dataset(path));
    datasets_[split] = ds;
    return ds;
}

std::shared_ptr<const vlm::ToyDualEncoder> Workspace::backbone() {
    std::lock_guard<std::mutex> lock(mu_);
    if (!backbone_) {
        if (!current(backbone_path(), backbone_digest())) {
            throw std::runtime_error(backbone_path() + ": missing; run train-backbone first");
        }
        backbone_ = std::make_shared<const vlm::ToyDualEncoder>(
            vlm::ToyDualEncoder::from_checkpoint(io::load_checkpoint(backbone_path())));
    }
    return backbone_;
}

std::shared_ptr<const vlm::ToyDualEncoder> Workspace::surrogate() {
    std::lock_guard<std::mutex> lock(mu_);
    if (!surrogate_) {
        const std::string path = root_ + "/surrogate.ckpt";
        if (!current(path, surrogate_digest())) throw std::runtime_error(path + ": missing; run train-backbone --surrogate");
        surrogate_ = std::make_shared<const vlm::ToyDualEncoder>(vlm::ToyDualEncoder::from_checkpoint(io::load_checkpoint(path)));
    }
    return surrogate_;
}

moe::MixtureOfPrompts Workspace::robust_prompt(const moe::BankShape& shape) {
    const std::string path = warmstart_dir(shape) + "/adv.ckpt";
    if (!current(path, warmstart_digest(shape))) throw std::runtime_error(path + ": missing; run warmstart first");
    return moe::MixtureOfPrompts::from_checkpoint(io::load_checkpoint(path));
}

moe::MixtureOfPrompts Workspace::clean_prompt(const moe::BankShape& shape) {
    const std::string path = warmstart_dir(shape) + "/clean.ckpt";
    if (!current(path, warmstart_digest(shape))) throw std::runtime_error(path + ": missing; run warmstart first");
    return moe::MixtureOfPrompts::from_checkpoint(io::load_checkpoint(path));
}

engine::ReferenceStatistics Workspace::references(const moe::BankShape& shape, vlm::Pooling pooling) {
    const moe::BankShape s = full_shape(shape);
    const std::string path = stats_path(s, pooling);
    if (!current(path, stats_digest(s, pooling))) throw std::runtime_error(path + ": missing; run stats first");
    return engine::ReferenceStatistics::from_checkpoint(io::load_checkpoint(path));
}

std::shared_ptr<const attacks::AttackCache> Workspace::attacked(const attacks::AttackConfig& a) {
    const std::string path = attack_path(a);
    std::lock_guard<std::mutex> lock(mu_);
    auto it = attacks_.find(path);
    if (it != attacks_.end()) return it->second;
    if (!current(path, attack_digest(a))) throw std::runtime_error(path + ": missing; run attack-cache first");
    auto c = std::make_shared<const attacks::AttackCache>(attacks::cache_from_checkpoint(io::load_checkpoint(path)));
    attacks_[path] = c;
    return c;
}

// ---------------------------------------------------------------- samples

std::string csv_header() {
    return "sample_id,label,pred_no_defense,pred_frozen,pred_tame,correct_no_defense,correct_frozen,correct_tame,"
           "loss_pre,loss_post,entropy_pre,alignment_pre,moe_pre,drift,selected,reset,aborted,pbar,wall_ms";
}

std::string csv_line(const SampleRow& r) {
    std::ostringstream os;
    auto d = [](double v) { return fmt("%.17g", v); };
    os << r.sample_id << ',' << r.label << ',' << r.pred_no_defense << ',' << r.pred_frozen << ',' << r.pred_tame << ','
       << (r.pred_no_defense == r.label) << ',' << (r.pred_frozen == r.label) << ',' << (r.pred_tame == r.label) << ','
       << d(r.loss_pre) << ',' << d(r.loss_post) << ',' << d(r.entropy_pre) << ',' << d(r.alignment_pre) << ','
       << d(r.moe_pre) << ',' << d(r.drift) << ',' << r.selected << ',' << r.reset << ',' << r.aborted << ',' << r.pbar
       << ',' << fmt("%.3f", r.wall_ms);
    return os.str();
}

std::vector<SampleRow> read_samples_csv(const std::string& path) {
    std::istringstream in(io::read_file(path));
    std::string line;
    if (!std::getline(in, line) || line != csv_header()) throw std::runtime_error(path + ": unexpected CSV header");
    std::vector<SampleRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 18) f.emplace_back();  // trailing empty field
        if (f.size() != 19) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 19 fields");
        try {
            SampleRow r;
            r.sample_id = std::stoi(f[0]);
            r.label = std::stoi(f[1]);
            r.pred_no_defense = std::stoi(f[2]);
            r.pred_frozen = std::stoi(f[3]);
            r.pred_tame = std::stoi(f[4]);
            r.loss_pre = std::strtod(f[8].c_str(), nullptr);
            r.loss_post = std::strtod(f[9].c_str(), nullptr);
            r.entropy_pre = std::strtod(f[10].c_str(), nullptr);
            r.alignment_pre = std::strtod(f[11].c_str(), nullptr);
            r.moe_pre = std::strtod(f[12].c_str(), nullptr);
            r.drift = std::strtod(f[13].c_str(), nullptr);
            r.selected = std::stoi(f[14]);
            r.reset = f[15] == "1";
            r.aborted = f[16] == "1";
            r.pbar = f[17];
            r.wall_ms = std::strtod(f[18].c_str(), nullptr);
            rows.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed field");
        }
    }
    return rows;
}

json summarize(const std::vector<SampleRow>& rows, const CellContext& ctx) {
    if (rows.empty()) throw std::invalid_argument("summarize: no samples");
    const std::size_t n = rows.size();
    std::vector<double> nd(n), fr(n), tm(n);
    for (std::size_t i = 0; i < n; ++i) {
        nd[i] = rows[i].pred_no_defense == rows[i].label;
        fr[i] = rows[i].pred_frozen == rows[i].label;
        tm[i] = rows[i].pred_tame == rows[i].label;
    }
    auto mean = [n](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n); };

    // Paired bootstrap: one index draw feeds every statistic.
    const auto b = static_cast<std::size_t>(ctx.bootstrap);
    std::vector<std::vector<double>> draws(5, std::vector<double>(b));
    std::mt19937_64 rng(derive_seed(ctx.seed, "bootstrap/" + ctx.id));
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t k = 0; k < b; ++k) {
        double snd = 0.0, sfr = 0.0, stm = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = pick(rng);
            snd += nd[j];
            sfr += fr[j];
            stm += tm[j];
        }
        const double dn = static_cast<double>(n);
        draws[0][k] = snd / dn;
        draws[1][k] = sfr / dn;
        draws[2][k] = stm / dn;
        draws[3][k] = (stm - sfr) / dn;
        draws[4][k] = (sfr - snd) / dn;
    }
    auto interval = [b](std::vector<double> v, double m) {
        std::sort(v.begin(), v.end());
        const double span = static_cast<double>(b - 1);
        return json{{"mean", m},
                    {"lo", v[static_cast<std::size_t>(std::floor(0.025 * span))]},
                    {"hi", v[static_cast<std::size_t>(std::ceil(0.975 * span))]}};
    };
    const double a_nd = mean(nd), a_fr = mean(fr), a_tm = mean(tm);

    json s;
    s["cell"] = ctx.id;
    s["seed"] = ctx.seed;
    s["samples"] = n;
    s["steps"] = ctx.steps;
    s["bootstrap"] = ctx.bootstrap;
    s["accuracy"] = {{"no_defense", interval(draws[0], a_nd)},
                     {"frozen", interval(draws[1], a_fr)},
                     {"tame", interval(draws[2], a_tm)}};
    s["gap_tame_frozen"] = interval(draws[3], a_tm - a_fr);
    s["gap_frozen_no_defense"] = interval(draws[4], a_fr - a_nd);

    std::size_t adapted = 0, descended = 0, aborted = 0, resets = 0;
    double pre = 0.0, post = 0.0, max_drift = 0.0, selected = 0.0;
    for (const auto& r : rows) {
        aborted += r.aborted;
        resets += r.reset;
        max_drift = std::max(max_drift, r.drift);
        selected += r.selected;
        if (ctx.steps > 0 && !r.aborted) {
            ++adapted;
            descended += r.loss_post < r.loss_pre;
            pre += r.loss_pre;
            post += r.loss_post;
        }
    }
    if (adapted > 0) {
        s["descent_fraction"] = static_cast<double>(descended) / static_cast<double>(adapted);
        s["mean_loss_pre"] = pre / static_cast<double>(adapted);
        s["mean_loss_post"] = post / static_cast<double>(adapted);
    } else {
        s["descent_fraction"] = nullptr;
        s["mean_loss_pre"] = nullptr;
        s["mean_loss_post"] = nullptr;
    }
    s["aborted"] = aborted;
    s["resets"] = resets;
    s["mean_selected"] = selected / static_cast<double>(n);
    s["final_drift"] = rows.back().drift;
    s["max_drift"] = max_drift;
    return s;
}

// ---------------------------------------------------------------- cells

CellOutput evaluate_cell(Workspace& ws, const ExperimentConfig& cell, const std::string& id,
                         const std::function<void(const SampleRow&)>& on_row) {
    using clk = std::chrono::steady_clock;
    const auto model = ws.backbone();
    const auto test = ws.dataset("test");
    const auto n = static_cast<std::size_t>(cell.eval.samples);
    if (n > test->size()) throw std::invalid_argument("eval.samples: exceeds the test split");
    const std::string sha_before = io::sha256_file(ws.backbone_path());
    const std::string params_before = model->parameters().digest();

    const std::vector<int> labels = task_labels(*test, n);
    Matrix images;
    if (cell.attack.epsilon == 0.0) {
        images = vlm::stack_images(std::vector<vlm::Image>(test->images.begin(), test->images.begin() + static_cast<long>(n)));
    } else {
        const auto cache = ws.attacked(cell.attack);
        if (static_cast<std::size_t>(cache->images.rows()) < n) throw std::runtime_error("attack cache holds too few images");
        for (std::size_t i = 0; i < n; ++i) {
            if (cache->labels[i] != labels[i]) throw std::runtime_error("attack cache labels differ from the test split");
        }
        images = cache->images.topRows(static_cast<Index>(n));
    }
    const std::vector<int>& classes = test->classes;

    moe::BankShape shape = cell.bank;
    shape.experts = 1;
    shape.dim = cell.model.dim;
    shape.text_layers = cell.model.text_layers;
    const auto bank = moe::MixtureOfPrompts::warm_start(ws.robust_prompt(shape), cell.tame.experts, cell.warm_noise,
                                                        derive_seed(cell.seed, "bank/" + shape_key(shape)));
    const auto pred_nd = attacks::predictions(attacks::backbone_logits(*model, classes), images);
    const auto pred_fr = attacks::predictions(engine::bank_logits(*model, bank, classes), images);

    std::optional<engine::ReferenceStatistics> refs;
    if (cell.tame.use_alignment) refs = ws.references(shape, cell.tame.pooling);
    engine::TameConfig tc = cell.tame;
    tc.record_post_loss = true;
    engine::TameEngine eng(*model, classes, bank, refs, tc);

    const std::uint64_t view_base = derive_seed(cell.seed, "views");
    CellOutput out;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < n; ++i) {
        const auto t0 = clk::now();
        const auto r = eng.process(vlm::unstack_image(images, static_cast<Index>(i), cell.model.image_size), view_base + i);
        SampleRow row;
        row.sample_id = static_cast<int>(i);
        row.label = labels[i];
        row.pred_no_defense = pred_nd[i];
        row.pred_frozen = pred_fr[i];
        row.pred_tame = r.prediction;
        row.loss_pre = r.steps.empty() ? nan : r.steps.front().loss;
        row.loss_post = r.steps.empty() ? nan : r.steps.back().post_loss;
        row.entropy_pre = r.steps.empty() ? nan : r.steps.front().entropy;
        row.alignment_pre = r.steps.empty() ? nan : r.steps.front().alignment;
        row.moe_pre = r.steps.empty() ? nan : r.steps.front().moe;
        row.drift = eng.drift();
        row.selected = static_cast<int>(r.selected);
        row.reset = r.reset_applied;
        row.aborted = r.aborted;
        std::string pb;
        for (std::size_t blk = 0; blk < r.pbar.size(); ++blk) {
            if (blk) pb += ';';
            for (std::size_t e = 0; e < r.pbar[blk].size(); ++e) {
                if (e) pb += ':';
                pb += fmt("%.6g", r.pbar[blk][e]);
            }
        }
        row.pbar = pb;
        row.wall_ms = std::chrono::duration<double, std::milli>(clk::now() - t0).count();
        if (on_row) on_row(row);
        out.rows.push_back(std::move(row));
    }

    const std::string sha_after = io::sha256_file(ws.backbone_path());
    const std::string params_after = model->parameters().digest();
    out.summary = summarize(out.rows, {id, cell.seed, cell.eval.bootstrap, cell.tame.steps});
    out.summary["attack"] = {{"variant", attacks::variant_name(cell.attack.variant)},
                             {"epsilon", cell.attack.epsilon * 255.0},
                             {"steps", cell.attack.steps}};
    out.summary["backbone"] = {{"sha256_before", sha_before},
                               {"sha256_after", sha_after},
                               {"parameters_before", params_before},
                               {"parameters_after", params_after},
                               {"unchanged", sha_before == sha_after && params_before == params_after}};
    return out;
}

void write_cell(const std::string& dir, const ExperimentConfig& cell, const CellOutput& out) {
    fs::create_directories(dir);
    std::string csv = csv_header() + "\n";
    for (const auto& r : out.rows) csv += csv_line(r) + "\n";
    write_atomic(dir + "/samples.csv", csv);
    write_atomic(dir + "/config.json", cell.to_json().dump(2) + "\n");
    // Written last: its presence marks the cell complete.
    write_atomic(dir + "/summary.json", out.summary.dump(2) + "\n");
}

// ---------------------------------------------------------------- sweep

SweepResult run_sweep(Workspace& ws, const std::vector<std::string>& axes, const Overrides& base,
                      const std::string& out_dir, int threads) {
    if (threads < 1) throw std::invalid_argument("threads: must be >= 1");
    const ExperimentConfig& cfg = ws.config();
    for (const auto& [k, v] : base) {
        if (std::find(axes.begin(), axes.end(), k) != axes.end()) {
            throw std::invalid_argument("override '" + k + "' is also a sweep axis");
        }
    }
    struct Planned {
        std::string id;
        Overrides overrides;
        ExperimentConfig cfg;
    };
    std::vector<Planned> plan;
    for (const auto& cell : plan_cells(cfg, axes)) {
        Overrides o = base;
        for (const auto& [k, v] : cell) o[k] = v;
        ExperimentConfig c = apply_overrides(cfg, o);
        c.validate();
        plan.push_back({cell_id(cell), o, std::move(c)});
    }

    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["axes"] = axes;
    manifest["base_overrides"] = base;
    manifest["config"] = cfg.to_json();
    manifest["cells"] = json::array();
    for (const auto& p : plan) manifest["cells"].push_back({{"id", p.id}, {"overrides", p.overrides}});
    const std::string mpath = out_dir + "/manifest.json";
    if (fs::exists(mpath)) {
        const json old = read_json(mpath);
        if (old != manifest) {
            throw std::runtime_error(mpath + ": results directory holds a different sweep; choose another --out");
        }
    }
    write_atomic(mpath, manifest.dump(2) + "\n");

    for (const auto& p : plan) ws.prepare_cell(p.cfg);

    SweepResult res;
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= plan.size()) return;
            const auto& p = plan[i];
            const std::string dir = out_dir + "/cells/" + p.id;
            if (fs::exists(dir + "/summary.json") && fs::exists(dir + "/config.json") &&
                read_json(dir + "/config.json") == p.cfg.to_json()) {
                std::lock_guard<std::mutex> lock(mu);
                res.cells.push_back(p.id);
                continue;
            }
            fs::remove(dir + "/FAILED");
            try {
                const auto t0 = std::chrono::steady_clock::now();
                const CellOutput out = evaluate_cell(ws, p.cfg, p.id);
                write_cell(dir, p.cfg, out);
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                std::lock_guard<std::mutex> lock(mu);
                res.cells.push_back(p.id);
                std::cerr << "[tame] cell " << p.id << " tame " << fmt("%.3f", out.summary["accuracy"]["tame"]["mean"].get<double>())
                          << " frozen " << fmt("%.3f", out.summary["accuracy"]["frozen"]["mean"].get<double>()) << " ("
                          << fmt("%.1f", secs) << " s)" << std::endl;
            } catch (const std::exception& e) {
                fs::create_directories(dir);
                io::write_file(dir + "/FAILED", std::string(e.what()) + "\n");
                std::lock_guard<std::mutex> lock(mu);
                res.failed.push_back(p.id);
                std::cerr << "[tame] cell " << p.id << " FAILED: " << e.what() << std::endl;
            }
        }
    };
    const int nthreads = std::min<int>(threads, static_cast<int>(std::max<std::size_t>(plan.size(), 1)));
    std::vector<std::thread> pool;
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    std::sort(res.cells.begin(), res.cells.end());
    std::sort(res.failed.begin(), res.failed.end());
    return res;
}

// ---------------------------------------------------------------- report

namespace {

std::string pct(const json& ci) {
    return fmt("%.1f", 100.0 * ci.at("mean").get<double>()) + " [" + fmt("%.1f", 100.0 * ci.at("lo").get<double>()) + ", " +
           fmt("%.1f", 100.0 * ci.at("hi").get<double>()) + "]";
}

std::string num_or_dash(const json& v, double scale, const char* f) {
    return v.is_number() ? fmt(f, scale * v.get<double>()) : std::string("-");
}

}  // namespace

ReportResult write_report(const std::string& results_dir) {
    const std::string mpath = results_dir + "/manifest.json";
    if (!fs::exists(mpath)) throw std::runtime_error(mpath + ": not a sweep results directory");
    const json manifest = read_json(mpath);
    const auto axes = manifest.at("axes").get<std::vector<std::string>>();

    ReportResult res;
    std::ostringstream md, csv;
    md << "# Sweep report\n\n";
    md << "Seed " << manifest.at("seed").get<std::uint64_t>() << ", " << manifest.at("cells").size() << " cells";
    if (!axes.empty()) {
        md << " over ";
        for (std::size_t i = 0; i < axes.size(); ++i) md << (i ? " x " : "") << axes[i];
    }
    md << ". Robust accuracy in percent with 95% paired bootstrap intervals.\n\n";
    md << "## " << (axes.empty() ? std::string("(no axes)") : axes.front());
    for (std::size_t i = 1; i < axes.size(); ++i) md << " x " << axes[i];
    md << "\n\n|";
    for (const auto& a : axes) md << ' ' << a << " |";
    md << " n | no defense | frozen | TAME | TAME - frozen | descent | max drift |\n|";
    for (std::size_t i = 0; i < axes.size() + 7; ++i) md << "---|";
    md << "\n";

    for (const auto& a : axes) csv << a << ',';
    csv << "status,samples";
    for (const char* m : {"no_defense", "frozen", "tame", "gap_tame_frozen"}) csv << ',' << m << "_mean," << m << "_lo," << m << "_hi";
    csv << ",descent_fraction,max_drift\n";

    for (const auto& c : manifest.at("cells")) {
        const std::string id = c.at("id").get<std::string>();
        const auto ov = c.at("overrides");
        const std::string dir = results_dir + "/cells/" + id;
        std::vector<std::string> vals;
        for (const auto& a : axes) vals.push_back(ov.value(a, std::string("?")));
        md << '|';
        for (const auto& v : vals) md << ' ' << v << " |";
        for (const auto& v : vals) csv << v << ',';
        if (!fs::exists(dir + "/summary.json")) {
            const bool failed = fs::exists(dir + "/FAILED");
            (failed ? res.failed : res.missing).push_back(id);
            md << (failed ? " FAILED" : " missing") << " | | | | | | |\n";
            csv << (failed ? "failed" : "missing") << ",,,,,,,,,,,,,,\n";
            continue;
        }
        const json s = read_json(dir + "/summary.json");
        const auto& acc = s.at("accuracy");
        md << ' ' << s.at("samples").get<int>() << " | " << pct(acc.at("no_defense")) << " | " << pct(acc.at("frozen")) << " | "
           << pct(acc.at("tame")) << " | " << pct(s.at("gap_tame_frozen")) << " | "
           << num_or_dash(s.at("descent_fraction"), 100.0, "%.1f") << " | " << fmt("%.4g", s.at("max_drift").get<double>())
           << " |\n";
        csv << "ok," << s.at("samples").get<int>();
        for (const json* ci : {&acc.at("no_defense"), &acc.at("frozen"), &acc.at("tame"), &s.at("gap_tame_frozen")}) {
            for (const char* k : {"mean", "lo", "hi"}) csv << ',' << fmt("%.17g", ci->at(k).get<double>());
        }
        csv << ',' << num_or_dash(s.at("descent_fraction"), 1.0, "%.17g") << ',' << fmt("%.17g", s.at("max_drift").get<double>())
            << '\n';
    }
    if (!res.missing.empty() || !res.failed.empty()) {
        md << "\n## Incomplete cells\n\n";
        for (const auto& id : res.failed) md << "- " << id << ": failed (see cells/" << id << "/FAILED)\n";
        for (const auto& id : res.missing) md << "- " << id << ": missing\n";
    }
    res.markdown = md.str();
    write_atomic(results_dir + "/report.md", res.markdown);
    write_atomic(results_dir + "/report.csv", csv.str());
    return res;
}

// ---------------------------------------------------------------- verify

namespace {

void compare(const json& want, const json& have, const std::string& path, double tol, std::vector<std::string>& problems) {
    if (want.is_object()) {
        for (auto it = want.begin(); it != want.end(); ++it) {
            if (!have.contains(it.key())) {
                problems.push_back(path + "." + it.key() + ": absent from the stored summary");
                continue;
            }
            compare(it.value(), have.at(it.key()), path + "." + it.key(), tol, problems);
        }
    } else if (want.is_number() && have.is_number()) {
        const double a = want.get<double>(), b = have.get<double>();
        if (!(std::abs(a - b) <= tol)) problems.push_back(path + ": stored " + fmt("%.17g", b) + ", recomputed " + fmt("%.17g", a));
    } else if (want != have) {
        problems.push_back(path + ": stored " + have.dump() + ", recomputed " + want.dump());
    }
}

void verify_cell(const std::string& dir, const std::string& id, double tol, VerifyResult& res) {
    if (!fs::exists(dir + "/summary.json")) {
        res.problems.push_back(id + ": no summary.json" + (fs::exists(dir + "/FAILED") ? " (cell failed)" : ""));
        return;
    }
    try {
        const json stored = read_json(dir + "/summary.json");
        const auto rows = read_samples_csv(dir + "/samples.csv");
        CellContext ctx{stored.at("cell").get<std::string>(), stored.at("seed").get<std::uint64_t>(),
                        stored.at("bootstrap").get<int>(), stored.at("steps").get<int>()};
        std::vector<std::string> problems;
        compare(summarize(rows, ctx), stored, id, tol, problems);
        if (!stored.at("backbone").at("unchanged").get<bool>()) problems.push_back(id + ": backbone changed during the run");
        for (auto& p : problems) res.problems.push_back(std::move(p));
        ++res.checked;
    } catch (const std::exception& e) {
        res.problems.push_back(id + ": " + e.what());
    }
}

}  // namespace

VerifyResult verify_results(const std::string& results_dir, double tolerance) {
    VerifyResult res;
    if (fs::exists(results_dir + "/manifest.json")) {
        const json manifest = read_json(results_dir + "/manifest.json");
        for (const auto& c : manifest.at("cells")) {
            const std::string id = c.at("id").get<std::string>();
            verify_cell(results_dir + "/cells/" + id, id, tolerance, res);
        }
    } else if (fs::exists(results_dir + "/summary.json")) {
        verify_cell(results_dir, fs::path(results_dir).filename().string(), tolerance, res);
    } else {
        throw std::runtime_error(results_dir + ": neither a sweep nor a cell results directory");
    }
    return res;
}

}  // namespace tame::harness
