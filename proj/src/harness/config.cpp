#include "tame/harness/config.hpp"

#include "tame/io/checkpoint.hpp"
#include "tame/io/hash.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace tame::harness {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& why) { throw std::invalid_argument(path + ": " + why); }

// Strict view of one JSON object: unknown keys and type errors are reported
// with the dotted path of the field.
class Section {
public:
    Section(const json& j, std::string path, std::vector<std::string> known) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_, "expected an object");
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (std::find(known.begin(), known.end(), it.key()) == known.end()) fail(field(it.key()), "unknown field");
        }
    }

    template <class T>
    void get(const std::string& key, T& dst) const {
        if (!j_.contains(key)) return;
        try {
            j_.at(key).get_to(dst);
        } catch (const json::exception&) {
            fail(field(key), "wrong type (got " + std::string(j_.at(key).type_name()) + ")");
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }
    const json& at(const std::string& key) const { return j_.at(key); }
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
};

json train_json(const vlm::TrainConfig& t) {
    return {{"epochs", t.epochs}, {"batch", t.batch}, {"lr", t.lr}, {"augment", t.augment}, {"target_accuracy", t.target_accuracy}};
}

vlm::TrainConfig train_from(const json& j, const std::string& path, vlm::TrainConfig t) {
    Section s(j, path, {"epochs", "batch", "lr", "augment", "target_accuracy"});
    s.get("epochs", t.epochs);
    s.get("batch", t.batch);
    s.get("lr", t.lr);
    s.get("augment", t.augment);
    s.get("target_accuracy", t.target_accuracy);
    return t;
}

void validate_train(const vlm::TrainConfig& t, const std::string& path) {
    if (t.epochs < 0) fail(path + ".epochs", "must be >= 0");
    if (t.batch < 1) fail(path + ".batch", "must be >= 1");
    if (!(t.lr >= 0.0)) fail(path + ".lr", "must be >= 0");
    if (!(t.target_accuracy >= 0.0 && t.target_accuracy <= 1.0)) fail(path + ".target_accuracy", "must lie in [0, 1]");
}

json style_json(const vlm::ShapeStyle& s) {
    return {{"center_jitter", s.center_jitter}, {"size", {s.size_lo, s.size_hi}},
            {"background", {s.background_lo, s.background_hi}}, {"contrast", {s.contrast_lo, s.contrast_hi}},
            {"noise_sigma", s.noise_sigma}};
}

void read_range(const Section& s, const std::string& key, double& lo, double& hi) {
    if (!s.has(key)) return;
    std::vector<double> r;
    s.get(key, r);
    if (r.size() != 2) fail(s.field(key), "expected [lo, hi]");
    lo = r[0];
    hi = r[1];
}

json attack_json(const attacks::AttackConfig& a) {
    return {{"variant", attacks::variant_name(a.variant)}, {"epsilon", a.epsilon * 255.0},
            {"steps", a.steps},          {"step_size", a.step_size * 255.0},
            {"random_start", a.random_start}, {"cw_kappa", a.cw_kappa},
            {"di_probability", a.di_probability}, {"di_min_size", a.di_min_size}};
}

std::string reset_text(long r) { return r == 0 ? "inf" : std::to_string(r); }

long parse_reset(const std::string& v, const std::string& path) {
    if (v == "inf" || v == "all" || v == "never") return 0;
    try {
        std::size_t used = 0;
        const long r = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        if (r < 1) fail(path, "must be >= 1 or \"inf\"");
        return r;
    } catch (const std::logic_error&) {
        fail(path, "expected a positive count or \"inf\", got '" + v + "'");
    }
}

double parse_number(const std::string& v, const std::string& path) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::logic_error&) {
        fail(path, "expected a number, got '" + v + "'");
    }
}

int parse_int(const std::string& v, const std::string& path) {
    const double d = parse_number(v, path);
    if (d != std::floor(d) || std::abs(d) > 1e9) fail(path, "expected an integer, got '" + v + "'");
    return static_cast<int>(d);
}

std::string number_text(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

}  // namespace

ExperimentConfig::ExperimentConfig() {
    backbone.epochs = 12;
    surrogate.epochs = 6;
    surrogate.target_accuracy = 0.8;
    apt.eval_samples = 200;
    apt.verbose = false;
    // 5e-4 barely moves the toy prompts in one step; 0.05 overshoots on the
    // first (sign-like) AdamW step for mildly perturbed inputs.
    tame.lr = 0.025;
}

nlohmann::json ExperimentConfig::to_json() const {
    json sw;
    sw["steps"] = sweep.steps;
    sw["epsilon"] = sweep.epsilon;
    sw["experts"] = sweep.experts;
    sw["depth"] = sweep.depth;
    sw["length"] = sweep.length;
    json al = json::array();
    for (const auto& [lo, hi] : sweep.align) al.push_back({lo, hi});
    sw["align"] = al;
    json rs = json::array();
    for (long r : sweep.reset) rs.push_back(r == 0 ? json("inf") : json(r));
    sw["reset"] = rs;
    json ds = json::array();
    for (auto d : sweep.design) ds.push_back(moe::design_name(d));
    sw["design"] = ds;
    sw["ablation"] = sweep.ablation;

    return {{"seed", seed},
            {"data",
             {{"backbone_per_class", data.backbone_per_class},
              {"heldout_per_class", data.heldout_per_class},
              {"public_per_class", data.public_per_class},
              {"test_per_class", data.test_per_class},
              {"style", style_json(data.style)}}},
            {"model", model.to_json()},
            {"backbone", train_json(backbone)},
            {"surrogate", train_json(surrogate)},
            {"apt",
             {{"epsilon", apt.epsilon * 255.0},
              {"attack_steps", apt.attack_steps},
              {"attack_step", apt.attack_step * 255.0},
              {"epochs", apt.epochs},
              {"batch", apt.batch},
              {"lr", apt.lr},
              {"init_scale", apt.init_scale},
              {"eval_attack_steps", apt.eval_attack_steps},
              {"eval_samples", apt.eval_samples}}},
            {"bank", {{"design", moe::design_name(bank.design)}, {"depth", bank.depth}, {"length", bank.length}}},
            {"warm_noise", warm_noise},
            {"references",
             {{"epsilon", references.epsilon * 255.0},
              {"attack_steps", references.attack_steps}}},
            {"attack", attack_json(attack)},
            {"tame", tame.to_json()},
            {"eval", {{"samples", eval.samples}, {"threads", eval.threads}, {"bootstrap", eval.bootstrap}}},
            {"sweep", sw}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    Section root(j, "", {"seed", "data", "model", "backbone", "surrogate", "apt", "bank", "warm_noise", "references",
                         "attack", "tame", "eval", "sweep"});
    root.get("seed", c.seed);
    root.get("warm_noise", c.warm_noise);

    if (root.has("data")) {
        Section s(root.at("data"), "data", {"backbone_per_class", "heldout_per_class", "public_per_class", "test_per_class", "style"});
        s.get("backbone_per_class", c.data.backbone_per_class);
        s.get("heldout_per_class", c.data.heldout_per_class);
        s.get("public_per_class", c.data.public_per_class);
        s.get("test_per_class", c.data.test_per_class);
        if (s.has("style")) {
            Section st(s.at("style"), "data.style", {"center_jitter", "size", "background", "contrast", "noise_sigma"});
            st.get("center_jitter", c.data.style.center_jitter);
            read_range(st, "size", c.data.style.size_lo, c.data.style.size_hi);
            read_range(st, "background", c.data.style.background_lo, c.data.style.background_hi);
            read_range(st, "contrast", c.data.style.contrast_lo, c.data.style.contrast_hi);
            st.get("noise_sigma", c.data.style.noise_sigma);
        }
    }
    if (root.has("model")) {
        Section s(root.at("model"), "model", {"image_size", "patch", "dim", "heads", "mlp_hidden", "image_layers",
                                              "text_layers", "template_tokens", "vocab", "temperature"});
        s.get("image_size", c.model.image_size);
        s.get("patch", c.model.patch);
        s.get("dim", c.model.dim);
        s.get("heads", c.model.heads);
        s.get("mlp_hidden", c.model.mlp_hidden);
        s.get("image_layers", c.model.image_layers);
        s.get("text_layers", c.model.text_layers);
        s.get("template_tokens", c.model.template_tokens);
        s.get("vocab", c.model.vocab);
        s.get("temperature", c.model.temperature);
    }
    if (root.has("backbone")) c.backbone = train_from(root.at("backbone"), "backbone", c.backbone);
    if (root.has("surrogate")) c.surrogate = train_from(root.at("surrogate"), "surrogate", c.surrogate);
    if (root.has("apt")) {
        Section s(root.at("apt"), "apt", {"epsilon", "attack_steps", "attack_step", "epochs", "batch", "lr", "init_scale",
                                          "eval_attack_steps", "eval_samples"});
        double eps = c.apt.epsilon * 255.0, step = c.apt.attack_step * 255.0;
        s.get("epsilon", eps);
        s.get("attack_step", step);
        c.apt.epsilon = eps / 255.0;
        c.apt.attack_step = step / 255.0;
        s.get("attack_steps", c.apt.attack_steps);
        s.get("epochs", c.apt.epochs);
        s.get("batch", c.apt.batch);
        s.get("lr", c.apt.lr);
        s.get("init_scale", c.apt.init_scale);
        s.get("eval_attack_steps", c.apt.eval_attack_steps);
        s.get("eval_samples", c.apt.eval_samples);
    }
    if (root.has("bank")) {
        Section s(root.at("bank"), "bank", {"design", "depth", "length"});
        if (s.has("design")) {
            std::string d;
            s.get("design", d);
            try {
                c.bank.design = moe::parse_design(d);
            } catch (const std::invalid_argument&) {
                fail("bank.design", "expected V, VLJ or VLI, got '" + d + "'");
            }
        }
        s.get("depth", c.bank.depth);
        s.get("length", c.bank.length);
    }
    if (root.has("references")) {
        Section s(root.at("references"), "references", {"epsilon", "attack_steps"});
        double eps = c.references.epsilon * 255.0;
        s.get("epsilon", eps);
        c.references.epsilon = eps / 255.0;
        s.get("attack_steps", c.references.attack_steps);
    }
    if (root.has("attack")) {
        Section s(root.at("attack"), "attack", {"variant", "epsilon", "steps", "step_size", "random_start", "cw_kappa",
                                                "di_probability", "di_min_size"});
        if (s.has("variant")) {
            std::string v;
            s.get("variant", v);
            try {
                c.attack.variant = attacks::parse_variant(v);
            } catch (const std::invalid_argument&) {
                fail("attack.variant", "expected pgd, cw or di, got '" + v + "'");
            }
        }
        double eps = c.attack.epsilon * 255.0, step = c.attack.step_size * 255.0;
        s.get("epsilon", eps);
        s.get("step_size", step);
        c.attack.epsilon = eps / 255.0;
        c.attack.step_size = step / 255.0;
        s.get("steps", c.attack.steps);
        s.get("random_start", c.attack.random_start);
        s.get("cw_kappa", c.attack.cw_kappa);
        s.get("di_probability", c.attack.di_probability);
        s.get("di_min_size", c.attack.di_min_size);
    }
    if (root.has("tame")) {
        // Keep the experiment-level defaults for fields the document omits.
        json merged = c.tame.to_json();
        if (!root.at("tame").is_object()) fail("tame", "expected an object");
        for (auto it = root.at("tame").begin(); it != root.at("tame").end(); ++it) merged[it.key()] = it.value();
        for (auto it = root.at("tame").begin(); it != root.at("tame").end(); ++it) {
            if (!c.tame.to_json().contains(it.key())) fail("tame." + it.key(), "unknown field");
        }
        c.tame = engine::TameConfig::from_json(merged);
    }
    if (root.has("eval")) {
        Section s(root.at("eval"), "eval", {"samples", "threads", "bootstrap"});
        s.get("samples", c.eval.samples);
        s.get("threads", c.eval.threads);
        s.get("bootstrap", c.eval.bootstrap);
    }
    if (root.has("sweep")) {
        Section s(root.at("sweep"), "sweep", axis_names());
        s.get("steps", c.sweep.steps);
        s.get("epsilon", c.sweep.epsilon);
        s.get("experts", c.sweep.experts);
        s.get("depth", c.sweep.depth);
        s.get("length", c.sweep.length);
        if (s.has("align")) {
            std::vector<std::vector<int>> r;
            s.get("align", r);
            c.sweep.align.clear();
            for (std::size_t i = 0; i < r.size(); ++i) {
                if (r[i].size() != 2) fail("sweep.align[" + std::to_string(i) + "]", "expected [lo, hi]");
                c.sweep.align.emplace_back(r[i][0], r[i][1]);
            }
        }
        if (s.has("reset")) {
            if (!s.at("reset").is_array()) fail("sweep.reset", "expected an array");
            c.sweep.reset.clear();
            for (std::size_t i = 0; i < s.at("reset").size(); ++i) {
                const auto& v = s.at("reset")[i];
                const std::string path = "sweep.reset[" + std::to_string(i) + "]";
                if (v.is_string()) {
                    c.sweep.reset.push_back(parse_reset(v.get<std::string>(), path));
                } else if (v.is_number_integer()) {
                    if (v.get<long>() < 1) fail(path, "must be >= 1 or \"inf\"");
                    c.sweep.reset.push_back(v.get<long>());
                } else {
                    fail(path, "expected a positive count or \"inf\"");
                }
            }
        }
        if (s.has("design")) {
            std::vector<std::string> d;
            s.get("design", d);
            c.sweep.design.clear();
            for (std::size_t i = 0; i < d.size(); ++i) {
                try {
                    c.sweep.design.push_back(moe::parse_design(d[i]));
                } catch (const std::invalid_argument&) {
                    fail("sweep.design[" + std::to_string(i) + "]", "expected V, VLJ or VLI, got '" + d[i] + "'");
                }
            }
        }
        s.get("ablation", c.sweep.ablation);
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path + ": not valid JSON (" + e.what() + ")");
    }
    return from_json(j);
}

void ExperimentConfig::validate() const {
    if (data.backbone_per_class < 1) fail("data.backbone_per_class", "must be >= 1");
    if (data.heldout_per_class < 1) fail("data.heldout_per_class", "must be >= 1");
    if (data.public_per_class < 1) fail("data.public_per_class", "must be >= 1");
    if (data.test_per_class < 1) fail("data.test_per_class", "must be >= 1");
    const auto& st = data.style;
    if (!(st.size_lo > 0.0 && st.size_lo <= st.size_hi)) fail("data.style.size", "must satisfy 0 < lo <= hi");
    if (!(st.background_lo >= 0.0 && st.background_lo <= st.background_hi && st.background_hi <= 1.0))
        fail("data.style.background", "must satisfy 0 <= lo <= hi <= 1");
    if (!(st.contrast_lo >= 0.0 && st.contrast_lo <= st.contrast_hi)) fail("data.style.contrast", "must satisfy 0 <= lo <= hi");
    if (!(st.noise_sigma >= 0.0)) fail("data.style.noise_sigma", "must be >= 0");
    if (!(st.center_jitter >= 0.0)) fail("data.style.center_jitter", "must be >= 0");
    try {
        model.validate();
    } catch (const std::invalid_argument& e) {
        fail("model", e.what());
    }
    if (model.vocab != vlm::kShapeClassCount) fail("model.vocab", "must equal the number of shape classes (16)");
    validate_train(backbone, "backbone");
    validate_train(surrogate, "surrogate");
    apt.validate();
    if (bank.depth < 0 || bank.depth > model.image_layers)
        fail("bank.depth", "must lie in [0, " + std::to_string(model.image_layers) + "]");
    if (bank.length < 0) fail("bank.length", "must be >= 0");
    if (!(warm_noise >= 0.0)) fail("warm_noise", "must be >= 0");
    if (!(references.epsilon >= 0.0 && references.epsilon <= 1.0)) fail("references.epsilon", "must lie in [0, 255]");
    if (references.attack_steps < 1) fail("references.attack_steps", "must be >= 1");
    attack.validate();
    tame.validate(model.image_layers);
    if (eval.samples < 1) fail("eval.samples", "must be >= 1");
    const int test_size = data.test_per_class * static_cast<int>(vlm::downstream_classes().size());
    if (eval.samples > test_size)
        fail("eval.samples", "exceeds the test split (" + std::to_string(test_size) + " images)");
    if (eval.threads < 1) fail("eval.threads", "must be >= 1");
    if (eval.bootstrap < 1) fail("eval.bootstrap", "must be >= 1");

    // Every sweep value must produce a valid cell before anything runs.
    for (const auto& axis : axis_names()) {
        const auto values = axis_values(*this, axis);
        for (std::size_t i = 0; i < values.size(); ++i) {
            const std::string path = "sweep." + axis + "[" + std::to_string(i) + "]";
            ExperimentConfig cell;
            try {
                cell = apply_overrides(*this, {{axis, values[i]}});
            } catch (const std::invalid_argument& e) {
                fail(path, e.what());
            }
            try {
                cell.tame.validate(cell.model.image_layers);
                cell.attack.validate();
                if (cell.bank.depth < 0 || cell.bank.depth > cell.model.image_layers)
                    fail("depth", "must lie in [0, " + std::to_string(cell.model.image_layers) + "]");
                if (cell.bank.length < 0) fail("length", "must be >= 0");
            } catch (const std::invalid_argument& e) {
                fail(path, e.what());
            }
        }
    }
}

std::vector<std::string> axis_values(const ExperimentConfig& cfg, const std::string& axis) {
    std::vector<std::string> out;
    const auto& s = cfg.sweep;
    if (axis == "steps") {
        for (int v : s.steps) out.push_back(std::to_string(v));
    } else if (axis == "epsilon") {
        for (double v : s.epsilon) out.push_back(number_text(v));
    } else if (axis == "experts") {
        for (int v : s.experts) out.push_back(std::to_string(v));
    } else if (axis == "depth") {
        for (int v : s.depth) out.push_back(std::to_string(v));
    } else if (axis == "length") {
        for (int v : s.length) out.push_back(std::to_string(v));
    } else if (axis == "align") {
        for (const auto& [lo, hi] : s.align) out.push_back(std::to_string(lo) + "-" + std::to_string(hi));
    } else if (axis == "reset") {
        for (long v : s.reset) out.push_back(reset_text(v));
    } else if (axis == "design") {
        for (auto d : s.design) out.push_back(moe::design_name(d));
    } else if (axis == "ablation") {
        out = s.ablation;
    } else {
        throw std::invalid_argument("sweep axis: unknown axis '" + axis + "'");
    }
    return out;
}

std::string cell_id(const Overrides& o) {
    if (o.empty()) return "base";
    std::string id;
    // Axis order first, then the remaining keys alphabetically.
    std::vector<std::string> keys;
    for (const auto& a : axis_names())
        if (o.count(a)) keys.push_back(a);
    for (const auto& [k, v] : o)
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    for (const auto& k : keys) {
        if (!id.empty()) id += "_";
        id += k + "-" + o.at(k);
    }
    return id;
}

ExperimentConfig apply_overrides(const ExperimentConfig& base, const Overrides& o) {
    ExperimentConfig c = base;
    for (const auto& [key, v] : o) {
        if (key == "steps") {
            c.tame.steps = parse_int(v, "steps");
            if (c.tame.steps < 0) fail("steps", "must be >= 0");
        } else if (key == "epsilon") {
            const double e = parse_number(v, "epsilon");
            if (!(e >= 0.0 && e <= 255.0)) fail("epsilon", "must lie in [0, 255] (units of 1/255)");
            c.attack.epsilon = e / 255.0;
        } else if (key == "experts") {
            c.tame.experts = parse_int(v, "experts");
            if (c.tame.experts < 1) fail("experts", "must be >= 1");
        } else if (key == "depth") {
            c.bank.depth = parse_int(v, "depth");
            if (c.bank.depth < 0 || c.bank.depth > c.model.image_layers)
                fail("depth", "must lie in [0, " + std::to_string(c.model.image_layers) + "]");
        } else if (key == "length") {
            c.bank.length = parse_int(v, "length");
            if (c.bank.length < 0) fail("length", "must be >= 0");
        } else if (key == "align") {
            const auto dash = v.find('-');
            if (dash == std::string::npos) fail("align", "expected lo-hi, got '" + v + "'");
            c.tame.align_lo = parse_int(v.substr(0, dash), "align");
            c.tame.align_hi = parse_int(v.substr(dash + 1), "align");
        } else if (key == "reset") {
            c.tame.reset_interval = parse_reset(v, "reset");
        } else if (key == "design") {
            try {
                c.bank.design = moe::parse_design(v);
            } catch (const std::invalid_argument&) {
                fail("design", "expected V, VLJ or VLI, got '" + v + "'");
            }
        } else if (key == "ablation") {
            if (v == "none") {
                c.tame.steps = 0;
            } else if (v == "entropy") {
                c.tame.use_alignment = false;
            } else if (v == "align") {
                c.tame.use_entropy = false;
            } else if (v != "both") {
                fail("ablation", "expected none, entropy, align or both, got '" + v + "'");
            }
        } else if (key == "lr") {
            c.tame.lr = parse_number(v, "lr");
            if (!(c.tame.lr >= 0.0)) fail("lr", "must be >= 0");
        } else if (key == "alpha") {
            c.tame.alpha = parse_number(v, "alpha");
            if (!(c.tame.alpha >= 0.0 && c.tame.alpha <= 1.0)) fail("alpha", "must lie in [0, 1]");
        } else if (key == "samples") {
            c.eval.samples = parse_int(v, "samples");
            if (c.eval.samples < 1) fail("samples", "must be >= 1");
        } else {
            fail(key, "unknown override (axes: steps, epsilon, experts, depth, length, align, reset, design, ablation; "
                      "also lr, alpha, samples)");
        }
    }
    return c;
}

std::vector<Overrides> plan_cells(const ExperimentConfig& cfg, const std::vector<std::string>& axes) {
    std::vector<Overrides> cells{Overrides{}};
    for (const auto& axis : axes) {
        if (std::count(axes.begin(), axes.end(), axis) > 1) throw std::invalid_argument("sweep: axis '" + axis + "' given twice");
        const auto values = axis_values(cfg, axis);
        std::vector<Overrides> next;
        for (const auto& c : cells) {
            for (const auto& v : values) {
                Overrides o = c;
                o[axis] = v;
                next.push_back(std::move(o));
            }
        }
        cells = std::move(next);
    }
    if (axes.empty()) cells.clear();
    return cells;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
    const std::string h = io::sha256_hex(tag + "#" + std::to_string(seed));
    return std::stoull(h.substr(0, 16), nullptr, 16);
}

}  // namespace tame::harness
