// Acceptance run: one PASS/FAIL line per criterion 1-11.
//
// Criteria 1, 2, 4 and 5 are self-contained. Criteria 3 and 6-11 use the
// trained backbone and prompts of a work directory (built on demand) and
// write their evaluation cells under --out.

#include "kernel_cases.hpp"
#include "tame/autodiff/gradcheck.hpp"
#include "tame/engine/engine.hpp"
#include "tame/harness/pipeline.hpp"
#include "tame/io/hash.hpp"
#include "test_util.hpp"

#include <CLI11.hpp>
#include <Eigen/QR>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>

using namespace tame;
using ad::Index;
using ad::Matrix;
using ad::Var;
using harness::ExperimentConfig;
using harness::Overrides;
using nlohmann::json;
using testing::random_extent;
using testing::random_matrix;
namespace fs = std::filesystem;

namespace {

using clk = std::chrono::steady_clock;
double since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[96];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pct(double v) { return fmt("%.1f%%", 100.0 * v); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ---------------------------------------------------------------- 1

constexpr double kFdTolerance = 1e-5;

// Five-point differences at h = 1e-3: derivatives near 1e-7 (saturated
// softmax rows) sit below the roundoff of two-point differences at 1e-5.
ad::GradCheckOptions fd(std::uint64_t seed, std::size_t coords = 0) {
    return {.step = 1e-3, .fourth_order = true, .max_coordinates = coords, .seed = seed};
}

// References offset from the current statistics by at least 0.2 per
// coordinate, so the L1 terms stay away from their kinks.
engine::LayerStatistics offset_stats(const engine::LayerStatistics& at, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> mag(0.2, 0.6);
    engine::LayerStatistics r = at;
    auto shift = [&](Matrix& m) {
        for (Index i = 0; i < m.size(); ++i) m.data()[i] += (rng() % 2 ? 1.0 : -1.0) * mag(rng);
    };
    for (auto& m : r.mean) shift(m);
    for (auto& v : r.var) shift(v);
    return r;
}

const vlm::ToyDualEncoder& random_model() {
    static const vlm::ToyDualEncoder m = vlm::ToyDualEncoder::initialize(vlm::ModelSpec{}, 41);
    return m;
}

vlm::Image shape_image(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return vlm::render_shape(vlm::downstream_classes()[seed % 8], rng);
}

moe::MixtureOfPrompts random_bank(const moe::BankShape& s, std::mt19937_64& rng, double router_scale) {
    auto b = moe::MixtureOfPrompts::random(s, rng(), 0.3);
    for (std::size_t i = 0; i < b.store().size(); ++i) {
        const auto& v = b.store().values()[i];
        if (b.store().names()[i].rfind("router.", 0) == 0) {
            b.store().mutable_value(i) = random_matrix(rng, v.rows(), v.cols(), router_scale);
        }
    }
    return b;
}

Outcome criterion1() {
    const auto t0 = clk::now();
    std::map<std::string, double> worst;
    for (const auto& kc : testing::kernel_cases()) {
        double w = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            std::mt19937_64 rng(seed);
            w = std::max(w, ad::finite_difference_check(kc.fn, kc.inputs(rng), fd(seed)));
        }
        worst["kernel " + kc.name] = w;
    }

    double w_ent = 0.0, w_align = 0.0, w_moe = 0.0, w_tame = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(1000 + seed);
        // Entropy of the mean selected-view prediction.
        const Matrix z = random_matrix(rng, random_extent(rng, 2, 6), random_extent(rng, 2, 8), 2.0);
        w_ent = std::max(w_ent, ad::finite_difference_check(
                                    [](const Var& x) { return engine::entropy_loss(ad::softmax(x, 1)); }, z, fd(seed)));

        // Statistics and the two-reference alignment.
        const int layers = static_cast<int>(random_extent(rng, 1, 3));
        const Index n = random_extent(rng, 2, 5), d = random_extent(rng, 2, 6);
        std::vector<Matrix> feats;
        for (int l = 0; l < layers; ++l) feats.push_back(random_matrix(rng, n, d));
        auto stats_of = [layers](const std::vector<Var>& in) {
            engine::StatisticsVars s;
            s.lo = 1;
            s.hi = layers;
            for (const auto& x : in) {
                s.mean.push_back(ad::mean(x, 0));
                s.var.push_back(ad::variance(x, 0));
            }
            return s;
        };
        std::vector<Var> consts;
        for (const auto& f : feats) consts.push_back(ad::constant(f));
        const auto at = stats_of(consts).values();
        engine::ReferenceStatistics refs;
        refs.adv = offset_stats(at, rng);
        refs.clean = offset_stats(at, rng);
        const double alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        w_align = std::max(w_align, ad::finite_difference_check(
                                        [&](const std::vector<Var>& in) { return engine::alignment_loss(stats_of(in), refs, alpha); },
                                        feats, fd(seed)));

        // Routing, mixing, balance and diversity.
        const Index t = random_extent(rng, 1, 4), e = random_extent(rng, 2, 5), dd = random_extent(rng, 2, 5),
                    c = random_extent(rng, 1, 3);
        const Matrix tokens = random_matrix(rng, 2 * t, dd);
        const double lb = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        const double ld = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
        const std::uint64_t wseed = rng();
        // A shared component keeps every expert pair's cosine clear of the
        // max(0, .) kink.
        Matrix experts = 0.4 * random_matrix(rng, e, c * dd);
        experts.rowwise() += random_matrix(rng, 1, c * dd).row(0);
        w_moe = std::max(w_moe, ad::finite_difference_check(
                                    [&](const std::vector<Var>& in) {
                                        const Var pi = moe::route(ad::constant(tokens), in[0], in[1], t);
                                        const Var mixed = moe::mix(pi, in[2], c, dd);
                                        return ad::add(testing::weighted_sum(mixed, wseed),
                                                       moe::moe_regularizer({{ad::mean(pi, 0), in[2]}}, lb, ld, 0.8));
                                    },
                                    {random_matrix(rng, dd, e), random_matrix(rng, 1, e), experts},
                                    fd(seed)));

        // Full objective through the encoder.
        const moe::Design designs[] = {moe::Design::V, moe::Design::VLJ, moe::Design::VLI};
        moe::BankShape s;
        s.design = designs[seed % 3];
        s.experts = static_cast<int>(random_extent(rng, 1, 3));
        s.depth = static_cast<int>(random_extent(rng, 1, 3));
        s.length = static_cast<int>(random_extent(rng, 1, 2));
        const auto b = random_bank(s, rng, 0.5);
        engine::TameConfig cfg;
        cfg.experts = s.experts;
        cfg.alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        cfg.align_lo = static_cast<int>(random_extent(rng, 1, 2));
        cfg.align_hi = static_cast<int>(random_extent(rng, cfg.align_lo, 4));
        cfg.lambda_bal = 0.5;
        cfg.lambda_div = 0.5;
        cfg.pooling = seed % 2 ? vlm::Pooling::ClsOnly : vlm::Pooling::TokenMean;
        const Matrix pixels = vlm::stack_images({shape_image(rng()), shape_image(rng())});
        engine::ReferenceStatistics trefs;
        trefs.pooling = cfg.pooling;
        {
            ad::NoGradGuard guard;
            auto bound = moe::BoundMixture::bind(b, false);
            moe::MixturePromptSource src(bound);
            const auto enc = random_model().encode_images(ad::constant(pixels), &src);
            const auto cur = engine::current_statistics(enc, 1, 4, cfg.pooling).values();
            trefs.adv = offset_stats(cur, rng);
            trefs.clean = offset_stats(cur, rng);
        }
        engine::TameEngine eng(random_model(), vlm::downstream_classes(), b, trefs, cfg);
        const double gamma = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        w_tame = std::max(w_tame, ad::finite_difference_check(
                                      [&](const std::vector<Var>& in) {
                                          return eng.objective(moe::BoundMixture::bind(b, in), pixels, gamma).total;
                                      },
                                      b.store().values(), fd(seed, 3)));
    }
    worst["entropy loss"] = w_ent;
    worst["alignment loss"] = w_align;
    worst["routing + regularizer"] = w_moe;
    worst["full objective"] = w_tame;

    const double secs = since(t0);
    double overall = 0.0;
    std::string argmax;
    for (const auto& [k, v] : worst) {
        if (v >= overall) {
            overall = v;
            argmax = k;
        }
    }
    const bool pass = overall < kFdTolerance && secs < 60.0;
    return {pass, std::to_string(worst.size()) + " checks x 100 seeds, worst rel. error " + fmt("%.2e", overall) + " (" + argmax +
                      "), " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------- 2

Outcome criterion2() {
    double worst = 0.0;
    auto check = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
    for (int e = 2; e <= 9; ++e) check(moe::balance_loss(ad::constant(Matrix::Constant(1, e, 1.0 / e))).item(), 0.0);
    check(moe::balance_loss(ad::constant((Matrix(1, 2) << 1.0, 0.0).finished())).item(), 0.25);
    check(moe::balance_loss(ad::constant((Matrix(1, 2) << 0.0, 1.0).finished())).item(), 0.25);
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix r = random_matrix(rng, 1, random_extent(rng, 1, 12));
        const Index e = random_extent(rng, 2, 6);
        Matrix same(e, r.cols()), opposite(2, r.cols());
        for (Index i = 0; i < e; ++i) same.row(i) = r;
        opposite << r, -r;
        check(moe::diversity_loss(ad::constant(same)).item(), 1.0);
        check(moe::diversity_loss(ad::constant(opposite)).item(), 0.0);
        // Orthogonal rows: a random rotation of the identity.
        const Index d = random_extent(rng, 2, 8);
        const Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, d, d));
        const Matrix q = qr.householderQ();
        check(moe::diversity_loss(ad::constant(q.topRows(random_extent(rng, 2, d)))).item(), 0.0);
    }
    for (long tw : {1L, 4L, 10L, 100L}) {
        check(moe::warmup(0, tw), 0.0);
        check(moe::warmup(tw, tw), 1.0);
    }
    return {worst <= 1e-12, "max deviation " + fmt("%.1e", worst) + " (balance, diversity, warm-up)"};
}

// ---------------------------------------------------------------- 3

Outcome criterion3(harness::Workspace& ws) {
    const auto t0 = clk::now();
    const ExperimentConfig& cfg = ws.config();
    ws.prepare_cell(cfg);
    const auto model = ws.backbone();
    const auto test = ws.dataset("test");
    const auto cache = ws.attacked(cfg.attack);
    const std::vector<int>& classes = test->classes;

    engine::TameConfig tc = cfg.tame;
    tc.experts = 1;
    tc.lambda_bal = 0.0;
    tc.lambda_div = 0.0;
    tc.steps = 10;
    tc.reset_interval = 1;
    const auto bank = moe::MixtureOfPrompts::warm_start(ws.robust_prompt(cfg.bank), 1, cfg.warm_noise, 17);
    const auto refs = ws.references(cfg.bank, tc.pooling);
    engine::TameEngine eng(*model, classes, bank, refs, tc);
    const auto sliced = refs.slice(tc.align_lo, tc.align_hi);

    const auto p0 = bank.expert(0);
    const std::size_t nv = p0.visual.size();
    auto forward = [&](const std::vector<Var>& ps, const Matrix& x, Var* loss, Matrix* logits) {
        vlm::FixedPrompt fp(std::vector<Var>(ps.begin(), ps.begin() + static_cast<std::ptrdiff_t>(nv)),
                            std::vector<Var>(ps.begin() + static_cast<std::ptrdiff_t>(nv), ps.end()));
        const auto enc = model->encode_images(ad::constant(x), &fp);
        const Var text = model->encode_texts(classes, 1, fp.has_textual() ? &fp : nullptr);
        const Var z = vlm::class_logits(enc.embeddings, text, static_cast<Index>(classes.size()), model->spec().temperature);
        if (logits) *logits = z.value();
        if (loss) {
            const auto cur = engine::current_statistics(enc, tc.align_lo, tc.align_hi, tc.pooling);
            *loss = ad::add(engine::entropy_loss(ad::softmax(z, 1)), engine::alignment_loss(cur, sliced, tc.alpha));
        }
    };

    double worst_loss = 0.0, worst_param = 0.0;
    int compared = 0;
    for (int i = 0; i < 20; ++i) {
        const vlm::Image x = vlm::unstack_image(cache->images, i, cfg.model.image_size);
        const std::uint64_t vseed = 500 + static_cast<std::uint64_t>(i);
        std::vector<moe::ExpertPrompt> states;
        eng.set_step_observer([&](int, const moe::MixtureOfPrompts& st) { states.push_back(st.expert(0)); });
        const auto res = eng.process(x, vseed);
        if (res.aborted || res.steps.size() != 10 || states.size() != 10) return {false, "sample " + std::to_string(i) + " did not run 10 steps"};

        std::vector<Matrix> prompts = p0.visual;
        prompts.insert(prompts.end(), p0.textual.begin(), p0.textual.end());
        const auto vs = engine::augment(x, tc.views, vseed, tc.augment);
        Matrix z0;
        {
            ad::NoGradGuard guard;
            std::vector<Var> c;
            for (const auto& m : prompts) c.push_back(ad::constant(m));
            forward(c, vlm::stack_images(vs.views), nullptr, &z0);
        }
        const auto sel = engine::select_views(engine::row_entropies(z0), tc.tau);
        if (sel.size() != res.selected) return {false, "view selection differs on sample " + std::to_string(i)};
        std::vector<vlm::Image> chosen;
        for (auto k : sel) chosen.push_back(vs.views[k]);
        const Matrix pixels = vlm::stack_images(chosen);

        std::vector<ad::Shape> shapes;
        for (const auto& m : prompts) shapes.push_back(ad::shape_of(m));
        ad::AdamW opt({.lr = tc.lr, .beta1 = tc.beta1, .beta2 = tc.beta2, .eps = 1e-8, .weight_decay = tc.weight_decay}, shapes);
        for (int s = 0; s < 10; ++s) {
            std::vector<Var> ps;
            for (const auto& m : prompts) ps.push_back(ad::parameter(m));
            Var loss;
            forward(ps, pixels, &loss, nullptr);
            worst_loss = std::max(worst_loss, std::abs(loss.item() - res.steps[static_cast<std::size_t>(s)].loss));
            const auto g = ad::backward(loss);
            std::vector<Matrix*> ptrs;
            std::vector<Matrix> grads;
            for (std::size_t k = 0; k < prompts.size(); ++k) {
                ptrs.push_back(&prompts[k]);
                grads.push_back(g.contains(ps[k]) ? g.at(ps[k]) : Matrix());
            }
            opt.step(ptrs, grads);
            const auto& st = states[static_cast<std::size_t>(s)];
            for (std::size_t l = 0; l < nv; ++l) worst_param = std::max(worst_param, (st.visual[l] - prompts[l]).cwiseAbs().maxCoeff());
            for (std::size_t l = 0; l < st.textual.size(); ++l)
                worst_param = std::max(worst_param, (st.textual[l] - prompts[nv + l]).cwiseAbs().maxCoeff());
            ++compared;
        }
    }
    const bool pass = compared == 200 && worst_loss <= 1e-9 && worst_param <= 1e-9;
    return {pass, "20 samples x 10 steps, max |loss diff| " + fmt("%.1e", worst_loss) + ", max |prompt diff| " +
                      fmt("%.1e", worst_param) + ", " + fmt("%.1f s", since(t0))};
}

// ---------------------------------------------------------------- 4

Outcome criterion4() {
    std::mt19937_64 rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        moe::BankShape s;
        s.experts = 3;
        s.design = trial % 2 ? moe::Design::VLI : moe::Design::V;
        const auto b = random_bank(s, rng, 1.0);
        const int views = static_cast<int>(random_extent(rng, 1, 12));
        const auto vs = engine::augment(shape_image(rng()), views, rng());
        const Index n = static_cast<Index>(vs.views.size());
        ad::NoGradGuard guard;
        auto bound = moe::BoundMixture::bind(b, false);
        moe::MixturePromptSource src(bound);
        const auto enc = random_model().encode_images(ad::constant(vlm::stack_images(vs.views)), &src);
        const Index content = random_model().spec().image_content_tokens();
        for (auto pooling : {vlm::Pooling::TokenMean, vlm::Pooling::ClsOnly}) {
            const auto st = engine::current_statistics(enc, 1, 4, pooling).values();
            for (int l = 1; l <= 4; ++l) {
                const Matrix& h = enc.hooks[static_cast<std::size_t>(l - 1)].value();
                const Index seq = enc.seq_len[static_cast<std::size_t>(l - 1)];
                // Brute force: pool each view, then two passes over the views.
                std::vector<std::vector<double>> pooled(static_cast<std::size_t>(n), std::vector<double>(32, 0.0));
                for (Index v = 0; v < n; ++v) {
                    const Index rows = pooling == vlm::Pooling::ClsOnly ? 1 : content;
                    for (Index r = 0; r < rows; ++r)
                        for (Index c = 0; c < 32; ++c) pooled[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)] += h(v * seq + r, c) / static_cast<double>(rows);
                }
                for (Index c = 0; c < 32; ++c) {
                    double m = 0.0;
                    for (Index v = 0; v < n; ++v) m += pooled[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)];
                    m /= static_cast<double>(n);
                    double ss = 0.0;
                    for (Index v = 0; v < n; ++v) {
                        const double dlt = pooled[static_cast<std::size_t>(v)][static_cast<std::size_t>(c)] - m;
                        ss += dlt * dlt;
                    }
                    const double var = ss / static_cast<double>(n - 1);
                    worst = std::max(worst, std::abs(st.mean[static_cast<std::size_t>(l - 1)](0, c) - m));
                    worst = std::max(worst, std::abs(st.var[static_cast<std::size_t>(l - 1)](0, c) - var));
                }
            }
        }
    }
    return {worst <= 1e-10, "100 view sets x 4 layers x 2 poolings, max deviation " + fmt("%.1e", worst)};
}

// ---------------------------------------------------------------- 5

Outcome criterion5() {
    std::mt19937_64 rng(5);
    int mismatches = 0, checked = 0;
    for (double tau : {0.05, 0.1, 0.5, 1.0}) {
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<double> h(256);
            std::uniform_int_distribution<int> coarse(0, 20);
            for (auto& v : h) v = trial % 2 ? coarse(rng) * 0.1 : std::uniform_real_distribution<double>(0.0, std::log(8.0))(rng);
            const auto sel = engine::select_views(h, tau);
            std::vector<std::size_t> idx(h.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return h[a] < h[b]; });
            const auto k = static_cast<std::size_t>(std::ceil(tau * 256.0 - 1e-9));
            std::vector<std::size_t> oracle(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
            std::sort(oracle.begin(), oracle.end());
            mismatches += sel != oracle;
            ++checked;
        }
    }
    const engine::TameConfig defaults;
    const std::size_t k = engine::selection_size(defaults.tau, static_cast<std::size_t>(defaults.views) + 1);
    return {mismatches == 0 && k == 26,
            std::to_string(checked) + " entropy vectors, " + std::to_string(mismatches) + " mismatches; |H_tau| = " +
                std::to_string(k) + " at defaults"};
}

// ---------------------------------------------------------------- 6-11

struct Run {
    std::string out;
    std::vector<json> summaries;  // every cell of criteria 6-10

    json cell(harness::Workspace& ws, const Overrides& o, const std::string& id, double* secs) {
        ExperimentConfig c = harness::apply_overrides(ws.config(), o);
        c.validate();
        ws.prepare_cell(c);
        const auto t0 = clk::now();
        const auto r = harness::evaluate_cell(ws, c, id);
        if (secs) *secs = since(t0);
        harness::write_cell(out + "/" + id, c, r);
        summaries.push_back(r.summary);
        return r.summary;
    }

    std::map<std::string, json> sweep(harness::Workspace& ws, const std::vector<std::string>& axes, const Overrides& base,
                                      const std::string& name) {
        const std::string dir = out + "/" + name;
        const auto res = harness::run_sweep(ws, axes, base, dir, ws.config().eval.threads);
        if (!res.failed.empty()) throw std::runtime_error("sweep " + name + ": cell " + res.failed.front() + " failed");
        harness::write_report(dir);
        std::map<std::string, json> cells;
        for (const auto& id : res.cells) {
            cells[id] = json::parse(io::read_file(dir + "/cells/" + id + "/summary.json"));
            summaries.push_back(cells[id]);
        }
        return cells;
    }
};

double acc(const json& s, const char* k) { return s.at("accuracy").at(k).at("mean").get<double>(); }

Outcome criterion6(harness::Workspace& ws, Run& run) {
    double secs = 0.0;
    const json s = run.cell(ws, {{"lr", "0.0005"}, {"steps", "1"}, {"samples", "200"}}, "descent", &secs);
    const double frac = s.at("descent_fraction").get<double>();
    const bool pass = frac >= 0.9 && s.at("aborted").get<int>() == 0 && secs < 300.0;
    return {pass, "L_TAME decreased on " + pct(frac) + " of 200 PGD samples (lr 5e-4, 1 step), " + fmt("%.1f s", secs)};
}

Outcome criterion7(harness::Workspace& ws, Run& run) {
    double secs = 0.0;
    const json s = run.cell(ws, {}, "robustness", &secs);
    const double nd = acc(s, "no_defense"), fr = acc(s, "frozen"), tm = acc(s, "tame");
    const auto& gap = s.at("gap_tame_frozen");
    const double g = gap.at("mean").get<double>(), lo = gap.at("lo").get<double>(), hi = gap.at("hi").get<double>();
    const int n = s.at("samples").get<int>();
    const bool pass = nd < fr && fr < tm && g >= 0.05 && lo > 0.0 && n >= 500 && secs < 1800.0;
    return {pass, "no defense " + pct(nd) + " < frozen " + pct(fr) + " < TAME " + pct(tm) + "; gap " + fmt("%+.1f", 100 * g) +
                      " pts, 95% CI [" + fmt("%.1f", 100 * lo) + ", " + fmt("%.1f", 100 * hi) + "]; " + std::to_string(n) +
                      " samples, " + fmt("%.0f s", secs)};
}

Outcome criterion8(harness::Workspace& ws, Run& run) {
    const auto cells = run.sweep(ws, {"ablation"}, {}, "ablation");
    auto cell = [&](const char* v) -> const json& { return cells.at(harness::cell_id({{"ablation", v}})); };
    const double fr = acc(cell("none"), "tame");
    const double ent = acc(cell("entropy"), "tame");
    const double al = acc(cell("align"), "tame");
    const double full = acc(cell("both"), "tame");
    const int n = cell("both").at("samples").get<int>();
    const bool pass = fr <= ent && fr <= al && al <= full && n >= 500;
    return {pass, "frozen " + pct(fr) + ", entropy-only " + pct(ent) + ", alignment-only " + pct(al) + ", full " + pct(full) + "; " +
                      std::to_string(n) + " samples"};
}

Outcome criterion9(harness::Workspace& ws, Run& run) {
    const auto cells = run.sweep(ws, {"steps", "epsilon"}, {}, "steps_epsilon");
    const auto steps = harness::axis_values(ws.config(), "steps");
    const auto eps = harness::axis_values(ws.config(), "epsilon");
    auto at = [&](const std::string& st, const std::string& e) {
        return acc(cells.at(harness::cell_id({{"steps", st}, {"epsilon", e}})), "tame");
    };
    bool pass = true;
    std::string table;
    for (const auto& e : eps) {
        table += (table.empty() ? "eps " : "; eps ") + e + ":";
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (i > 0 && at(steps[i], e) < at(steps[i - 1], e)) pass = false;
            table += " " + fmt("%.1f", 100 * at(steps[i], e));
        }
    }
    for (const auto& st : steps)
        for (std::size_t i = 1; i < eps.size(); ++i)
            if (!(at(st, eps[i]) < at(st, eps[i - 1]))) pass = false;
    return {pass, "TAME accuracy (%) by steps " + [&] {
                std::string j;
                for (const auto& st : steps) j += (j.empty() ? "" : "/") + st;
                return j;
            }() + ": " + table};
}

Outcome criterion10(harness::Workspace& ws, Run& run) {
    const auto cells = run.sweep(ws, {"reset"}, {{"samples", "200"}}, "reset");
    bool finite = true;
    for (const char* id : {"reset-1", "reset-32"}) {
        const auto rows = harness::read_samples_csv(run.out + "/reset/cells/" + id + "/samples.csv");
        for (const auto& r : rows) finite = finite && !r.aborted && std::isfinite(r.loss_pre) && std::isfinite(r.loss_post);
        finite = finite && rows.size() == 200;
    }
    const auto online = harness::read_samples_csv(run.out + "/reset/cells/reset-inf/samples.csv");
    bool growing = online.size() == 200;
    std::string drift;
    for (std::size_t i = 0; i < 10 && i < online.size(); ++i) {
        if (i > 0 && !(online[i].drift > online[i - 1].drift)) growing = false;
        drift += (i ? " " : "") + fmt("%.3g", online[i].drift);
    }
    return {finite && growing, std::string("reset 1 and 32 ") + (finite ? "finite" : "NOT finite") + "; online drift over first 10: " +
                                   drift + (growing ? " (increasing)" : " (not increasing)") + "; online accuracy " +
                                   pct(acc(cells.at("reset-inf"), "tame"))};
}

Outcome criterion11(harness::Workspace& ws, const Run& run) {
    const json stamp = json::parse(io::read_file(ws.backbone_path() + ".json"));
    const std::string trained = stamp.at("report").at("sha256").get<std::string>();
    const std::string now = io::sha256_file(ws.backbone_path());
    bool pass = trained == now && !run.summaries.empty();
    for (const auto& s : run.summaries) {
        const auto& b = s.at("backbone");
        pass = pass && b.at("unchanged").get<bool>() && b.at("sha256_before").get<std::string>() == trained &&
               b.at("sha256_after").get<std::string>() == trained;
    }
    return {pass, std::to_string(run.summaries.size()) + " runs, backbone sha256 " + now.substr(0, 16) + "... " +
                      (trained == now ? "matches" : "DIFFERS FROM") + " the trained checkpoint"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria 1-11"};
    std::string work, out;
    std::uint64_t seed = 0;
    std::vector<int> only;
    app.add_option("--work", work, "artifact directory (built when missing)")->required();
    app.add_option("--out", out, "directory for evaluation cells")->required();
    app.add_option("--seed", seed, "master seed");
    app.add_option("--only", only, "run only these criteria");
    CLI11_PARSE(app, argc, argv);

    std::set<int> wanted(only.begin(), only.end());
    auto want = [&](int c) { return wanted.empty() || wanted.count(c); };

    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.sweep.reset = {1, 32, 0};
    fs::remove_all(out);
    fs::create_directories(out);

    std::unique_ptr<harness::Workspace> ws;
    auto workspace = [&]() -> harness::Workspace& {
        if (!ws) ws = std::make_unique<harness::Workspace>(work, cfg, false);
        return *ws;
    };
    Run run{out, {}};

    int failures = 0;
    auto report = [&](int c, const std::function<Outcome()>& f) {
        if (!want(c)) return;
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("criterion %d: %s  %s\n", c, o.pass ? "PASS" : "FAIL", o.detail.c_str());
        std::fflush(stdout);
    };
    report(1, criterion1);
    report(2, criterion2);
    report(3, [&] { return criterion3(workspace()); });
    report(4, criterion4);
    report(5, criterion5);
    report(6, [&] { return criterion6(workspace(), run); });
    report(7, [&] { return criterion7(workspace(), run); });
    report(8, [&] { return criterion8(workspace(), run); });
    report(9, [&] { return criterion9(workspace(), run); });
    report(10, [&] { return criterion10(workspace(), run); });
    report(11, [&] { return criterion11(workspace(), run); });
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
