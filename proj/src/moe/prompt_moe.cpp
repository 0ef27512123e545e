#include "tame/moe/prompt_moe.hpp"

#include <cmath>
#include <stdexcept>

namespace tame::moe {

using ad::Index;
using ad::Matrix;
using ad::Var;

std::string design_name(Design d) {
    switch (d) {
        case Design::V: return "V";
        case Design::VLJ: return "VLJ";
        case Design::VLI: return "VLI";
    }
    return "?";
}

Design parse_design(const std::string& s) {
    if (s == "V" || s == "v") return Design::V;
    if (s == "VLJ" || s == "vlj") return Design::VLJ;
    if (s == "VLI" || s == "vli") return Design::VLI;
    throw std::invalid_argument("design: unknown prompt design '" + s + "' (V|VLJ|VLI)");
}

int BankShape::textual_layers() const {
    switch (design) {
        case Design::V: return 0;
        case Design::VLJ: return depth;
        case Design::VLI: return std::min(depth, text_layers);
    }
    return 0;
}

void BankShape::validate() const {
    if (experts < 1) throw std::invalid_argument("experts: need at least one expert");
    if (depth < 0) throw std::invalid_argument("depth: must be >= 0");
    if (length < 0) throw std::invalid_argument("prompt_length: must be >= 0");
    if (dim < 1 || text_layers < 0) throw std::invalid_argument("bank: bad dimensions");
}

nlohmann::json BankShape::to_json() const {
    return {{"design", design_name(design)}, {"experts", experts}, {"depth", depth},
            {"length", length},              {"dim", dim},         {"text_layers", text_layers}};
}

BankShape BankShape::from_json(const nlohmann::json& j) {
    BankShape s;
    s.design = parse_design(j.at("design").get<std::string>());
    s.experts = j.at("experts").get<int>();
    s.depth = j.at("depth").get<int>();
    s.length = j.at("length").get<int>();
    s.dim = j.at("dim").get<int>();
    s.text_layers = j.at("text_layers").get<int>();
    s.validate();
    return s;
}

namespace {

std::string lname(const char* what, int l) { return std::string(what) + ".l" + std::to_string(l); }

}  // namespace

MixtureOfPrompts::MixtureOfPrompts(BankShape shape) : shape_(shape) {
    shape_.validate();
    const Index cd = static_cast<Index>(shape_.length) * shape_.dim;
    const Index e = shape_.experts;
    const bool prompts = !shape_.empty();
    for (int l = 0; prompts && l < shape_.depth; ++l) {
        if (shape_.design != Design::VLJ) store_.add(lname("visual", l), Matrix::Zero(e, cd));
        if (l < shape_.textual_layers()) store_.add(lname("textual", l), Matrix::Zero(e, cd));
    }
    if (prompts && shape_.design == Design::VLJ) {
        store_.add("joint.w", Matrix::Identity(shape_.dim, shape_.dim));
        store_.add("joint.b", Matrix::Zero(1, shape_.dim));
    }
    for (int l = 0; prompts && l < shape_.depth; ++l) {
        store_.add(lname("router", l) + ".w", Matrix::Zero(shape_.dim, e));
        store_.add(lname("router", l) + ".b", Matrix::Zero(1, e));
    }
}

MixtureOfPrompts MixtureOfPrompts::random(const BankShape& shape, std::uint64_t seed, double scale) {
    MixtureOfPrompts m(shape);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    for (std::size_t i = 0; i < m.store_.size(); ++i) {
        const std::string& name = m.store_.names()[i];
        if (name.rfind("visual.", 0) == 0 || name.rfind("textual.", 0) == 0) {
            Matrix& v = m.store_.mutable_value(i);
            for (Index k = 0; k < v.size(); ++k) v.data()[k] = n(rng);
        }
    }
    return m;
}

MixtureOfPrompts MixtureOfPrompts::warm_start(const MixtureOfPrompts& single, int experts, double noise,
                                              std::uint64_t seed) {
    if (single.shape_.experts != 1) throw std::invalid_argument("warm_start: source must hold a single prompt");
    BankShape s = single.shape_;
    s.experts = experts;
    MixtureOfPrompts m(s);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, noise);
    for (std::size_t i = 0; i < m.store_.size(); ++i) {
        const std::string& name = m.store_.names()[i];
        Matrix& v = m.store_.mutable_value(i);
        if (name.rfind("visual.", 0) == 0 || name.rfind("textual.", 0) == 0) {
            const Matrix& src = single.store_.get(name);
            for (Index e = 0; e < v.rows(); ++e) {
                v.row(e) = src.row(0);
                if (noise > 0.0)
                    for (Index k = 0; k < v.cols(); ++k) v(e, k) += n(rng);
            }
        } else if (name.rfind("joint.", 0) == 0) {
            v = single.store_.get(name);
        }
    }
    return m;
}

ExpertPrompt MixtureOfPrompts::expert(int e) const {
    if (e < 0 || e >= shape_.experts) throw std::out_of_range("expert index out of range");
    ExpertPrompt p;
    p.design = shape_.design;
    if (shape_.empty()) return p;
    const Index c = shape_.length;
    const Index d = shape_.dim;
    auto unflatten = [&](const Matrix& bank) { return Matrix(bank.row(e).reshaped<Eigen::RowMajor>(c, d)); };
    for (int l = 0; l < shape_.textual_layers(); ++l) p.textual.push_back(unflatten(store_.get(lname("textual", l))));
    for (int l = 0; l < shape_.depth; ++l) {
        if (shape_.design == Design::VLJ) {
            p.visual.push_back((p.textual[static_cast<std::size_t>(l)] * store_.get("joint.w")).rowwise() +
                               store_.get("joint.b").row(0));
        } else {
            p.visual.push_back(unflatten(store_.get(lname("visual", l))));
        }
    }
    return p;
}

double MixtureOfPrompts::distance(const MixtureOfPrompts& other) const {
    if (other.store_.size() != store_.size()) throw std::invalid_argument("distance: banks differ in layout");
    double s = 0.0;
    for (std::size_t i = 0; i < store_.size(); ++i) s += (store_.values()[i] - other.store_.values()[i]).squaredNorm();
    return std::sqrt(s);
}

io::Checkpoint MixtureOfPrompts::to_checkpoint() const {
    io::Checkpoint ck;
    ck.kind = "prompt-bank";
    ck.meta["shape"] = shape_.to_json();
    for (std::size_t i = 0; i < store_.size(); ++i) ck.add(store_.names()[i], store_.values()[i]);
    return ck;
}

MixtureOfPrompts MixtureOfPrompts::from_checkpoint(const io::Checkpoint& ck) {
    if (ck.kind != "prompt-bank") throw std::runtime_error("checkpoint kind '" + ck.kind + "' is not a prompt bank");
    MixtureOfPrompts m(BankShape::from_json(ck.meta.at("shape")));
    for (std::size_t i = 0; i < m.store_.size(); ++i) {
        const Matrix& v = ck.get(m.store_.names()[i]);
        if (ad::shape_of(v) != ad::shape_of(m.store_.values()[i])) {
            throw ad::ShapeError("prompt bank tensor " + m.store_.names()[i], ad::shape_of(v),
                                 ad::shape_of(m.store_.values()[i]));
        }
        m.store_.mutable_value(i) = v;
    }
    return m;
}

BoundMixture BoundMixture::bind(const MixtureOfPrompts& m, bool trainable) {
    std::vector<Var> handles;
    for (const auto& v : m.store().values()) handles.push_back(trainable ? ad::parameter(v) : ad::constant(v));
    return bind(m, std::move(handles));
}

BoundMixture BoundMixture::bind(const MixtureOfPrompts& m, std::vector<ad::Var> handles) {
    const auto& s = m.store();
    if (handles.size() != s.size()) throw std::invalid_argument("BoundMixture: handle count differs from the bank");
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (handles[i].shape() != ad::shape_of(s.values()[i])) throw ad::ShapeError(s.names()[i], handles[i].shape(), ad::shape_of(s.values()[i]));
    }
    BoundMixture b;
    b.shape = m.shape();
    b.all = std::move(handles);
    auto find = [&](const std::string& name) {
        for (std::size_t i = 0; i < s.size(); ++i)
            if (s.names()[i] == name) return b.all[i];
        throw std::out_of_range("bank has no tensor " + name);
    };
    if (b.shape.empty()) return b;
    if (b.shape.design == Design::VLJ) {
        b.joint_w = find("joint.w");
        b.joint_b = find("joint.b");
    }
    for (int l = 0; l < b.shape.depth; ++l) {
        if (b.shape.design != Design::VLJ) b.visual.push_back(find(lname("visual", l)));
        if (l < b.shape.textual_layers()) b.textual.push_back(find(lname("textual", l)));
        b.router_w.push_back(find(lname("router", l) + ".w"));
        b.router_b.push_back(find(lname("router", l) + ".b"));
    }
    return b;
}

Var BoundMixture::flattened_experts(int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    const Index e = shape.experts;
    const Index cd = static_cast<Index>(shape.length) * shape.dim;
    std::vector<Var> parts;
    if (shape.design == Design::VLJ) {
        Var t = ad::reshape(textual[l], e * shape.length, shape.dim);
        parts.push_back(ad::reshape(joint_project(t, joint_w, joint_b), e, cd));
    } else {
        parts.push_back(visual[l]);
    }
    if (l < textual.size()) parts.push_back(textual[l]);
    if (parts.size() == 1) return parts[0];
    // Side-by-side concatenation via gather on the stacked rows.
    Var stacked = ad::concat_rows(parts);
    std::vector<std::ptrdiff_t> idx;
    idx.reserve(static_cast<std::size_t>(e * 2 * cd));
    for (Index r = 0; r < e; ++r) {
        for (Index k = 0; k < cd; ++k) idx.push_back(r * cd + k);
        for (Index k = 0; k < cd; ++k) idx.push_back((e + r) * cd + k);
    }
    return ad::gather(stacked, e, 2 * cd, std::move(idx));
}

Var route(const Var& tokens, const Var& w, const Var& b, Index tokens_per_sample) {
    if (tokens_per_sample <= 0 || tokens.rows() == 0) throw std::invalid_argument("route: no backbone tokens (T = 0)");
    if (tokens.rows() % tokens_per_sample != 0) throw ad::ShapeError("route tokens", tokens.shape(), ad::Shape{tokens_per_sample, tokens.cols()});
    Var g = ad::add_row(ad::matmul(tokens, w), b);
    return ad::segment_mean_rows(ad::softmax(g, 1), tokens_per_sample);
}

Var mix(const Var& pi, const Var& experts, Index length, Index dim) {
    if (pi.cols() != experts.rows() || experts.cols() != length * dim) {
        throw ad::ShapeError("mix", pi.shape(), experts.shape());
    }
    return ad::reshape(ad::matmul(pi, experts), pi.rows() * length, dim);
}

Var joint_project(const Var& tokens, const Var& w, const Var& b) { return ad::add_row(ad::matmul(tokens, w), b); }

Var balance_loss(const Var& pbar) {
    const auto e = static_cast<double>(pbar.value().size());
    Var dev = ad::add_scalar(pbar, -1.0 / e);
    return ad::scale(ad::sum(ad::mul(dev, dev)), 1.0 / e);
}

Var diversity_loss(const Var& experts) {
    const Index e = experts.rows();
    if (e < 2) return ad::scale(ad::sum(experts), 0.0);
    Var n = ad::l2_normalize_rows(experts);
    Var gram = ad::matmul_nt(n, n);
    std::vector<std::ptrdiff_t> upper;
    for (Index i = 0; i < e; ++i)
        for (Index j = i + 1; j < e; ++j) upper.push_back(i * e + j);
    const auto pairs = static_cast<Index>(upper.size());
    Var cos = ad::gather(gram, pairs, 1, std::move(upper));
    return ad::scale(ad::sum(ad::relu(cos)), 2.0 / (static_cast<double>(e) * static_cast<double>(e - 1)));
}

double warmup(long t, long t_warm) {
    if (t < 0 || t_warm < 1) throw std::invalid_argument("warmup: need t >= 0 and T_warm >= 1");
    return std::min(1.0, static_cast<double>(t) / static_cast<double>(t_warm));
}

Var moe_regularizer(const std::vector<BlockTerms>& blocks, double lambda_bal, double lambda_div, double gamma) {
    if (blocks.empty()) throw std::invalid_argument("moe_regularizer: no TAME blocks");
    if (lambda_bal < 0.0 || lambda_div < 0.0) throw std::invalid_argument("moe_regularizer: lambda must be >= 0");
    Var total;
    for (const auto& b : blocks) {
        Var term = ad::add(ad::scale(balance_loss(b.pbar), lambda_bal), ad::scale(diversity_loss(b.experts), lambda_div));
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::scale(total, gamma);
}

MixturePromptSource::MixturePromptSource(const BoundMixture& m) : m_(m) {}

Var MixturePromptSource::visual(int layer, const Var& content, Index batch) {
    if (layer == 0) pi_.clear();
    if (m_.shape.empty() || layer >= m_.shape.depth) return {};
    const auto l = static_cast<std::size_t>(layer);
    tokens_ = content.rows() / batch;
    Var pi = route(content, m_.router_w[l], m_.router_b[l], tokens_);
    pi_.push_back(pi);
    if (m_.shape.design == Design::VLJ) {
        Var t = mix(pi, m_.textual[l], m_.shape.length, m_.shape.dim);
        return joint_project(t, m_.joint_w, m_.joint_b);
    }
    return mix(pi, m_.visual[l], m_.shape.length, m_.shape.dim);
}

Var MixturePromptSource::textual(int layer, Index batch) {
    const auto l = static_cast<std::size_t>(layer);
    if (!has_textual() || l >= m_.textual.size()) return {};
    if (l >= pi_.size()) throw std::logic_error("textual prompt requested before the image pass routed that layer");
    const Var& pi = pi_[l];
    if (pi.rows() == batch) return mix(pi, m_.textual[l], m_.shape.length, m_.shape.dim);
    if (batch == 1) return mix(ad::gather_rows(pi, {0}), m_.textual[l], m_.shape.length, m_.shape.dim);
    throw ad::ShapeError("textual routing batch", pi.shape(), ad::Shape{batch, pi.cols()});
}

}  // namespace tame::moe
