#include "tame/vlm/toy_vlm.hpp"

#include "tame/autodiff/adamw.hpp"
#include "tame/io/hash.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace tame::vlm {

using ad::Index;
using ad::Matrix;
using ad::Var;

// ---------------------------------------------------------------- model spec

void ModelSpec::validate() const {
    if (image_size <= 0 || patch <= 0 || image_size % patch != 0) throw std::invalid_argument("ModelSpec: patch must divide image_size");
    if (dim <= 0 || heads <= 0 || dim % heads != 0) throw std::invalid_argument("ModelSpec: dim must be divisible by heads");
    if (image_layers < 1 || text_layers < 1) throw std::invalid_argument("ModelSpec: need at least one layer per branch");
    if (mlp_hidden < 1 || template_tokens < 0 || vocab < 1) throw std::invalid_argument("ModelSpec: bad sizes");
    if (!(temperature >= 0.0)) throw std::invalid_argument("ModelSpec: temperature must be non-negative");
}

nlohmann::json ModelSpec::to_json() const {
    return {{"image_size", image_size}, {"patch", patch},           {"dim", dim},
            {"heads", heads},           {"mlp_hidden", mlp_hidden}, {"image_layers", image_layers},
            {"text_layers", text_layers}, {"template_tokens", template_tokens}, {"vocab", vocab},
            {"temperature", temperature}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.image_size = j.value("image_size", s.image_size);
    s.patch = j.value("patch", s.patch);
    s.dim = j.value("dim", s.dim);
    s.heads = j.value("heads", s.heads);
    s.mlp_hidden = j.value("mlp_hidden", s.mlp_hidden);
    s.image_layers = j.value("image_layers", s.image_layers);
    s.text_layers = j.value("text_layers", s.text_layers);
    s.template_tokens = j.value("template_tokens", s.template_tokens);
    s.vocab = j.value("vocab", s.vocab);
    s.temperature = j.value("temperature", s.temperature);
    s.validate();
    return s;
}

// ---------------------------------------------------------------- parameters

void ParameterStore::add(std::string name, Matrix value) {
    if (std::find(names_.begin(), names_.end(), name) != names_.end()) {
        throw std::invalid_argument("ParameterStore: duplicate parameter " + name);
    }
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
}

const Matrix& ParameterStore::get(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw std::out_of_range("ParameterStore: no parameter " + name);
    return values_[static_cast<std::size_t>(it - names_.begin())];
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
    return n;
}

std::string ParameterStore::digest() const {
    std::string bytes;
    for (std::size_t i = 0; i < values_.size(); ++i) {
        bytes += names_[i];
        bytes += ':' + std::to_string(values_[i].rows()) + 'x' + std::to_string(values_[i].cols()) + ';';
        bytes.append(reinterpret_cast<const char*>(values_[i].data()), static_cast<std::size_t>(values_[i].size()) * 8);
    }
    return io::sha256_hex(bytes);
}

namespace {

std::string block_name(const std::string& branch, int l, const char* field) {
    return branch + ".block" + std::to_string(l) + "." + field;
}

void add_block(ParameterStore& s, const std::string& branch, int l, int dim, int hidden, int depth,
               std::mt19937_64& rng) {
    auto normal = [&rng](Index r, Index c, double sd) {
        std::normal_distribution<double> n(0.0, sd);
        Matrix m(r, c);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
        return m;
    };
    const double d = dim;
    const double residual = 1.0 / std::sqrt(2.0 * depth);
    s.add(block_name(branch, l, "ln1_g"), Matrix::Ones(1, dim));
    s.add(block_name(branch, l, "ln1_b"), Matrix::Zero(1, dim));
    s.add(block_name(branch, l, "qkv_w"), normal(dim, 3 * dim, 1.0 / std::sqrt(d)));
    s.add(block_name(branch, l, "qkv_b"), Matrix::Zero(1, 3 * dim));
    s.add(block_name(branch, l, "out_w"), normal(dim, dim, residual / std::sqrt(d)));
    s.add(block_name(branch, l, "out_b"), Matrix::Zero(1, dim));
    s.add(block_name(branch, l, "ln2_g"), Matrix::Ones(1, dim));
    s.add(block_name(branch, l, "ln2_b"), Matrix::Zero(1, dim));
    s.add(block_name(branch, l, "fc1_w"), normal(dim, hidden, 1.0 / std::sqrt(d)));
    s.add(block_name(branch, l, "fc1_b"), Matrix::Zero(1, hidden));
    s.add(block_name(branch, l, "fc2_w"), normal(hidden, dim, residual / std::sqrt(static_cast<double>(hidden))));
    s.add(block_name(branch, l, "fc2_b"), Matrix::Zero(1, dim));
}

BlockWeights bind_block(const ParameterStore& s, const std::string& branch, int l, bool trainable,
                        std::vector<Var>& all) {
    auto b = [&](const char* f) {
        Var v = trainable ? ad::parameter(s.get(block_name(branch, l, f))) : ad::constant(s.get(block_name(branch, l, f)));
        all.push_back(v);
        return v;
    };
    BlockWeights w;
    w.ln1_g = b("ln1_g");
    w.ln1_b = b("ln1_b");
    w.qkv_w = b("qkv_w");
    w.qkv_b = b("qkv_b");
    w.out_w = b("out_w");
    w.out_b = b("out_b");
    w.ln2_g = b("ln2_g");
    w.ln2_b = b("ln2_b");
    w.fc1_w = b("fc1_w");
    w.fc1_b = b("fc1_b");
    w.fc2_w = b("fc2_w");
    w.fc2_b = b("fc2_b");
    return w;
}

Var transformer_block(const BlockWeights& w, const Var& x, Index seq_len, int heads) {
    using namespace ad;
    Var h = layer_norm(x, w.ln1_g, w.ln1_b);
    Var qkv = add_row(matmul(h, w.qkv_w), w.qkv_b);
    Var a = attention(qkv, seq_len, heads);
    Var x1 = add(x, add_row(matmul(a, w.out_w), w.out_b));
    Var h2 = layer_norm(x1, w.ln2_g, w.ln2_b);
    Var m = add_row(matmul(gelu(add_row(matmul(h2, w.fc1_w), w.fc1_b)), w.fc2_w), w.fc2_b);
    return add(x1, m);
}

std::vector<Index> content_rows(Index batch, Index content, Index prompt) {
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(batch * content));
    for (Index b = 0; b < batch; ++b)
        for (Index t = 0; t < content; ++t) rows.push_back(b * (content + prompt) + t);
    return rows;
}

// Row order for concat_rows({content (N*T), prompt (G*C)}) -> per-sequence
// [content, prompt]; sequence n takes prompt group n / per_group.
std::vector<Index> interleave(Index seqs, Index content, Index prompt, Index per_group) {
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(seqs * (content + prompt)));
    for (Index n = 0; n < seqs; ++n) {
        for (Index t = 0; t < content; ++t) rows.push_back(n * content + t);
        const Index g = n / per_group;
        for (Index c = 0; c < prompt; ++c) rows.push_back(seqs * content + g * prompt + c);
    }
    return rows;
}

std::vector<Index> tiled(Index count, Index times) {
    std::vector<Index> rows;
    rows.reserve(static_cast<std::size_t>(count * times));
    for (Index b = 0; b < times; ++b)
        for (Index t = 0; t < count; ++t) rows.push_back(t);
    return rows;
}

std::vector<Index> strided(Index count, Index stride, Index offset) {
    std::vector<Index> rows(static_cast<std::size_t>(count));
    for (Index b = 0; b < count; ++b) rows[static_cast<std::size_t>(b)] = b * stride + offset;
    return rows;
}

void check_prompt(const Var& p, Index batch, Index dim, const char* what) {
    if (p.cols() != dim || p.rows() % batch != 0) {
        throw ad::ShapeError(std::string(what) + " prompt (expects (B*C) x D)", p.shape(), ad::Shape{batch, dim});
    }
}

}  // namespace

Weights Weights::bind(const ModelSpec& spec, const ParameterStore& s, bool trainable) {
    Weights w;
    auto p = [&](const char* name) {
        Var v = trainable ? ad::parameter(s.get(name)) : ad::constant(s.get(name));
        w.all.push_back(v);
        return v;
    };
    w.patch_w = p("image.patch_w");
    w.patch_b = p("image.patch_b");
    w.cls = p("image.cls");
    w.image_pos = p("image.pos");
    for (int l = 0; l < spec.image_layers; ++l) w.image_blocks.push_back(bind_block(s, "image", l, trainable, w.all));
    w.image_ln_g = p("image.ln_g");
    w.image_ln_b = p("image.ln_b");
    w.image_proj = p("image.proj");
    w.template_tokens = p("text.template");
    w.class_tokens = p("text.class_tokens");
    w.text_pos = p("text.pos");
    for (int l = 0; l < spec.text_layers; ++l) w.text_blocks.push_back(bind_block(s, "text", l, trainable, w.all));
    w.text_ln_g = p("text.ln_g");
    w.text_ln_b = p("text.ln_b");
    w.text_proj = p("text.proj");
    return w;
}

// ---------------------------------------------------------------- prompts

FixedPrompt::FixedPrompt(std::vector<Var> visual, std::vector<Var> textual)
    : visual_(std::move(visual)), textual_(std::move(textual)) {}

Var FixedPrompt::visual(int layer, const Var&, Index batch) {
    if (layer >= static_cast<int>(visual_.size()) || !visual_[static_cast<std::size_t>(layer)].defined()) return {};
    const Var& p = visual_[static_cast<std::size_t>(layer)];
    if (p.rows() == 0) return {};
    return batch == 1 ? p : ad::gather_rows(p, tiled(p.rows(), batch));
}

Var FixedPrompt::textual(int layer, Index batch) {
    if (layer >= static_cast<int>(textual_.size()) || !textual_[static_cast<std::size_t>(layer)].defined()) return {};
    const Var& p = textual_[static_cast<std::size_t>(layer)];
    if (p.rows() == 0) return {};
    return batch == 1 ? p : ad::gather_rows(p, tiled(p.rows(), batch));
}

bool FixedPrompt::has_textual() const {
    return std::any_of(textual_.begin(), textual_.end(), [](const Var& v) { return v.defined() && v.rows() > 0; });
}

// ---------------------------------------------------------------- forward

Var ImageEncoding::content(int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    const Index prompt = seq_len.at(l) - content_tokens;
    if (prompt == 0) return hooks[l];
    return ad::gather_rows(hooks[l], content_rows(batch, content_tokens, prompt));
}

Var ImageEncoding::pooled(int layer, Pooling mode) const {
    const auto l = static_cast<std::size_t>(layer);
    if (mode == Pooling::ClsOnly) return ad::gather_rows(hooks.at(l), strided(batch, seq_len[l], 0));
    return ad::segment_mean_rows(content(layer), content_tokens);
}

ImageEncoding encode_images(const ModelSpec& spec, const Weights& w, const Var& pixels, PromptSource* prompts) {
    if (pixels.cols() != spec.pixels()) throw ad::ShapeError("encode_images pixels", pixels.shape(), ad::Shape{1, spec.pixels()});
    const Index batch = pixels.rows();
    const Index side = spec.image_size;
    const Index ps = spec.patch;
    const Index grid = side / ps;
    const Index patches = spec.patch_tokens();
    const Index dim = spec.dim;

    std::vector<std::ptrdiff_t> idx;
    idx.reserve(static_cast<std::size_t>(batch * patches * ps * ps));
    for (Index b = 0; b < batch; ++b)
        for (Index py = 0; py < grid; ++py)
            for (Index px = 0; px < grid; ++px)
                for (Index iy = 0; iy < ps; ++iy)
                    for (Index ix = 0; ix < ps; ++ix)
                        idx.push_back(b * side * side + (py * ps + iy) * side + px * ps + ix);
    Var patch_rows = ad::gather(pixels, batch * patches, ps * ps, std::move(idx));
    Var tokens = ad::add_row(ad::matmul(patch_rows, w.patch_w), w.patch_b);

    std::vector<Index> order;
    order.reserve(static_cast<std::size_t>(batch * (patches + 1)));
    for (Index b = 0; b < batch; ++b) {
        order.push_back(0);
        for (Index p = 0; p < patches; ++p) order.push_back(1 + b * patches + p);
    }
    const Index content = patches + 1;
    Var x = ad::gather_rows(ad::concat_rows({w.cls, tokens}), std::move(order));
    x = ad::add(x, ad::gather_rows(w.image_pos, tiled(content, batch)));

    ImageEncoding enc;
    enc.batch = batch;
    enc.content_tokens = content;
    Index prompt = 0;
    for (int l = 0; l < spec.image_layers; ++l) {
        if (prompts) {
            Var body = prompt == 0 ? x : ad::gather_rows(x, content_rows(batch, content, prompt));
            Var p = prompts->visual(l, body, batch);
            if (p.defined()) {
                check_prompt(p, batch, dim, "visual");
                prompt = p.rows() / batch;
                x = ad::gather_rows(ad::concat_rows({body, p}), interleave(batch, content, prompt, 1));
            }
        }
        const Index seq = content + prompt;
        x = transformer_block(w.image_blocks[static_cast<std::size_t>(l)], x, seq, spec.heads);
        enc.hooks.push_back(x);
        enc.seq_len.push_back(seq);
    }
    Var cls = ad::gather_rows(x, strided(batch, enc.seq_len.back(), 0));
    Var proj = ad::matmul(ad::layer_norm(cls, w.image_ln_g, w.image_ln_b), w.image_proj);
    enc.embeddings = ad::l2_normalize_rows(proj);
    return enc;
}

Var encode_texts(const ModelSpec& spec, const Weights& w, const std::vector<int>& class_ids, Index batch,
                 PromptSource* prompts) {
    const bool textual = prompts && prompts->has_textual();
    if (!textual && batch != 1) throw std::invalid_argument("encode_texts: batch > 1 requires textual prompts");
    if (class_ids.empty()) throw std::invalid_argument("encode_texts: no classes");
    const Index k = static_cast<Index>(class_ids.size());
    const Index seqs = batch * k;
    const Index content = spec.text_content_tokens();
    for (int c : class_ids) {
        if (c < 0 || c >= spec.vocab) throw std::out_of_range("encode_text: class id " + std::to_string(c) + " out of range");
    }

    std::vector<Index> ids;
    ids.reserve(static_cast<std::size_t>(seqs * content));
    for (Index n = 0; n < seqs; ++n) {
        for (Index t = 0; t < spec.template_tokens; ++t) ids.push_back(t);
        ids.push_back(spec.template_tokens + class_ids[static_cast<std::size_t>(n % k)]);
    }
    Var x = ad::gather_rows(ad::concat_rows({w.template_tokens, w.class_tokens}), std::move(ids));
    x = ad::add(x, ad::gather_rows(w.text_pos, tiled(content, seqs)));

    Index prompt = 0;
    for (int l = 0; l < spec.text_layers; ++l) {
        if (textual) {
            Var p = prompts->textual(l, batch);
            if (p.defined()) {
                check_prompt(p, batch, spec.dim, "textual");
                Var body = prompt == 0 ? x : ad::gather_rows(x, content_rows(seqs, content, prompt));
                prompt = p.rows() / batch;
                x = ad::gather_rows(ad::concat_rows({body, p}), interleave(seqs, content, prompt, k));
            }
        }
        x = transformer_block(w.text_blocks[static_cast<std::size_t>(l)], x, content + prompt, spec.heads);
    }
    Var eos = ad::gather_rows(x, strided(seqs, content + prompt, content - 1));
    Var proj = ad::matmul(ad::layer_norm(eos, w.text_ln_g, w.text_ln_b), w.text_proj);
    return ad::l2_normalize_rows(proj);
}

Var class_logits(const Var& image_emb, const Var& text_emb, Index num_classes, double temperature) {
    const Index batch = image_emb.rows();
    if (text_emb.rows() == num_classes) return ad::scale(ad::matmul_nt(image_emb, text_emb), temperature);
    if (text_emb.rows() != batch * num_classes || text_emb.cols() != image_emb.cols()) {
        throw ad::ShapeError("class_logits", image_emb.shape(), text_emb.shape());
    }
    std::vector<Index> rep;
    rep.reserve(static_cast<std::size_t>(batch * num_classes));
    for (Index b = 0; b < batch; ++b)
        for (Index c = 0; c < num_classes; ++c) rep.push_back(b);
    Var dots = ad::sum(ad::mul(ad::gather_rows(image_emb, std::move(rep)), text_emb), 1);
    return ad::scale(ad::reshape(dots, batch, num_classes), temperature);
}

Matrix classify(const Matrix& image_embedding, const Matrix& text_embeddings, double temperature) {
    if (image_embedding.cols() != text_embeddings.cols()) {
        throw ad::ShapeError("classify", ad::shape_of(image_embedding), ad::shape_of(text_embeddings));
    }
    Matrix z = (image_embedding * text_embeddings.transpose()) * temperature;
    Matrix p = (z.array() - z.maxCoeff()).exp();
    return p / p.sum();
}

// ---------------------------------------------------------------- model

TrainingShortfall::TrainingShortfall(double acc, double tgt)
    : std::runtime_error("backbone training reached held-out accuracy " + std::to_string(acc) + " < target " +
                         std::to_string(tgt) + "; adjust the seed or architecture"),
      accuracy(acc),
      target(tgt) {}

ToyDualEncoder::ToyDualEncoder(ModelSpec spec, ParameterStore params, std::uint64_t seed)
    : spec_(spec), params_(std::move(params)), seed_(seed) {
    spec_.validate();
    frozen_ = Weights::bind(spec_, params_, false);
}

ToyDualEncoder ToyDualEncoder::initialize(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    auto normal = [&rng](Index r, Index c, double sd) {
        std::normal_distribution<double> n(0.0, sd);
        Matrix m(r, c);
        for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
        return m;
    };
    const int d = spec.dim;
    const Index pp = static_cast<Index>(spec.patch) * spec.patch;
    ParameterStore s;
    s.add("image.patch_w", normal(pp, d, 1.0 / std::sqrt(static_cast<double>(pp))));
    s.add("image.patch_b", Matrix::Zero(1, d));
    s.add("image.cls", normal(1, d, 0.5));
    s.add("image.pos", normal(spec.image_content_tokens(), d, 0.2));
    for (int l = 0; l < spec.image_layers; ++l) add_block(s, "image", l, d, spec.mlp_hidden, spec.image_layers, rng);
    s.add("image.ln_g", Matrix::Ones(1, d));
    s.add("image.ln_b", Matrix::Zero(1, d));
    s.add("image.proj", normal(d, d, 1.0 / std::sqrt(static_cast<double>(d))));
    s.add("text.template", normal(spec.template_tokens, d, 0.5));
    s.add("text.class_tokens", normal(spec.vocab, d, 1.0));
    s.add("text.pos", normal(spec.text_content_tokens(), d, 0.2));
    for (int l = 0; l < spec.text_layers; ++l) add_block(s, "text", l, d, spec.mlp_hidden, spec.text_layers, rng);
    s.add("text.ln_g", Matrix::Ones(1, d));
    s.add("text.ln_b", Matrix::Zero(1, d));
    s.add("text.proj", normal(d, d, 1.0 / std::sqrt(static_cast<double>(d))));
    return ToyDualEncoder(spec, std::move(s), seed);
}

io::Checkpoint ToyDualEncoder::to_checkpoint() const {
    io::Checkpoint ck;
    ck.kind = "backbone";
    ck.seed = seed_;
    ck.meta["spec"] = spec_.to_json();
    for (std::size_t i = 0; i < params_.size(); ++i) ck.add(params_.names()[i], params_.values()[i]);
    return ck;
}

ToyDualEncoder ToyDualEncoder::from_checkpoint(const io::Checkpoint& ck) {
    if (ck.kind != "backbone") throw std::runtime_error("checkpoint kind '" + ck.kind + "' is not a backbone");
    ParameterStore s;
    for (const auto& [name, m] : ck.tensors) s.add(name, m);
    return ToyDualEncoder(ModelSpec::from_json(ck.meta.at("spec")), std::move(s), ck.seed);
}

ToyDualEncoder::SingleImage ToyDualEncoder::encode_image(const Image& image, const Matrix& visual_prompt) const {
    if (image.rows() != spec_.image_size || image.cols() != spec_.image_size) {
        throw ad::ShapeError("encode_image", ad::shape_of(image), ad::Shape{spec_.image_size, spec_.image_size});
    }
    if (visual_prompt.size() != 0 && visual_prompt.cols() != spec_.dim) {
        throw ad::ShapeError("encode_image prompt width", ad::shape_of(visual_prompt), ad::Shape{visual_prompt.rows(), spec_.dim});
    }
    ad::NoGradGuard guard;
    FixedPrompt prompt(visual_prompt.size() ? std::vector<Var>{ad::constant(visual_prompt)} : std::vector<Var>{}, {});
    ImageEncoding enc = encode_images(ad::constant(stack_images({image})), &prompt);
    SingleImage out;
    out.embedding = enc.embeddings.value();
    for (const auto& h : enc.hooks) out.hooks.push_back(h.value());
    return out;
}

Matrix ToyDualEncoder::encode_text(int class_id, const Matrix& textual_prompt) const {
    if (textual_prompt.size() != 0 && textual_prompt.cols() != spec_.dim) {
        throw ad::ShapeError("encode_text prompt width", ad::shape_of(textual_prompt), ad::Shape{textual_prompt.rows(), spec_.dim});
    }
    ad::NoGradGuard guard;
    FixedPrompt prompt({}, textual_prompt.size() ? std::vector<Var>{ad::constant(textual_prompt)} : std::vector<Var>{});
    return encode_texts({class_id}, 1, &prompt).value();
}

ImageEncoding ToyDualEncoder::encode_images(const Var& pixels, PromptSource* prompts) const {
    return vlm::encode_images(spec_, frozen_, pixels, prompts);
}

Var ToyDualEncoder::encode_texts(const std::vector<int>& class_ids, Index batch, PromptSource* prompts) const {
    return vlm::encode_texts(spec_, frozen_, class_ids, batch, prompts);
}

Matrix ToyDualEncoder::class_embeddings(const std::vector<int>& class_ids) const {
    ad::NoGradGuard guard;
    return encode_texts(class_ids, 1, nullptr).value();
}

std::vector<int> ToyDualEncoder::predict(const std::vector<Image>& images, const std::vector<int>& class_ids) const {
    ad::NoGradGuard guard;
    std::vector<int> out;
    const Matrix text = class_embeddings(class_ids);
    const std::size_t chunk = 128;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const std::size_t end = std::min(images.size(), start + chunk);
        std::vector<Image> part(images.begin() + static_cast<std::ptrdiff_t>(start),
                                images.begin() + static_cast<std::ptrdiff_t>(end));
        ImageEncoding enc = encode_images(ad::constant(stack_images(part)));
        Matrix scores = enc.embeddings.value() * text.transpose();
        for (Index r = 0; r < scores.rows(); ++r) {
            Index arg = 0;
            scores.row(r).maxCoeff(&arg);
            out.push_back(static_cast<int>(arg));
        }
    }
    return out;
}

double zero_shot_accuracy(const ToyDualEncoder& model, const Dataset& data) {
    if (data.size() == 0) return 0.0;
    const auto pred = model.predict(data.images, data.classes);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) hits += pred[i] == data.task_label(i) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

ToyDualEncoder train_backbone(const Dataset& train, const Dataset& heldout, const ModelSpec& spec, std::uint64_t seed,
                              const TrainConfig& cfg, TrainReport* report) {
    ToyDualEncoder init = ToyDualEncoder::initialize(spec, seed);
    ParameterStore store = init.parameters();
    std::vector<ad::Shape> shapes;
    for (const auto& v : store.values()) shapes.push_back(ad::shape_of(v));
    ad::AdamW opt({.lr = cfg.lr}, shapes);
    std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t steps_per_epoch = (train.size() + static_cast<std::size_t>(cfg.batch) - 1) / static_cast<std::size_t>(cfg.batch);
    const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
    long step = 0;
    TrainReport rep;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            std::vector<Image> imgs;
            std::vector<int> labels;
            for (std::size_t i = start; i < end; ++i) {
                Image img = train.images[order[i]];
                if (cfg.augment && unit(rng) < 0.5) {
                    img = resized_crop(img, sample_crop(rng, spec.image_size, 0.5, 1.0));
                    if (unit(rng) < 0.5) img = hflip(img);
                }
                imgs.push_back(std::move(img));
                labels.push_back(train.task_label(order[i]));
            }
            Weights w = Weights::bind(spec, store, true);
            ImageEncoding enc = encode_images(spec, w, ad::constant(stack_images(imgs)), nullptr);
            Var text = encode_texts(spec, w, train.classes, 1, nullptr);
            Var loss = ad::cross_entropy(class_logits(enc.embeddings, text, static_cast<Index>(train.classes.size()), spec.temperature), labels);
            ad::Gradients g = ad::backward(loss);
            std::vector<Matrix*> params;
            std::vector<Matrix> grads;
            for (std::size_t i = 0; i < store.size(); ++i) {
                params.push_back(&store.mutable_value(i));
                grads.push_back(g.contains(w.all[i]) ? g.at(w.all[i]) : Matrix());
            }
            // Cosine decay to 5% of the base rate.
            const double progress = static_cast<double>(step) / total_steps;
            opt.set_lr(cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(3.141592653589793 * progress))));
            opt.step(params, grads);
            ++step;
            epoch_loss += loss.item() * static_cast<double>(end - start);
        }
        rep.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
        if (cfg.verbose) std::cerr << "epoch " << epoch << " loss " << rep.epoch_loss.back() << "\n";
    }

    ToyDualEncoder model(spec, std::move(store), seed);
    rep.heldout_accuracy = zero_shot_accuracy(model, heldout);
    if (report) *report = rep;
    if (rep.heldout_accuracy < cfg.target_accuracy) throw TrainingShortfall(rep.heldout_accuracy, cfg.target_accuracy);
    return model;
}

}  // namespace tame::vlm
