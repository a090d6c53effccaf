#include "maco/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "maco/errors.hpp"
#include "maco/ops.hpp"
#include "maco/rng.hpp"

namespace maco {

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    add("[pad]");
    add("[cls]");
    add("[unk]");
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
    for (const auto& w : words) add(w);
}

void Vocabulary::add(const std::string& token) {
    if (ids_.count(token)) return;
    ids_[token] = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
}

Vocabulary Vocabulary::synthetic() {
    return Vocabulary({"there", "is", "a", "no", "in", "the", "region", ".", "upper", "middle", "lower", "left",
                       "center", "right", "disc", "square", "ring", "cross"});
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (std::ispunct(ch)) {
            flush();
            out.emplace_back(1, static_cast<char>(ch));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

std::vector<int> tokenize(const std::string& report, const Vocabulary& vocab, std::size_t max_len) {
    if (max_len < 1) throw ParameterError("tokenize: max_len must be at least 1");
    const auto words = split_words(report);
    if (words.empty()) throw InputError("tokenize: empty report text");
    std::vector<int> ids;
    ids.reserve(max_len);
    ids.push_back(Vocabulary::kCls);
    for (const auto& w : words) {
        if (ids.size() == max_len) break;
        ids.push_back(vocab.id(w));
    }
    ids.resize(max_len, Vocabulary::kPad);
    return ids;
}

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ParameterError("model." + field + ": " + why);
    };
    if (image_size == 0) fail("image_size", "must be positive");
    if (ratio == 0 || image_size % ratio != 0) fail("ratio", "must divide image_size");
    if (patch_size == 0 || lr_side() % patch_size != 0) fail("patch_size", "must divide image_size / ratio");
    if (width == 0 || heads == 0 || width % heads != 0) fail("width", "must be a positive multiple of model.heads = " + std::to_string(heads));
    if (decoder_width == 0 || decoder_width % heads != 0) fail("decoder_width", "must be a positive multiple of model.heads = " + std::to_string(heads));
    if (depth == 0) fail("depth", "must be positive");
    if (text_depth == 0) fail("text_depth", "must be positive");
    if (mlp_ratio == 0) fail("mlp_ratio", "must be positive");
    if (max_text_len < 2) fail("max_text_len", "must leave room for [cls] and one word");
    if (embed_dim == 0) fail("embed_dim", "must be positive");
    if (positional == PositionalEmbedding::kSinCos && (width % 4 != 0 || decoder_width % 4 != 0))
        fail("width", "sin-cos positional tables need a multiple of 4");
    if (!(tau_init > 0.0) || std::log(tau_init) < kLogTauMin || std::log(tau_init) > kLogTauMax)
        fail("tau_init", "must lie in [1e-4, 10]");
    if (!(init_std > 0.0)) fail("init_std", "must be positive");
}

Tensor sincos_table_1d(std::size_t length, std::size_t width) {
    Tensor t({length, width});
    const std::size_t half = width / 2;
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < half; ++i) {
            const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half));
            t.at(pos, i) = std::sin(static_cast<double>(pos) * omega);
            t.at(pos, half + i) = std::cos(static_cast<double>(pos) * omega);
        }
    return t;
}

Tensor sincos_table_2d(std::size_t side, std::size_t width) {
    // First half of the channels encodes the row, second half the column.
    const std::size_t half = width / 2;
    const Tensor axis = sincos_table_1d(side, half);
    Tensor t({side * side, width});
    for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c)
            for (std::size_t i = 0; i < half; ++i) {
                t.at(r * side + c, i) = axis.at(r, i);
                t.at(r * side + c, half + i) = axis.at(c, i);
            }
    return t;
}

// ---------------------------------------------------------------------------
// Model

namespace {

Tensor trunc_normal(Rng& rng, Shape shape, double sigma) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.truncated_normal(sigma);
    return t;
}

// Xavier-uniform weights, zero bias.
void add_linear(ParameterSet& ps, Rng& rng, const std::string& prefix, std::size_t in, std::size_t out,
                bool bias = true) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Tensor w({in, out});
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
    ps.add(prefix + ".weight", std::move(w));
    if (bias) ps.add(prefix + ".bias", Tensor({out}), false);
}

void add_norm(ParameterSet& ps, const std::string& prefix, std::size_t width) {
    ps.add(prefix + ".gamma", Tensor({width}, 1.0), false);
    ps.add(prefix + ".beta", Tensor({width}), false);
}

void add_block(ParameterSet& ps, Rng& rng, const std::string& prefix, std::size_t width, std::size_t mlp_ratio) {
    add_norm(ps, prefix + ".ln1", width);
    for (const char* name : {".attn.q", ".attn.k", ".attn.v", ".attn.out"})
        add_linear(ps, rng, prefix + name, width, width);
    add_norm(ps, prefix + ".ln2", width);
    add_linear(ps, rng, prefix + ".mlp.fc1", width, width * mlp_ratio);
    add_linear(ps, rng, prefix + ".mlp.fc2", width * mlp_ratio, width);
}

ParameterSet init_params(const ModelConfig& cfg, std::size_t vocab_size, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const double s = cfg.init_std;
    const bool learned = cfg.positional == PositionalEmbedding::kLearned;
    ParameterSet ps;
    add_linear(ps, rng, "image.patch_embed", cfg.lr_patch_dim(), cfg.width);
    if (learned) ps.add("image.pos", trunc_normal(rng, {cfg.n_patches(), cfg.width}, s));
    for (std::size_t i = 0; i < cfg.depth; ++i)
        add_block(ps, rng, "image.blocks." + std::to_string(i), cfg.width, cfg.mlp_ratio);
    add_norm(ps, "image.norm", cfg.width);

    add_linear(ps, rng, "decoder.embed", cfg.width, cfg.decoder_width);
    ps.add("decoder.mask_token", trunc_normal(rng, {cfg.decoder_width}, s));
    if (learned) ps.add("decoder.pos", trunc_normal(rng, {cfg.n_patches(), cfg.decoder_width}, s));
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
        add_block(ps, rng, "decoder.blocks." + std::to_string(i), cfg.decoder_width, cfg.mlp_ratio);
    add_norm(ps, "decoder.norm", cfg.decoder_width);
    add_linear(ps, rng, "decoder.pred", cfg.decoder_width, cfg.hr_patch_dim());

    // Unit-variance token embeddings keep word identity on the scale of the positional table.
    Tensor tokens({vocab_size, cfg.width});
    for (auto& v : tokens.values()) v = rng.normal();
    ps.add("text.token_embed", std::move(tokens));
    if (learned) ps.add("text.pos", trunc_normal(rng, {cfg.max_text_len, cfg.width}, s));
    for (std::size_t i = 0; i < cfg.text_depth; ++i)
        add_block(ps, rng, "text.blocks." + std::to_string(i), cfg.width, cfg.mlp_ratio);
    add_norm(ps, "text.norm", cfg.width);

    add_linear(ps, rng, "proj.image", cfg.width, cfg.embed_dim, cfg.projection_bias);
    add_linear(ps, rng, "proj.text", cfg.width, cfg.embed_dim, cfg.projection_bias);

    // Equal initial weights: the untrained weight map is uniform.
    ps.add("head.importance", Tensor({cfg.n_patches()}), false);
    ps.add("log_tau", Tensor::scalar(std::log(cfg.tau_init)), false);
    return ps;
}

}  // namespace

Model::Model(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), params_(init_params(cfg_, vocab_.size(), seed)) {
    init_tables();
}

Model::Model(ModelConfig cfg, Vocabulary vocab, ParameterSet params)
    : cfg_(std::move(cfg)), vocab_(std::move(vocab)), params_(std::move(params)) {
    cfg_.validate();
    const ParameterSet reference = init_params(cfg_, vocab_.size(), 0);
    if (reference.size() != params_.size())
        throw StateError("parameter set has " + std::to_string(params_.size()) + " entries, model expects " +
                         std::to_string(reference.size()));
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const auto& want = reference.items()[i];
        const auto& got = params_.items()[i];
        if (want.name != got.name || want.value.shape() != got.value.shape())
            throw StateError("parameter " + got.name + " " + shape_str(got.value.shape()) + " does not match " +
                             want.name + " " + shape_str(want.value.shape()));
        params_.items()[i].decay = want.decay;
    }
    init_tables();
}

void Model::init_tables() {
    if (cfg_.positional == PositionalEmbedding::kSinCos) {
        image_pos_ = sincos_table_2d(cfg_.grid_side(), cfg_.width);
        text_pos_ = sincos_table_1d(cfg_.max_text_len, cfg_.width);
        decoder_pos_ = sincos_table_2d(cfg_.grid_side(), cfg_.decoder_width);
    } else {
        decoder_pos_ = Tensor({cfg_.n_patches(), cfg_.decoder_width});
        image_pos_ = Tensor({cfg_.n_patches(), cfg_.width});
        text_pos_ = Tensor({cfg_.max_text_len, cfg_.width});
    }
}

double Model::tau() const { return std::exp(params_.get("log_tau").value[0]); }

void Model::clamp_tau() {
    auto& v = params_.get("log_tau").value[0];
    v = std::clamp(v, kLogTauMin, kLogTauMax);
}

Bound::Bound(Tape& tape, const Model& model, bool trainable) : tape_(&tape), model_(&model) {
    vars_.reserve(model.params().size());
    for (const auto& p : model.params().items())
        vars_.push_back(trainable ? tape.parameter(p.value) : tape.constant(p.value));
}

Bound::Bound(Tape& tape, const Model& model, std::vector<Var> vars)
    : tape_(&tape), model_(&model), vars_(std::move(vars)) {
    if (vars_.size() != model.params().size())
        throw ShapeError("Bound: " + std::to_string(vars_.size()) + " nodes for " +
                         std::to_string(model.params().size()) + " parameters");
    for (std::size_t i = 0; i < vars_.size(); ++i)
        if (vars_[i].shape() != model.params().items()[i].value.shape())
            throw ShapeError("Bound: node for " + model.params().items()[i].name + " has shape " +
                             shape_str(vars_[i].shape()));
}

Var Bound::operator[](const std::string& name) const { return vars_[model_->params().index_of(name)]; }

Gradients Bound::gradients() const {
    Gradients g;
    g.reserve(vars_.size());
    for (const auto& v : vars_) g.push_back(tape_->grad(v));
    return g;
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

using namespace ops;

Var linear(const Bound& m, const std::string& prefix, Var x, bool bias = true) {
    Var y = matmul(x, m[prefix + ".weight"]);
    return bias ? add_row_vector(y, m[prefix + ".bias"]) : y;
}

Var norm(const Bound& m, const std::string& prefix, Var x) {
    return layer_norm(x, m[prefix + ".gamma"], m[prefix + ".beta"]);
}

Var block(const Bound& m, const std::string& prefix, Var x, std::size_t batch, std::size_t seq, std::size_t heads,
          std::span<const std::uint8_t> key_mask = {}) {
    Var h = norm(m, prefix + ".ln1", x);
    Var q = linear(m, prefix + ".attn.q", h);
    Var k = linear(m, prefix + ".attn.k", h);
    Var v = linear(m, prefix + ".attn.v", h);
    Var a = attention(q, k, v, batch, seq, heads, key_mask);
    x = add(x, linear(m, prefix + ".attn.out", a));
    h = norm(m, prefix + ".ln2", x);
    h = linear(m, prefix + ".mlp.fc2", gelu(linear(m, prefix + ".mlp.fc1", h)));
    return add(x, h);
}

// Positional rows for the given indices, from the fixed table or a learned parameter.
Var positions(const Bound& m, const std::string& learned_name, const Tensor& table,
              std::span<const std::size_t> index) {
    if (m.model().config().positional == PositionalEmbedding::kLearned) return gather_rows(m[learned_name], index);
    const std::size_t w = table.cols();
    Tensor out({index.size(), w});
    for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = table.at(index[r], j);
    return m.tape().constant(std::move(out));
}

}  // namespace

Var encode_image(const Bound& m, const ImageTokens& tokens) {
    const auto& cfg = m.model().config();
    if (tokens.patches.cols() != cfg.lr_patch_dim())
        throw ShapeError("encode_image: patch width " + std::to_string(tokens.patches.cols()) + ", model expects " +
                         std::to_string(cfg.lr_patch_dim()));
    if (tokens.patches.rows() != tokens.batch * tokens.n_sampled || tokens.positions.size() != tokens.patches.rows())
        throw ShapeError("encode_image: " + shape_str(tokens.patches.shape()) + " patches with " +
                         std::to_string(tokens.positions.size()) + " positions for " + std::to_string(tokens.batch) +
                         "x" + std::to_string(tokens.n_sampled) + " tokens");
    for (auto p : tokens.positions)
        if (p >= cfg.n_patches()) throw ShapeError("encode_image: position " + std::to_string(p) + " out of range");
    Tape& tape = m.tape();
    Var x = linear(m, "image.patch_embed", tape.constant(tokens.patches));
    x = add(x, positions(m, "image.pos", m.model().image_positions(), tokens.positions));
    for (std::size_t i = 0; i < cfg.depth; ++i)
        x = block(m, "image.blocks." + std::to_string(i), x, tokens.batch, tokens.n_sampled, cfg.heads);
    return norm(m, "image.norm", x);
}

Var decode_image(const Bound& m, Var v_enc, const std::vector<MaskPlan>& plans) {
    const auto& cfg = m.model().config();
    const std::size_t n = cfg.n_patches(), batch = plans.size();
    if (batch == 0) throw ShapeError("decode_image: empty batch");
    const std::size_t ns = plans[0].n_sampled();
    std::vector<std::size_t> dest;
    dest.reserve(batch * ns);
    for (std::size_t b = 0; b < batch; ++b) {
        if (plans[b].n_total != n || plans[b].n_sampled() != ns)
            throw ShapeError("decode_image: plan " + std::to_string(b) + " covers " +
                             std::to_string(plans[b].n_total) + " patches with " +
                             std::to_string(plans[b].n_sampled()) + " sampled; expected " + std::to_string(n) +
                             " with " + std::to_string(ns));
        for (auto s : plans[b].sampled) dest.push_back(b * n + s);
    }
    if (v_enc.rows() != batch * ns)
        throw ShapeError("decode_image: " + shape_str(v_enc.shape()) + " encoder rows for " + std::to_string(batch) +
                         " plans of " + std::to_string(ns));
    Var x = linear(m, "decoder.embed", v_enc);
    x = scatter_rows(x, dest, batch * n, m["decoder.mask_token"]);
    std::vector<std::size_t> full(batch * n);
    for (std::size_t i = 0; i < full.size(); ++i) full[i] = i % n;
    x = add(x, positions(m, "decoder.pos", m.model().decoder_positions(), full));
    for (std::size_t i = 0; i < cfg.decoder_depth; ++i)
        x = block(m, "decoder.blocks." + std::to_string(i), x, batch, n, cfg.heads);
    x = norm(m, "decoder.norm", x);
    return linear(m, "decoder.pred", x);
}

Var encode_text(const Bound& m, const TextTokens& tokens) {
    const auto& cfg = m.model().config();
    const std::size_t vocab = m.model().vocab().size();
    if (tokens.ids.size() != tokens.batch * tokens.len)
        throw ShapeError("encode_text: " + std::to_string(tokens.ids.size()) + " ids for " +
                         std::to_string(tokens.batch) + "x" + std::to_string(tokens.len));
    if (tokens.len > cfg.max_text_len)
        throw ShapeError("encode_text: sequence length " + std::to_string(tokens.len) + " exceeds " +
                         std::to_string(cfg.max_text_len));
    std::vector<std::size_t> rows(tokens.ids.size()), pos(tokens.ids.size());
    std::vector<std::uint8_t> mask(tokens.ids.size());
    for (std::size_t i = 0; i < tokens.ids.size(); ++i) {
        const int id = tokens.ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw InputError("encode_text: token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(vocab));
        rows[i] = static_cast<std::size_t>(id);
        pos[i] = i % tokens.len;
        mask[i] = id != Vocabulary::kPad;
    }
    Var x = gather_rows(m["text.token_embed"], rows);
    x = add(x, positions(m, "text.pos", m.model().text_positions(), pos));
    for (std::size_t i = 0; i < cfg.text_depth; ++i)
        x = block(m, "text.blocks." + std::to_string(i), x, tokens.batch, tokens.len, cfg.heads, mask);
    return norm(m, "text.norm", x);
}

Var pool_image(Var v_enc, std::size_t n_tokens) { return segment_mean(v_enc, n_tokens); }

Var cls_rows(Var t_enc, std::size_t batch, std::size_t len) {
    std::vector<std::size_t> rows(batch);
    for (std::size_t b = 0; b < batch; ++b) rows[b] = b * len;
    return gather_rows(t_enc, rows);
}

Var project_image(const Bound& m, Var pooled) {
    return l2_normalize_rows(linear(m, "proj.image", pooled, m.model().config().projection_bias));
}

Var project_text(const Bound& m, Var cls) {
    return l2_normalize_rows(linear(m, "proj.text", cls, m.model().config().projection_bias));
}

Projected pool_and_project(const Bound& m, Var v_enc, std::size_t n_tokens, Var t_enc, std::size_t batch,
                           std::size_t len) {
    const std::size_t c = m.model().config().width;
    if (v_enc.cols() != c || t_enc.cols() != c)
        throw ShapeError("pool_and_project: encoder widths " + shape_str(v_enc.shape()) + " / " +
                         shape_str(t_enc.shape()) + " vs projection input " + std::to_string(c));
    return {project_image(m, pool_image(v_enc, n_tokens)), project_text(m, cls_rows(t_enc, batch, len))};
}

}  // namespace maco
