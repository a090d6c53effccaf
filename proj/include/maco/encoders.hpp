#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "maco/optim.hpp"
#include "maco/patching.hpp"
#include "maco/tensor.hpp"

namespace maco {

// ---------------------------------------------------------------------------
// Tokenizer

/// Closed word-level vocabulary. Ids are dense from 0; specials come first.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kUnk = 2;

    Vocabulary();
    explicit Vocabulary(const std::vector<std::string>& words);

    /// Every word the synthetic report grammar and the zero-shot prompts can produce.
    static Vocabulary synthetic();

    int id(const std::string& token) const;  // kUnk for misses
    const std::string& token(int id) const;
    std::size_t size() const { return tokens_.size(); }
    bool contains(const std::string& token) const { return ids_.count(token) != 0; }

private:
    void add(const std::string& token);
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

/// Lower-cased words and single punctuation characters, in order.
std::vector<std::string> split_words(const std::string& text);

/// [cls] + vocabulary ids, truncated or padded with [pad] to exactly max_len.
std::vector<int> tokenize(const std::string& report, const Vocabulary& vocab, std::size_t max_len);

// ---------------------------------------------------------------------------
// Model

enum class PositionalEmbedding { kSinCos, kLearned };

struct ImageEncoderConfig {
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t patch_size = 4;    // on the down-sampled input
    std::size_t max_patches = 64;  // N
};

struct TextEncoderConfig {
    std::size_t width = 64;
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_len = 32;
};

struct ModelConfig {
    std::size_t image_size = 64;  // full-resolution side
    std::size_t ratio = 2;        // down-sampling factor of the encoder input
    std::size_t patch_size = 4;   // LR patch side; HR target patches are patch_size*ratio
    std::size_t width = 64;       // shared by both encoders
    std::size_t depth = 2;
    std::size_t heads = 4;
    std::size_t decoder_depth = 1;
    std::size_t decoder_width = 64;
    std::size_t mlp_ratio = 4;
    std::size_t text_depth = 2;
    std::size_t max_text_len = 32;
    std::size_t embed_dim = 64;  // joint space
    bool projection_bias = true;
    PositionalEmbedding positional = PositionalEmbedding::kSinCos;
    double tau_init = 0.03;
    double init_std = 0.02;  // learned positional tables and the mask token; linears are Xavier-uniform

    std::size_t lr_side() const { return image_size / ratio; }
    std::size_t grid_side() const { return lr_side() / patch_size; }
    std::size_t n_patches() const { return grid_side() * grid_side(); }
    std::size_t lr_patch_dim() const { return patch_size * patch_size; }
    std::size_t hr_patch_size() const { return patch_size * ratio; }
    std::size_t hr_patch_dim() const { return hr_patch_size() * hr_patch_size(); }

    ImageEncoderConfig image_encoder() const { return {width, depth, heads, patch_size, n_patches()}; }
    TextEncoderConfig text_encoder(std::size_t vocab_size) const {
        return {width, text_depth, heads, vocab_size, max_text_len};
    }

    /// Throws ParameterError naming the offending field.
    void validate() const;
};

inline constexpr double kLogTauMin = -9.210340371976182;  // log(1e-4)
inline constexpr double kLogTauMax = 2.302585092994046;   // log(10)

/// All learnable state plus the fixed positional tables.
class Model {
public:
    Model(ModelConfig cfg, Vocabulary vocab, std::uint64_t seed);
    Model(ModelConfig cfg, Vocabulary vocab, ParameterSet params);

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }

    double tau() const;
    void clamp_tau();
    const Tensor& importance_weights() const { return params_.get("head.importance").value; }

    const Tensor& image_positions() const { return image_pos_; }
    const Tensor& text_positions() const { return text_pos_; }
    const Tensor& decoder_positions() const { return decoder_pos_; }

private:
    void init_tables();
    ModelConfig cfg_;
    Vocabulary vocab_;
    ParameterSet params_;
    Tensor image_pos_;  // [N x C] sin-cos table; zeros when learned
    Tensor text_pos_;   // [max_len x C]
    Tensor decoder_pos_;
};

/// Model parameters recorded on a tape, aligned with Model::params().
class Bound {
public:
    Bound(Tape& tape, const Model& model, bool trainable);
    /// Caller-supplied nodes, one per parameter in order.
    Bound(Tape& tape, const Model& model, std::vector<Var> vars);

    Var operator[](const std::string& name) const;
    Var at(std::size_t index) const { return vars_[index]; }
    const Model& model() const { return *model_; }
    Tape& tape() const { return *tape_; }
    /// Gradients after backward, aligned with Model::params(); empty entries mean zero.
    Gradients gradients() const;

private:
    Tape* tape_;
    const Model* model_;
    std::vector<Var> vars_;
};

/// Sampled LR patches of a batch: rows grouped by instance, every instance with the same count.
struct ImageTokens {
    Tensor patches;                   // [batch*n_sampled x lr_patch_dim]
    std::vector<std::size_t> positions;  // grid index per row
    std::size_t batch = 0;
    std::size_t n_sampled = 0;
};

struct TextTokens {
    std::vector<int> ids;  // [batch*len]
    std::size_t batch = 0;
    std::size_t len = 0;
};

/// v_enc: one C-vector per sampled patch, [batch*n_sampled x C].
Var encode_image(const Bound& m, const ImageTokens& tokens);
/// v'_recon: HR patch predictions for all N positions, [batch*N x hr_patch_dim].
Var decode_image(const Bound& m, Var v_enc, const std::vector<MaskPlan>& plans);
/// t_enc: [batch*len x C]; [pad] keys are excluded from attention.
Var encode_text(const Bound& m, const TextTokens& tokens);

struct Projected {
    Var v;  // [batch x embed_dim], unit rows
    Var t;  // [batch x embed_dim], unit rows
};

Var pool_image(Var v_enc, std::size_t n_tokens);
Var cls_rows(Var t_enc, std::size_t batch, std::size_t len);
Var project_image(const Bound& m, Var pooled);
Var project_text(const Bound& m, Var cls);
Projected pool_and_project(const Bound& m, Var v_enc, std::size_t n_tokens, Var t_enc, std::size_t batch,
                           std::size_t len);

Tensor sincos_table_1d(std::size_t length, std::size_t width);
Tensor sincos_table_2d(std::size_t side, std::size_t width);

}  // namespace maco
