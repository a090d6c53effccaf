#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "maco/datagen.hpp"
#include "maco/encoders.hpp"
#include "maco/tensor.hpp"

namespace maco {

inline constexpr double kDefaultGroundingTemperature = 0.02;

struct ImageNormalization {
    double mean = 0.4978;
    double std = 0.2449;
};

/// Normalise, down-sample and partition whole images; every patch position is kept.
ImageTokens full_image_tokens(const ModelConfig& cfg, std::span<const Tensor> images,
                              const ImageNormalization& norm = {});
TextTokens text_tokens(const Model& model, std::span<const std::string> texts);

/// Unit-norm joint-space embeddings, one row per input.
Tensor embed_images(const Model& model, std::span<const Tensor> images, const ImageNormalization& norm = {},
                    std::size_t batch_size = 64);
Tensor embed_texts(const Model& model, std::span<const std::string> texts, std::size_t batch_size = 64);
/// Mean-pooled encoder outputs [n x C], the linear-probe features.
Tensor pooled_image_features(const Model& model, std::span<const Tensor> images,
                             const ImageNormalization& norm = {}, std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Grounding

struct GroundingOptions {
    double tau_w = kDefaultGroundingTemperature;
    bool normalize_features = false;  // unit-normalise encoder rows before the dot product
    ImageNormalization norm;
};

struct GroundingMap {
    Tensor map;           // [H x W]
    Tensor patch_scores;  // [side x side] before upsampling
    std::string phrase;
    double tau_w = 0.0;
    std::size_t grid_side = 0;
};

struct WeightMap {
    Tensor map;  // [side x side], sums to 1
};

/// softmax(head / tau_w) over the N importance-head weights.
Tensor normalized_head_weights(const Tensor& head, double tau_w);
WeightMap export_weight_map(const Tensor& head, double tau_w);

GroundingMap grounding_map(const Model& model, const Tensor& image, const std::string& phrase,
                           const GroundingOptions& opts = {});

// ---------------------------------------------------------------------------
// Metrics

/// Contrast-to-noise ratio between pixels inside and outside the union of boxes.
double metric_cnr(const Tensor& map, std::span<const BoxAnnotation> boxes);
double metric_cnr(const Tensor& map, const BoxAnnotation& box);

inline const std::vector<double> kDefaultIouQuantiles = {0.5, 0.6, 0.7, 0.8, 0.9};

/// Linear-interpolated quantile of the values, q in [0, 1].
double quantile(std::span<const double> values, double q);
/// IoU of {map > quantile_q(map)} against the union of boxes, averaged over q.
double metric_miou(const Tensor& map, std::span<const BoxAnnotation> boxes,
                   std::span<const double> quantiles = kDefaultIouQuantiles);
/// 1 when the first maximal pixel in row-major order lies inside any box.
int metric_pointing_game(const Tensor& map, std::span<const BoxAnnotation> boxes);
/// Area under the ROC curve via Mann-Whitney U; ties count one half.
double metric_auc(std::span<const double> scores, std::span<const int> labels);

/// Chance pointing-game rate for one box: patches of the grid touched by the box, over N.
double random_patch_baseline(const BoxAnnotation& box, std::size_t image_side, std::size_t grid_side);

struct GroundingRow {
    std::string phrase;
    double cnr = 0.0;
    double miou = 0.0;
    int pg = 0;
    double baseline = 0.0;
};

struct GroundingReport {
    std::vector<GroundingRow> rows;
    double cnr = 0.0;
    double miou = 0.0;
    double pg = 0.0;
    double baseline = 0.0;
};

/// Grounds every (phrase, box) pair of the samples and averages the metrics.
GroundingReport evaluate_grounding(const Model& model, const std::vector<PairedSample>& samples,
                                   const GroundingOptions& opts = {});

// ---------------------------------------------------------------------------
// Classification

struct PromptPair {
    std::string positive;
    std::string negative;
};

/// "there is a {class}" / "there is no {class}" for every class name.
std::vector<PromptPair> default_prompts();

/// Per-class probability of the positive prompt in a two-way softmax at the model's tau.
std::vector<double> zero_shot_classify(const Model& model, const Tensor& image, std::span<const PromptPair> prompts,
                                       const ImageNormalization& norm = {});
/// Batched form: [n_images x n_classes].
Tensor zero_shot_scores(const Model& model, std::span<const Tensor> images, std::span<const PromptPair> prompts,
                        const ImageNormalization& norm = {});
Tensor zero_shot_scores(const Model& model, const Tensor& image_embeddings, std::span<const PromptPair> prompts);

struct ClassAuc {
    std::vector<double> per_class;
    double macro = 0.0;
};

/// AUC per column of scores against the multi-hot labels; a class missing either outcome is a MetricError.
ClassAuc per_class_auc(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                       std::span<const char* const> class_names);

struct ProbeConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 64;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0;
    bool standardize = true;  // z-score features with training statistics
    std::uint64_t seed = 0;
};

struct ProbeResult {
    Tensor weight;       // [C x K]
    Tensor bias;         // [K]
    Tensor feature_mean;
    Tensor feature_std;
    Tensor test_scores;  // [n_test x K] sigmoid outputs
    ClassAuc auc;
};

/// One logistic unit per class on frozen features, trained with binary cross-entropy.
ProbeResult linear_probe(const Tensor& train_x, const std::vector<std::vector<int>>& train_y, const Tensor& test_x,
                         const std::vector<std::vector<int>>& test_y, const ProbeConfig& cfg = {});

}  // namespace maco
