#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"
#include "maco/datagen.hpp"
#include "maco/encoders.hpp"
#include "maco/inference.hpp"
#include "maco/objectives.hpp"
#include "maco/optim.hpp"

namespace maco {

struct DataConfig {
    std::string dir = "data";
    std::size_t n_train = 2048;
    std::size_t n_val = 256;
    std::size_t n_test = 256;
    SceneSpec scene;
};

struct TrainConfig {
    double mask_ratio = 0.75;
    double lambda = 0.9;
    ContrastiveMode contrastive = ContrastiveMode::kWeighted;
    bool symmetric_weighted_loss = true;
    bool standardize_targets = false;  // per-patch z-scored reconstruction targets
    double lr = 4.5e-4;
    AdamWConfig adamw;
    // Small enough that a CPU run takes minutes.
    std::size_t batch_size = 64;
    std::size_t epochs = 30;
    double warmup_fraction = 0.1;
    bool augment_images = true;
    bool augment_text = true;
    // Reports name left/right regions, so mirrored images would contradict their text.
    AugmentConfig augment{.hflip_prob = 0.0};
    bool resume = false;
};

struct EvalConfig {
    std::string checkpoint;  // empty: <out_dir>/checkpoint.bin
    std::string split = "test";
    std::string image;        // single-image grounding input (PGM); empty evaluates the split
    std::string phrase;
    std::string annotations;  // optional JSON boxes for the single image
    GroundingOptions grounding;
    ProbeConfig probe;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "runs/default";
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;

    ObjectiveConfig objective() const;
    /// Throws a maco::Error subclass whose message names the offending field.
    void validate() const;
    std::filesystem::path checkpoint_path() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Overlays j on the defaults. Unknown keys and mistyped values are rejected by name.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

const char* contrastive_mode_name(ContrastiveMode mode);

}  // namespace maco
