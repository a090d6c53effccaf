#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "maco/config.hpp"
#include "maco/datagen.hpp"
#include "maco/encoders.hpp"
#include "maco/objectives.hpp"
#include "maco/optim.hpp"
#include "maco/rng.hpp"

namespace maco {

/// Augment, mask and tokenise one batch of samples. Draws from rng in sample order.
PreparedBatch prepare_batch(const RunConfig& cfg, const Model& model, std::span<const PairedSample* const> samples,
                            Rng& rng);

struct StepRecord {
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double lr = 0.0;
    double pretext = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    double tau = 0.0;
    double mean_weight = 0.0;
};

struct EpochRecord {
    std::uint64_t epoch = 0;
    double pretext = 0.0;
    double contrastive = 0.0;
    double total = 0.0;
    double tau = 0.0;
    double mean_weight = 0.0;
};

struct TrainResult {
    Model model;
    OptimizerState optimizer;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// One optimisation step in place; returns the logged quantities (lr and step filled by the caller).
StepRecord train_step(Model& model, OptimizerState& opt, const PreparedBatch& batch, const RunConfig& cfg, double lr);

/// Full pretraining run. When out_dir is non-empty it receives config.json, train_log.csv,
/// epochs.csv and checkpoint.bin (rewritten after every epoch). A non-finite loss throws
/// TrainingError and leaves the last completed epoch's checkpoint in place.
/// on_epoch runs after each epoch's checkpoint; returning false ends the run there.
using EpochCallback = std::function<bool(const EpochRecord&)>;
TrainResult pretrain(const RunConfig& cfg, const std::vector<PairedSample>& train,
                     const std::filesystem::path& out_dir = {}, std::ostream* progress = nullptr,
                     const EpochCallback& on_epoch = {});

/// Finite-difference cases for the full training objective on a two-pair toy model,
/// one case per named parameter tensor.
std::vector<GradCheckCase> objective_grad_checks(std::uint64_t seed);

inline constexpr const char* kStepLogHeader = "step,epoch,lr,loss_pretext,loss_contrastive,loss_total,tau,mean_weight";

}  // namespace maco
