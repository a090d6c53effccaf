#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "maco/encoders.hpp"
#include "maco/patching.hpp"
#include "maco/tensor.hpp"

namespace maco {

/// Mean squared error over the masked rows of every instance.
/// recon and target are [batch*N x patch_dim]; plans[b] selects the masked rows of instance b.
Var loss_pretext(Var recon, Var target, const std::vector<MaskPlan>& plans);

/// W^s: one dot product per instance between its position map row and the head weights.
Var importance_scores(Var position_maps, Var head);

/// W^c = softplus(W^s).
Var rescale_scores(Var scores);

/// Symmetric InfoNCE with diagonal targets on logits / tau. tau is a one-element Var.
Var loss_infonce(Var logits, Var tau);

/// Which summands of the masked-contrastive loss to evaluate.
enum class ContrastiveTerms { kBoth, kWeightedLogits, kWeightedLoss };

struct MaskedContrastiveOptions {
    // The detached-weight term is averaged over both contrast directions like the first.
    bool symmetric_weighted_loss = true;
    ContrastiveTerms terms = ContrastiveTerms::kBoth;
    // Values for the loss-weighting term in place of detach(weights). Finite-difference
    // checks pin them so the stop-gradient edge is a true constant.
    std::optional<Tensor> fixed_loss_weights;
};

/// Correlation-weighted contrastive loss. Row i of the logits is sharpened by w_i (gradient
/// flows into w) and its log-likelihood is additionally weighted by detach(w_i).
Var loss_masked_contrastive(Var logits, Var tau, Var weights, const MaskedContrastiveOptions& opts = {});

/// lambda * pretext + (1 - lambda) * contrastive.
Var loss_total(Var pretext, Var contrastive, double lambda);

// Plain-value conveniences.
double loss_infonce(const Tensor& logits, double tau);
double loss_masked_contrastive(const Tensor& logits, double tau, const Tensor& weights,
                               const MaskedContrastiveOptions& opts = {});

// ---------------------------------------------------------------------------
// Whole-batch objective

enum class ContrastiveMode {
    kNone,      // pretext only
    kInfoNce,   // plain symmetric InfoNCE
    kWeighted,  // correlation-weighted masked-contrastive loss
};

struct ObjectiveConfig {
    double lambda = 0.9;
    ContrastiveMode mode = ContrastiveMode::kWeighted;
    MaskedContrastiveOptions contrastive;
};

/// Everything one optimisation step consumes, already augmented, masked and tokenised.
struct PreparedBatch {
    std::size_t batch = 0;
    ImageTokens image;              // sampled LR patches
    std::vector<MaskPlan> plans;
    Tensor targets;                 // HR patches [batch*N x hr_patch_dim]
    TextTokens text;
    Tensor position_maps;           // [batch x N]
};

struct ObjectiveTerms {
    Var pretext;
    Var contrastive;
    Var total;
    Var logits;
    Var weights;  // W^c, [batch]
    Var tau;
};

ObjectiveTerms compute_objective(const Bound& m, const PreparedBatch& batch, const ObjectiveConfig& cfg);

}  // namespace maco
