#include "maco/objectives.hpp"

#include "maco/errors.hpp"
#include "maco/ops.hpp"

namespace maco {

using namespace ops;

Var loss_pretext(Var recon, Var target, const std::vector<MaskPlan>& plans) {
    if (recon.shape() != target.shape())
        throw ShapeError("loss_pretext: prediction " + shape_str(recon.shape()) + " vs target " +
                         shape_str(target.shape()));
    if (plans.empty()) throw ShapeError("loss_pretext: no mask plans");
    const std::size_t n = plans[0].n_total;
    if (recon.rows() != plans.size() * n)
        throw ShapeError("loss_pretext: " + shape_str(recon.shape()) + " rows for " + std::to_string(plans.size()) +
                         " plans of " + std::to_string(n) + " patches");
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < plans.size(); ++b) {
        if (plans[b].n_total != n) throw ShapeError("loss_pretext: plans cover different patch counts");
        for (auto i : plans[b].masked) rows.push_back(b * n + i);
    }
    if (rows.empty()) throw ObjectiveError("loss_pretext: no masked patches to reconstruct");
    return mean(square(sub(gather_rows(recon, rows), gather_rows(target, rows))));
}

Var importance_scores(Var position_maps, Var head) {
    const std::size_t n = head.size();
    if (position_maps.cols() != n || position_maps.shape().size() != 2)
        throw ShapeError("importance_scores: position maps " + shape_str(position_maps.shape()) + " vs head " +
                         shape_str(head.shape()));
    Var s = matmul(position_maps, reshape(head, {n, 1}));
    return reshape(s, {position_maps.rows()});
}

Var rescale_scores(Var scores) { return softplus(scores); }

namespace {

void check_logits(Var logits, Var tau, const char* op) {
    if (logits.shape().size() != 2 || logits.rows() != logits.cols())
        throw ShapeError(std::string(op) + ": logits " + shape_str(logits.shape()) + " are not square");
    if (tau.size() != 1) throw ShapeError(std::string(op) + ": temperature must be a scalar");
    if (!(tau.item() > 0.0)) throw ParameterError(std::string(op) + ": temperature must be positive");
}

}  // namespace

Var loss_infonce(Var logits, Var tau) {
    check_logits(logits, tau, "loss_infonce");
    Var s = mul_scalar(logits, reciprocal(tau));
    Var row = mean(diag(log_softmax_rows(s)));
    Var col = mean(diag(log_softmax_rows(transpose(s))));
    return scale(add(row, col), -0.5);
}

Var loss_masked_contrastive(Var logits, Var tau, Var weights, const MaskedContrastiveOptions& opts) {
    check_logits(logits, tau, "loss_masked_contrastive");
    const std::size_t b = logits.rows();
    if (weights.size() != b)
        throw ShapeError("loss_masked_contrastive: " + std::to_string(weights.size()) + " weights for batch " +
                         std::to_string(b));
    for (double w : weights.value().values())
        if (!(w > 0.0)) throw ObjectiveError("loss_masked_contrastive: importance weights must be positive");
    Var w = reshape(weights, {b});
    Var s = mul_scalar(logits, reciprocal(tau));
    Var st = transpose(s);
    const double inv_b = 1.0 / static_cast<double>(b);

    // Sharpened logits: gradient reaches the weights.
    auto first = [&] {
        Var r = sum(diag(log_softmax_rows(mul_rows(s, w))));
        Var c = sum(diag(log_softmax_rows(mul_rows(st, w))));
        return scale(add(r, c), -0.5 * inv_b);
    };
    // Loss weighting: the weights enter as constants.
    auto second = [&] {
        Var wd = opts.fixed_loss_weights ? logits.tape->constant(opts.fixed_loss_weights->reshaped({b})) : detach(w);
        Var r = sum(mul(diag(log_softmax_rows(s)), wd));
        if (!opts.symmetric_weighted_loss) return scale(r, -inv_b);
        Var c = sum(mul(diag(log_softmax_rows(st)), wd));
        return scale(add(r, c), -0.5 * inv_b);
    };
    switch (opts.terms) {
        case ContrastiveTerms::kWeightedLogits: return first();
        case ContrastiveTerms::kWeightedLoss: return second();
        case ContrastiveTerms::kBoth: break;
    }
    return add(first(), second());
}

Var loss_total(Var pretext, Var contrastive, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ParameterError("loss_total: lambda must lie in [0, 1], got " + std::to_string(lambda));
    // A zero coefficient keeps that branch off the gradient path entirely.
    if (lambda == 1.0) return scale(pretext, 1.0);
    if (lambda == 0.0) return scale(contrastive, 1.0);
    return add(scale(pretext, lambda), scale(contrastive, 1.0 - lambda));
}

double loss_infonce(const Tensor& logits, double tau) {
    Tape tape;
    return loss_infonce(tape.constant(logits), tape.constant(Tensor::scalar(tau))).item();
}

double loss_masked_contrastive(const Tensor& logits, double tau, const Tensor& weights,
                               const MaskedContrastiveOptions& opts) {
    Tape tape;
    return loss_masked_contrastive(tape.constant(logits), tape.constant(Tensor::scalar(tau)),
                                   tape.constant(weights), opts)
        .item();
}

ObjectiveTerms compute_objective(const Bound& m, const PreparedBatch& batch, const ObjectiveConfig& cfg) {
    Tape& tape = m.tape();
    ObjectiveTerms out;
    Var v_enc = encode_image(m, batch.image);
    Var recon = decode_image(m, v_enc, batch.plans);
    out.pretext = loss_pretext(recon, tape.constant(batch.targets), batch.plans);

    Var t_enc = encode_text(m, batch.text);
    const auto proj = pool_and_project(m, v_enc, batch.image.n_sampled, t_enc, batch.batch, batch.text.len);
    out.logits = matmul(proj.v, transpose(proj.t));
    out.tau = exp(m["log_tau"]);
    out.weights =
        rescale_scores(importance_scores(tape.constant(batch.position_maps), m["head.importance"]));

    switch (cfg.mode) {
        case ContrastiveMode::kWeighted:
            out.contrastive = loss_masked_contrastive(out.logits, out.tau, out.weights, cfg.contrastive);
            out.total = loss_total(out.pretext, out.contrastive, cfg.lambda);
            break;
        case ContrastiveMode::kInfoNce:
            out.contrastive = loss_infonce(out.logits, out.tau);
            out.total = loss_total(out.pretext, out.contrastive, cfg.lambda);
            break;
        case ContrastiveMode::kNone:
            out.contrastive = loss_infonce(out.logits, out.tau);
            out.total = scale(out.pretext, 1.0);
            break;
    }
    return out;
}

}  // namespace maco
