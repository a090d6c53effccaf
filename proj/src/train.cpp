#include "maco/train.hpp"

#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <ostream>

#include "maco/checkpoint.hpp"
#include "maco/errors.hpp"
#include "maco/patching.hpp"

namespace maco {

namespace fs = std::filesystem;

PreparedBatch prepare_batch(const RunConfig& cfg, const Model& model, std::span<const PairedSample* const> samples,
                            Rng& rng) {
    const auto& mc = model.config();
    const auto& tc = cfg.train;
    const std::size_t b = samples.size(), n = mc.n_patches(), hr_dim = mc.hr_patch_dim(), lr_dim = mc.lr_patch_dim();
    const auto n_sampled = static_cast<std::size_t>(std::llround(static_cast<double>(n) * (1.0 - tc.mask_ratio)));
    PreparedBatch out;
    out.batch = b;
    out.image.batch = b;
    out.image.n_sampled = n_sampled;
    out.image.patches = Tensor({b * n_sampled, lr_dim});
    out.image.positions.reserve(b * n_sampled);
    out.targets = Tensor({b * n, hr_dim});
    out.position_maps = Tensor({b, n});
    out.text.batch = b;
    out.text.len = mc.max_text_len;
    out.text.ids.reserve(b * mc.max_text_len);

    for (std::size_t i = 0; i < b; ++i) {
        const PairedSample& s = *samples[i];
        const Tensor img = tc.augment_images ? augment_image(s.image, tc.augment, rng)
                                             : normalize_image(s.image, tc.augment.mean, tc.augment.std);
        const auto hr = partition(img, mc.hr_patch_size());
        auto target = out.targets.values().subspan(i * n * hr_dim, n * hr_dim);
        std::copy(hr.patches.values().begin(), hr.patches.values().end(), target.begin());
        if (tc.standardize_targets) {
            for (std::size_t p = 0; p < n; ++p) {
                auto row = target.subspan(p * hr_dim, hr_dim);
                const double mu = std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(hr_dim);
                double var = 0.0;
                for (double v : row) var += (v - mu) * (v - mu);
                const double sd = std::sqrt(var / static_cast<double>(hr_dim) + 1e-6);
                for (double& v : row) v = (v - mu) / sd;
            }
        }

        const auto grid = partition(downsample(img, mc.ratio), mc.patch_size);
        MaskPlan plan = sample_mask(n, tc.mask_ratio, rng);
        const auto sel = select_patches(grid, plan);
        std::copy(sel.patches.values().begin(), sel.patches.values().end(),
                  out.image.patches.values().begin() + static_cast<std::ptrdiff_t>(i * n_sampled * lr_dim));
        out.image.positions.insert(out.image.positions.end(), plan.sampled.begin(), plan.sampled.end());
        std::copy(plan.position_map.begin(), plan.position_map.end(),
                  out.position_maps.values().begin() + static_cast<std::ptrdiff_t>(i * n));
        out.plans.push_back(std::move(plan));

        const std::string report = tc.augment_text ? augment_text(s.report, rng) : s.report;
        const auto ids = tokenize(report, model.vocab(), mc.max_text_len);
        out.text.ids.insert(out.text.ids.end(), ids.begin(), ids.end());
    }
    return out;
}

StepRecord train_step(Model& model, OptimizerState& opt, const PreparedBatch& batch, const RunConfig& cfg, double lr) {
    Tape tape;
    Bound m(tape, model, true);
    const ObjectiveTerms terms = compute_objective(m, batch, cfg.objective());
    StepRecord rec;
    rec.lr = lr;
    rec.pretext = terms.pretext.item();
    rec.contrastive = terms.contrastive.item();
    rec.total = terms.total.item();
    rec.tau = terms.tau.item();
    const auto w = terms.weights.value().values();
    rec.mean_weight = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
    if (!std::isfinite(rec.total) || !std::isfinite(rec.contrastive))
        throw TrainingError("non-finite loss (pretext " + std::to_string(rec.pretext) + ", contrastive " +
                            std::to_string(rec.contrastive) + ")");
    tape.backward(terms.total);
    adamw_step(model.params(), m.gradients(), opt, lr, cfg.train.adamw);
    model.clamp_tau();
    return rec;
}

namespace {

std::ofstream open_log(const fs::path& path, bool append, const char* header) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(17);
    if (!append) out << header << '\n';
    return out;
}

}  // namespace

TrainResult pretrain(const RunConfig& cfg, const std::vector<PairedSample>& train, const fs::path& out_dir,
                     std::ostream* progress, const EpochCallback& on_epoch) {
    cfg.validate();
#if defined(__GLIBC__)
    // Step tensors are large and short-lived; keep them on the heap instead of fresh mmaps.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    if (train.size() < cfg.train.batch_size)
        throw SpecError("train.batch_size: " + std::to_string(cfg.train.batch_size) + " exceeds the " +
                        std::to_string(train.size()) + " training samples");
    const std::size_t per_epoch = train.size() / cfg.train.batch_size;
    const std::uint64_t total_steps = per_epoch * cfg.train.epochs;
    const auto warmup = static_cast<std::uint64_t>(std::floor(cfg.train.warmup_fraction * static_cast<double>(total_steps)));

    TrainResult res{Model(cfg.model, Vocabulary::synthetic(), derive_seed(cfg.seed, 0)), {}, {}, {}};
    Rng rng(derive_seed(cfg.seed, 1));
    std::uint64_t start_epoch = 0, step = 0;
    const bool files = !out_dir.empty();
    const fs::path ckpt_path = out_dir / "checkpoint.bin";
    bool resumed = false;
    if (files && cfg.train.resume && fs::exists(ckpt_path)) {
        const Checkpoint ck = load_checkpoint(ckpt_path);
        res.model = model_from_checkpoint(ck);
        res.optimizer = ck.optimizer;
        rng.set_state(ck.rng_state);
        start_epoch = ck.epoch;
        step = ck.step;
        resumed = true;
    }

    std::ofstream step_log, epoch_log;
    if (files) {
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
        std::ofstream(out_dir / "config.json") << to_json(cfg).dump(2) << '\n';
        step_log = open_log(out_dir / "train_log.csv", resumed, kStepLogHeader);
        epoch_log = open_log(out_dir / "epochs.csv", resumed, "epoch,loss_pretext,loss_contrastive,loss_total,tau,mean_weight");
    }

    std::vector<std::size_t> order(train.size());
    std::vector<const PairedSample*> chunk(cfg.train.batch_size);
    for (std::uint64_t epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        EpochRecord er;
        er.epoch = epoch + 1;
        for (std::size_t k = 0; k < per_epoch; ++k, ++step) {
            for (std::size_t j = 0; j < chunk.size(); ++j) chunk[j] = &train[order[k * chunk.size() + j]];
            const PreparedBatch batch = prepare_batch(cfg, res.model, chunk, rng);
            const double lr = lr_schedule(step, warmup, total_steps, cfg.train.lr);
            StepRecord rec = train_step(res.model, res.optimizer, batch, cfg, lr);
            rec.step = step;
            rec.epoch = epoch + 1;
            if (files)
                step_log << rec.step << ',' << rec.epoch << ',' << rec.lr << ',' << rec.pretext << ','
                         << rec.contrastive << ',' << rec.total << ',' << rec.tau << ',' << rec.mean_weight << '\n';
            er.pretext += rec.pretext;
            er.contrastive += rec.contrastive;
            er.total += rec.total;
            er.mean_weight += rec.mean_weight;
            res.steps.push_back(rec);
        }
        const auto inv = 1.0 / static_cast<double>(per_epoch);
        er.pretext *= inv;
        er.contrastive *= inv;
        er.total *= inv;
        er.mean_weight *= inv;
        er.tau = res.model.tau();
        res.epochs.push_back(er);
        if (files) {
            step_log.flush();
            epoch_log << er.epoch << ',' << er.pretext << ',' << er.contrastive << ',' << er.total << ',' << er.tau
                      << ',' << er.mean_weight << std::endl;
            save_checkpoint(ckpt_path, make_checkpoint(cfg, res.model, res.optimizer, rng, epoch + 1, step));
        }
        if (progress)
            *progress << "epoch " << er.epoch << '/' << cfg.train.epochs << "  L_pret " << er.pretext << "  L_contra "
                      << er.contrastive << "  L_total " << er.total << "  tau " << er.tau << std::endl;
        if (on_epoch && !on_epoch(er)) break;
    }
    return res;
}

std::vector<GradCheckCase> objective_grad_checks(std::uint64_t seed) {
    RunConfig cfg;
    auto& mc = cfg.model;
    mc.image_size = 16;
    mc.ratio = 2;
    mc.patch_size = 2;
    mc.width = 8;
    mc.depth = 1;
    mc.heads = 2;
    mc.decoder_depth = 1;
    mc.decoder_width = 8;
    mc.mlp_ratio = 2;
    mc.text_depth = 1;
    mc.max_text_len = 8;
    mc.embed_dim = 8;
    mc.tau_init = 1.0;  // keeps higher derivatives of the contrastive terms small
    cfg.train.mask_ratio = 0.5;
    cfg.train.augment_images = false;
    cfg.train.augment_text = false;

    Rng rng(seed);
    auto model = std::make_shared<Model>(mc, Vocabulary::synthetic(), derive_seed(seed, 0));
    for (auto& v : model->params().get("head.importance").value.values()) v = 0.5 * rng.normal();
    std::vector<PairedSample> samples(2);
    samples[0].report = "There is a disc in the center region.";
    samples[1].report = "There is a ring in the lower left region.";
    for (auto& s : samples) {
        s.image = Tensor({16, 16});
        for (auto& v : s.image.values()) v = rng.uniform();
    }
    const PairedSample* ptrs[2] = {&samples[0], &samples[1]};
    auto batch = std::make_shared<PreparedBatch>(prepare_batch(cfg, *model, ptrs, rng));
    ObjectiveConfig objective = cfg.objective();
    {
        Tape tape;
        objective.contrastive.fixed_loss_weights =
            compute_objective(Bound(tape, *model, false), *batch, objective).weights.value();
    }

    std::vector<GradCheckCase> cases;
    for (std::size_t i = 0; i < model->params().size(); ++i) {
        const auto& p = model->params().items()[i];
        ScalarFn fn = [model, batch, objective, i](Tape& tape, Var x) {
            std::vector<Var> vars;
            for (std::size_t j = 0; j < model->params().size(); ++j)
                vars.push_back(j == i ? x : tape.constant(model->params().items()[j].value));
            return compute_objective(Bound(tape, *model, std::move(vars)), *batch, objective).total;
        };
        cases.push_back({"objective/" + p.name, std::move(fn), p.value});
    }
    return cases;
}

}  // namespace maco
