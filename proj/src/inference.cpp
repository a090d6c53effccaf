#include "maco/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maco/errors.hpp"
#include "maco/ops.hpp"
#include "maco/optim.hpp"
#include "maco/patching.hpp"

namespace maco {

ImageTokens full_image_tokens(const ModelConfig& cfg, std::span<const Tensor> images, const ImageNormalization& norm) {
    const std::size_t n = cfg.n_patches(), dim = cfg.lr_patch_dim();
    ImageTokens tokens;
    tokens.batch = images.size();
    tokens.n_sampled = n;
    tokens.patches = Tensor({images.size() * n, dim});
    tokens.positions.resize(images.size() * n);
    for (std::size_t b = 0; b < images.size(); ++b) {
        if (images[b].rank() != 2 || images[b].rows() != cfg.image_size || images[b].cols() != cfg.image_size)
            throw ShapeError("image " + shape_str(images[b].shape()) + " does not match model input side " +
                             std::to_string(cfg.image_size));
        const auto grid = partition(downsample(normalize_image(images[b], norm.mean, norm.std), cfg.ratio),
                                    cfg.patch_size);
        std::copy(grid.patches.values().begin(), grid.patches.values().end(),
                  tokens.patches.values().begin() + static_cast<std::ptrdiff_t>(b * n * dim));
        for (std::size_t i = 0; i < n; ++i) tokens.positions[b * n + i] = i;
    }
    return tokens;
}

TextTokens text_tokens(const Model& model, std::span<const std::string> texts) {
    TextTokens t;
    t.batch = texts.size();
    t.len = model.config().max_text_len;
    t.ids.reserve(t.batch * t.len);
    for (const auto& s : texts) {
        const auto ids = tokenize(s, model.vocab(), t.len);
        t.ids.insert(t.ids.end(), ids.begin(), ids.end());
    }
    return t;
}

namespace {

template <typename Item, typename Fn>
Tensor batched_rows(std::span<const Item> items, std::size_t batch_size, std::size_t width, Fn&& fn) {
    if (batch_size == 0) throw ParameterError("batch_size must be positive");
    Tensor out({items.size(), width});
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
        const auto chunk = items.subspan(start, std::min(batch_size, items.size() - start));
        const Tensor part = fn(chunk);
        std::copy(part.values().begin(), part.values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(start * width));
    }
    return out;
}

}  // namespace

Tensor embed_images(const Model& model, std::span<const Tensor> images, const ImageNormalization& norm,
                    std::size_t batch_size) {
    return batched_rows(images, batch_size, model.config().embed_dim, [&](std::span<const Tensor> chunk) {
        Tape tape;
        Bound m(tape, model, false);
        const auto tokens = full_image_tokens(model.config(), chunk, norm);
        return project_image(m, pool_image(encode_image(m, tokens), tokens.n_sampled)).value();
    });
}

Tensor pooled_image_features(const Model& model, std::span<const Tensor> images, const ImageNormalization& norm,
                             std::size_t batch_size) {
    return batched_rows(images, batch_size, model.config().width, [&](std::span<const Tensor> chunk) {
        Tape tape;
        Bound m(tape, model, false);
        const auto tokens = full_image_tokens(model.config(), chunk, norm);
        return pool_image(encode_image(m, tokens), tokens.n_sampled).value();
    });
}

Tensor embed_texts(const Model& model, std::span<const std::string> texts, std::size_t batch_size) {
    return batched_rows(texts, batch_size, model.config().embed_dim, [&](std::span<const std::string> chunk) {
        Tape tape;
        Bound m(tape, model, false);
        const auto tokens = text_tokens(model, chunk);
        return project_text(m, cls_rows(encode_text(m, tokens), tokens.batch, tokens.len)).value();
    });
}

// ---------------------------------------------------------------------------
// Grounding

Tensor normalized_head_weights(const Tensor& head, double tau_w) {
    if (!(tau_w > 0.0)) throw ParameterError("tau_w must be positive, got " + std::to_string(tau_w));
    return softmax(head.reshaped({1, head.size()}), tau_w).reshaped({head.size()});
}

WeightMap export_weight_map(const Tensor& head, double tau_w) {
    if (!is_perfect_square(head.size()))
        throw ShapeError("export_weight_map: " + std::to_string(head.size()) + " weights do not form a square grid");
    const std::size_t side = isqrt(head.size());
    return {normalized_head_weights(head, tau_w).reshaped({side, side})};
}

GroundingMap grounding_map(const Model& model, const Tensor& image, const std::string& phrase,
                           const GroundingOptions& opts) {
    const Tensor w = normalized_head_weights(model.importance_weights(), opts.tau_w);
    const auto& cfg = model.config();
    Tape tape;
    Bound m(tape, model, false);
    Var v = encode_image(m, full_image_tokens(cfg, std::span(&image, 1), opts.norm));
    if (opts.normalize_features) v = ops::l2_normalize_rows(v);
    const std::string phrases[1] = {phrase};
    const auto tokens = text_tokens(model, phrases);
    const Tensor t = cls_rows(encode_text(m, tokens), 1, tokens.len).value();

    const std::size_t n = cfg.n_patches(), c = cfg.width, side = cfg.grid_side();
    GroundingMap out;
    out.phrase = phrase;
    out.tau_w = opts.tau_w;
    out.grid_side = side;
    out.patch_scores = Tensor({side, side});
    const Tensor& vv = v.value();
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += vv[i * c + j] * t[j];
        out.patch_scores[i] = w[i] * dot;
    }
    out.map = bilinear_upsample(out.patch_scores, image.rows(), image.cols());
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::vector<std::uint8_t> box_mask(const Tensor& map, std::span<const BoxAnnotation> boxes, const char* metric) {
    if (map.rank() != 2) throw MetricError(std::string(metric) + ": map must be 2-D, got " + shape_str(map.shape()));
    if (boxes.empty()) throw MetricError(std::string(metric) + ": at least one box is required");
    const std::size_t h = map.rows(), w = map.cols();
    std::vector<std::uint8_t> mask(h * w, 0);
    for (const auto& b : boxes) {
        if (b.width == 0 || b.height == 0 || b.x + b.width > w || b.y + b.height > h)
            throw MetricError(std::string(metric) + ": box (" + std::to_string(b.x) + ", " + std::to_string(b.y) +
                              ", " + std::to_string(b.width) + ", " + std::to_string(b.height) +
                              ") is empty or outside the " + shape_str(map.shape()) + " map");
        for (std::size_t r = b.y; r < b.y + b.height; ++r)
            for (std::size_t c = b.x; c < b.x + b.width; ++c) mask[r * w + c] = 1;
    }
    return mask;
}

}  // namespace

double metric_cnr(const Tensor& map, std::span<const BoxAnnotation> boxes) {
    const auto mask = box_mask(map, boxes, "metric_cnr");
    double sum[2] = {0, 0};
    std::size_t count[2] = {0, 0};
    for (std::size_t i = 0; i < map.size(); ++i) {
        sum[mask[i]] += map[i];
        ++count[mask[i]];
    }
    if (count[0] == 0) throw MetricError("metric_cnr: boxes cover the whole map, exterior is empty");
    const double mu_out = sum[0] / static_cast<double>(count[0]), mu_in = sum[1] / static_cast<double>(count[1]);
    double ss[2] = {0, 0};
    for (std::size_t i = 0; i < map.size(); ++i) {
        const double d = map[i] - (mask[i] ? mu_in : mu_out);
        ss[mask[i]] += d * d;
    }
    const double var_out = ss[0] / static_cast<double>(count[0]), var_in = ss[1] / static_cast<double>(count[1]);
    return (mu_in - mu_out) / std::sqrt(var_in + var_out + 1e-12);
}

double metric_cnr(const Tensor& map, const BoxAnnotation& box) { return metric_cnr(map, std::span(&box, 1)); }

double quantile(std::span<const double> values, double q) {
    if (values.empty()) throw MetricError("quantile: no values");
    if (!(q >= 0.0 && q <= 1.0)) throw ParameterError("quantile: q must lie in [0, 1], got " + std::to_string(q));
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || lo + 1 >= v.size()) return v[lo];
    return v[lo] + frac * (v[lo + 1] - v[lo]);
}

double metric_miou(const Tensor& map, std::span<const BoxAnnotation> boxes, std::span<const double> quantiles) {
    if (quantiles.empty()) throw ParameterError("metric_miou: threshold list is empty");
    const auto mask = box_mask(map, boxes, "metric_miou");
    double total = 0.0;
    for (double q : quantiles) {
        const double thr = quantile(map.values(), q);
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = 0; i < map.size(); ++i) {
            const bool on = map[i] > thr;
            inter += on && mask[i];
            uni += on || mask[i];
        }
        total += static_cast<double>(inter) / static_cast<double>(uni);
    }
    return total / static_cast<double>(quantiles.size());
}

int metric_pointing_game(const Tensor& map, std::span<const BoxAnnotation> boxes) {
    const auto mask = box_mask(map, boxes, "metric_pointing_game");
    std::size_t best = 0;
    for (std::size_t i = 1; i < map.size(); ++i)
        if (map[i] > map[best]) best = i;
    return mask[best];
}

double metric_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw MetricError("metric_auc: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(labels.size()) + " labels");
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw MetricError("metric_auc: labels must be 0 or 1");
        if (!std::isfinite(scores[i])) throw MetricError("metric_auc: non-finite score");
        n_pos += static_cast<std::size_t>(labels[i]);
    }
    const std::size_t n_neg = labels.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw MetricError("metric_auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Sum of average ranks (1-based) of the positives.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum += avg;
        i = j;
    }
    const double np = static_cast<double>(n_pos);
    const double u = rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(n_neg));
}

double random_patch_baseline(const BoxAnnotation& box, std::size_t image_side, std::size_t grid_side) {
    if (grid_side == 0 || image_side % grid_side != 0)
        throw ParameterError("random_patch_baseline: grid side must divide the image side");
    if (box.width == 0 || box.height == 0 || box.x + box.width > image_side || box.y + box.height > image_side)
        throw MetricError("random_patch_baseline: box outside the image");
    const std::size_t p = image_side / grid_side;
    const std::size_t cols = (box.x + box.width - 1) / p - box.x / p + 1;
    const std::size_t rows = (box.y + box.height - 1) / p - box.y / p + 1;
    return static_cast<double>(rows * cols) / static_cast<double>(grid_side * grid_side);
}

GroundingReport evaluate_grounding(const Model& model, const std::vector<PairedSample>& samples,
                                   const GroundingOptions& opts) {
    GroundingReport rep;
    const std::size_t side = model.config().image_size, grid = model.config().grid_side();
    for (const auto& s : samples)
        for (std::size_t k = 0; k < s.boxes.size(); ++k) {
            const auto g = grounding_map(model, s.image, s.phrases.at(k), opts);
            const std::span<const BoxAnnotation> box(&s.boxes[k], 1);
            GroundingRow row{s.phrases[k], metric_cnr(g.map, box), metric_miou(g.map, box),
                             metric_pointing_game(g.map, box), random_patch_baseline(s.boxes[k], side, grid)};
            rep.cnr += row.cnr;
            rep.miou += row.miou;
            rep.pg += row.pg;
            rep.baseline += row.baseline;
            rep.rows.push_back(std::move(row));
        }
    if (rep.rows.empty()) throw MetricError("evaluate_grounding: no annotated phrases");
    const double inv = 1.0 / static_cast<double>(rep.rows.size());
    rep.cnr *= inv;
    rep.miou *= inv;
    rep.pg *= inv;
    rep.baseline *= inv;
    return rep;
}

// ---------------------------------------------------------------------------
// Classification

std::vector<PromptPair> default_prompts() {
    std::vector<PromptPair> out;
    for (const char* cls : kClassNames)
        out.push_back({std::string("there is a ") + cls, std::string("there is no ") + cls});
    return out;
}

Tensor zero_shot_scores(const Model& model, const Tensor& image_embeddings, std::span<const PromptPair> prompts) {
    if (prompts.empty()) throw InputError("zero_shot: no prompts given");
    std::vector<std::string> texts;
    for (std::size_t k = 0; k < prompts.size(); ++k) {
        if (prompts[k].positive.empty() || prompts[k].negative.empty())
            throw InputError("zero_shot: class " + std::to_string(k) + " is missing a positive or negative prompt");
        texts.push_back(prompts[k].positive);
        texts.push_back(prompts[k].negative);
    }
    const Tensor t = embed_texts(model, texts);
    const double tau = model.tau();
    const std::size_t n = image_embeddings.rows(), d = image_embeddings.cols(), kc = prompts.size();
    if (d != t.cols()) throw ShapeError("zero_shot: embedding widths differ");
    Tensor out({n, kc});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < kc; ++k) {
            double sp = 0.0, sn = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                sp += image_embeddings[i * d + j] * t[2 * k * d + j];
                sn += image_embeddings[i * d + j] * t[(2 * k + 1) * d + j];
            }
            const double z = (sp - sn) / tau;
            out[i * kc + k] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        }
    return out;
}

Tensor zero_shot_scores(const Model& model, std::span<const Tensor> images, std::span<const PromptPair> prompts,
                        const ImageNormalization& norm) {
    return zero_shot_scores(model, embed_images(model, images, norm), prompts);
}

std::vector<double> zero_shot_classify(const Model& model, const Tensor& image, std::span<const PromptPair> prompts,
                                       const ImageNormalization& norm) {
    const Tensor s = zero_shot_scores(model, std::span(&image, 1), prompts, norm);
    return {s.values().begin(), s.values().end()};
}

ClassAuc per_class_auc(const Tensor& scores, const std::vector<std::vector<int>>& labels,
                       std::span<const char* const> class_names) {
    const std::size_t n = scores.rows(), k = scores.cols();
    if (labels.size() != n) throw MetricError("per_class_auc: label count differs from score rows");
    ClassAuc out;
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> s(n);
        std::vector<int> y(n);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = scores[i * k + c];
            y[i] = labels[i].at(c);
            pos += static_cast<std::size_t>(y[i]);
        }
        const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
        if (pos == 0) throw MetricError("class '" + name + "' is absent from the split");
        if (pos == n) throw MetricError("class '" + name + "' is present in every sample of the split");
        out.per_class.push_back(metric_auc(s, y));
    }
    out.macro = std::accumulate(out.per_class.begin(), out.per_class.end(), 0.0) / static_cast<double>(k);
    return out;
}

namespace {

double sigmoid(double z) { return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

ProbeResult linear_probe(const Tensor& train_x, const std::vector<std::vector<int>>& train_y, const Tensor& test_x,
                         const std::vector<std::vector<int>>& test_y, const ProbeConfig& cfg) {
    const std::size_t n = train_x.rows(), d = train_x.cols();
    if (n == 0 || train_y.size() != n) throw InputError("linear_probe: training features and labels disagree");
    if (test_x.cols() != d || test_y.size() != test_x.rows())
        throw InputError("linear_probe: test features and labels disagree");
    if (cfg.batch_size == 0) throw ParameterError("linear_probe: batch_size must be positive");
    const std::size_t k = train_y[0].size();
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t pos = 0;
        for (const auto& y : train_y) pos += static_cast<std::size_t>(y.at(c));
        if (pos == 0 || pos == n)
            throw InputError("linear_probe: class '" + std::string(c < kClassNames.size() ? kClassNames[c] : "?") +
                             "' has a single outcome in the training data");
    }

    ProbeResult res;
    res.feature_mean = Tensor({d}, 0.0);
    res.feature_std = Tensor({d}, 1.0);
    if (cfg.standardize) {
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0, ss = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += train_x[i * d + j];
            const double mu = s / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) ss += (train_x[i * d + j] - mu) * (train_x[i * d + j] - mu);
            res.feature_mean[j] = mu;
            res.feature_std[j] = std::max(std::sqrt(ss / static_cast<double>(n)), 1e-12);
        }
    }
    auto standardized = [&](const Tensor& x) {
        Tensor z(x.shape());
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < d; ++j) z[i * d + j] = (x[i * d + j] - res.feature_mean[j]) / res.feature_std[j];
        return z;
    };
    const Tensor x = standardized(train_x);

    ParameterSet params;
    params.add("probe.weight", Tensor({d, k}));
    params.add("probe.bias", Tensor({k}), false);
    OptimizerState state;
    Rng rng(cfg.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Gradients grads(2);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t end = std::min(n, start + cfg.batch_size);
            const Tensor& w = params.items()[0].value;
            const Tensor& b = params.items()[1].value;
            grads[0].assign(d * k, 0.0);
            grads[1].assign(k, 0.0);
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t r = start; r < end; ++r) {
                const std::size_t i = order[r];
                for (std::size_t c = 0; c < k; ++c) {
                    double z = b[c];
                    for (std::size_t j = 0; j < d; ++j) z += x[i * d + j] * w[j * k + c];
                    const double err = (sigmoid(z) - static_cast<double>(train_y[i][c])) * inv;
                    grads[1][c] += err;
                    for (std::size_t j = 0; j < d; ++j) grads[0][j * k + c] += x[i * d + j] * err;
                }
            }
            sgd_momentum_step(params, grads, state, cfg.lr, {cfg.momentum, cfg.weight_decay});
        }
    }

    res.weight = params.items()[0].value;
    res.bias = params.items()[1].value;
    const Tensor xt = standardized(test_x);
    res.test_scores = Tensor({test_x.rows(), k});
    for (std::size_t i = 0; i < test_x.rows(); ++i)
        for (std::size_t c = 0; c < k; ++c) {
            double z = res.bias[c];
            for (std::size_t j = 0; j < d; ++j) z += xt[i * d + j] * res.weight[j * k + c];
            res.test_scores[i * k + c] = sigmoid(z);
        }
    res.auc = per_class_auc(res.test_scores, test_y, kClassNames);
    return res;
}

}  // namespace maco
