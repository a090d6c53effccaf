#include <cmath>
#include <numeric>

#include "doctest.h"
#include "maco/datagen.hpp"
#include "maco/errors.hpp"
#include "maco/inference.hpp"
#include "oracles.hpp"

using namespace maco;

namespace {

Tensor random_map(Rng& rng, std::size_t h, std::size_t w) {
    Tensor t({h, w});
    for (auto& v : t.values()) v = rng.normal();
    return t;
}

oracle::Matrix to_rows(const Tensor& t) {
    oracle::Matrix m(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t r = 0; r < t.rows(); ++r)
        for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
    return m;
}

BoxAnnotation random_box(Rng& rng, std::size_t side) {
    BoxAnnotation b;
    b.width = 1 + rng.below(side / 2);
    b.height = 1 + rng.below(side / 2);
    b.x = rng.below(side - b.width + 1);
    b.y = rng.below(side - b.height + 1);
    return b;
}

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.ratio = 2;
    cfg.patch_size = 4;
    cfg.width = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.decoder_width = 16;
    cfg.mlp_ratio = 2;
    cfg.text_depth = 1;
    cfg.max_text_len = 16;
    cfg.embed_dim = 8;
    return cfg;
}

}  // namespace

TEST_CASE("weight maps") {
    const auto w = export_weight_map(Tensor({64}), 0.02);
    CHECK(w.map.shape() == Shape{8, 8});
    for (double v : w.map.values()) CHECK(std::abs(v - 1.0 / 64) < 1e-15);

    Rng rng(1);
    Tensor head({16});
    for (auto& v : head.values()) v = rng.normal();
    const auto m = export_weight_map(head, 0.05);
    double s = 0.0;
    for (double v : m.map.values()) {
        CHECK(v >= 0.0);
        s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
    CHECK_THROWS_AS(export_weight_map(Tensor({15}), 0.02), ShapeError);
    CHECK_THROWS_AS(normalized_head_weights(head, 0.0), ParameterError);
}

TEST_CASE("grounding map shape and scaling") {
    const auto cfg = tiny_config();
    Model model(cfg, Vocabulary::synthetic(), 2);
    SceneSpec spec;
    spec.image_size = 32;
    spec.margin = 4;
    spec.min_radius = 2.0;
    spec.max_radius = 3.5;
    const auto s = generate_sample(spec, 3, 0);
    const auto g = grounding_map(model, s.image, s.phrases[0]);
    CHECK(g.map.shape() == Shape{32, 32});
    CHECK(g.patch_scores.shape() == Shape{4, 4});
    CHECK(g.grid_side == 4);

    // Uniform head: scores are the raw dot products over N.
    GroundingOptions hot;
    hot.tau_w = 1.0;
    const auto g2 = grounding_map(model, s.image, s.phrases[0], hot);
    for (std::size_t i = 0; i < 16; ++i) CHECK(std::abs(g2.patch_scores[i] - g.patch_scores[i]) < 1e-15);
    CHECK_THROWS_AS(grounding_map(model, s.image, s.phrases[0], GroundingOptions{-1.0}), ParameterError);
}

TEST_CASE("cnr closed forms and oracle") {
    BoxAnnotation box{2, 2, 3, 3, ""};
    Tensor flat({8, 8}, 0.5);
    CHECK(metric_cnr(flat, box) == 0.0);

    Tensor ind({8, 8}, 0.0);
    for (std::size_t r = 2; r < 5; ++r)
        for (std::size_t c = 2; c < 5; ++c) ind.at(r, c) = 1.0;
    const double v = metric_cnr(ind, box);
    CHECK(std::isfinite(v));
    CHECK(std::abs(v - 1e6) < 1e-3);

    CHECK_THROWS_AS(metric_cnr(flat, BoxAnnotation{0, 0, 8, 8, ""}), MetricError);
    CHECK_THROWS_AS(metric_cnr(flat, BoxAnnotation{6, 6, 4, 4, ""}), MetricError);

    Rng rng(4);
    for (int k = 0; k < 50; ++k) {
        const Tensor m = random_map(rng, 16, 16);
        const auto b = random_box(rng, 16);
        const double got = metric_cnr(m, b);
        CHECK(std::abs(got - oracle::cnr(to_rows(m), {{b.x, b.y, b.width, b.height}})) < 1e-12);
        Tensor aff = m;
        for (auto& x : aff.values()) x = 3.5 * x + 2.0;
        CHECK(std::abs(metric_cnr(aff, b) - got) < 1e-9);
    }
}

TEST_CASE("miou closed forms and oracle") {
    BoxAnnotation box{3, 4, 4, 2, ""};  // 8 of 100 pixels
    Tensor ind({10, 10}, 0.0);
    for (std::size_t r = 4; r < 6; ++r)
        for (std::size_t c = 3; c < 7; ++c) ind.at(r, c) = 1.0;
    const BoxAnnotation boxes[] = {box};
    CHECK(metric_miou(ind, boxes) == 1.0);

    const BoxAnnotation far[] = {{0, 0, 2, 2, ""}};
    CHECK(metric_miou(ind, far) == 0.0);

    // Indicator covering the right half of the box plus as much outside: IoU 4 / 12.
    Tensor half({10, 10}, 0.0);
    for (std::size_t r = 4; r < 6; ++r)
        for (std::size_t c = 5; c < 9; ++c) half.at(r, c) = 1.0;
    CHECK(std::abs(metric_miou(half, boxes) - 4.0 / 12.0) < 1e-15);

    const std::vector<double> none;
    CHECK_THROWS_AS(metric_miou(ind, boxes, none), ParameterError);

    Rng rng(5);
    for (int k = 0; k < 50; ++k) {
        const Tensor m = random_map(rng, 16, 16);
        const BoxAnnotation bs[] = {random_box(rng, 16), random_box(rng, 16)};
        const double got = metric_miou(m, bs);
        const std::vector<oracle::Box> ob = {{bs[0].x, bs[0].y, bs[0].width, bs[0].height},
                                             {bs[1].x, bs[1].y, bs[1].width, bs[1].height}};
        CHECK(std::abs(got - oracle::miou(to_rows(m), ob)) < 1e-12);
        Tensor mono = m;
        for (auto& x : mono.values()) x = std::exp(2.0 * x);
        CHECK(metric_miou(mono, bs) == got);
    }
}

TEST_CASE("pointing game") {
    Tensor m({8, 8}, 0.0);
    m.at(3, 4) = 2.0;
    const BoxAnnotation in[] = {{4, 3, 1, 1, ""}};
    const BoxAnnotation out[] = {{0, 0, 2, 2, ""}, {6, 6, 2, 2, ""}};
    CHECK(metric_pointing_game(m, in) == 1);
    CHECK(metric_pointing_game(m, out) == 0);

    const Tensor c({8, 8}, 1.0);
    CHECK(metric_pointing_game(c, out) == 1);
    CHECK(metric_pointing_game(c, in) == 0);

    Rng rng(6);
    for (int k = 0; k < 50; ++k) {
        const Tensor r = random_map(rng, 12, 12);
        const auto b = random_box(rng, 12);
        const BoxAnnotation bs[] = {b};
        CHECK(metric_pointing_game(r, bs) == oracle::pointing_game(to_rows(r), {{b.x, b.y, b.width, b.height}}));
    }
}

TEST_CASE("auc closed forms") {
    const std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
    const std::vector<int> y = {0, 0, 1, 1};
    CHECK(metric_auc(s, y) == 1.0);
    const std::vector<double> eq(4, 0.3);
    CHECK(metric_auc(eq, y) == 0.5);
    const std::vector<double> six = {0.3, 0.7, 0.5, 0.5, 0.1, 0.9};
    const std::vector<int> y6 = {0, 1, 1, 0, 0, 1};
    CHECK(metric_auc(six, y6) == oracle::auc_pairs(six, y6));
    CHECK(metric_auc(six, y6) == 8.5 / 9.0);
    const std::vector<int> single(4, 1);
    CHECK_THROWS_AS(metric_auc(s, single), MetricError);
}

TEST_CASE("auc against pair counting on small exhaustive inputs") {
    // Every labelling of length n with scores drawn from a 3-level alphabet.
    for (std::size_t n = 2; n <= 7; ++n) {
        std::size_t combos = 1;
        for (std::size_t i = 0; i < n; ++i) combos *= 3;
        for (std::size_t mask = 1; mask + 1 < (1u << n); ++mask) {
            for (std::size_t code = 0; code < combos; code += 1 + n) {
                std::vector<double> s(n);
                std::vector<int> y(n);
                std::size_t c = code;
                for (std::size_t i = 0; i < n; ++i, c /= 3) {
                    s[i] = static_cast<double>(c % 3);
                    y[i] = static_cast<int>((mask >> i) & 1u);
                }
                CHECK(metric_auc(s, y) == oracle::auc_pairs(s, y));
            }
        }
    }
}

TEST_CASE("random patch baseline counts touched patches") {
    CHECK(random_patch_baseline({0, 0, 8, 8, ""}, 64, 8) == 1.0 / 64);
    CHECK(random_patch_baseline({4, 4, 8, 8, ""}, 64, 8) == 4.0 / 64);
    CHECK(random_patch_baseline({0, 0, 64, 64, ""}, 64, 8) == 1.0);
}

TEST_CASE("zero-shot scores") {
    const auto cfg = tiny_config();
    Model model(cfg, Vocabulary::synthetic(), 7);
    const Tensor img({32, 32}, 0.4);
    const PromptPair same[] = {{"there is a disc", "there is a disc"}};
    const auto s = zero_shot_classify(model, img, same);
    CHECK(s.size() == 1);
    CHECK(s[0] == 0.5);

    const auto prompts = default_prompts();
    CHECK(prompts.size() == 4);
    CHECK(prompts[2].positive == "there is a ring");
    CHECK(prompts[2].negative == "there is no ring");
    const PromptPair missing[] = {{"there is a disc", ""}};
    CHECK_THROWS_AS(zero_shot_classify(model, img, missing), InputError);
}

TEST_CASE("per-class auc names an absent class") {
    Tensor scores({3, 2}, 0.5);
    const std::vector<std::vector<int>> labels = {{1, 0}, {0, 0}, {1, 0}};
    const char* names[] = {"disc", "square"};
    try {
        per_class_auc(scores, labels, names);
        FAIL("expected MetricError");
    } catch (const MetricError& e) {
        CHECK(std::string(e.what()).find("square") != std::string::npos);
    }
}

TEST_CASE("duplicated split gives identical auc") {
    Rng rng(8);
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
        y[i] = static_cast<int>(i % 3 == 0);
        s[i] = rng.uniform() + 0.3 * y[i];
    }
    auto s2 = s;
    s2.insert(s2.end(), s.begin(), s.end());
    auto y2 = y;
    y2.insert(y2.end(), y.begin(), y.end());
    CHECK(metric_auc(s2, y2) == metric_auc(s, y));
}

TEST_CASE("linear probe on separable features and with zero epochs") {
    Rng rng(9);
    const std::size_t n = 200, d = 3;
    Tensor x({n, d});
    std::vector<std::vector<int>> y(n, std::vector<int>(4));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 4; ++c) y[i][c] = static_cast<int>(rng.below(2));
        x[i * d + 0] = y[i][0] * 2.0 + rng.normal() * 0.1;
        x[i * d + 1] = y[i][1] - y[i][2] + rng.normal() * 0.1;
        x[i * d + 2] = y[i][3] + rng.normal() * 0.1;
    }
    ProbeConfig pc;
    pc.epochs = 30;
    const auto r = linear_probe(x, y, x, y, pc);
    CHECK(r.auc.per_class[0] > 0.99);
    CHECK(r.auc.per_class[3] > 0.99);

    pc.epochs = 0;
    const auto z = linear_probe(x, y, x, y, pc);
    CHECK(z.auc.macro == 0.5);

    auto bad = y;
    for (auto& row : bad) row[1] = 0;
    CHECK_THROWS_AS(linear_probe(x, bad, x, y, pc), InputError);
}
