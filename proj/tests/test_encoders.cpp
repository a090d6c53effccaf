#include <cmath>
#include <numeric>

#include "doctest.h"
#include "maco/encoders.hpp"
#include "maco/errors.hpp"
#include "maco/ops.hpp"

using namespace maco;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.image_size = 32;
    cfg.ratio = 2;
    cfg.patch_size = 4;  // 4x4 grid, N = 16
    cfg.width = 16;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.decoder_depth = 1;
    cfg.decoder_width = 16;
    cfg.mlp_ratio = 2;
    cfg.text_depth = 1;
    cfg.max_text_len = 16;
    cfg.embed_dim = 8;
    return cfg;
}

ImageTokens random_tokens(const ModelConfig& cfg, std::vector<std::size_t> positions, std::uint64_t seed) {
    Rng rng(seed);
    ImageTokens t;
    t.batch = 1;
    t.n_sampled = positions.size();
    t.positions = std::move(positions);
    t.patches = Tensor({t.n_sampled, cfg.lr_patch_dim()});
    for (auto& v : t.patches.values()) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("tokenize direct lookup") {
    const auto vocab = Vocabulary::synthetic();
    const auto ids = tokenize("There is a disc.", vocab, 8);
    REQUIRE(ids.size() == 8);
    CHECK(ids[0] == Vocabulary::kCls);
    CHECK(ids[1] == vocab.id("there"));
    CHECK(ids[2] == vocab.id("is"));
    CHECK(ids[3] == vocab.id("a"));
    CHECK(ids[4] == vocab.id("disc"));
    CHECK(ids[5] == vocab.id("."));
    CHECK(ids[6] == Vocabulary::kPad);
    CHECK(ids[7] == Vocabulary::kPad);
}

TEST_CASE("tokenize unknown word and truncation") {
    const auto vocab = Vocabulary::synthetic();
    auto ids = tokenize("there is a hexagon", vocab, 8);
    CHECK(ids[4] == Vocabulary::kUnk);

    std::string long_text;
    for (int i = 0; i < 100; ++i) long_text += "disc ";
    ids = tokenize(long_text, vocab, 32);
    CHECK(ids.size() == 32);
    CHECK(ids[0] == Vocabulary::kCls);
    CHECK(ids[31] == vocab.id("disc"));
    CHECK_THROWS_AS(tokenize("  ", vocab, 8), InputError);
}

TEST_CASE("model config validation names the field") {
    auto cfg = small_config();
    cfg.heads = 3;
    try {
        cfg.validate();
        FAIL("expected ParameterError");
    } catch (const ParameterError& e) {
        CHECK(std::string(e.what()).find("model.") != std::string::npos);
    }
}

TEST_CASE("sincos tables") {
    const auto t = sincos_table_1d(10, 8);
    CHECK(t.shape() == Shape{10, 8});
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(t.at(0, j)) <= 1.0);
    const auto t2 = sincos_table_2d(4, 16);
    CHECK(t2.shape() == Shape{16, 16});
    CHECK(!(t2 == Tensor({16, 16})));
}

TEST_CASE("image encoder output shape") {
    ModelConfig cfg;
    cfg.image_size = 64;
    cfg.ratio = 1;
    cfg.patch_size = 8;  // N = 64
    cfg.width = 64;
    cfg.depth = 1;
    Model model(cfg, Vocabulary::synthetic(), 1);
    Tape tape;
    Bound m(tape, model, false);
    std::vector<std::size_t> pos(16);
    std::iota(pos.begin(), pos.end(), 0);
    const auto v = encode_image(m, random_tokens(cfg, pos, 2));
    CHECK(v.shape() == Shape{16, 64});
}

TEST_CASE("image encoder is permutation equivariant") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 3);
    auto tokens = random_tokens(cfg, {1, 4, 7, 9, 12}, 4);
    Tape tape;
    Bound m(tape, model, false);
    const Tensor out = encode_image(m, tokens).value();

    // Swap rows 0 and 3 together with their positions.
    auto swapped = tokens;
    std::swap(swapped.positions[0], swapped.positions[3]);
    for (std::size_t j = 0; j < cfg.lr_patch_dim(); ++j)
        std::swap(swapped.patches.at(0, j), swapped.patches.at(3, j));
    const Tensor out2 = encode_image(m, swapped).value();
    for (std::size_t j = 0; j < cfg.width; ++j) {
        CHECK(std::abs(out.at(0, j) - out2.at(3, j)) < 1e-12);
        CHECK(std::abs(out.at(3, j) - out2.at(0, j)) < 1e-12);
        CHECK(std::abs(out.at(2, j) - out2.at(2, j)) < 1e-12);
    }
}

TEST_CASE("all-zero weights make the image encoder input-independent") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 5);
    for (auto& p : model.params().items())
        for (auto& v : p.value.values()) v = 0.0;
    Tape tape;
    Bound m(tape, model, false);
    const Tensor a = encode_image(m, random_tokens(cfg, {0, 5}, 6)).value();
    const Tensor b = encode_image(m, random_tokens(cfg, {0, 5}, 7)).value();
    CHECK(a == b);
}

TEST_CASE("decoder emits N rows of HR patch width") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 8);
    Tape tape;
    Bound m(tape, model, false);
    for (std::size_t ns : {2u, 4u, 8u}) {
        std::vector<std::size_t> pos(ns);
        std::iota(pos.begin(), pos.end(), 3);
        Var v = encode_image(m, random_tokens(cfg, pos, ns));
        Var r = decode_image(m, v, {plan_from_sampled(cfg.n_patches(), pos)});
        CHECK(r.shape() == Shape{cfg.n_patches(), cfg.hr_patch_dim()});
    }
    CHECK(cfg.hr_patch_dim() == 64);
}

TEST_CASE("text encoder shape, determinism and padding invariance") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 9);
    const auto& vocab = model.vocab();
    Tape tape;
    Bound m(tape, model, false);

    TextTokens shortt{tokenize("there is a ring in the center region.", vocab, 10), 1, 10};
    TextTokens longt{tokenize("there is a ring in the center region.", vocab, 16), 1, 16};
    const Tensor a = encode_text(m, shortt).value();
    CHECK(a.shape() == Shape{10, cfg.width});
    const Tensor a2 = encode_text(m, shortt).value();
    CHECK(a == a2);
    const Tensor b = encode_text(m, longt).value();
    for (std::size_t j = 0; j < cfg.width; ++j) CHECK(std::abs(a.at(0, j) - b.at(0, j)) < 1e-12);
}

TEST_CASE("projections are unit vectors") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 10);
    Tape tape;
    Bound m(tape, model, false);
    auto tokens = random_tokens(cfg, {0, 1, 2, 3}, 11);
    tokens.batch = 2;
    tokens.n_sampled = 2;
    Var v_enc = encode_image(m, tokens);
    TextTokens text{tokenize("there is a disc. there is a cross.", model.vocab(), 12), 1, 12};
    auto t2 = tokenize("there is a square.", model.vocab(), 12);
    text.ids.insert(text.ids.end(), t2.begin(), t2.end());
    text.batch = 2;
    Var t_enc = encode_text(m, text);
    const auto p = pool_and_project(m, v_enc, 2, t_enc, 2, 12);
    const Tensor& v = p.v.value();
    const Tensor& t = p.t.value();
    for (std::size_t r = 0; r < 2; ++r) {
        double nv = 0, nt = 0, dot = 0;
        for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
            nv += v.at(r, j) * v.at(r, j);
            nt += t.at(r, j) * t.at(r, j);
            dot += v.at(r, j) * t.at(r, j);
        }
        CHECK(std::abs(std::sqrt(nv) - 1.0) < 1e-12);
        CHECK(std::abs(std::sqrt(nt) - 1.0) < 1e-12);
        CHECK(std::abs(dot) <= 1.0 + 1e-12);
    }
}

TEST_CASE("pool of a single token is that token") {
    Tape tape;
    Var x = tape.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    CHECK(pool_image(x, 1).value() == x.value());
}

TEST_CASE("fresh model has uniform importance head and configured tau") {
    const auto cfg = small_config();
    Model model(cfg, Vocabulary::synthetic(), 12);
    for (double w : model.importance_weights().values()) CHECK(w == 0.0);
    CHECK(std::abs(model.tau() - 0.03) < 1e-15);
}

TEST_CASE("models with the same seed are identical") {
    const auto cfg = small_config();
    Model a(cfg, Vocabulary::synthetic(), 13), b(cfg, Vocabulary::synthetic(), 13);
    for (std::size_t i = 0; i < a.params().size(); ++i)
        CHECK(a.params().items()[i].value == b.params().items()[i].value);
}
