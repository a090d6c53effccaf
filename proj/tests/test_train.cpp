#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "maco/checkpoint.hpp"
#include "maco/errors.hpp"
#include "maco/train.hpp"

using namespace maco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("maco_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::vector<double>> read_rows(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

std::vector<PairedSample> train_set(const RunConfig& cfg) {
    return generate_corpus(cfg.data.scene, cfg.data.n_train, cfg.seed);
}

}  // namespace

TEST_CASE("prepared batch layout") {
    const auto cfg = tiny_run("unused");
    Model model(cfg.model, Vocabulary::synthetic(), 1);
    const auto samples = train_set(cfg);
    const PairedSample* ptrs[3] = {&samples[0], &samples[1], &samples[2]};
    Rng rng(2);
    const auto b = prepare_batch(cfg, model, ptrs, rng);
    CHECK(b.batch == 3);
    CHECK(b.image.n_sampled == 4);
    CHECK(b.image.patches.shape() == Shape{12, 16});
    CHECK(b.targets.shape() == Shape{48, 64});
    CHECK(b.position_maps.shape() == Shape{3, 16});
    CHECK(b.text.ids.size() == 3 * 24);
    for (std::size_t i = 0; i < 3; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 16; ++j) s += b.position_maps.at(i, j);
        CHECK(s == 4.0);
        CHECK(b.text.ids[i * 24] == Vocabulary::kCls);
    }
}

TEST_CASE("pretrain writes consistent logs and checkpoint") {
    const auto dir = scratch("pretrain");
    const auto cfg = tiny_run(dir.string());
    const auto res = pretrain(cfg, train_set(cfg), dir);
    CHECK(fs::exists(dir / "checkpoint.bin"));
    CHECK(fs::exists(dir / "config.json"));
    CHECK(fs::exists(dir / "epochs.csv"));
    CHECK(slurp(dir / "train_log.csv").rfind(kStepLogHeader, 0) == 0);

    const auto rows = read_rows(dir / "train_log.csv");
    CHECK(rows.size() == 2 * (32 / 8));
    CHECK(rows.size() == res.steps.size());
    for (const auto& r : rows) {
        REQUIRE(r.size() == 8);
        for (double v : r) CHECK(std::isfinite(v));
        CHECK(std::abs(r[5] - (cfg.train.lambda * r[3] + (1 - cfg.train.lambda) * r[4])) <= 1e-12);
    }
    // Two of the eight steps are warmup, which starts from zero.
    CHECK(rows.front()[2] == 0.0);
    CHECK(rows[2][2] == cfg.train.lr);

    const auto ck = load_checkpoint(dir / "checkpoint.bin");
    CHECK(ck.epoch == 2);
    CHECK(ck.step == rows.size());
    fs::remove_all(dir);
}

TEST_CASE("same seed gives identical logs") {
    const auto a = scratch("det_a"), b = scratch("det_b");
    auto ca = tiny_run(a.string()), cb = tiny_run(b.string());
    pretrain(ca, train_set(ca), a);
    pretrain(cb, train_set(cb), b);
    CHECK(slurp(a / "train_log.csv") == slurp(b / "train_log.csv"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("resume continues bit-for-bit") {
    const auto full = scratch("resume_full"), part = scratch("resume_part");
    auto cfg = tiny_run(full.string());
    const auto data = train_set(cfg);
    const auto straight = pretrain(cfg, data, full);

    auto first = tiny_run(part.string());
    const auto partial = pretrain(first, data, part, nullptr, [](const EpochRecord&) { return false; });
    CHECK(partial.epochs.size() == 1);
    auto rest = tiny_run(part.string());
    rest.train.resume = true;
    const auto resumed = pretrain(rest, data, part);
    for (std::size_t i = 0; i < straight.model.params().size(); ++i)
        CHECK(straight.model.params().items()[i].value == resumed.model.params().items()[i].value);
    CHECK(slurp(full / "train_log.csv") == slurp(part / "train_log.csv"));
    fs::remove_all(full);
    fs::remove_all(part);
}

TEST_CASE("pure pretext run leaves the projections untouched") {
    auto cfg = tiny_run("unused");
    cfg.train.lambda = 1.0;
    cfg.train.epochs = 1;
    const Model init(cfg.model, Vocabulary::synthetic(), derive_seed(cfg.seed, 0));
    const auto res = pretrain(cfg, train_set(cfg), {});
    for (const char* name : {"proj.image.weight", "proj.text.weight", "head.importance", "log_tau"})
        CHECK(res.model.params().get(name).value == init.params().get(name).value);
    CHECK(!(res.model.params().get("image.patch_embed.weight").value ==
            init.params().get("image.patch_embed.weight").value));
    for (const auto& s : res.steps) CHECK(std::isfinite(s.contrastive));
}

TEST_CASE("objective gradient check on the toy model") {
    for (const auto& c : objective_grad_checks(42)) {
        CAPTURE(c.name);
        CHECK(finite_diff_check(c.fn, c.input).max_rel_error < 1e-5);
    }
}

TEST_CASE("batch larger than the training set is rejected") {
    auto cfg = tiny_run("unused");
    cfg.train.batch_size = 16;
    const auto data = generate_corpus(cfg.data.scene, 8, 1);
    CHECK_THROWS_AS(pretrain(cfg, data, {}), SpecError);
}
