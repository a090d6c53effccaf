#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fixtures.hpp"
#include "maco/checkpoint.hpp"
#include "maco/errors.hpp"
#include "maco/inference.hpp"

using namespace maco;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("maco_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Tensor forward(const Model& model) {
    SceneSpec spec;
    spec.image_size = 32;
    spec.margin = 4;
    spec.min_radius = 2.0;
    spec.max_radius = 3.5;
    const auto samples = generate_corpus(spec, 3, 5);
    std::vector<Tensor> images;
    for (const auto& s : samples) images.push_back(s.image);
    return embed_images(model, images);
}

}  // namespace

TEST_CASE("checkpoint round trip is bitwise") {
    const auto dir = scratch("ckpt");
    const auto cfg = tiny_run(dir.string());
    Model model(cfg.model, Vocabulary::synthetic(), 3);
    Rng rng(4);
    for (auto& v : model.params().get("head.importance").value.values()) v = rng.normal();
    OptimizerState opt;
    Gradients g;
    for (const auto& p : model.params().items()) g.emplace_back(p.value.size(), 0.01);
    adamw_step(model.params(), g, opt, 1e-3);
    rng.uniform();

    save_checkpoint(dir / "c.bin", make_checkpoint(cfg, model, opt, rng, 2, 17));
    const auto ck = load_checkpoint(dir / "c.bin");
    CHECK(ck.epoch == 2);
    CHECK(ck.step == 17);
    CHECK(ck.optimizer.step == opt.step);
    CHECK(ck.optimizer.first == opt.first);
    CHECK(ck.optimizer.second == opt.second);
    CHECK(to_json(ck.config) == to_json(cfg));
    Rng back(0);
    back.set_state(ck.rng_state);
    CHECK(back.uniform() == rng.uniform());

    const Model loaded = model_from_checkpoint(ck);
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        CHECK(loaded.params().items()[i].name == model.params().items()[i].name);
        CHECK(loaded.params().items()[i].value == model.params().items()[i].value);
    }
    CHECK(forward(loaded) == forward(model));
    CHECK(!fs::exists(dir / "c.bin.tmp"));
    fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are state errors") {
    const auto dir = scratch("ckpt_bad");
    const auto cfg = tiny_run(dir.string());
    Model model(cfg.model, Vocabulary::synthetic(), 3);
    save_checkpoint(dir / "c.bin", make_checkpoint(cfg, model, {}, Rng(1), 0, 0));

    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), StateError);

    std::string bytes;
    {
        std::ifstream in(dir / "c.bin", std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    auto write = [&](const std::string& b) { std::ofstream(dir / "x.bin", std::ios::binary) << b; };

    std::string bad_version = bytes;
    bad_version[4] = 9;
    write(bad_version);
    CHECK_THROWS_AS(load_checkpoint(dir / "x.bin"), StateError);

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    write(bad_magic);
    CHECK_THROWS_AS(load_checkpoint(dir / "x.bin"), StateError);

    write(bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir / "x.bin"), StateError);

    write(bytes + "tail");
    CHECK_THROWS_AS(load_checkpoint(dir / "x.bin"), StateError);
    fs::remove_all(dir);
}
