#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "maco/errors.hpp"
#include "maco/patching.hpp"

using namespace maco;

namespace {

Tensor random_image(std::size_t side, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t({side, side});
    for (auto& v : t.values()) v = rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("partition counts") {
    auto g = partition(random_image(64, 1), 8);
    CHECK(g.count() == 64);
    CHECK(g.patches.shape() == Shape{64, 64});
    g = partition(Tensor({224, 224}), 16);
    CHECK(g.count() == 196);
    CHECK(g.patches.cols() == 256);
}

TEST_CASE("partition then reassemble is the identity") {
    const Tensor img = random_image(32, 2);
    CHECK(reassemble(partition(img, 4)) == img);
}

TEST_CASE("partition patch order is row-major") {
    Tensor img({4, 4});
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
    const auto g = partition(img, 2);
    // Second patch covers columns 2-3 of rows 0-1.
    CHECK(g.patches.at(1, 0) == 2.0);
    CHECK(g.patches.at(1, 3) == 7.0);
    CHECK(g.patches.at(2, 0) == 8.0);
}

TEST_CASE("partition rejects indivisible sides") {
    CHECK_THROWS_AS(partition(Tensor({10, 10}), 4), ShapeError);
    CHECK_THROWS_AS(partition(Tensor({8, 12}), 4), ShapeError);
}

TEST_CASE("mask counts") {
    Rng rng(7);
    auto plan = sample_mask(64, 0.75, rng);
    CHECK(plan.n_sampled() == 16);
    CHECK(plan.n_masked() == 48);
    CHECK(std::accumulate(plan.position_map.begin(), plan.position_map.end(), 0.0) == 16.0);
    CHECK(std::is_sorted(plan.sampled.begin(), plan.sampled.end()));
    plan = sample_mask(196, 0.75, rng);
    CHECK(plan.n_sampled() == 49);
}

TEST_CASE("mask sampling is seed-determined") {
    Rng a(99), b(99);
    const auto p = sample_mask(64, 0.75, a);
    const auto q = sample_mask(64, 0.75, b);
    CHECK(p.sampled == q.sampled);
    CHECK(p.position_map == q.position_map);
}

TEST_CASE("mask positions are uniformly sampled") {
    Rng rng(123);
    std::vector<int> hits(64, 0);
    const int draws = 20000;
    for (int d = 0; d < draws; ++d)
        for (auto i : sample_mask(64, 0.75, rng).sampled) ++hits[i];
    // Each position is kept with probability 1/4; 5 sigma band.
    const double expect = draws * 0.25, sigma = std::sqrt(draws * 0.25 * 0.75);
    for (int h : hits) CHECK(std::abs(h - expect) < 5 * sigma);
}

TEST_CASE("mask ratio domain") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_mask(64, 0.0, rng), ParameterError);
    CHECK_THROWS_AS(sample_mask(64, 1.0, rng), ParameterError);
    CHECK_THROWS_AS(sample_mask(60, 0.5, rng), ParameterError);
}

TEST_CASE("downsample block means") {
    CHECK(downsample(Tensor::matrix(2, 2, {0, 2, 4, 6}), 2) == Tensor::matrix(1, 1, {3}));
    const Tensor c({8, 8}, 0.25);
    CHECK(downsample(c, 4) == Tensor({2, 2}, 0.25));
    const Tensor img = random_image(16, 3);
    CHECK(downsample(img, 1) == img);
    CHECK_THROWS_AS(downsample(Tensor({6, 6}), 4), ShapeError);
}

TEST_CASE("select with full and single plans") {
    const auto g = partition(random_image(16, 4), 4);
    std::vector<std::size_t> all(16);
    std::iota(all.begin(), all.end(), 0);
    auto s = select_patches(g, plan_from_sampled(16, all));
    CHECK(s.patches == g.patches);
    s = select_patches(g, plan_from_sampled(16, {0}));
    CHECK(s.patches.rows() == 1);
    for (std::size_t j = 0; j < 16; ++j) CHECK(s.patches.at(0, j) == g.patches.at(0, j));
}

TEST_CASE("scatter of select restores sampled rows") {
    const auto g = partition(random_image(32, 5), 4);
    Rng rng(6);
    const auto plan = sample_mask(g.count(), 0.75, rng);
    const auto back = scatter_patches(select_patches(g, plan), g.count(), -1.0);
    for (std::size_t i = 0; i < g.count(); ++i) {
        const bool sampled = plan.position_map[i] == 1.0;
        for (std::size_t j = 0; j < g.patches.cols(); ++j)
            CHECK(back.at(i, j) == (sampled ? g.patches.at(i, j) : -1.0));
    }
}

TEST_CASE("plan_from_sampled rejects repeats") {
    CHECK_THROWS_AS(plan_from_sampled(4, {1, 1}), ShapeError);
    CHECK_THROWS_AS(plan_from_sampled(4, {5}), ShapeError);
}
