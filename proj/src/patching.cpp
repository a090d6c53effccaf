#include "maco/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maco/errors.hpp"

namespace maco {

std::size_t isqrt(std::size_t n) {
    auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
    while (r * r > n) --r;
    while ((r + 1) * (r + 1) <= n) ++r;
    return r;
}

bool is_perfect_square(std::size_t n) {
    const auto r = isqrt(n);
    return r * r == n;
}

PatchGrid partition(const Tensor& image, std::size_t patch_size) {
    if (image.rank() != 2) throw ShapeError("partition: image must be 2-D, got " + shape_str(image.shape()));
    const std::size_t h = image.shape()[0], w = image.shape()[1];
    if (h != w) throw ShapeError("partition: image " + shape_str(image.shape()) + " is not square");
    if (patch_size == 0 || h % patch_size != 0)
        throw ShapeError("partition: side " + std::to_string(h) + " not divisible by patch size " +
                         std::to_string(patch_size));
    PatchGrid grid;
    grid.patch_size = patch_size;
    grid.side = h / patch_size;
    const std::size_t dim = patch_size * patch_size;
    grid.patches = Tensor({grid.count(), dim});
    for (std::size_t pr = 0; pr < grid.side; ++pr)
        for (std::size_t pc = 0; pc < grid.side; ++pc) {
            const std::size_t k = pr * grid.side + pc;
            for (std::size_t y = 0; y < patch_size; ++y)
                for (std::size_t x = 0; x < patch_size; ++x)
                    grid.patches[k * dim + y * patch_size + x] = image.at(pr * patch_size + y, pc * patch_size + x);
        }
    return grid;
}

Tensor reassemble(const PatchGrid& grid) {
    const std::size_t p = grid.patch_size, side = grid.side * p, dim = p * p;
    if (grid.patches.size() != grid.count() * dim)
        throw ShapeError("reassemble: patch tensor " + shape_str(grid.patches.shape()) + " inconsistent with grid");
    Tensor image({side, side});
    for (std::size_t pr = 0; pr < grid.side; ++pr)
        for (std::size_t pc = 0; pc < grid.side; ++pc) {
            const std::size_t k = pr * grid.side + pc;
            for (std::size_t y = 0; y < p; ++y)
                for (std::size_t x = 0; x < p; ++x) image.at(pr * p + y, pc * p + x) = grid.patches[k * dim + y * p + x];
        }
    return image;
}

MaskPlan plan_from_sampled(std::size_t n_total, std::vector<std::size_t> sampled) {
    MaskPlan plan;
    plan.n_total = n_total;
    plan.position_map.assign(n_total, 0.0);
    std::sort(sampled.begin(), sampled.end());
    for (auto i : sampled) {
        if (i >= n_total || plan.position_map[i] != 0.0)
            throw ShapeError("mask plan: invalid or repeated index " + std::to_string(i));
        plan.position_map[i] = 1.0;
    }
    plan.sampled = std::move(sampled);
    for (std::size_t i = 0; i < n_total; ++i)
        if (plan.position_map[i] == 0.0) plan.masked.push_back(i);
    return plan;
}

MaskPlan sample_mask(std::size_t n_total, double mask_ratio, Rng& rng) {
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
        throw ParameterError("sample_mask: mask_ratio must lie in (0, 1), got " + std::to_string(mask_ratio));
    if (!is_perfect_square(n_total) || n_total == 0)
        throw ParameterError("sample_mask: patch count " + std::to_string(n_total) + " is not a perfect square");
    const auto n_sampled = static_cast<std::size_t>(std::llround(static_cast<double>(n_total) * (1.0 - mask_ratio)));
    if (n_sampled < 1 || n_sampled >= n_total)
        throw ParameterError("sample_mask: ratio " + std::to_string(mask_ratio) + " leaves " +
                             std::to_string(n_sampled) + " of " + std::to_string(n_total) + " patches sampled");
    std::vector<std::size_t> order(n_total);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < n_sampled; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n_total - i));
        std::swap(order[i], order[j]);
    }
    order.resize(n_sampled);
    return plan_from_sampled(n_total, std::move(order));
}

Tensor downsample(const Tensor& image, std::size_t ratio) {
    if (image.rank() != 2) throw ShapeError("downsample: image must be 2-D, got " + shape_str(image.shape()));
    const std::size_t h = image.shape()[0], w = image.shape()[1];
    if (ratio == 0 || h % ratio != 0 || w % ratio != 0)
        throw ShapeError("downsample: " + shape_str(image.shape()) + " not divisible by ratio " +
                         std::to_string(ratio));
    if (ratio == 1) return image;
    const std::size_t oh = h / ratio, ow = w / ratio;
    const double inv = 1.0 / static_cast<double>(ratio * ratio);
    Tensor out({oh, ow});
    for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
            double s = 0.0;
            for (std::size_t y = 0; y < ratio; ++y)
                for (std::size_t x = 0; x < ratio; ++x) s += image.at(i * ratio + y, j * ratio + x);
            out.at(i, j) = s * inv;
        }
    return out;
}

SelectedPatches select_patches(const PatchGrid& grid, const MaskPlan& plan) {
    if (plan.n_total != grid.count())
        throw ShapeError("select_patches: plan covers " + std::to_string(plan.n_total) + " patches, grid has " +
                         std::to_string(grid.count()));
    const std::size_t dim = grid.patches.cols();
    SelectedPatches out;
    out.positions = plan.sampled;
    out.patches = Tensor({plan.sampled.size(), dim});
    for (std::size_t r = 0; r < plan.sampled.size(); ++r)
        std::copy_n(grid.patches.values().begin() + static_cast<std::ptrdiff_t>(plan.sampled[r] * dim), dim,
                    out.patches.values().begin() + static_cast<std::ptrdiff_t>(r * dim));
    return out;
}

Tensor scatter_patches(const SelectedPatches& selected, std::size_t n_total, double fill) {
    const std::size_t dim = selected.patches.cols();
    Tensor out({n_total, dim}, fill);
    for (std::size_t r = 0; r < selected.positions.size(); ++r) {
        if (selected.positions[r] >= n_total)
            throw ShapeError("scatter_patches: position " + std::to_string(selected.positions[r]) + " out of range");
        std::copy_n(selected.patches.values().begin() + static_cast<std::ptrdiff_t>(r * dim), dim,
                    out.values().begin() + static_cast<std::ptrdiff_t>(selected.positions[r] * dim));
    }
    return out;
}

}  // namespace maco
