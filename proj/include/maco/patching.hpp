#pragma once

#include <cstddef>
#include <vector>

#include "maco/rng.hpp"
#include "maco/tensor.hpp"

namespace maco {

/// Outcome of random patch sampling for one instance.
struct MaskPlan {
    std::size_t n_total = 0;
    std::vector<std::size_t> sampled;  // ascending
    std::vector<std::size_t> masked;   // ascending
    // 1 at sampled positions, 0 at masked ones (the masked position map, flattened row-major).
    std::vector<double> position_map;

    std::size_t n_sampled() const { return sampled.size(); }
    std::size_t n_masked() const { return masked.size(); }
};

/// Non-overlapping square patches of a square image, row-major patch order.
struct PatchGrid {
    std::size_t patch_size = 0;
    std::size_t side = 0;  // patches per image side
    Tensor patches;        // [side*side x patch_size*patch_size]

    std::size_t count() const { return side * side; }
};

struct SelectedPatches {
    Tensor patches;                    // [n_sampled x patch_dim]
    std::vector<std::size_t> positions;
};

PatchGrid partition(const Tensor& image, std::size_t patch_size);
Tensor reassemble(const PatchGrid& grid);

/// Uniform subset of round(n_total * (1 - mask_ratio)) patches, without replacement.
MaskPlan sample_mask(std::size_t n_total, double mask_ratio, Rng& rng);
/// Plan that samples exactly the given indices.
MaskPlan plan_from_sampled(std::size_t n_total, std::vector<std::size_t> sampled);

/// Block-mean pooling by an integer factor.
Tensor downsample(const Tensor& image, std::size_t ratio);

SelectedPatches select_patches(const PatchGrid& grid, const MaskPlan& plan);
/// Inverse of select_patches on the sampled support; other rows hold `fill`.
Tensor scatter_patches(const SelectedPatches& selected, std::size_t n_total, double fill = 0.0);

bool is_perfect_square(std::size_t n);
std::size_t isqrt(std::size_t n);

}  // namespace maco
