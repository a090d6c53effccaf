#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maco/rng.hpp"
#include "maco/tensor.hpp"

namespace maco {

inline constexpr std::array<const char*, 4> kClassNames = {"disc", "square", "ring", "cross"};
inline constexpr std::array<const char*, 9> kRegionNames = {
    "upper left", "upper middle", "upper right", "middle left", "center",
    "middle right", "lower left", "lower middle", "lower right"};

/// Axis-aligned box in pixels; covers columns [x, x+width) and rows [y, y+height).
struct BoxAnnotation {
    std::size_t x = 0;
    std::size_t y = 0;
    std::size_t width = 0;
    std::size_t height = 0;
    std::string label;

    bool contains(std::size_t row, std::size_t col) const {
        return col >= x && col < x + width && row >= y && row < y + height;
    }
};

struct SceneSpec {
    std::size_t image_size = 64;
    // Objects are placed on a 3x3 grid of named regions tiling the interior square
    // [margin, image_size - margin); the border band stays empty.
    std::size_t margin = 8;
    std::size_t min_objects = 1;
    std::size_t max_objects = 2;
    double min_radius = 4.0;
    double max_radius = 7.0;
    double background = 0.15;
    double min_intensity = 0.6;
    double max_intensity = 1.0;
    double noise_sigma = 0.05;

    /// Throws SpecError naming the offending field.
    void validate() const;
    std::size_t region_side() const { return (image_size - 2 * margin) / 3; }
};

struct PairedSample {
    Tensor image;                  // [H x W] in [0, 1]
    std::string report;
    std::vector<int> labels;       // multi-hot over kClassNames
    std::vector<BoxAnnotation> boxes;
    std::vector<std::string> phrases;  // grounding phrase per box
};

std::string sentence_for(const std::string& cls, const std::string& region);

/// Sample `index` of the stream (spec, seed); independent of every other index.
PairedSample generate_sample(const SceneSpec& spec, std::uint64_t seed, std::uint64_t index);
/// Samples first_index .. first_index+n-1.
std::vector<PairedSample> generate_corpus(const SceneSpec& spec, std::size_t n, std::uint64_t seed,
                                          std::uint64_t first_index = 0);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
    double hflip_prob = 0.5;
    double degrees = 20.0;
    double scale_min = 0.8;
    double scale_max = 1.2;
    double mean = 0.4978;
    double std = 0.2449;
};

struct AugmentDraw {
    bool flip = false;
    double angle_deg = 0.0;
    double scale = 1.0;
};

AugmentDraw draw_augmentation(const AugmentConfig& cfg, Rng& rng);
/// Flip, then rotate/scale about the centre with bilinear resampling and replicated edges.
Tensor apply_affine(const Tensor& image, const AugmentDraw& draw);
Tensor normalize_image(const Tensor& image, double mean, double std);
/// Random flip + affine, then (x - mean) / std.
Tensor augment_image(const Tensor& image, const AugmentConfig& cfg, Rng& rng);

std::vector<std::string> split_sentences(const std::string& report);
/// Random non-empty subset of the sentences in random order.
std::string augment_text(const std::string& report, Rng& rng);

// ---------------------------------------------------------------------------
// On-disk corpus

struct CorpusEntry {
    std::string split;
    std::string image_path;  // relative to the corpus directory
    PairedSample sample;
};

/// Writes <dir>/manifest.jsonl and <dir>/images/<split>_<index>.pgm.
void write_corpus(const std::filesystem::path& dir, const std::vector<CorpusEntry>& entries);
/// Reads and validates the manifest, loading every image.
std::vector<CorpusEntry> read_corpus(const std::filesystem::path& dir);
std::vector<PairedSample> split_of(const std::vector<CorpusEntry>& entries, const std::string& split);

// ---------------------------------------------------------------------------
// PGM images

/// 8-bit or 16-bit binary PGM; values scaled to [0, 1].
Tensor read_pgm(const std::filesystem::path& path);
void write_pgm8(const std::filesystem::path& path, const Tensor& image);
/// Min-max scaled to the 16-bit range.
void write_pgm16(const std::filesystem::path& path, const Tensor& map);
void write_csv_grid(const std::filesystem::path& path, const Tensor& map);

}  // namespace maco
