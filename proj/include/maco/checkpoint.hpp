#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maco/config.hpp"
#include "maco/encoders.hpp"
#include "maco/optim.hpp"

namespace maco {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to evaluate a model or resume its training bit-for-bit.
struct Checkpoint {
    RunConfig config;
    std::vector<std::string> vocabulary;  // words after the special tokens
    ParameterSet params;
    OptimizerState optimizer;
    std::string rng_state;
    std::uint64_t epoch = 0;  // completed epochs
    std::uint64_t step = 0;   // completed optimizer steps
};

Checkpoint make_checkpoint(const RunConfig& cfg, const Model& model, const OptimizerState& opt, const Rng& rng,
                           std::uint64_t epoch, std::uint64_t step);

/// Binary layout, little-endian:
///   "MACO" u32 version | str config_json | u64 epoch u64 step | str rng
///   u64 n_words {str} | u64 n_params {str name, u32 rank, u64 dims[rank], f64 values}
///   u64 opt_step u64 n_slots {u64 len f64[len]} x2
/// where str is u64 length + bytes. Written to a sibling temp file, then renamed.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Model model_from_checkpoint(const Checkpoint& ckpt);
Vocabulary vocabulary_from_words(const std::vector<std::string>& words);

}  // namespace maco
