#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "maco/config.hpp"
#include "maco/datagen.hpp"
#include "maco/encoders.hpp"

namespace maco {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitNumerical = 3;

/// Corpus for the configured seed and sizes; splits use disjoint sample indices.
std::vector<CorpusEntry> build_corpus(const RunConfig& cfg);
/// Samples of one split read from data.dir.
std::vector<PairedSample> load_split(const RunConfig& cfg, const std::string& split);
Model load_model(const RunConfig& cfg);

// Each command writes artifacts under cfg.out_dir (gen-data: cfg.data.dir), reports on `out`
// and returns a process exit code. Errors propagate as maco::Error.
int cmd_gen_data(const RunConfig& cfg, std::ostream& out);
int cmd_pretrain(const RunConfig& cfg, std::ostream& out);
int cmd_ground(const RunConfig& cfg, std::ostream& out);
int cmd_zeroshot(const RunConfig& cfg, std::ostream& out);
int cmd_probe(const RunConfig& cfg, std::ostream& out);
int cmd_dump_weights(const RunConfig& cfg, std::ostream& out);
int cmd_grad_check(const RunConfig& cfg, std::ostream& out);

inline constexpr double kGradCheckTolerance = 1e-5;

/// Runs a named command, mapping exceptions to exit codes with the message on `err`.
int run_command(const std::string& name, const RunConfig& cfg, std::ostream& out, std::ostream& err);

}  // namespace maco
