#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "maco/commands.hpp"
#include "maco/config.hpp"
#include "maco/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"maco: masked-contrastive vision-language pretraining on a synthetic corpus"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    const char* commands[][2] = {
        {"gen-data", "generate the paired image/report corpus"},
        {"pretrain", "pretrain encoders and importance head"},
        {"ground", "phrase-grounding maps and metrics"},
        {"zeroshot", "zero-shot classification AUC"},
        {"probe", "linear probe on frozen image features"},
        {"dump-weights", "export the importance-head weight map"},
        {"grad-check", "finite-difference gradient checks"},
    };
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "JSON run configuration")->required();
        sub->add_option("--seed", seed, "override the configured seed");
        sub->add_option("--out", out_dir, "override the output directory");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? maco::kExitOk : maco::kExitValidation;
    }

    const std::string name = app.get_subcommands().front()->get_name();
    maco::RunConfig cfg;
    try {
        auto j = [&] {
            std::ifstream in(config_path);
            if (!in) throw maco::IoError("cannot open config " + config_path);
            try {
                return nlohmann::json::parse(in);
            } catch (const nlohmann::json::parse_error& e) {
                throw maco::SpecError(config_path + ": invalid JSON (" + e.what() + ")");
            }
        }();
        if (seed) j["seed"] = *seed;
        if (out_dir) {
            if (name == "gen-data") j["data"]["dir"] = *out_dir;
            else j["out_dir"] = *out_dir;
        }
        cfg = maco::config_from_json(j);
    } catch (const maco::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return maco::kExitValidation;
    }
    return maco::run_command(name, cfg, std::cout, std::cerr);
}
