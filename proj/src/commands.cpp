#include "maco/commands.hpp"

#include <array>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "maco/checkpoint.hpp"
#include "maco/errors.hpp"
#include "maco/inference.hpp"
#include "maco/train.hpp"

namespace maco {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    return dir;
}

std::ofstream open_csv(const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << std::setprecision(17);
    return out;
}

std::vector<BoxAnnotation> read_annotations(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotations " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SpecError(path.string() + ": invalid JSON (" + e.what() + ")");
    }
    const json& arr = j.is_object() && j.contains("boxes") ? j["boxes"] : j;
    if (!arr.is_array() || arr.empty()) throw SpecError(path.string() + ": expected a non-empty array of boxes");
    std::vector<BoxAnnotation> boxes;
    for (const auto& b : arr) {
        for (const char* key : {"x", "y", "width", "height"})
            if (!b.contains(key) || !b[key].is_number_unsigned())
                throw SpecError(path.string() + ": box field '" + key + "' must be a non-negative integer");
        boxes.push_back({b["x"], b["y"], b["width"], b["height"], b.value("label", std::string())});
    }
    return boxes;
}

}  // namespace

std::vector<CorpusEntry> build_corpus(const RunConfig& cfg) {
    const auto& d = cfg.data;
    std::vector<CorpusEntry> entries;
    const std::array<std::pair<const char*, std::size_t>, 3> splits = {
        {{"train", d.n_train}, {"val", d.n_val}, {"test", d.n_test}}};
    std::uint64_t first = 0;
    for (const auto& [name, count] : splits) {
        if (count == 0) continue;
        auto samples = generate_corpus(d.scene, count, cfg.seed, first);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            std::ostringstream path;
            path << "images/" << name << '_' << std::setw(5) << std::setfill('0') << i << ".pgm";
            entries.push_back({name, path.str(), std::move(samples[i])});
        }
        first += count;
    }
    return entries;
}

std::vector<PairedSample> load_split(const RunConfig& cfg, const std::string& split) {
    const fs::path dir = cfg.data.dir;
    if (!fs::exists(dir / "manifest.jsonl"))
        throw IoError("no corpus at " + dir.string() + " (run gen-data first)");
    auto samples = split_of(read_corpus(dir), split);
    if (samples.empty()) throw SpecError("data.dir: corpus at " + dir.string() + " has no '" + split + "' samples");
    for (const auto& s : samples)
        if (s.image.rows() != cfg.data.scene.image_size || s.image.cols() != cfg.data.scene.image_size)
            throw SpecError("data.image_size: corpus image " + shape_str(s.image.shape()) + " disagrees with " +
                            std::to_string(cfg.data.scene.image_size));
    return samples;
}

Model load_model(const RunConfig& cfg) { return model_from_checkpoint(load_checkpoint(cfg.checkpoint_path())); }

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
    const auto entries = build_corpus(cfg);
    write_corpus(ensure_dir(cfg.data.dir), entries);
    std::map<std::string, std::size_t> per_split;
    std::array<std::size_t, kClassNames.size()> per_class{};
    std::size_t objects = 0;
    for (const auto& e : entries) {
        ++per_split[e.split];
        objects += e.sample.boxes.size();
        for (std::size_t c = 0; c < per_class.size(); ++c) per_class[c] += static_cast<std::size_t>(e.sample.labels[c]);
    }
    out << "wrote " << entries.size() << " samples to " << cfg.data.dir << " (train " << per_split["train"]
        << ", val " << per_split["val"] << ", test " << per_split["test"] << ")\n";
    out << "objects per image " << static_cast<double>(objects) / static_cast<double>(entries.size()) << "\n";
    for (std::size_t c = 0; c < per_class.size(); ++c)
        out << "  " << kClassNames[c] << ": present in " << per_class[c] << " images\n";
    return kExitOk;
}

int cmd_pretrain(const RunConfig& cfg, std::ostream& out) {
    const auto train = load_split(cfg, "train");
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = pretrain(cfg, train, cfg.out_dir, &out);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "trained " << res.steps.size() << " steps in " << secs << " s; checkpoint "
        << (fs::path(cfg.out_dir) / "checkpoint.bin").string() << "\n";
    return kExitOk;
}

int cmd_ground(const RunConfig& cfg, std::ostream& out) {
    const Model model = load_model(cfg);
    const fs::path dir = ensure_dir(fs::path(cfg.out_dir) / "ground");
    const auto& e = cfg.eval;
    if (!e.image.empty()) {
        if (e.phrase.empty()) throw InputError("eval.phrase: a phrase is required to ground eval.image");
        const Tensor image = read_pgm(e.image);
        const auto g = grounding_map(model, image, e.phrase, e.grounding);
        write_pgm16(dir / "map.pgm", g.map);
        write_csv_grid(dir / "map.csv", g.map);
        write_csv_grid(dir / "patch_scores.csv", g.patch_scores);
        out << "wrote " << (dir / "map.pgm").string() << " (" << g.map.rows() << "x" << g.map.cols() << ")\n";
        if (!e.annotations.empty()) {
            const auto boxes = read_annotations(e.annotations);
            auto csv = open_csv(dir / "metrics.csv");
            const double cnr = metric_cnr(g.map, boxes), miou = metric_miou(g.map, boxes);
            const int pg = metric_pointing_game(g.map, boxes);
            csv << "phrase,cnr,miou,pg\n" << json(e.phrase).dump() << ',' << cnr << ',' << miou << ',' << pg << '\n';
            out << "cnr " << cnr << "  miou " << miou << "  pg " << pg << "\n";
        }
        return kExitOk;
    }
    const auto samples = load_split(cfg, e.split);
    const auto rep = evaluate_grounding(model, samples, e.grounding);
    auto csv = open_csv(dir / "metrics.csv");
    csv << "phrase,cnr,miou,pg\n";
    for (const auto& r : rep.rows) csv << json(r.phrase).dump() << ',' << r.cnr << ',' << r.miou << ',' << r.pg << '\n';
    auto summary = open_csv(dir / "summary.csv");
    summary << "split,tau_w,phrases,cnr,miou,pg,random_patch_baseline\n"
            << e.split << ',' << e.grounding.tau_w << ',' << rep.rows.size() << ',' << rep.cnr << ',' << rep.miou
            << ',' << rep.pg << ',' << rep.baseline << '\n';
    for (std::size_t i = 0; i < std::min<std::size_t>(samples.size(), 4); ++i)
        write_pgm16(dir / ("sample_" + std::to_string(i) + ".pgm"),
                    grounding_map(model, samples[i].image, samples[i].phrases.at(0), e.grounding).map);
    out << e.split << ": " << rep.rows.size() << " phrases  cnr " << rep.cnr << "  miou " << rep.miou << "  pg "
        << rep.pg << "  (random-patch pg " << rep.baseline << ")\n";
    return kExitOk;
}

int cmd_zeroshot(const RunConfig& cfg, std::ostream& out) {
    const Model model = load_model(cfg);
    const auto samples = load_split(cfg, cfg.eval.split);
    std::vector<Tensor> images;
    std::vector<std::vector<int>> labels;
    for (const auto& s : samples) {
        images.push_back(s.image);
        labels.push_back(s.labels);
    }
    const auto prompts = default_prompts();
    const Tensor scores = zero_shot_scores(model, images, prompts, cfg.eval.grounding.norm);
    const auto auc = per_class_auc(scores, labels, kClassNames);
    auto csv = open_csv(ensure_dir(cfg.out_dir) / "zeroshot.csv");
    csv << "class,auc\n";
    for (std::size_t c = 0; c < auc.per_class.size(); ++c) {
        csv << kClassNames[c] << ',' << auc.per_class[c] << '\n';
        out << kClassNames[c] << " auc " << auc.per_class[c] << "\n";
    }
    csv << "macro," << auc.macro << '\n';
    out << "macro auc " << auc.macro << "\n";
    return kExitOk;
}

int cmd_probe(const RunConfig& cfg, std::ostream& out) {
    const Model model = load_model(cfg);
    auto features = [&](const std::vector<PairedSample>& samples, std::vector<std::vector<int>>& labels) {
        std::vector<Tensor> images;
        for (const auto& s : samples) {
            images.push_back(s.image);
            labels.push_back(s.labels);
        }
        return pooled_image_features(model, images, cfg.eval.grounding.norm);
    };
    std::vector<std::vector<int>> ytr, yte;
    const Tensor xtr = features(load_split(cfg, "train"), ytr);
    const Tensor xte = features(load_split(cfg, cfg.eval.split), yte);
    const auto res = linear_probe(xtr, ytr, xte, yte, cfg.eval.probe);
    auto csv = open_csv(ensure_dir(cfg.out_dir) / "probe.csv");
    csv << "class,auc\n";
    for (std::size_t c = 0; c < res.auc.per_class.size(); ++c) {
        csv << kClassNames[c] << ',' << res.auc.per_class[c] << '\n';
        out << kClassNames[c] << " probe auc " << res.auc.per_class[c] << "\n";
    }
    csv << "macro," << res.auc.macro << '\n';
    out << "macro probe auc " << res.auc.macro << " after " << cfg.eval.probe.epochs << " epochs\n";
    return kExitOk;
}

int cmd_dump_weights(const RunConfig& cfg, std::ostream& out) {
    const fs::path ckpt = cfg.checkpoint_path();
    const bool fresh = cfg.eval.checkpoint.empty() && !fs::exists(ckpt);
    const Model model = fresh ? Model(cfg.model, Vocabulary::synthetic(), derive_seed(cfg.seed, 0)) : load_model(cfg);
    if (fresh) out << "no checkpoint at " << ckpt.string() << "; exporting a freshly initialised model\n";
    const auto wm = export_weight_map(model.importance_weights(), cfg.eval.grounding.tau_w);
    const fs::path dir = ensure_dir(cfg.out_dir);
    write_pgm16(dir / "weights.pgm", wm.map);
    write_csv_grid(dir / "weights.csv", wm.map);
    out << "wrote " << (dir / "weights.pgm").string() << " and weights.csv (" << wm.map.rows() << "x"
        << wm.map.cols() << ", tau_w " << cfg.eval.grounding.tau_w << ")\n";
    return kExitOk;
}

int cmd_grad_check(const RunConfig& cfg, std::ostream& out) {
    auto cases = registered_op_checks(cfg.seed);
    for (auto& c : objective_grad_checks(cfg.seed)) cases.push_back(std::move(c));
    auto csv = open_csv(ensure_dir(cfg.out_dir) / "grad_check.csv");
    csv << "case,max_rel_error,pass\n";
    std::size_t failures = 0;
    double worst = 0.0;
    for (const auto& c : cases) {
        const auto r = finite_diff_check(c.fn, c.input);
        const bool ok = r.max_rel_error < kGradCheckTolerance;
        failures += !ok;
        worst = std::max(worst, r.max_rel_error);
        csv << c.name << ',' << r.max_rel_error << ',' << ok << '\n';
        if (!ok)
            out << "FAIL " << c.name << " max rel error " << r.max_rel_error << " at " << r.worst_index
                << " (analytic " << r.analytic[r.worst_index] << ", numeric " << r.numeric[r.worst_index] << ")\n";
    }
    out << cases.size() << " cases, " << failures << " failed, worst rel error " << worst << "\n";
    return failures ? kExitNumerical : kExitOk;
}

int run_command(const std::string& name, const RunConfig& cfg, std::ostream& out, std::ostream& err) {
    try {
        if (name == "gen-data") return cmd_gen_data(cfg, out);
        if (name == "pretrain") return cmd_pretrain(cfg, out);
        if (name == "ground") return cmd_ground(cfg, out);
        if (name == "zeroshot") return cmd_zeroshot(cfg, out);
        if (name == "probe") return cmd_probe(cfg, out);
        if (name == "dump-weights") return cmd_dump_weights(cfg, out);
        if (name == "grad-check") return cmd_grad_check(cfg, out);
        err << "unknown command " << name << "\n";
        return kExitValidation;
    } catch (const TrainingError& e) {
        err << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const OracleError& e) {
        err << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

}  // namespace maco
