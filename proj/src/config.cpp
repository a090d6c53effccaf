#include "maco/config.hpp"

#include <cmath>
#include <fstream>

#include "maco/errors.hpp"

namespace maco {

using nlohmann::json;

const char* contrastive_mode_name(ContrastiveMode mode) {
    switch (mode) {
        case ContrastiveMode::kNone: return "none";
        case ContrastiveMode::kInfoNce: return "infonce";
        case ContrastiveMode::kWeighted: return "weighted";
    }
    return "weighted";
}

ObjectiveConfig RunConfig::objective() const {
    ObjectiveConfig o;
    o.lambda = train.lambda;
    o.mode = train.contrastive;
    o.contrastive.symmetric_weighted_loss = train.symmetric_weighted_loss;
    return o;
}

std::filesystem::path RunConfig::checkpoint_path() const {
    return eval.checkpoint.empty() ? std::filesystem::path(out_dir) / "checkpoint.bin"
                                   : std::filesystem::path(eval.checkpoint);
}

json to_json(const RunConfig& c) {
    const auto& s = c.data.scene;
    const auto& m = c.model;
    const auto& t = c.train;
    const auto& e = c.eval;
    return {
        {"seed", c.seed},
        {"out_dir", c.out_dir},
        {"data",
         {{"dir", c.data.dir},
          {"n_train", c.data.n_train},
          {"n_val", c.data.n_val},
          {"n_test", c.data.n_test},
          {"image_size", s.image_size},
          {"margin", s.margin},
          {"min_objects", s.min_objects},
          {"max_objects", s.max_objects},
          {"min_radius", s.min_radius},
          {"max_radius", s.max_radius},
          {"background", s.background},
          {"min_intensity", s.min_intensity},
          {"max_intensity", s.max_intensity},
          {"noise_sigma", s.noise_sigma}}},
        {"model",
         {{"ratio", m.ratio},
          {"patch_size", m.patch_size},
          {"width", m.width},
          {"depth", m.depth},
          {"heads", m.heads},
          {"decoder_depth", m.decoder_depth},
          {"decoder_width", m.decoder_width},
          {"mlp_ratio", m.mlp_ratio},
          {"text_depth", m.text_depth},
          {"max_text_len", m.max_text_len},
          {"embed_dim", m.embed_dim},
          {"projection_bias", m.projection_bias},
          {"positional", m.positional == PositionalEmbedding::kSinCos ? "sincos" : "learned"},
          {"tau_init", m.tau_init},
          {"init_std", m.init_std}}},
        {"train",
         {{"mask_ratio", t.mask_ratio},
          {"lambda", t.lambda},
          {"contrastive", contrastive_mode_name(t.contrastive)},
          {"symmetric_weighted_loss", t.symmetric_weighted_loss},
          {"standardize_targets", t.standardize_targets},
          {"lr", t.lr},
          {"weight_decay", t.adamw.weight_decay},
          {"beta1", t.adamw.beta1},
          {"beta2", t.adamw.beta2},
          {"eps", t.adamw.eps},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"warmup_fraction", t.warmup_fraction},
          {"augment_images", t.augment_images},
          {"augment_text", t.augment_text},
          {"hflip_prob", t.augment.hflip_prob},
          {"degrees", t.augment.degrees},
          {"scale_min", t.augment.scale_min},
          {"scale_max", t.augment.scale_max},
          {"mean", t.augment.mean},
          {"std", t.augment.std},
          {"resume", t.resume}}},
        {"eval",
         {{"checkpoint", e.checkpoint},
          {"split", e.split},
          {"image", e.image},
          {"phrase", e.phrase},
          {"annotations", e.annotations},
          {"tau_w", e.grounding.tau_w},
          {"normalize_features", e.grounding.normalize_features},
          {"probe_epochs", e.probe.epochs},
          {"probe_batch_size", e.probe.batch_size},
          {"probe_lr", e.probe.lr},
          {"probe_momentum", e.probe.momentum},
          {"probe_weight_decay", e.probe.weight_decay},
          {"probe_standardize", e.probe.standardize}}},
    };
}

namespace {

// Overlay `user` onto `base`, using the types in base as the schema.
void overlay(json& base, const json& user, const std::string& path) {
    if (!user.is_object()) throw SpecError((path.empty() ? std::string("config") : path) + ": must be a JSON object");
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key())) throw SpecError(key + ": unknown configuration key");
        json& slot = base[it.key()];
        const json& v = it.value();
        if (slot.is_object()) {
            overlay(slot, v, key);
        } else if (slot.is_number_unsigned()) {
            if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
                throw SpecError(key + ": must be a non-negative integer");
            slot = v.get<std::uint64_t>();
        } else if (slot.is_number()) {
            if (!v.is_number()) throw SpecError(key + ": must be a number");
            slot = v.get<double>();
        } else if (slot.is_boolean()) {
            if (!v.is_boolean()) throw SpecError(key + ": must be true or false");
            slot = v;
        } else if (slot.is_string()) {
            if (!v.is_string()) throw SpecError(key + ": must be a string");
            slot = v;
        }
    }
}

}  // namespace

RunConfig config_from_json(const json& user) {
    json j = to_json(RunConfig{});
    overlay(j, user, "");
    RunConfig c;
    c.seed = j["seed"];
    c.out_dir = j["out_dir"];

    const json& d = j["data"];
    c.data.dir = d["dir"];
    c.data.n_train = d["n_train"];
    c.data.n_val = d["n_val"];
    c.data.n_test = d["n_test"];
    auto& s = c.data.scene;
    s.image_size = d["image_size"];
    s.margin = d["margin"];
    s.min_objects = d["min_objects"];
    s.max_objects = d["max_objects"];
    s.min_radius = d["min_radius"];
    s.max_radius = d["max_radius"];
    s.background = d["background"];
    s.min_intensity = d["min_intensity"];
    s.max_intensity = d["max_intensity"];
    s.noise_sigma = d["noise_sigma"];

    const json& m = j["model"];
    auto& mc = c.model;
    mc.image_size = s.image_size;
    mc.ratio = m["ratio"];
    mc.patch_size = m["patch_size"];
    mc.width = m["width"];
    mc.depth = m["depth"];
    mc.heads = m["heads"];
    mc.decoder_depth = m["decoder_depth"];
    mc.decoder_width = m["decoder_width"];
    mc.mlp_ratio = m["mlp_ratio"];
    mc.text_depth = m["text_depth"];
    mc.max_text_len = m["max_text_len"];
    mc.embed_dim = m["embed_dim"];
    mc.projection_bias = m["projection_bias"];
    const std::string pos = m["positional"];
    if (pos == "sincos") mc.positional = PositionalEmbedding::kSinCos;
    else if (pos == "learned") mc.positional = PositionalEmbedding::kLearned;
    else throw SpecError("model.positional: expected \"sincos\" or \"learned\", got \"" + pos + "\"");
    mc.tau_init = m["tau_init"];
    mc.init_std = m["init_std"];

    const json& t = j["train"];
    auto& tc = c.train;
    tc.mask_ratio = t["mask_ratio"];
    tc.lambda = t["lambda"];
    const std::string mode = t["contrastive"];
    if (mode == "weighted") tc.contrastive = ContrastiveMode::kWeighted;
    else if (mode == "infonce") tc.contrastive = ContrastiveMode::kInfoNce;
    else if (mode == "none") tc.contrastive = ContrastiveMode::kNone;
    else throw SpecError("train.contrastive: expected \"weighted\", \"infonce\" or \"none\", got \"" + mode + "\"");
    tc.symmetric_weighted_loss = t["symmetric_weighted_loss"];
    tc.standardize_targets = t["standardize_targets"];
    tc.lr = t["lr"];
    tc.adamw.weight_decay = t["weight_decay"];
    tc.adamw.beta1 = t["beta1"];
    tc.adamw.beta2 = t["beta2"];
    tc.adamw.eps = t["eps"];
    tc.batch_size = t["batch_size"];
    tc.epochs = t["epochs"];
    tc.warmup_fraction = t["warmup_fraction"];
    tc.augment_images = t["augment_images"];
    tc.augment_text = t["augment_text"];
    tc.augment.hflip_prob = t["hflip_prob"];
    tc.augment.degrees = t["degrees"];
    tc.augment.scale_min = t["scale_min"];
    tc.augment.scale_max = t["scale_max"];
    tc.augment.mean = t["mean"];
    tc.augment.std = t["std"];
    tc.resume = t["resume"];

    const json& e = j["eval"];
    auto& ec = c.eval;
    ec.checkpoint = e["checkpoint"];
    ec.split = e["split"];
    ec.image = e["image"];
    ec.phrase = e["phrase"];
    ec.annotations = e["annotations"];
    ec.grounding.tau_w = e["tau_w"];
    ec.grounding.normalize_features = e["normalize_features"];
    ec.grounding.norm = {tc.augment.mean, tc.augment.std};
    ec.probe.epochs = e["probe_epochs"];
    ec.probe.batch_size = e["probe_batch_size"];
    ec.probe.lr = e["probe_lr"];
    ec.probe.momentum = e["probe_momentum"];
    ec.probe.weight_decay = e["probe_weight_decay"];
    ec.probe.standardize = e["probe_standardize"];
    ec.probe.seed = c.seed;
    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& err) {
        throw SpecError(path.string() + ": invalid JSON (" + err.what() + ")");
    }
    return config_from_json(j);
}

void RunConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw SpecError(field + ": " + why); };
    if (out_dir.empty()) fail("out_dir", "must not be empty");
    if (data.n_train < 2) fail("data.n_train", "must be at least 2");
    if (data.n_test < 1) fail("data.n_test", "must be at least 1");
    data.scene.validate();
    try {
        model.validate();
    } catch (const ParameterError& err) {
        throw SpecError(err.what());
    }
    if (model.image_size != data.scene.image_size) fail("data.image_size", "disagrees with the model input side");

    const auto& t = train;
    if (!(t.mask_ratio > 0.0 && t.mask_ratio < 1.0)) fail("train.mask_ratio", "must lie in (0, 1)");
    const auto n = static_cast<double>(model.n_patches());
    const auto n_sampled = std::llround(n * (1.0 - t.mask_ratio));
    if (n_sampled < 1 || n_sampled >= static_cast<long long>(model.n_patches()))
        fail("train.mask_ratio", "must leave at least one sampled and one masked patch of " +
                                     std::to_string(model.n_patches()));
    if (!(t.lambda >= 0.0 && t.lambda <= 1.0)) fail("train.lambda", "must lie in [0, 1]");
    if (!(t.lr > 0.0)) fail("train.lr", "must be positive");
    if (!(t.adamw.weight_decay >= 0.0)) fail("train.weight_decay", "must be non-negative");
    if (!(t.adamw.beta1 >= 0.0 && t.adamw.beta1 < 1.0)) fail("train.beta1", "must lie in [0, 1)");
    if (!(t.adamw.beta2 >= 0.0 && t.adamw.beta2 < 1.0)) fail("train.beta2", "must lie in [0, 1)");
    if (!(t.adamw.eps > 0.0)) fail("train.eps", "must be positive");
    if (t.batch_size < 2) fail("train.batch_size", "must be at least 2 for a contrastive batch");
    if (t.batch_size > data.n_train) fail("train.batch_size", "exceeds data.n_train");
    if (t.epochs < 1) fail("train.epochs", "must be at least 1");
    if (!(t.warmup_fraction >= 0.0 && t.warmup_fraction < 1.0)) fail("train.warmup_fraction", "must lie in [0, 1)");
    if (!(t.augment.hflip_prob >= 0.0 && t.augment.hflip_prob <= 1.0)) fail("train.hflip_prob", "must lie in [0, 1]");
    if (!(t.augment.degrees >= 0.0 && t.augment.degrees <= 180.0)) fail("train.degrees", "must lie in [0, 180]");
    if (!(t.augment.scale_min > 0.0)) fail("train.scale_min", "must be positive");
    if (!(t.augment.scale_max >= t.augment.scale_min)) fail("train.scale_max", "must be at least scale_min");
    if (!std::isfinite(t.augment.mean)) fail("train.mean", "must be finite");
    if (!(t.augment.std > 0.0)) fail("train.std", "must be positive");

    if (eval.split != "train" && eval.split != "val" && eval.split != "test")
        fail("eval.split", "must be \"train\", \"val\" or \"test\"");
    if (!(eval.grounding.tau_w > 0.0)) fail("eval.tau_w", "must be positive");
    if (eval.probe.batch_size < 1) fail("eval.probe_batch_size", "must be positive");
    if (!(eval.probe.lr > 0.0)) fail("eval.probe_lr", "must be positive");
    if (!(eval.probe.momentum >= 0.0 && eval.probe.momentum < 1.0)) fail("eval.probe_momentum", "must lie in [0, 1)");
    if (!(eval.probe.weight_decay >= 0.0)) fail("eval.probe_weight_decay", "must be non-negative");
}

}  // namespace maco
