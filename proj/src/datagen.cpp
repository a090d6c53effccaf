#include "maco/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "json.hpp"

#include "maco/errors.hpp"

namespace maco {

namespace fs = std::filesystem;
using nlohmann::json;

void SceneSpec::validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw SpecError("data." + field + ": " + why); };
    if (image_size <= 2 * margin) fail("margin", "leaves no interior for object placement");
    if (min_objects < 1) fail("min_objects", "must be at least 1");
    if (max_objects < min_objects) fail("max_objects", "must be at least min_objects");
    if (max_objects > kRegionNames.size())
        fail("max_objects", "objects per image exceed the " + std::to_string(kRegionNames.size()) + "-region grid");
    if (!(min_radius >= 1.0) || max_radius < min_radius) fail("min_radius", "radii must satisfy 1 <= min <= max");
    if (2.0 * max_radius + 1.0 > static_cast<double>(region_side()))
        fail("max_radius", "objects do not fit in a region of side " + std::to_string(region_side()));
    if (!(min_intensity > background) || max_intensity < min_intensity || max_intensity > 1.0 || background < 0.0)
        fail("min_intensity", "need 0 <= background < min_intensity <= max_intensity <= 1");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma", "must be non-negative");
}

std::string sentence_for(const std::string& cls, const std::string& region) {
    return "There is a " + cls + " in the " + region + " region.";
}

namespace {

bool inside_shape(std::size_t cls, double dx, double dy, double r) {
    const double d2 = dx * dx + dy * dy;
    switch (cls) {
        case 0: return d2 <= r * r;                                               // disc
        case 1: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;        // square
        case 2: return d2 <= r * r && d2 >= 0.3 * r * r;                          // ring
        default:                                                                   // cross
            return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    }
}

}  // namespace

PairedSample generate_sample(const SceneSpec& spec, std::uint64_t seed, std::uint64_t index) {
    spec.validate();
    Rng rng(derive_seed(seed, index));
    const std::size_t n = spec.image_size;
    const std::size_t k = spec.min_objects + static_cast<std::size_t>(rng.below(spec.max_objects - spec.min_objects + 1));
    std::array<std::size_t, kRegionNames.size()> regions{};
    for (std::size_t i = 0; i < regions.size(); ++i) regions[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(regions[i], regions[i + rng.below(regions.size() - i)]);

    PairedSample s;
    s.image = Tensor({n, n}, spec.background);
    s.labels.assign(kClassNames.size(), 0);
    const double side = static_cast<double>(spec.region_side());
    std::vector<std::string> sentences;
    for (std::size_t o = 0; o < k; ++o) {
        const std::size_t region = regions[o];
        const auto cls = static_cast<std::size_t>(rng.below(kClassNames.size()));
        const double r = rng.uniform(spec.min_radius, spec.max_radius);
        const double intensity = rng.uniform(spec.min_intensity, spec.max_intensity);
        const double x0 = static_cast<double>(spec.margin) + side * static_cast<double>(region % 3);
        const double y0 = static_cast<double>(spec.margin) + side * static_cast<double>(region / 3);
        const double cx = rng.uniform(x0 + r + 0.5, x0 + side - r - 0.5);
        const double cy = rng.uniform(y0 + r + 0.5, y0 + side - r - 0.5);

        std::size_t min_r = n, min_c = n, max_r = 0, max_c = 0;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
                if (!inside_shape(cls, dx, dy, r)) continue;
                s.image.at(y, x) = intensity;
                min_r = std::min(min_r, y);
                max_r = std::max(max_r, y);
                min_c = std::min(min_c, x);
                max_c = std::max(max_c, x);
            }
        s.labels[cls] = 1;
        s.boxes.push_back({min_c, min_r, max_c - min_c + 1, max_r - min_r + 1, kClassNames[cls]});
        s.phrases.push_back(sentence_for(kClassNames[cls], kRegionNames[region]));
        sentences.push_back(s.phrases.back());
    }
    for (auto& v : s.image.values()) v = std::clamp(v + spec.noise_sigma * rng.normal(), 0.0, 1.0);
    for (std::size_t i = 0; i < sentences.size(); ++i) s.report += (i ? " " : "") + sentences[i];
    return s;
}

std::vector<PairedSample> generate_corpus(const SceneSpec& spec, std::size_t n, std::uint64_t seed,
                                          std::uint64_t first_index) {
    if (n < 1) throw SpecError("generate_corpus: sample count must be at least 1");
    spec.validate();
    std::vector<PairedSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(spec, seed, first_index + i));
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentDraw draw_augmentation(const AugmentConfig& cfg, Rng& rng) {
    AugmentDraw d;
    d.flip = rng.bernoulli(cfg.hflip_prob);
    d.angle_deg = rng.uniform(-cfg.degrees, cfg.degrees);
    d.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
    return d;
}

Tensor apply_affine(const Tensor& image, const AugmentDraw& draw) {
    if (image.rank() != 2 || image.shape()[0] != image.shape()[1])
        throw ShapeError("apply_affine: image " + shape_str(image.shape()) + " is not square");
    const std::size_t n = image.shape()[0];
    const double c = (static_cast<double>(n) - 1.0) / 2.0, hi = static_cast<double>(n) - 1.0;
    const double th = draw.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    Tensor out({n, n});
    auto px = [&](std::size_t y, std::size_t x) { return image.at(y, draw.flip ? n - 1 - x : x); };
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
            const double sx = std::clamp(c + (cs * dx + sn * dy) / draw.scale, 0.0, hi);
            const double sy = std::clamp(c + (-sn * dx + cs * dy) / draw.scale, 0.0, hi);
            const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, n - 1), y1 = std::min(y0 + 1, n - 1);
            const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
            const double a = px(y0, x0), b = px(y0, x1), d = px(y1, x0), e = px(y1, x1);
            const double top = a + fx * (b - a), bot = d + fx * (e - d);
            out.at(y, x) = top + fy * (bot - top);
        }
    return out;
}

Tensor normalize_image(const Tensor& image, double mean, double std) {
    if (!(std > 0.0)) throw ParameterError("normalize_image: std must be positive");
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = (image[i] - mean) / std;
    return out;
}

Tensor augment_image(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
    return normalize_image(apply_affine(image, draw_augmentation(cfg, rng)), cfg.mean, cfg.std);
}

std::vector<std::string> split_sentences(const std::string& report) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        const auto b = cur.find_first_not_of(" \t\n");
        if (b != std::string::npos) out.push_back(cur.substr(b, cur.find_last_not_of(" \t\n") - b + 1));
        cur.clear();
    };
    for (char ch : report) {
        cur.push_back(ch);
        if (ch == '.') flush();
    }
    flush();
    return out;
}

std::string augment_text(const std::string& report, Rng& rng) {
    auto sentences = split_sentences(report);
    if (sentences.empty()) throw InputError("augment_text: report has no sentences");
    const std::size_t n = sentences.size();
    const std::size_t k = 1 + static_cast<std::size_t>(rng.below(n));
    for (std::size_t i = 0; i < k; ++i) std::swap(sentences[i], sentences[i + rng.below(n - i)]);
    std::string out;
    for (std::size_t i = 0; i < k; ++i) out += (i ? " " : "") + sentences[i];
    return out;
}

// ---------------------------------------------------------------------------
// PGM

Tensor read_pgm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open image " + path.string());
    auto token = [&]() {
        std::string t;
        char ch;
        while (in.get(ch)) {
            if (ch == '#') {
                std::string skip;
                std::getline(in, skip);
                continue;
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                if (!t.empty()) break;
                continue;
            }
            t.push_back(ch);
        }
        return t;
    };
    if (token() != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(token());
        h = std::stoul(token());
        maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw IoError(path.string() + ": malformed PGM header");
    }
    if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw IoError(path.string() + ": unsupported PGM header");
    const std::size_t bytes = maxval < 256 ? 1 : 2;
    std::vector<unsigned char> raw(w * h * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw IoError(path.string() + ": truncated PGM data");
    Tensor out({h, w});
    for (std::size_t i = 0; i < w * h; ++i) {
        const double v = bytes == 1 ? raw[i] : static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1]);
        out[i] = v / static_cast<double>(maxval);
    }
    return out;
}

namespace {

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

}  // namespace

void write_pgm8(const fs::path& path, const Tensor& image) {
    auto out = open_out(path);
    out << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
    for (double v : image.values()) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    if (!out) throw IoError("failed writing " + path.string());
}

void write_pgm16(const fs::path& path, const Tensor& map) {
    auto out = open_out(path);
    const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
    const double span = *hi - *lo;
    out << "P5\n" << map.cols() << ' ' << map.rows() << "\n65535\n";
    for (double v : map.values()) {
        const auto q = span > 0.0 ? static_cast<unsigned>(std::lround((v - *lo) / span * 65535.0)) : 0U;
        out.put(static_cast<char>(q >> 8));
        out.put(static_cast<char>(q & 0xFF));
    }
    if (!out) throw IoError("failed writing " + path.string());
}

void write_csv_grid(const fs::path& path, const Tensor& map) {
    auto out = open_out(path);
    out << std::setprecision(17);
    for (std::size_t r = 0; r < map.rows(); ++r) {
        for (std::size_t c = 0; c < map.cols(); ++c) out << (c ? "," : "") << map.at(r, c);
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest

void write_corpus(const fs::path& dir, const std::vector<CorpusEntry>& entries) {
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw IoError("cannot create corpus directory " + (dir / "images").string() + ": " + ec.message());
    auto manifest = open_out(dir / "manifest.jsonl");
    for (const auto& e : entries) {
        write_pgm8(dir / e.image_path, e.sample.image);
        json boxes = json::array();
        for (std::size_t i = 0; i < e.sample.boxes.size(); ++i) {
            const auto& b = e.sample.boxes[i];
            boxes.push_back({{"x", b.x}, {"y", b.y}, {"width", b.width}, {"height", b.height}, {"label", b.label},
                             {"phrase", e.sample.phrases[i]}});
        }
        json line = {{"split", e.split},
                     {"image", e.image_path},
                     {"report", e.sample.report},
                     {"labels", e.sample.labels},
                     {"boxes", boxes}};
        manifest << line.dump() << '\n';
    }
    if (!manifest) throw IoError("failed writing " + (dir / "manifest.jsonl").string());
}

std::vector<CorpusEntry> read_corpus(const fs::path& dir) {
    std::ifstream in(dir / "manifest.jsonl");
    if (!in) throw IoError("cannot open manifest " + (dir / "manifest.jsonl").string());
    std::vector<CorpusEntry> entries;
    std::string text;
    std::size_t line_no = 0;
    while (std::getline(in, text)) {
        ++line_no;
        if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "manifest line " + std::to_string(line_no) + ": ";
        json line;
        try {
            line = json::parse(text);
        } catch (const json::parse_error& e) {
            throw SpecError(where + "invalid JSON (" + e.what() + ")");
        }
        auto require = [&](const char* key, auto check, const char* what) -> const json& {
            if (!line.is_object() || !line.contains(key) || !check(line[key]))
                throw SpecError(where + "field '" + key + "' must be " + what);
            return line[key];
        };
        CorpusEntry e;
        e.split = require("split", [](const json& j) { return j.is_string(); }, "a string").template get<std::string>();
        if (e.split != "train" && e.split != "val" && e.split != "test")
            throw SpecError(where + "unknown split '" + e.split + "'");
        e.image_path = require("image", [](const json& j) { return j.is_string(); }, "a string").template get<std::string>();
        e.sample.report = require("report", [](const json& j) { return j.is_string() && !j.get<std::string>().empty(); },
                                  "a non-empty string")
                              .template get<std::string>();
        const auto& labels = require("labels", [](const json& j) {
            return j.is_array() && j.size() == kClassNames.size() &&
                   std::all_of(j.begin(), j.end(), [](const json& v) { return v.is_number_integer() && (v == 0 || v == 1); });
        }, "a 0/1 array over the four classes");
        e.sample.labels = labels.get<std::vector<int>>();
        const auto& boxes = require("boxes", [](const json& j) { return j.is_array(); }, "an array");
        for (const auto& b : boxes) {
            for (const char* key : {"x", "y", "width", "height"})
                if (!b.contains(key) || !b[key].is_number_unsigned())
                    throw SpecError(where + "box field '" + key + "' must be a non-negative integer");
            if (!b.contains("label") || !b["label"].is_string() || !b.contains("phrase") || !b["phrase"].is_string())
                throw SpecError(where + "box needs string 'label' and 'phrase'");
            BoxAnnotation box{b["x"], b["y"], b["width"], b["height"], b["label"]};
            if (box.width == 0 || box.height == 0) throw SpecError(where + "box extents must be positive");
            if (std::find(kClassNames.begin(), kClassNames.end(), box.label) == kClassNames.end())
                throw SpecError(where + "unknown box label '" + box.label + "'");
            e.sample.boxes.push_back(box);
            e.sample.phrases.push_back(b["phrase"]);
        }
        e.sample.image = read_pgm(dir / e.image_path);
        for (const auto& box : e.sample.boxes)
            if (box.x + box.width > e.sample.image.cols() || box.y + box.height > e.sample.image.rows())
                throw SpecError(where + "box exceeds image bounds");
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<PairedSample> split_of(const std::vector<CorpusEntry>& entries, const std::string& split) {
    std::vector<PairedSample> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e.sample);
    return out;
}

}  // namespace maco
