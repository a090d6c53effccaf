#include "maco/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "maco/errors.hpp"

namespace maco {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'M', 'A', 'C', 'O'};
constexpr std::uint64_t kMaxString = 1ULL << 30;

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

class Writer {
public:
    explicit Writer(std::ofstream& out) : out_(out) {}
    template <typename T>
    void put(T v) {
        v = to_little(v);
        out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void str(const std::string& s) {
        put<std::uint64_t>(s.size());
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void doubles(const std::vector<double>& v) {
        for (double x : v) put(x);
    }

private:
    std::ofstream& out_;
};

class Reader {
public:
    Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
    template <typename T>
    T get() {
        T v;
        in_.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in_) throw StateError(path_ + ": truncated checkpoint");
        return to_little(v);
    }
    std::uint64_t count(std::uint64_t limit, const char* what) {
        const auto n = get<std::uint64_t>();
        if (n > limit) throw StateError(path_ + ": implausible " + what + " " + std::to_string(n));
        return n;
    }
    std::string str() {
        std::string s(count(kMaxString, "string length"), '\0');
        in_.read(s.data(), static_cast<std::streamsize>(s.size()));
        if (!in_) throw StateError(path_ + ": truncated checkpoint");
        return s;
    }
    std::vector<double> doubles(std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = get<double>();
        return v;
    }

private:
    std::ifstream& in_;
    std::string path_;
};

}  // namespace

Vocabulary vocabulary_from_words(const std::vector<std::string>& words) { return Vocabulary(words); }

Checkpoint make_checkpoint(const RunConfig& cfg, const Model& model, const OptimizerState& opt, const Rng& rng,
                           std::uint64_t epoch, std::uint64_t step) {
    Checkpoint c;
    c.config = cfg;
    for (std::size_t i = 3; i < model.vocab().size(); ++i) c.vocabulary.push_back(model.vocab().token(static_cast<int>(i)));
    c.params = model.params();
    c.optimizer = opt;
    c.rng_state = rng.state();
    c.epoch = epoch;
    c.step = step;
    return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        Writer w(out);
        out.write(kMagic, 4);
        w.put<std::uint32_t>(kCheckpointVersion);
        w.str(to_json(ckpt.config).dump());
        w.put<std::uint64_t>(ckpt.epoch);
        w.put<std::uint64_t>(ckpt.step);
        w.str(ckpt.rng_state);
        w.put<std::uint64_t>(ckpt.vocabulary.size());
        for (const auto& word : ckpt.vocabulary) w.str(word);
        w.put<std::uint64_t>(ckpt.params.size());
        for (const auto& p : ckpt.params.items()) {
            w.str(p.name);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
            for (auto d : p.value.shape()) w.put<std::uint64_t>(d);
            w.doubles(p.value.storage());
        }
        w.put<std::uint64_t>(ckpt.optimizer.step);
        for (const auto* slots : {&ckpt.optimizer.first, &ckpt.optimizer.second}) {
            w.put<std::uint64_t>(slots->size());
            for (const auto& s : *slots) {
                w.put<std::uint64_t>(s.size());
                w.doubles(s);
            }
        }
        out.flush();
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StateError("checkpoint not found: " + path.string());
    Reader r(in, path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw StateError(path.string() + ": not a checkpoint file");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw StateError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    const std::string cfg_text = r.str();
    try {
        c.config = config_from_json(nlohmann::json::parse(cfg_text));
    } catch (const nlohmann::json::exception& e) {
        throw StateError(path.string() + ": corrupt configuration snapshot (" + e.what() + ")");
    }
    c.epoch = r.get<std::uint64_t>();
    c.step = r.get<std::uint64_t>();
    c.rng_state = r.str();
    const auto n_words = r.count(1 << 20, "vocabulary size");
    for (std::uint64_t i = 0; i < n_words; ++i) c.vocabulary.push_back(r.str());
    const auto n_params = r.count(1 << 20, "parameter count");
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw StateError(path.string() + ": parameter " + name + " has rank " + std::to_string(rank));
        Shape shape(rank);
        std::uint64_t total = 1;
        for (auto& d : shape) {
            d = r.count(1ULL << 32, "dimension");
            total *= d;
        }
        if (total > (1ULL << 32)) throw StateError(path.string() + ": parameter " + name + " is implausibly large");
        c.params.add(name, Tensor(shape, r.doubles(total)));
    }
    c.optimizer.step = r.get<std::uint64_t>();
    for (auto* slots : {&c.optimizer.first, &c.optimizer.second}) {
        const auto n = r.count(1 << 20, "optimizer slot count");
        for (std::uint64_t i = 0; i < n; ++i) slots->push_back(r.doubles(r.count(1ULL << 32, "optimizer slot size")));
    }
    if (in.peek() != std::char_traits<char>::eof()) throw StateError(path.string() + ": trailing bytes after checkpoint");
    return c;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    return Model(ckpt.config.model, vocabulary_from_words(ckpt.vocabulary), ckpt.params);
}

}  // namespace maco
