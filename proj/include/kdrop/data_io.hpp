#pragma once

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "kdrop/bayes_dropout.hpp"
#include "kdrop/dataset.hpp"
#include "kdrop/error.hpp"
#include "kdrop/random.hpp"
#include "kdrop/training.hpp"

namespace kdrop {

static_assert(std::endian::native == std::endian::little, "kdrop file formats assume a little-endian host");

namespace io {

using Bytes = std::vector<unsigned char>;

template <typename T>
void put(Bytes &out, T value) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

inline void put_bytes(Bytes &out, std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

/// Bounds-checked little-endian reader over a byte buffer.
class Reader {
public:
    Reader(const Bytes &bytes, std::size_t limit) : bytes_(bytes), limit_(limit) {}

    template <typename T>
    T get(const char *what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string get_string(std::size_t n, const char *what) {
        need(n, what);
        std::string s(reinterpret_cast<const char *>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char *what) {
        if (limit_ - pos_ < n || pos_ > limit_)
            throw FormatError(FormatFault::Truncated, std::string("truncated while reading ") + what,
                              static_cast<long long>(pos_));
    }

    const Bytes &bytes_;
    std::size_t limit_;
    std::size_t pos_ = 0;
};

inline Bytes read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatFault::Io, "cannot open '" + path.string() + "'");
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temp file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path &path, const Bytes &bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + path.string() + "'");
        out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("write failed for '" + path.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw DataError("cannot write '" + path.string() + "'");
    }
}

inline void write_text_atomic(const std::filesystem::path &path, std::string_view text) {
    write_file_atomic(path, Bytes(text.begin(), text.end()));
}

inline std::uint64_t checksum(const Bytes &bytes, std::size_t n) {
    return fnv1a(std::string_view(reinterpret_cast<const char *>(bytes.data()), n));
}

} // namespace io

// ---------------------------------------------------------------------------
// EMBF v1
//
//   "EMBF" | u32 version | u32 n | u32 dim | u32 json_len | json metadata
//   | n*dim f32 row-major | u64 FNV-1a of all preceding bytes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kEmbfVersion = 1;

inline io::Bytes encode_embf(const EmbeddingDataset &data) {
    data.validate();
    nlohmann::json meta;
    meta["name"] = data.name;
    meta["classes"] = data.classes;
    auto &ids = meta["ids"] = nlohmann::json::array();
    auto &labels = meta["labels"] = nlohmann::json::array();
    for (const auto &inst : data.instances) {
        ids.push_back(inst.id);
        labels.push_back(inst.label);
    }
    if (!data.provenance.is_null()) meta["provenance"] = data.provenance;
    const std::string json = meta.dump();

    io::Bytes out;
    out.reserve(20 + json.size() + data.size() * data.dim * 4 + 8);
    io::put_bytes(out, "EMBF");
    io::put<std::uint32_t>(out, kEmbfVersion);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(data.size()));
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(data.dim));
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
    io::put_bytes(out, json);
    for (const auto &inst : data.instances)
        for (float v : inst.vector) io::put<float>(out, v);
    io::put<std::uint64_t>(out, io::checksum(out, out.size()));
    return out;
}

inline EmbeddingDataset decode_embf(const io::Bytes &bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "EMBF", 4) != 0)
        throw FormatError(FormatFault::BadMagic, "EMBF: bad magic", 0);
    io::Reader rd(bytes, bytes.size());
    rd.get_string(4, "magic");
    const auto version = rd.get<std::uint32_t>("version");
    if (version != kEmbfVersion)
        throw FormatError(FormatFault::Version, "EMBF: unsupported version " + std::to_string(version), 4);
    const auto n = rd.get<std::uint32_t>("instance count");
    const auto dim = rd.get<std::uint32_t>("dim");
    const auto json_len = rd.get<std::uint32_t>("metadata length");
    const std::size_t payload = static_cast<std::size_t>(n) * dim * 4;
    const std::size_t expected = 20 + static_cast<std::size_t>(json_len) + payload + 8;
    if (bytes.size() < expected)
        throw FormatError(FormatFault::Truncated,
                          "EMBF: truncated payload (" + std::to_string(bytes.size()) + " of " +
                              std::to_string(expected) + " bytes)",
                          static_cast<long long>(bytes.size()));
    if (bytes.size() > expected)
        throw FormatError(FormatFault::Invalid, "EMBF: trailing bytes after checksum", static_cast<long long>(expected));
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + expected - 8, 8);
    if (stored != io::checksum(bytes, expected - 8))
        throw FormatError(FormatFault::Checksum, "EMBF: checksum mismatch", static_cast<long long>(expected - 8));

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(rd.get_string(json_len, "metadata"));
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(FormatFault::Invalid, std::string("EMBF: bad metadata: ") + e.what(), 20);
    }

    EmbeddingDataset data;
    data.dim = dim;
    try {
        data.name = meta.at("name").get<std::string>();
        data.classes = meta.at("classes").get<std::vector<std::string>>();
        const auto ids = meta.at("ids").get<std::vector<std::string>>();
        const auto labels = meta.at("labels").get<std::vector<std::size_t>>();
        if (ids.size() != n || labels.size() != n)
            throw FormatError(FormatFault::Invalid, "EMBF: metadata ids/labels do not match n", 20);
        if (meta.contains("provenance")) data.provenance = meta["provenance"];
        data.instances.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            data.instances[i].id = ids[i];
            data.instances[i].label = labels[i];
        }
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(FormatFault::Invalid, std::string("EMBF: bad metadata: ") + e.what(), 20);
    }

    std::unordered_map<std::string, std::size_t> seen;
    for (std::size_t i = 0; i < n; ++i) {
        auto &inst = data.instances[i];
        inst.vector.resize(dim);
        for (auto &v : inst.vector) v = rd.get<float>("vectors");
        for (float v : inst.vector)
            if (!std::isfinite(v)) throw FormatError(FormatFault::Invalid, "EMBF: non-finite value in instance '" + inst.id + "'");
        if (inst.label >= data.classes.size())
            throw FormatError(FormatFault::Invalid, "EMBF: label out of range in instance '" + inst.id + "'");
        if (!seen.emplace(inst.id, i).second)
            throw FormatError(FormatFault::Invalid, "EMBF: duplicate id '" + inst.id + "'");
    }
    data.validate();
    return data;
}

inline void write_embf(const EmbeddingDataset &data, const std::filesystem::path &path) {
    io::write_file_atomic(path, encode_embf(data));
}

inline EmbeddingDataset read_embf(const std::filesystem::path &path) { return decode_embf(io::read_file(path)); }

// ---------------------------------------------------------------------------
// JSONL import
// ---------------------------------------------------------------------------

struct TextRow {
    std::string id;
    std::string text;
    std::size_t label = 0;
};

struct TextTable {
    std::vector<TextRow> rows;
    std::vector<std::string> labels; // first-appearance order
};

/// Reads one JSON object per line. Rows without `id_field` get their 1-based
/// line number as id. Blank lines are skipped.
inline TextTable import_jsonl(std::istream &in, const std::string &text_field, const std::string &label_field,
                              const std::string &id_field = "id") {
    TextTable table;
    std::map<std::string, std::size_t> label_index;
    std::map<std::string, std::size_t> id_line;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception &) {
            throw DataError("line " + std::to_string(line_no) + ": invalid JSON");
        }
        if (!obj.is_object()) throw DataError("line " + std::to_string(line_no) + ": not a JSON object");
        for (const auto *field : {&text_field, &label_field})
            if (!obj.contains(*field))
                throw DataError("line " + std::to_string(line_no) + ": missing field '" + *field + "'");
        auto as_string = [](const nlohmann::json &v) { return v.is_string() ? v.get<std::string>() : v.dump(); };

        TextRow row;
        row.text = as_string(obj[text_field]);
        row.id = obj.contains(id_field) ? as_string(obj[id_field]) : std::to_string(line_no);
        const auto label = as_string(obj[label_field]);
        auto [it, fresh] = label_index.emplace(label, table.labels.size());
        if (fresh) table.labels.push_back(label);
        row.label = it->second;

        auto [prev, unique] = id_line.emplace(row.id, line_no);
        if (!unique)
            throw DataError("duplicate id '" + row.id + "' on lines " + std::to_string(prev->second) + " and " +
                            std::to_string(line_no));
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline TextTable import_jsonl(const std::filesystem::path &path, const std::string &text_field,
                              const std::string &label_field, const std::string &id_field = "id") {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return import_jsonl(in, text_field, label_field, id_field);
}

// ---------------------------------------------------------------------------
// Model artifacts
//
//   "KDMF" | u32 version | u32 json_len | json header | u64 count | count f64
//   | u64 FNV-1a of all preceding bytes
//
// The header carries configuration and shapes; the f64 payload holds, in
// order, each layer's weights then bias, followed by the RFF frequencies and
// phases when the kernel uses them.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kModelVersion = 1;

struct Provenance {
    std::string dataset;
    std::string split;
    std::uint64_t seed = 0;
    std::string timestamp;

    bool operator==(const Provenance &) const = default;
};

struct ModelArtifact {
    DropoutHead head;
    TrainConfig train_config;
    std::uint32_t format_version = kModelVersion;
    Provenance provenance;
};

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline nlohmann::json to_json(const KernelConfig &k) {
    return {{"kind", std::string(to_string(k.kind))}, {"gamma", k.gamma},     {"rff_dim", k.rff_dim},
            {"rff_seed", k.rff_seed},                 {"scale", k.scale},     {"concat_original", k.concat_original}};
}

inline KernelConfig kernel_from_json(const nlohmann::json &j, KernelConfig k = {}) {
    if (j.contains("kind")) k.kind = parse_kernel_kind(j["kind"].get<std::string>());
    if (j.contains("gamma")) k.gamma = j["gamma"].get<double>();
    if (j.contains("rff_dim")) k.rff_dim = j["rff_dim"].get<std::size_t>();
    if (j.contains("rff_seed")) k.rff_seed = j["rff_seed"].get<std::uint64_t>();
    if (j.contains("scale")) k.scale = j["scale"].get<double>();
    if (j.contains("concat_original")) k.concat_original = j["concat_original"].get<bool>();
    return k;
}

inline nlohmann::json to_json(const TrainConfig &c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"adam_epsilon", c.adam_epsilon},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"l2", c.l2},
            {"batch_size", c.batch_size},
            {"early_stop_patience", c.early_stop_patience},
            {"validation_fraction", c.validation_fraction},
            {"seed", c.seed},
            {"mc_passes_eval", c.mc_passes_eval},
            {"use_posterior", c.use_posterior}};
}

inline TrainConfig train_config_from_json(const nlohmann::json &j, TrainConfig c = {}) {
    auto opt = [&](const char *key, auto &field) {
        if (j.contains(key)) field = j[key].get<std::remove_reference_t<decltype(field)>>();
    };
    opt("epochs", c.epochs);
    opt("learning_rate", c.learning_rate);
    opt("adam_epsilon", c.adam_epsilon);
    opt("adam_beta1", c.adam_beta1);
    opt("adam_beta2", c.adam_beta2);
    opt("l2", c.l2);
    opt("batch_size", c.batch_size);
    opt("early_stop_patience", c.early_stop_patience);
    opt("validation_fraction", c.validation_fraction);
    opt("seed", c.seed);
    opt("mc_passes_eval", c.mc_passes_eval);
    opt("use_posterior", c.use_posterior);
    return c;
}

inline io::Bytes encode_model(const ModelArtifact &art, std::uint32_t version = kModelVersion) {
    const auto &head = art.head;
    head.validate();
    nlohmann::json hdr;
    hdr["kernel"] = to_json(head.kernel.config());
    hdr["embedding_dim"] = head.embedding_dim();
    hdr["num_classes"] = head.num_classes;
    hdr["tau"] = head.tau;
    hdr["l2"] = head.l2;
    hdr["activation"] = "relu";
    hdr["seed"] = head.seed;
    auto &layers = hdr["layers"] = nlohmann::json::array();
    std::vector<double> payload;
    for (const auto &l : head.layers) {
        nlohmann::json lj{{"in_dim", l.in_dim()},
                          {"out_dim", l.out_dim()},
                          {"alpha", l.beta_state.alpha},
                          {"beta", l.beta_state.beta},
                          {"keep_count", l.beta_state.keep_count},
                          {"drop_count", l.beta_state.drop_count}};
        lj["fixed_keep_prob"] = l.fixed_keep_prob ? nlohmann::json(*l.fixed_keep_prob) : nlohmann::json();
        layers.push_back(lj);
        payload.insert(payload.end(), l.weights.data.begin(), l.weights.data.end());
        payload.insert(payload.end(), l.bias.begin(), l.bias.end());
    }
    const auto &fm = head.kernel;
    payload.insert(payload.end(), fm.frequencies().data.begin(), fm.frequencies().data.end());
    payload.insert(payload.end(), fm.phases().begin(), fm.phases().end());
    hdr["train_config"] = to_json(art.train_config);
    hdr["provenance"] = {{"dataset", art.provenance.dataset},
                         {"split", art.provenance.split},
                         {"seed", art.provenance.seed},
                         {"timestamp", art.provenance.timestamp}};
    const std::string json = hdr.dump();

    io::Bytes out;
    io::put_bytes(out, "KDMF");
    io::put<std::uint32_t>(out, version);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
    io::put_bytes(out, json);
    io::put<std::uint64_t>(out, payload.size());
    for (double v : payload) io::put<double>(out, v);
    io::put<std::uint64_t>(out, io::checksum(out, out.size()));
    return out;
}

inline ModelArtifact decode_model(const io::Bytes &bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "KDMF", 4) != 0)
        throw FormatError(FormatFault::BadMagic, "model: bad magic", 0);
    if (bytes.size() < 8) throw FormatError(FormatFault::Checksum, "model: checksum failure (file truncated)", 4);
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    if (version != kModelVersion)
        throw FormatError(FormatFault::Version,
                          "model: file version " + std::to_string(version) + ", reader supports " +
                              std::to_string(kModelVersion),
                          4);
    if (bytes.size() < 16) throw FormatError(FormatFault::Checksum, "model: checksum failure (file truncated)", 8);
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (stored != io::checksum(bytes, bytes.size() - 8))
        throw FormatError(FormatFault::Checksum, "model: checksum failure",
                          static_cast<long long>(bytes.size() - 8));

    try {
        io::Reader rd(bytes, bytes.size() - 8);
        rd.get_string(8, "preamble");
        const auto json_len = rd.get<std::uint32_t>("header length");
        const auto hdr = nlohmann::json::parse(rd.get_string(json_len, "header"));
        const auto count = rd.get<std::uint64_t>("payload count");
        if (count > (bytes.size() - rd.pos()) / 8)
            throw FormatError(FormatFault::Invalid, "model: payload count exceeds file size");
        std::vector<double> payload(count);
        for (auto &v : payload) v = rd.get<double>("payload");
        if (rd.pos() != bytes.size() - 8) throw FormatError(FormatFault::Invalid, "model: trailing bytes");

        std::size_t at = 0;
        auto take = [&](std::size_t n) {
            if (payload.size() - at < n) throw FormatError(FormatFault::Invalid, "model: payload shorter than header shapes");
            std::vector<double> v(payload.begin() + static_cast<std::ptrdiff_t>(at),
                                  payload.begin() + static_cast<std::ptrdiff_t>(at + n));
            at += n;
            return v;
        };

        ModelArtifact art;
        art.format_version = version;
        auto &head = art.head;
        const auto kcfg = kernel_from_json(hdr.at("kernel"));
        const auto emb_dim = hdr.at("embedding_dim").get<std::size_t>();
        head.num_classes = hdr.at("num_classes").get<std::size_t>();
        head.tau = hdr.at("tau").get<double>();
        head.l2 = hdr.at("l2").get<double>();
        head.seed = hdr.at("seed").get<std::uint64_t>();
        if (hdr.at("activation").get<std::string>() != "relu")
            throw FormatError(FormatFault::Invalid, "model: unsupported activation");
        for (const auto &lj : hdr.at("layers")) {
            LayerSpec l;
            const auto in = lj.at("in_dim").get<std::size_t>();
            const auto out = lj.at("out_dim").get<std::size_t>();
            l.weights = Matrix(out, in);
            l.weights.data = take(in * out);
            l.bias = take(out);
            l.beta_state = BetaState{lj.at("alpha").get<double>(), lj.at("beta").get<double>(),
                                     lj.at("keep_count").get<std::uint64_t>(), lj.at("drop_count").get<std::uint64_t>()};
            if (!lj.at("fixed_keep_prob").is_null()) l.fixed_keep_prob = lj["fixed_keep_prob"].get<double>();
            head.layers.push_back(std::move(l));
        }
        if (kcfg.is_rff()) {
            Matrix freq(kcfg.rff_dim, emb_dim);
            freq.data = take(kcfg.rff_dim * emb_dim);
            head.kernel = FeatureMap(kcfg, emb_dim, std::move(freq), take(kcfg.rff_dim));
        } else {
            head.kernel = FeatureMap(kcfg, emb_dim);
        }
        if (at != payload.size()) throw FormatError(FormatFault::Invalid, "model: payload longer than header shapes");
        head.validate();

        art.train_config = train_config_from_json(hdr.at("train_config"));
        const auto &pj = hdr.at("provenance");
        art.provenance = {pj.at("dataset").get<std::string>(), pj.at("split").get<std::string>(),
                          pj.at("seed").get<std::uint64_t>(), pj.at("timestamp").get<std::string>()};
        return art;
    } catch (const nlohmann::json::exception &e) {
        throw FormatError(FormatFault::Invalid, std::string("model: bad header: ") + e.what());
    } catch (const FormatError &) {
        throw;
    } catch (const Error &e) {
        throw FormatError(FormatFault::Invalid, std::string("model: ") + e.what());
    }
}

inline void save_model(const ModelArtifact &art, const std::filesystem::path &path) {
    io::write_file_atomic(path, encode_model(art));
}

inline ModelArtifact load_model(const std::filesystem::path &path) { return decode_model(io::read_file(path)); }

} // namespace kdrop
