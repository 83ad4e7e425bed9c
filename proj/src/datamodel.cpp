#include "miar/datamodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

namespace miar {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestName = "manifest.json";
constexpr const char* kDtype = "f32le";
constexpr std::array<const char*, 5> kTensorNames{"text1", "text2", "audio", "vision", "labels"};

std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "," : "") + std::to_string(s[i]);
    }
    return out + "]";
}

void check_finite(std::span<const float> values, const std::string& what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw DataError(what + ": non-finite value at flat index " + std::to_string(i));
        }
    }
}

json read_manifest(const fs::path& dir) {
    const fs::path file = dir / kManifestName;
    std::ifstream in(file);
    if (!in) throw IoError("cannot open manifest " + file.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw IntegrityError("malformed manifest " + file.string() + ": " + e.what());
    }
}

Tensor3 load_tensor3(const fs::path& dir, const json& entry, const std::string& what) {
    if (entry.value("dtype", "") != kDtype) {
        throw IntegrityError(what + ": unsupported dtype (expected f32le)");
    }
    const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw IntegrityError(what + ": expected rank-3 shape, got " + shape_str(shape));
    const auto values = read_f32_file(dir / entry.at("file").get<std::string>());
    if (values.size() != shape[0] * shape[1] * shape[2]) {
        throw IntegrityError(what + ": manifest shape " + shape_str(shape) + " needs " +
                             std::to_string(shape[0] * shape[1] * shape[2]) + " floats, file holds " +
                             std::to_string(values.size()));
    }
    check_finite(values, what);
    Tensor3 t(shape[0], shape[1], shape[2]);
    std::copy(values.begin(), values.end(), t.data().begin());
    return t;
}

}  // namespace

std::string_view to_string(SplitName s) {
    switch (s) {
        case SplitName::train: return "train";
        case SplitName::valid: return "valid";
        case SplitName::test: return "test";
    }
    return "train";
}

SplitName parse_split_name(std::string_view s) {
    if (s == "train") return SplitName::train;
    if (s == "valid") return SplitName::valid;
    if (s == "test") return SplitName::test;
    throw ArgumentError("unknown split name '" + std::string(s) + "' (expected train, valid or test)");
}

void RawModalityBatch::validate() const {
    const std::size_t n = labels.size();
    const std::size_t l = text1.l();
    const std::array<const Tensor3*, 4> streams{&text1, &text2, &audio, &vision};
    for (std::size_t k = 0; k < streams.size(); ++k) {
        if (streams[k]->n() != n || streams[k]->l() != l) {
            throw ShapeError(std::string(kTensorNames[k]) + ": expected N=" + std::to_string(n) +
                             " L=" + std::to_string(l) + ", got N=" + std::to_string(streams[k]->n()) +
                             " L=" + std::to_string(streams[k]->l()));
        }
        if (streams[k]->d() == 0) throw ShapeError(std::string(kTensorNames[k]) + ": zero feature width");
        check_finite(streams[k]->data(), kTensorNames[k]);
    }
    check_finite(labels, "labels");
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < kLabelMin || labels[i] > kLabelMax) {
            throw DataError("labels: value " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                            " outside [-3, 3]");
        }
    }
}

RawModalityBatch RawModalityBatch::select(std::span<const std::size_t> indices) const {
    RawModalityBatch out;
    auto gather = [&](const Tensor3& src) {
        Tensor3 dst(indices.size(), src.l(), src.d());
        const std::size_t stride = src.l() * src.d();
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const auto from = src.data().subspan(indices[k] * stride, stride);
            std::copy(from.begin(), from.end(), dst.data().begin() + static_cast<std::ptrdiff_t>(k * stride));
        }
        return dst;
    };
    out.text1 = gather(text1);
    out.text2 = gather(text2);
    out.audio = gather(audio);
    out.vision = gather(vision);
    out.labels.reserve(indices.size());
    for (auto i : indices) out.labels.push_back(labels.at(i));
    return out;
}

void SyntheticSpec::validate() const {
    if (n_samples == 0) throw ArgumentError("synthetic spec: n_samples must be >= 1");
    if (seq_len == 0) throw ArgumentError("synthetic spec: seq_len must be >= 1");
    if (d_text1 == 0 || d_text2 == 0 || d_audio == 0 || d_vision == 0) {
        throw ArgumentError("synthetic spec: all feature dims must be positive");
    }
    for (double s : signal_strength) {
        if (!(s >= 0.0) || !std::isfinite(s)) throw ArgumentError("synthetic spec: signal_strength must be >= 0");
    }
    if (!(noise_std > 0.0) || !std::isfinite(noise_std)) {
        throw ArgumentError("synthetic spec: noise_std must be > 0");
    }
}

DatasetSplit generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const std::array<std::size_t, 4> dims{spec.d_text1, spec.d_text2, spec.d_audio, spec.d_vision};

    // Structure stream: unit signal directions and nuisance offsets per modality.
    std::mt19937_64 world(spec.seed);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::array<std::vector<double>, 4> direction;
    std::array<std::vector<double>, 4> offset;
    for (std::size_t m = 0; m < 4; ++m) {
        direction[m].resize(dims[m]);
        offset[m].resize(dims[m]);
        double norm = 0.0;
        for (auto& x : direction[m]) {
            x = std_normal(world);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : direction[m]) x /= norm;
        for (auto& x : offset[m]) x = std_normal(world);
    }

    // Sample stream depends on the split so train/valid/test draw distinct samples.
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(spec.split) + 0x5eedu};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> label_dist(kLabelMin, kLabelMax);
    std::normal_distribution<double> noise(0.0, spec.noise_std);

    DatasetSplit out;
    out.name = spec.split;
    RawModalityBatch& b = out.batch;
    const std::size_t n = spec.n_samples;
    const std::size_t l = spec.seq_len;
    std::array<Tensor3*, 4> streams{&b.text1, &b.text2, &b.audio, &b.vision};
    for (std::size_t m = 0; m < 4; ++m) *streams[m] = Tensor3(n, l, dims[m]);
    b.labels.resize(n);

    for (std::size_t i = 0; i < n; ++i) {
        const double y = label_dist(rng);
        b.labels[i] = static_cast<float>(y);
        for (std::size_t m = 0; m < 4; ++m) {
            const double amp = y * spec.signal_strength[m];
            for (std::size_t t = 0; t < l; ++t) {
                for (std::size_t k = 0; k < dims[m]; ++k) {
                    streams[m]->at(i, t, k) =
                        static_cast<float>(amp * direction[m][k] + offset[m][k] + noise(rng));
                }
            }
        }
    }
    return out;
}

Tensor3 pad_or_truncate(const Tensor3& seq, std::size_t length) {
    if (length == 0) throw ArgumentError("pad_or_truncate: target length must be > 0");
    if (seq.l() == 0) throw ArgumentError("pad_or_truncate: input has no time steps");
    Tensor3 out(seq.n(), length, seq.d());
    const std::size_t keep = std::min(seq.l(), length);
    for (std::size_t i = 0; i < seq.n(); ++i) {
        out.sample(i).topRows(static_cast<Eigen::Index>(keep)) =
            seq.sample(i).topRows(static_cast<Eigen::Index>(keep));
    }
    return out;
}

Tensor3 pad_or_truncate(const Tensor3& seq, long long length) {
    if (length <= 0) throw ArgumentError("pad_or_truncate: target length must be > 0");
    return pad_or_truncate(seq, static_cast<std::size_t>(length));
}

void write_f32_file(const fs::path& file, std::span<const float> values) {
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + file.string() + " for writing");
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(float)));
    } else {
        for (float v : values) {
            auto bits = std::bit_cast<std::uint32_t>(v);
            bits = __builtin_bswap32(bits);
            out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
        }
    }
    if (!out) throw IoError("short write to " + file.string());
}

std::vector<float> read_f32_file(const fs::path& file) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open " + file.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(float) != 0) {
        throw IntegrityError(file.string() + ": size " + std::to_string(bytes) + " is not a multiple of 4");
    }
    std::vector<float> values(bytes / sizeof(float));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("short read from " + file.string());
    if constexpr (std::endian::native != std::endian::little) {
        for (auto& v : values) v = std::bit_cast<float>(__builtin_bswap32(std::bit_cast<std::uint32_t>(v)));
    }
    return values;
}

void write_container(const DatasetSplit& split, const fs::path& dir) {
    split.batch.validate();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    json manifest;
    if (fs::exists(dir / kManifestName)) {
        manifest = read_manifest(dir);
    } else {
        manifest = {{"format", "miar-container"},
                    {"version", 1},
                    {"dtype", kDtype},
                    {"byte_order", "little"},
                    {"label_range", {kLabelMin, kLabelMax}},
                    {"splits", json::object()}};
    }

    const std::string name(to_string(split.name));
    const RawModalityBatch& b = split.batch;
    const std::array<const Tensor3*, 4> streams{&b.text1, &b.text2, &b.audio, &b.vision};
    json entry = json::object();
    for (std::size_t k = 0; k < streams.size(); ++k) {
        const std::string file = name + "_" + kTensorNames[k] + ".f32";
        write_f32_file(dir / file, streams[k]->data());
        const auto s = streams[k]->shape();
        entry[kTensorNames[k]] = {{"file", file}, {"shape", {s[0], s[1], s[2]}}, {"dtype", kDtype}};
    }
    const std::string label_file = name + "_labels.f32";
    write_f32_file(dir / label_file, b.labels);
    entry["labels"] = {{"file", label_file}, {"shape", {b.labels.size()}}, {"dtype", kDtype}};
    manifest["splits"][name] = entry;

    std::ofstream out(dir / kManifestName, std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

bool container_has_split(const fs::path& dir, SplitName split) {
    if (!fs::exists(dir / kManifestName)) return false;
    const json manifest = read_manifest(dir);
    return manifest.contains("splits") && manifest["splits"].contains(std::string(to_string(split)));
}

DatasetSplit load_container(const fs::path& dir, SplitName split) {
    const json manifest = read_manifest(dir);
    const std::string name(to_string(split));
    if (!manifest.contains("splits") || !manifest["splits"].contains(name)) {
        throw IoError("container " + dir.string() + " has no split '" + name + "'");
    }
    const json& entry = manifest["splits"][name];
    DatasetSplit out;
    out.name = split;
    RawModalityBatch& b = out.batch;
    try {
        b.text1 = load_tensor3(dir, entry.at("text1"), name + "/text1");
        b.text2 = load_tensor3(dir, entry.at("text2"), name + "/text2");
        b.audio = load_tensor3(dir, entry.at("audio"), name + "/audio");
        b.vision = load_tensor3(dir, entry.at("vision"), name + "/vision");
        const json& lab = entry.at("labels");
        if (lab.value("dtype", "") != kDtype) throw IntegrityError(name + "/labels: unsupported dtype");
        const auto shape = lab.at("shape").get<std::vector<std::size_t>>();
        b.labels = read_f32_file(dir / lab.at("file").get<std::string>());
        if (shape.size() != 1 || shape[0] != b.labels.size()) {
            throw IntegrityError(name + "/labels: manifest shape " + shape_str(shape) + " but file holds " +
                                 std::to_string(b.labels.size()) + " floats");
        }
    } catch (const json::exception& e) {
        throw IntegrityError("manifest entry for split '" + name + "' is malformed: " + e.what());
    }
    try {
        b.validate();
    } catch (const ShapeError& e) {
        throw IntegrityError(e.what());
    }
    return out;
}

}  // namespace miar
