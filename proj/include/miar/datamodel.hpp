#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "miar/tensor.hpp"

namespace miar {

inline constexpr std::size_t kDefaultSeqLen = 50;
inline constexpr std::size_t kAudioDim = 74;
inline constexpr std::size_t kVisionDim = 35;
inline constexpr float kLabelMin = -3.0f;
inline constexpr float kLabelMax = 3.0f;

enum class SplitName { train, valid, test };

std::string_view to_string(SplitName s);
SplitName parse_split_name(std::string_view s);

// Four per-sample feature sequences plus one real-valued label per sample.
struct RawModalityBatch {
    Tensor3 text1;
    Tensor3 text2;
    Tensor3 audio;
    Tensor3 vision;
    std::vector<float> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t seq_len() const noexcept { return text1.l(); }

    // Throws ShapeError on inconsistent N/L, DataError on non-finite values or
    // labels outside [-3, 3].
    void validate() const;

    // Copies the listed samples, in order, into a new batch.
    RawModalityBatch select(std::span<const std::size_t> indices) const;
};

struct DatasetSplit {
    SplitName name = SplitName::train;
    RawModalityBatch batch;
};

struct SyntheticSpec {
    std::size_t n_samples = 500;
    std::size_t seq_len = kDefaultSeqLen;
    std::size_t d_text1 = 32;
    std::size_t d_text2 = 32;
    std::size_t d_audio = kAudioDim;
    std::size_t d_vision = kVisionDim;
    // Order: text1, text2, audio, vision.
    std::array<double, 4> signal_strength{2.0, 2.0, 2.0, 2.0};
    double noise_std = 0.5;
    // Fixes the per-modality signal directions and nuisance offsets; samples of
    // different splits share them and differ only through `split`.
    std::uint64_t seed = 101;
    SplitName split = SplitName::train;

    void validate() const;
};

DatasetSplit generate_synthetic(const SyntheticSpec& spec);

// Keeps the first L steps, or zero-pads at the end when T < L.
Tensor3 pad_or_truncate(const Tensor3& seq, std::size_t length = kDefaultSeqLen);
// Signed overload so a non-positive length is reported instead of wrapping.
Tensor3 pad_or_truncate(const Tensor3& seq, long long length);

// On-disk container: <dir>/manifest.json plus one raw little-endian float32
// file per tensor. Writing a split merges it into an existing manifest.
void write_container(const DatasetSplit& split, const std::filesystem::path& dir);
DatasetSplit load_container(const std::filesystem::path& dir, SplitName split);
bool container_has_split(const std::filesystem::path& dir, SplitName split);

// Raw float32 blob helpers shared with checkpoint storage.
void write_f32_file(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_f32_file(const std::filesystem::path& file);

}  // namespace miar
