#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "miar/config.hpp"
#include "miar/params.hpp"

namespace miar {

enum class Stream { text1 = 0, text2 = 1, audio = 2, video = 3 };
inline constexpr std::array<Stream, 4> kStreams{Stream::text1, Stream::text2, Stream::audio, Stream::video};
const char* stream_name(Stream s);

// Conv1D kernel [d_out, d_in, k] with "same" zero padding, plus bias [d_out].
struct StreamProjection {
    BlockId weight = 0;
    BlockId bias = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t kernel = 1;
};

struct ProjectionParams {
    std::array<StreamProjection, 4> streams;
    // Shared-weight map applied to every projected stream; one block pair
    // referenced by all four modalities.
    std::optional<StreamProjection> homogeneous;

    const StreamProjection& homogeneous_for(Stream) const { return *homogeneous; }
};

StreamProjection register_stream_projection(ParamLayout& layout, const std::string& name, std::size_t d_in,
                                            std::size_t d_out, std::size_t kernel);
ProjectionParams register_projections(ParamLayout& layout, const ModelConfig& config);

template <typename T>
void init_stream_projection(ParamSet<T>& params, const StreamProjection& p, std::mt19937_64& rng);

// Standalone projection bundle: layout, descriptors, and initialized values.
template <typename T>
struct ProjectionModule {
    std::shared_ptr<ParamLayout> layout;
    ProjectionParams desc;
    ParamSet<T> values;
};

// Validates the config (ConfigError on d_model % n_heads != 0) and draws
// fan-in-scaled uniform weights from `seed`.
template <typename T>
ProjectionModule<T> init_projections(const ModelConfig& config, std::uint64_t seed);

// raw [L, d_in] -> [L, d_out]. ShapeError when widths disagree.
template <typename T>
Mat<T> project_stream(const Mat<T>& raw, const ParamSet<T>& params, const StreamProjection& p);

// Accumulates dW, db into `grad`; writes d(raw) into `draw` when non-null.
template <typename T>
void project_stream_backward(const Mat<T>& raw, const Mat<T>& dout, const ParamSet<T>& params,
                             const StreamProjection& p, ParamSet<T>& grad, Mat<T>* draw = nullptr);

// Sinusoidal table [L, d].
template <typename T>
Mat<T> sinusoidal_positions(std::size_t length, std::size_t d);

}  // namespace miar
