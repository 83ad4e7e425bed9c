#include "miar/projection.hpp"

#include <cmath>

namespace miar {

namespace {

// im2col for "same"-padded 1-D convolution: column (i*k + j) of row t holds
// raw[t + j - (k-1)/2, i], zero outside the sequence.
template <typename T>
Mat<T> unfold(const Mat<T>& raw, std::size_t k) {
    const Eigen::Index L = raw.rows();
    const Eigen::Index d = raw.cols();
    const Eigen::Index pad = static_cast<Eigen::Index>((k - 1) / 2);
    Mat<T> cols = Mat<T>::Zero(L, d * static_cast<Eigen::Index>(k));
    for (Eigen::Index t = 0; t < L; ++t) {
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(k); ++j) {
            const Eigen::Index src = t + j - pad;
            if (src < 0 || src >= L) continue;
            for (Eigen::Index i = 0; i < d; ++i) cols(t, i * static_cast<Eigen::Index>(k) + j) = raw(src, i);
        }
    }
    return cols;
}

template <typename T>
void check_input(const Mat<T>& raw, const StreamProjection& p) {
    if (static_cast<std::size_t>(raw.cols()) != p.d_in) {
        throw ShapeError("project_stream: input width " + std::to_string(raw.cols()) + " but kernel expects " +
                         std::to_string(p.d_in));
    }
}

}  // namespace

const char* stream_name(Stream s) {
    switch (s) {
        case Stream::text1: return "text1";
        case Stream::text2: return "text2";
        case Stream::audio: return "audio";
        case Stream::video: return "video";
    }
    return "?";
}

StreamProjection register_stream_projection(ParamLayout& layout, const std::string& name, std::size_t d_in,
                                            std::size_t d_out, std::size_t kernel) {
    StreamProjection p;
    p.d_in = d_in;
    p.d_out = d_out;
    p.kernel = kernel;
    p.weight = layout.add(name + ".weight", {d_out, d_in, kernel}, d_out, d_in * kernel);
    p.bias = layout.add_vector(name + ".bias", d_out);
    return p;
}

ProjectionParams register_projections(ParamLayout& layout, const ModelConfig& c) {
    ProjectionParams out;
    const std::array<std::size_t, 4> dims{c.d_text1, c.d_text2, c.d_audio, c.d_vision};
    for (Stream s : kStreams) {
        const auto i = static_cast<std::size_t>(s);
        out.streams[i] = register_stream_projection(layout, std::string("proj.") + stream_name(s), dims[i],
                                                    c.d_model, c.kernel_size);
    }
    if (c.use_homogeneous) {
        out.homogeneous = register_stream_projection(layout, "proj.homogeneous", c.d_model, c.d_model, 1);
    }
    return out;
}

template <typename T>
void init_stream_projection(ParamSet<T>& params, const StreamProjection& p, std::mt19937_64& rng) {
    const std::size_t fan_in = p.d_in * p.kernel;
    init_uniform_fan_in(params, p.weight, fan_in, rng);
    init_uniform_fan_in(params, p.bias, fan_in, rng);
}

template <typename T>
ProjectionModule<T> init_projections(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    ProjectionModule<T> m;
    m.layout = std::make_shared<ParamLayout>();
    m.desc = register_projections(*m.layout, config);
    m.values = ParamSet<T>(m.layout);
    std::mt19937_64 rng(seed);
    for (const auto& s : m.desc.streams) init_stream_projection(m.values, s, rng);
    if (m.desc.homogeneous) init_stream_projection(m.values, *m.desc.homogeneous, rng);
    return m;
}

template <typename T>
Mat<T> project_stream(const Mat<T>& raw, const ParamSet<T>& params, const StreamProjection& p) {
    check_input(raw, p);
    const auto w = params.mat(p.weight);
    const auto b = params.row(p.bias);
    Mat<T> out;
    if (p.kernel == 1) {
        out.noalias() = raw * w.transpose();
    } else {
        out.noalias() = unfold(raw, p.kernel) * w.transpose();
    }
    out.rowwise() += b;
    return out;
}

template <typename T>
void project_stream_backward(const Mat<T>& raw, const Mat<T>& dout, const ParamSet<T>& params,
                             const StreamProjection& p, ParamSet<T>& grad, Mat<T>* draw) {
    check_input(raw, p);
    const auto w = params.mat(p.weight);
    grad.row(p.bias) += dout.colwise().sum();
    if (p.kernel == 1) {
        grad.mat(p.weight).noalias() += dout.transpose() * raw;
        if (draw) draw->noalias() = dout * w;
        return;
    }
    const Mat<T> cols = unfold(raw, p.kernel);
    grad.mat(p.weight).noalias() += dout.transpose() * cols;
    if (!draw) return;
    const Mat<T> dcols = dout * w;
    const Eigen::Index L = raw.rows();
    const Eigen::Index d = raw.cols();
    const auto k = static_cast<Eigen::Index>(p.kernel);
    const Eigen::Index pad = (k - 1) / 2;
    draw->setZero(L, d);
    for (Eigen::Index t = 0; t < L; ++t) {
        for (Eigen::Index j = 0; j < k; ++j) {
            const Eigen::Index src = t + j - pad;
            if (src < 0 || src >= L) continue;
            for (Eigen::Index i = 0; i < d; ++i) (*draw)(src, i) += dcols(t, i * k + j);
        }
    }
}

template <typename T>
Mat<T> sinusoidal_positions(std::size_t length, std::size_t d) {
    Mat<T> pe(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(d));
    for (std::size_t t = 0; t < length; ++t) {
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
            const double angle = static_cast<double>(t) * freq;
            pe(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(i)) =
                static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    }
    return pe;
}

#define MIAR_INSTANTIATE(T)                                                                                  \
    template void init_stream_projection<T>(ParamSet<T>&, const StreamProjection&, std::mt19937_64&);       \
    template ProjectionModule<T> init_projections<T>(const ModelConfig&, std::uint64_t);                     \
    template Mat<T> project_stream<T>(const Mat<T>&, const ParamSet<T>&, const StreamProjection&);           \
    template void project_stream_backward<T>(const Mat<T>&, const Mat<T>&, const ParamSet<T>&,               \
                                             const StreamProjection&, ParamSet<T>&, Mat<T>*);                \
    template Mat<T> sinusoidal_positions<T>(std::size_t, std::size_t);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
