#include "miar/model.hpp"

#include <cmath>
#include <optional>

namespace miar {

namespace {

template <typename T>
struct SampleCache {
    std::array<Mat<T>, 4> raw;
    std::array<CmfCache<T>, 4> cmf;
    Mat<T> pooled;  // mean over streams and time of the projected sequences
};

const Tensor3& raw_stream(const RawModalityBatch& b, Stream s) {
    switch (s) {
        case Stream::text1: return b.text1;
        case Stream::text2: return b.text2;
        case Stream::audio: return b.audio;
        case Stream::video: return b.vision;
    }
    return b.text1;
}

void check_batch(const ModelParams& model, const RawModalityBatch& batch) {
    batch.validate();
    if (batch.size() == 0) throw ArgumentError("empty batch");
    for (Stream s : kStreams) {
        const auto& p = model.projection.streams[static_cast<std::size_t>(s)];
        if (raw_stream(batch, s).d() != p.d_in) {
            throw ShapeError(std::string("stream ") + stream_name(s) + " has width " +
                             std::to_string(raw_stream(batch, s).d()) + " but the model expects " +
                             std::to_string(p.d_in));
        }
    }
}

// Forward for sample i; writes its tokens (and homogeneous row) into `out`.
template <typename T>
void sample_forward(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch,
                    std::size_t i, const Dropout& dropout, const Mat<T>* positions, TokenSet<T>& out,
                    SampleCache<T>* cache, FusionIntermediate<T>* inter, std::vector<Mat<T>>* score_log) {
    ProjectedStreams<T> proj;
    for (Stream s : kStreams) {
        const auto k = static_cast<std::size_t>(s);
        Mat<T> raw = raw_stream(batch, s).sample(i).template cast<T>();
        proj[s] = project_stream(raw, params, model.projection.streams[k]);
        if (positions) proj[s] += *positions;
        if (cache) cache->raw[k] = std::move(raw);
        if (inter) inter->projected[k].push_back(proj[s]);
    }
    const Mat<T> text_mean = (proj[Stream::text1] + proj[Stream::text2]) * T(0.5);
    const auto row = static_cast<Eigen::Index>(i);
    for (Stream s : kStreams) {
        const auto k = static_cast<std::size_t>(s);
        CmfTrace<T> trace;
        out.tokens[k].row(row) = cmf_forward(s, proj, text_mean, params, model.cmf[k], dropout,
                                             cache ? &cache->cmf[k] : nullptr, inter ? &trace : nullptr, score_log);
        if (inter) inter->cmf[k].push_back(std::move(trace));
    }
    if (model.projection.homogeneous) {
        // Shared map is affine, so pooling before or after it is equivalent.
        Mat<T> pooled = RowVec<T>::Zero(proj[Stream::text1].cols());
        for (Stream s : kStreams) pooled += proj[s].colwise().mean();
        pooled /= T(4);
        out.homogeneous.row(row) = project_stream(pooled, params, *model.projection.homogeneous).row(0);
        if (cache) cache->pooled = std::move(pooled);
    }
}

template <typename T>
void sample_backward(const ModelParams& model, const ParamSet<T>& params, const SampleCache<T>& cache,
                     const std::array<RowVec<T>, 4>& dtokens, const RowVec<T>* dhomog, ParamSet<T>& grad) {
    const Eigen::Index L = cache.raw[0].rows();
    const auto d = static_cast<Eigen::Index>(model.config.d_model);
    ProjectedStreams<T> dproj;
    for (auto& m : dproj.seq) m = Mat<T>::Zero(L, d);
    Mat<T> dtext_mean = Mat<T>::Zero(L, d);
    for (Stream s : kStreams) {
        const auto k = static_cast<std::size_t>(s);
        cmf_backward(s, cache.cmf[k], dtokens[k], params, model.cmf[k], grad, dproj, dtext_mean);
    }
    dproj[Stream::text1] += T(0.5) * dtext_mean;
    dproj[Stream::text2] += T(0.5) * dtext_mean;
    if (dhomog) {
        Mat<T> dpooled(1, d);
        project_stream_backward(cache.pooled, Mat<T>(*dhomog), params, *model.projection.homogeneous, grad, &dpooled);
        const RowVec<T> per_step = dpooled.row(0) / static_cast<T>(4 * L);
        for (auto& m : dproj.seq) m.rowwise() += per_step;
    }
    for (Stream s : kStreams) {
        const auto k = static_cast<std::size_t>(s);
        project_stream_backward<T>(cache.raw[k], dproj[s], params, model.projection.streams[k], grad, nullptr);
    }
}

template <typename T>
TokenSet<T> empty_tokens(const ModelParams& model, std::size_t n) {
    TokenSet<T> t;
    const auto rows = static_cast<Eigen::Index>(n);
    const auto d = static_cast<Eigen::Index>(model.config.d_model);
    for (auto& m : t.tokens) m.resize(rows, d);
    if (model.projection.homogeneous) t.homogeneous.resize(rows, d);
    return t;
}

template <typename T>
std::optional<Mat<T>> positions_for(const ModelParams& model, std::size_t length) {
    if (!model.config.positional_encoding) return std::nullopt;
    return sinusoidal_positions<T>(length, model.config.d_model);
}

}  // namespace

ModelParams build_model(const ModelConfig& config) {
    config.validate();
    auto layout = std::make_shared<ParamLayout>();
    ModelParams m;
    m.config = config;
    m.projection = register_projections(*layout, config);
    for (Stream s : kStreams) {
        m.cmf[static_cast<std::size_t>(s)] = register_cmf(*layout, std::string("cmf.") + stream_name(s), config);
    }
    m.alignment = register_alignment(*layout, config.d_model, config.d_align);
    m.head = register_head(*layout, config.d_model, config.use_homogeneous);
    m.layout = std::move(layout);
    return m;
}

template <typename T>
ParamSet<T> init_model_params(const ModelParams& model, std::uint64_t seed) {
    ParamSet<T> p(model.layout);
    std::mt19937_64 rng(seed);
    for (const auto& s : model.projection.streams) init_stream_projection(p, s, rng);
    if (model.projection.homogeneous) init_stream_projection(p, *model.projection.homogeneous, rng);
    for (const auto& c : model.cmf) init_cmf(p, c, rng);
    for (const auto& m : model.alignment.mlps) init_mlp(p, m, rng);
    init_mlp(p, model.head, rng);
    return p;
}

std::pair<std::size_t, std::size_t> param_range(const ParamLayout& layout, const std::string& prefix) {
    std::size_t begin = layout.total_size();
    std::size_t end = 0;
    for (const auto& b : layout.blocks()) {
        if (b.name.rfind(prefix, 0) == 0) {
            begin = std::min(begin, b.offset);
            end = std::max(end, b.offset + b.size());
        }
    }
    if (end == 0) return {0, 0};
    return {begin, end};
}

template <typename T>
TokenSet<T> miar_forward(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch,
                         Mode mode, std::mt19937_64* dropout_rng, FusionIntermediate<T>* inter,
                         std::vector<Mat<T>>* score_log) {
    check_batch(model, batch);
    const Dropout dropout{mode == Mode::train ? model.config.dropout : 0.0,
                          mode == Mode::train ? dropout_rng : nullptr};
    const auto positions = positions_for<T>(model, batch.seq_len());
    TokenSet<T> tokens = empty_tokens<T>(model, batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        sample_forward<T>(model, params, batch, i, dropout, positions ? &*positions : nullptr, tokens, nullptr, inter,
                       score_log);
    }
    return tokens;
}

template <typename T>
BatchResult<T> loss_and_gradient(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch,
                                 const LossConfig& loss_cfg, Mode mode, std::mt19937_64* dropout_rng,
                                 ParamSet<T>* grad) {
    check_batch(model, batch);
    const std::size_t n = batch.size();
    const Dropout dropout{mode == Mode::train ? model.config.dropout : 0.0,
                          mode == Mode::train ? dropout_rng : nullptr};
    const auto positions = positions_for<T>(model, batch.seq_len());

    TokenSet<T> tokens = empty_tokens<T>(model, n);
    std::vector<SampleCache<T>> caches(grad ? n : 0);
    for (std::size_t i = 0; i < n; ++i) {
        sample_forward<T>(model, params, batch, i, dropout, positions ? &*positions : nullptr, tokens,
                       grad ? &caches[i] : nullptr, nullptr, nullptr);
    }

    AlignCache<T> align_cache;
    const AlignedTokens<T> aligned =
        align_project(tokens, params, model.alignment, loss_cfg.normalize_alignment, grad ? &align_cache : nullptr);
    AlignedTokens<T> daligned;
    if (grad) {
        for (std::size_t k = 0; k < 4; ++k) daligned.rows[k] = Mat<T>::Zero(aligned.rows[k].rows(), aligned.rows[k].cols());
    }
    const LossBreakdown align = alignment_loss(aligned, loss_cfg, grad ? &daligned : nullptr,
                                               static_cast<T>(loss_cfg.omega));

    MlpCache<T> head_cache;
    BatchResult<T> out;
    out.predictions = predict_head(tokens, params, model.head, grad ? &head_cache : nullptr);
    const double task = task_loss<T>(out.predictions, batch.labels);
    out.loss = total_loss(task, align, loss_cfg.omega);

    if (!grad) return out;

    Mat<T> dpred(static_cast<Eigen::Index>(n), 1);
    for (std::size_t i = 0; i < n; ++i) {
        dpred(static_cast<Eigen::Index>(i), 0) =
            static_cast<T>(2.0 * (static_cast<double>(out.predictions[i]) - batch.labels[i]) / static_cast<double>(n));
    }
    const Mat<T> dhead_in = mlp_backward(head_cache, dpred, params, model.head, *grad);
    const std::array<Mat<T>, 4> dtok_align =
        align_project_backward(align_cache, daligned, params, model.alignment, loss_cfg.normalize_alignment, *grad);

    const auto d = static_cast<Eigen::Index>(model.config.d_model);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        std::array<RowVec<T>, 4> dtok;
        for (std::size_t k = 0; k < 4; ++k) {
            dtok[k] = dhead_in.row(r).segment(static_cast<Eigen::Index>(k) * d, d) + dtok_align[k].row(r);
        }
        RowVec<T> dhomog;
        if (model.projection.homogeneous) dhomog = dhead_in.row(r).segment(4 * d, d);
        sample_backward(model, params, caches[i], dtok, model.projection.homogeneous ? &dhomog : nullptr, *grad);
    }
    return out;
}

template <typename T>
std::vector<T> predict(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch) {
    const TokenSet<T> tokens = miar_forward(model, params, batch, Mode::eval);
    return predict_head(tokens, params, model.head);
}

#define MIAR_INSTANTIATE(T)                                                                                      \
    template ParamSet<T> init_model_params<T>(const ModelParams&, std::uint64_t);                               \
    template TokenSet<T> miar_forward<T>(const ModelParams&, const ParamSet<T>&, const RawModalityBatch&, Mode, \
                                         std::mt19937_64*, FusionIntermediate<T>*, std::vector<Mat<T>>*);        \
    template BatchResult<T> loss_and_gradient<T>(const ModelParams&, const ParamSet<T>&,                        \
                                                 const RawModalityBatch&, const LossConfig&, Mode,               \
                                                 std::mt19937_64*, ParamSet<T>*);                                \
    template std::vector<T> predict<T>(const ModelParams&, const ParamSet<T>&, const RawModalityBatch&);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
