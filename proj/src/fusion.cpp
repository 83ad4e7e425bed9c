#include "miar/fusion.hpp"

namespace miar {

CmtStackParams register_cmt_stack(ParamLayout& layout, const std::string& prefix, const ModelConfig& c) {
    CmtStackParams s;
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        s.layers.push_back(
            register_attention(layout, prefix + ".layer" + std::to_string(i), c.d_model, c.n_heads, c.ffn_mult));
    }
    return s;
}

MergeParams register_merge(ParamLayout& layout, const std::string& prefix) {
    MergeParams m;
    m.weight = layout.add(prefix + ".weight", {1, 2, 1, 1}, 1, 2);
    m.bias = layout.add_vector(prefix + ".bias", 1);
    return m;
}

CmfParams register_cmf(ParamLayout& layout, const std::string& prefix, const ModelConfig& c) {
    CmfParams p;
    p.branch_a = register_cmt_stack(layout, prefix + ".cmt_a", c);
    p.branch_b = register_cmt_stack(layout, prefix + ".cmt_b", c);
    p.merge = register_merge(layout, prefix + ".merge");
    p.tfa = register_attention(layout, prefix + ".tfa", c.d_model, c.n_heads, c.ffn_mult);
    return p;
}

template <typename T>
void init_cmf(ParamSet<T>& params, const CmfParams& cmf, std::mt19937_64& rng) {
    for (const auto& l : cmf.branch_a.layers) init_attention(params, l, rng);
    for (const auto& l : cmf.branch_b.layers) init_attention(params, l, rng);
    init_uniform_fan_in(params, cmf.merge.weight, 2, rng);
    init_uniform_fan_in(params, cmf.merge.bias, 2, rng);
    init_attention(params, cmf.tfa, rng);
}

template <typename T>
Mat<T> cmt_stack(const Mat<T>& query, const Mat<T>& kv, const ParamSet<T>& params, const CmtStackParams& stack,
                 const Dropout& dropout, CmtCache<T>* cache, std::vector<Mat<T>>* score_log) {
    if (stack.layers.empty()) throw ConfigError("cmt_stack: needs at least one layer");
    if (cache) cache->layers.resize(stack.layers.size());
    Mat<T> x = query;
    std::vector<Mat<T>> scores;
    for (std::size_t i = 0; i < stack.layers.size(); ++i) {
        x = mha_block(x, kv, params, stack.layers[i], dropout, cache ? &cache->layers[i] : nullptr,
                      score_log ? &scores : nullptr);
        if (score_log) score_log->insert(score_log->end(), scores.begin(), scores.end());
    }
    return x;
}

template <typename T>
void cmt_stack_backward(const CmtCache<T>& cache, const Mat<T>& dout, const ParamSet<T>& params,
                        const CmtStackParams& stack, ParamSet<T>& grad, Mat<T>& dquery, Mat<T>& dkv) {
    Mat<T> d = dout;
    for (std::size_t i = stack.layers.size(); i-- > 0;) {
        Mat<T> dx = Mat<T>::Zero(d.rows(), d.cols());
        mha_block_backward(cache.layers[i], d, params, stack.layers[i], grad, dx, dkv);
        d = std::move(dx);
    }
    dquery += d;
}

template <typename T>
Mat<T> merge_channels(const Mat<T>& a, const Mat<T>& b, const ParamSet<T>& params, const MergeParams& m) {
    check_same_shape(a, b, "merge_channels");
    Mat<T> out = params.scalar(m.weight, 0) * a + params.scalar(m.weight, 1) * b;
    out.array() += params.scalar(m.bias);
    return out;
}

template <typename T>
void merge_channels_backward(const Mat<T>& a, const Mat<T>& b, const Mat<T>& dout, const ParamSet<T>& params,
                             const MergeParams& m, ParamSet<T>& grad, Mat<T>& da, Mat<T>& db) {
    grad.scalar(m.weight, 0) += (dout.array() * a.array()).sum();
    grad.scalar(m.weight, 1) += (dout.array() * b.array()).sum();
    grad.scalar(m.bias) += dout.sum();
    da += params.scalar(m.weight, 0) * dout;
    db += params.scalar(m.weight, 1) * dout;
}

CmfRouting cmf_routing(Stream s) {
    switch (s) {
        case Stream::text1: return {Stream::text1, false, Stream::audio, Stream::video};
        case Stream::text2: return {Stream::text2, false, Stream::audio, Stream::video};
        case Stream::audio: return {Stream::audio, true, Stream::text1, Stream::video};
        case Stream::video: return {Stream::video, true, Stream::text1, Stream::audio};
    }
    return {Stream::text1, false, Stream::audio, Stream::video};
}

template <typename T>
RowVec<T> cmf_forward(Stream stream, const ProjectedStreams<T>& in, const Mat<T>& text_mean,
                      const ParamSet<T>& params, const CmfParams& cmf, const Dropout& dropout, CmfCache<T>* cache,
                      CmfTrace<T>* trace, std::vector<Mat<T>>* score_log) {
    const CmfRouting r = cmf_routing(stream);
    const Mat<T>& q = in[r.query];
    const Mat<T>& kv_a = r.kv_a_is_text_mean ? text_mean : in[r.kv_a];
    const Mat<T>& kv_b = in[r.kv_b];

    Mat<T> out_a = cmt_stack(q, kv_a, params, cmf.branch_a, dropout, cache ? &cache->branch_a : nullptr, score_log);
    Mat<T> out_b = cmt_stack(q, kv_b, params, cmf.branch_b, dropout, cache ? &cache->branch_b : nullptr, score_log);
    const Mat<T> merged = merge_channels(out_a, out_b, params, cmf.merge);

    // Only position 0 of the TFA output becomes the token, and every TFA
    // sublayer except attention is row-wise, so the query side is row 0 alone.
    std::vector<Mat<T>> scores;
    const Mat<T> head = mha_block(Mat<T>(merged.topRows(1)), merged, params, cmf.tfa, dropout,
                                  cache ? &cache->tfa : nullptr, score_log ? &scores : nullptr);
    if (score_log) score_log->insert(score_log->end(), scores.begin(), scores.end());

    if (trace) {
        trace->branch_a = out_a;
        trace->branch_b = out_b;
        trace->merged = merged;
        trace->tfa_out = tfa(merged, params, cmf.tfa);
    }
    if (cache) {
        cache->out_a = std::move(out_a);
        cache->out_b = std::move(out_b);
    }
    return head.row(0);
}

template <typename T>
RowVec<T> cmf_forward(Stream stream, const ProjectedStreams<T>& inputs, const ParamSet<T>& params,
                      const CmfParams& cmf) {
    for (Stream s : kStreams) {
        if (inputs[s].size() == 0) {
            throw ArgumentError(std::string("cmf_forward: projected stream '") + stream_name(s) + "' is missing");
        }
    }
    const Mat<T> text_mean = (inputs[Stream::text1] + inputs[Stream::text2]) * T(0.5);
    return cmf_forward(stream, inputs, text_mean, params, cmf);
}

template <typename T>
void cmf_backward(Stream stream, const CmfCache<T>& cache, const RowVec<T>& dtoken, const ParamSet<T>& params,
                  const CmfParams& cmf, ParamSet<T>& grad, ProjectedStreams<T>& din, Mat<T>& dtext_mean) {
    const CmfRouting r = cmf_routing(stream);
    const Eigen::Index L = cache.out_a.rows();
    const Eigen::Index d = cache.out_a.cols();

    Mat<T> dhead_query = Mat<T>::Zero(1, d);
    Mat<T> dmerged = Mat<T>::Zero(L, d);
    mha_block_backward(cache.tfa, Mat<T>(dtoken), params, cmf.tfa, grad, dhead_query, dmerged);
    dmerged.row(0) += dhead_query.row(0);

    Mat<T> da = Mat<T>::Zero(L, d);
    Mat<T> db = Mat<T>::Zero(L, d);
    merge_channels_backward(cache.out_a, cache.out_b, dmerged, params, cmf.merge, grad, da, db);

    Mat<T>& dq = din[r.query];
    Mat<T>& dkv_a = r.kv_a_is_text_mean ? dtext_mean : din[r.kv_a];
    Mat<T>& dkv_b = din[r.kv_b];
    cmt_stack_backward(cache.branch_a, da, params, cmf.branch_a, grad, dq, dkv_a);
    cmt_stack_backward(cache.branch_b, db, params, cmf.branch_b, grad, dq, dkv_b);
}

#define MIAR_INSTANTIATE(T)                                                                                     \
    template void init_cmf<T>(ParamSet<T>&, const CmfParams&, std::mt19937_64&);                               \
    template Mat<T> cmt_stack<T>(const Mat<T>&, const Mat<T>&, const ParamSet<T>&, const CmtStackParams&,      \
                                 const Dropout&, CmtCache<T>*, std::vector<Mat<T>>*);                           \
    template void cmt_stack_backward<T>(const CmtCache<T>&, const Mat<T>&, const ParamSet<T>&,                 \
                                        const CmtStackParams&, ParamSet<T>&, Mat<T>&, Mat<T>&);                 \
    template Mat<T> merge_channels<T>(const Mat<T>&, const Mat<T>&, const ParamSet<T>&, const MergeParams&);   \
    template void merge_channels_backward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const ParamSet<T>&,  \
                                             const MergeParams&, ParamSet<T>&, Mat<T>&, Mat<T>&);               \
    template RowVec<T> cmf_forward<T>(Stream, const ProjectedStreams<T>&, const Mat<T>&, const ParamSet<T>&,   \
                                      const CmfParams&, const Dropout&, CmfCache<T>*, CmfTrace<T>*,             \
                                      std::vector<Mat<T>>*);                                                    \
    template RowVec<T> cmf_forward<T>(Stream, const ProjectedStreams<T>&, const ParamSet<T>&, const CmfParams&); \
    template void cmf_backward<T>(Stream, const CmfCache<T>&, const RowVec<T>&, const ParamSet<T>&,            \
                                  const CmfParams&, ParamSet<T>&, ProjectedStreams<T>&, Mat<T>&);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
