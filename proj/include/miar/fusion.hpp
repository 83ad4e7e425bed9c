#pragma once

#include <array>
#include <string>
#include <vector>

#include "miar/attention.hpp"
#include "miar/projection.hpp"

namespace miar {

struct CmtStackParams {
    std::vector<AttentionParams> layers;
};

// 1x1 Conv2D with two input channels and one output channel: weight [1,2,1,1], bias [1].
struct MergeParams {
    BlockId weight = 0;
    BlockId bias = 0;
};

// One cross-modality fusion network: two CMT branches sharing the query
// stream, merged, then aggregated by a TFA layer.
struct CmfParams {
    CmtStackParams branch_a;
    CmtStackParams branch_b;
    MergeParams merge;
    AttentionParams tfa;
};

CmtStackParams register_cmt_stack(ParamLayout& layout, const std::string& prefix, const ModelConfig& c);
MergeParams register_merge(ParamLayout& layout, const std::string& prefix);
CmfParams register_cmf(ParamLayout& layout, const std::string& prefix, const ModelConfig& c);

template <typename T>
void init_cmf(ParamSet<T>& params, const CmfParams& cmf, std::mt19937_64& rng);

template <typename T>
struct CmtCache {
    std::vector<MhaCache<T>> layers;
};

// M successive mha_block layers; the query side is refined layer by layer
// while the key/value sequence stays fixed.
template <typename T>
Mat<T> cmt_stack(const Mat<T>& query, const Mat<T>& kv, const ParamSet<T>& params, const CmtStackParams& stack,
                 const Dropout& dropout = {}, CmtCache<T>* cache = nullptr,
                 std::vector<Mat<T>>* score_log = nullptr);

template <typename T>
void cmt_stack_backward(const CmtCache<T>& cache, const Mat<T>& dout, const ParamSet<T>& params,
                        const CmtStackParams& stack, ParamSet<T>& grad, Mat<T>& dquery, Mat<T>& dkv);

// out = w0 * a + w1 * b + bias, elementwise.
template <typename T>
Mat<T> merge_channels(const Mat<T>& a, const Mat<T>& b, const ParamSet<T>& params, const MergeParams& m);

template <typename T>
void merge_channels_backward(const Mat<T>& a, const Mat<T>& b, const Mat<T>& dout, const ParamSet<T>& params,
                             const MergeParams& m, ParamSet<T>& grad, Mat<T>& da, Mat<T>& db);

// Row 0 of a [L, d] sequence.
template <typename T>
RowVec<T> extract_token(const Mat<T>& seq) {
    if (seq.rows() < 1) throw ShapeError("extract_token: sequence has no time steps");
    return seq.row(0);
}

// The four projected streams of one sample, indexed by Stream.
template <typename T>
struct ProjectedStreams {
    std::array<Mat<T>, 4> seq;
    const Mat<T>& operator[](Stream s) const { return seq[static_cast<std::size_t>(s)]; }
    Mat<T>& operator[](Stream s) { return seq[static_cast<std::size_t>(s)]; }
};

// Query stream and the two key/value streams feeding one CMF network.
// Audio and video networks attend to the element-wise mean of both text streams.
struct CmfRouting {
    Stream query;
    bool kv_a_is_text_mean;
    Stream kv_a;
    Stream kv_b;
};
CmfRouting cmf_routing(Stream s);

template <typename T>
struct CmfCache {
    CmtCache<T> branch_a, branch_b;
    Mat<T> out_a, out_b;
    MhaCache<T> tfa;
};

template <typename T>
struct CmfTrace {
    Mat<T> branch_a, branch_b, merged, tfa_out;
};

// Token of one CMF network for one sample. `text_mean` is (F_t1 + F_t2) / 2.
// When `trace` is non-null the full TFA output sequence is also recorded.
template <typename T>
RowVec<T> cmf_forward(Stream stream, const ProjectedStreams<T>& inputs, const Mat<T>& text_mean,
                      const ParamSet<T>& params, const CmfParams& cmf, const Dropout& dropout = {},
                      CmfCache<T>* cache = nullptr, CmfTrace<T>* trace = nullptr,
                      std::vector<Mat<T>>* score_log = nullptr);

// Convenience overload computing the text mean; ArgumentError when any stream is missing.
template <typename T>
RowVec<T> cmf_forward(Stream stream, const ProjectedStreams<T>& inputs, const ParamSet<T>& params,
                      const CmfParams& cmf);

// Adds gradients w.r.t. the projected inputs into dinputs / dtext_mean.
template <typename T>
void cmf_backward(Stream stream, const CmfCache<T>& cache, const RowVec<T>& dtoken, const ParamSet<T>& params,
                  const CmfParams& cmf, ParamSet<T>& grad, ProjectedStreams<T>& dinputs, Mat<T>& dtext_mean);

}  // namespace miar
