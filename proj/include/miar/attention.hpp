#pragma once

#include <random>
#include <string>
#include <vector>

#include "miar/params.hpp"

namespace miar {

struct LayerNormParams {
    BlockId gamma = 0;
    BlockId beta = 0;
};

// One post-norm transformer layer: multi-head attention (queries from one
// sequence, keys/values from another) -> add & norm -> ReLU FFN -> add & norm.
// Per-head Q/K/V maps are the column slices [h*d_h, (h+1)*d_h) of wq/wk/wv.
struct AttentionParams {
    BlockId wq = 0, bq = 0, wk = 0, bk = 0, wv = 0, bv = 0, wo = 0, bo = 0;
    BlockId w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    LayerNormParams ln1, ln2;
    std::size_t d_model = 0;
    std::size_t n_heads = 1;
    std::size_t d_ff = 0;

    std::size_t head_dim() const noexcept { return d_model / n_heads; }
};

AttentionParams register_attention(ParamLayout& layout, const std::string& prefix, std::size_t d_model,
                                   std::size_t n_heads, std::size_t ffn_mult);

template <typename T>
void init_attention(ParamSet<T>& params, const AttentionParams& a, std::mt19937_64& rng);

// Inverted dropout driven by an explicitly passed generator. Inactive when
// rng is null or rate is zero (eval mode).
struct Dropout {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;

    bool active() const noexcept { return rng != nullptr && rate > 0.0; }
    // Keep-mask scaled by 1/(1-rate).
    template <typename T>
    Mat<T> mask(Eigen::Index rows, Eigen::Index cols) const;
};

template <typename T>
struct AttentionOutput {
    Mat<T> values;  // [L_q, d_h]
    Mat<T> scores;  // [L_q, L_kv], rows sum to 1
};

// softmax(Q K^T / sqrt(d_h)) V for a single head; max-subtracted softmax.
template <typename T>
AttentionOutput<T> scaled_dot_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v);

template <typename T>
struct MhaCache {
    Mat<T> xq, xkv;
    Mat<T> q, k, v;
    std::vector<Mat<T>> scores;     // per head, before dropout
    std::vector<Mat<T>> attn_mask;  // per head dropout mask (empty when inactive)
    Mat<T> concat;
    Mat<T> xhat1;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std1;
    Mat<T> y1;
    Mat<T> pre;
    Mat<T> ffn_mask;
    Mat<T> hidden;
    Mat<T> xhat2;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std2;
};

// query_seq [L_q, d], kv_seq [L_kv, d] -> [L_q, d]. Fills `cache` for the
// backward pass and `scores` (per head) for inspection when non-null.
template <typename T>
Mat<T> mha_block(const Mat<T>& query_seq, const Mat<T>& kv_seq, const ParamSet<T>& params,
                 const AttentionParams& a, const Dropout& dropout = {}, MhaCache<T>* cache = nullptr,
                 std::vector<Mat<T>>* scores = nullptr);

// Accumulates parameter gradients into `grad` and adds input gradients into
// dquery / dkv (which must be pre-sized, typically zero).
template <typename T>
void mha_block_backward(const MhaCache<T>& cache, const Mat<T>& dout, const ParamSet<T>& params,
                        const AttentionParams& a, ParamSet<T>& grad, Mat<T>& dquery, Mat<T>& dkv);

// Temporal feature augmentation: a self-attention layer over one stream.
template <typename T>
Mat<T> tfa(const Mat<T>& seq, const ParamSet<T>& params, const AttentionParams& a, const Dropout& dropout = {},
           MhaCache<T>* cache = nullptr, std::vector<Mat<T>>* scores = nullptr) {
    return mha_block(seq, seq, params, a, dropout, cache, scores);
}

template <typename T>
void tfa_backward(const MhaCache<T>& cache, const Mat<T>& dout, const ParamSet<T>& params, const AttentionParams& a,
                  ParamSet<T>& grad, Mat<T>& dseq) {
    mha_block_backward(cache, dout, params, a, grad, dseq, dseq);
}

}  // namespace miar
