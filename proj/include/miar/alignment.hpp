#pragma once

#include <array>
#include <random>
#include <string>

#include "miar/config.hpp"
#include "miar/params.hpp"

namespace miar {

// Two-layer perceptron d_in -> d_hidden (ReLU) -> d_out.
struct MlpParams {
    BlockId w1 = 0, b1 = 0, w2 = 0, b2 = 0;
    std::size_t d_in = 0, d_hidden = 0, d_out = 0;
};

MlpParams register_mlp(ParamLayout& layout, const std::string& prefix, std::size_t d_in, std::size_t d_hidden,
                       std::size_t d_out);

template <typename T>
void init_mlp(ParamSet<T>& params, const MlpParams& m, std::mt19937_64& rng);

template <typename T>
struct MlpCache {
    Mat<T> x, pre, hidden;
};

// x [N, d_in] -> [N, d_out].
template <typename T>
Mat<T> mlp_forward(const Mat<T>& x, const ParamSet<T>& params, const MlpParams& m, MlpCache<T>* cache = nullptr);

template <typename T>
Mat<T> mlp_backward(const MlpCache<T>& cache, const Mat<T>& dout, const ParamSet<T>& params, const MlpParams& m,
                    ParamSet<T>& grad);

// The four per-sample summary vectors, each [N, d_model], indexed like Stream.
template <typename T>
struct TokenSet {
    std::array<Mat<T>, 4> tokens;
    // Pooled shared-weight features [N, d_model]; empty unless enabled.
    Mat<T> homogeneous;

    Mat<T>& text1() { return tokens[0]; }
    Mat<T>& text2() { return tokens[1]; }
    Mat<T>& audio() { return tokens[2]; }
    Mat<T>& video() { return tokens[3]; }
    const Mat<T>& text1() const { return tokens[0]; }
    const Mat<T>& text2() const { return tokens[1]; }
    const Mat<T>& audio() const { return tokens[2]; }
    const Mat<T>& video() const { return tokens[3]; }
    Eigen::Index size() const { return tokens[0].rows(); }
};

// Aligned embeddings t1, t2, a, v, each [N, d_align].
template <typename T>
struct AlignedTokens {
    std::array<Mat<T>, 4> rows;

    const Mat<T>& t1() const { return rows[0]; }
    const Mat<T>& t2() const { return rows[1]; }
    const Mat<T>& a() const { return rows[2]; }
    const Mat<T>& v() const { return rows[3]; }
};

struct AlignmentParams {
    std::array<MlpParams, 4> mlps;
};

AlignmentParams register_alignment(ParamLayout& layout, std::size_t d_model, std::size_t d_align);

template <typename T>
struct AlignCache {
    std::array<MlpCache<T>, 4> mlp;
    std::array<Mat<T>, 4> raw;  // MLP outputs before normalization
};

// Each stream through its own MLP; rows L2-normalized when `normalize`.
template <typename T>
AlignedTokens<T> align_project(const TokenSet<T>& tokens, const ParamSet<T>& params, const AlignmentParams& a,
                               bool normalize, AlignCache<T>* cache = nullptr);

// Returns d(tokens) for the four streams given d(aligned).
template <typename T>
std::array<Mat<T>, 4> align_project_backward(const AlignCache<T>& cache, const AlignedTokens<T>& daligned,
                                             const ParamSet<T>& params, const AlignmentParams& a, bool normalize,
                                             ParamSet<T>& grad);

inline constexpr double kCosineEps = 1e-8;

// M[i, j] = A_i . B_j / (|A_i| |B_j| + 1e-8).
template <typename T>
Mat<T> cosine_similarity_matrix(const Mat<T>& A, const Mat<T>& B);

// Accumulates gradients of sum(dM .* M) into dA and dB.
template <typename T>
void cosine_similarity_backward(const Mat<T>& A, const Mat<T>& B, const Mat<T>& dM, Mat<T>& dA, Mat<T>& dB);

// Symmetric InfoNCE over cosine similarities with diagonal positives:
// (1/2N) sum_i [ -log softmax_row(M/tau)_ii - log softmax_col(M/tau)_ii ].
// When dA/dB are non-null, adds scale * gradient into them.
template <typename T>
double info_nce(const Mat<T>& A, const Mat<T>& B, double tau, Mat<T>* dA = nullptr, Mat<T>* dB = nullptr,
           T scale = T(1));

// Same loss evaluated on a precomputed similarity matrix.
double info_nce_from_similarity(const Mat<double>& M, double tau);

// (1/2N) sum_i (|t1_i - a_i|_p + |t2_i - v_i|_p), p in {1, 2}.
template <typename T>
double norm_align_loss(const Mat<T>& t1, const Mat<T>& a, const Mat<T>& t2, const Mat<T>& v, int p,
                  AlignedTokens<T>* grad = nullptr, T scale = T(1));

struct LossBreakdown {
    double ttcl = 0.0;
    double avcl = 0.0;
    double tatvm = 0.0;
    double align = 0.0;
    double task = 0.0;
    double total = 0.0;
    double alpha = 1.0;
    double omega = 0.1;
};

// Fills ttcl, avcl, tatvm, align and alpha. A disabled term is recorded as 0
// and dropped from align. When `grad` is non-null, adds `scale` * d(align)
// into it (the rows must be pre-sized).
template <typename T>
LossBreakdown alignment_loss(const AlignedTokens<T>& aligned, const LossConfig& cfg,
                             AlignedTokens<T>* grad = nullptr, T scale = T(1));

}  // namespace miar
