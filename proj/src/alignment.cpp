#include "miar/alignment.hpp"

#include <cmath>

namespace miar {

namespace {

constexpr double kNormFloor = 1e-12;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
ColVec<T> row_norms(const Mat<T>& x) {
    return x.rowwise().norm();
}

// Per-row log-sum-exp, max-subtracted.
ColVec<double> logsumexp_rows(const Mat<double>& z) {
    ColVec<double> out(z.rows());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double m = z.row(i).maxCoeff();
        out(i) = m + std::log((z.row(i).array() - m).exp().sum());
    }
    return out;
}

}  // namespace

MlpParams register_mlp(ParamLayout& layout, const std::string& prefix, std::size_t d_in, std::size_t d_hidden,
                       std::size_t d_out) {
    MlpParams m;
    m.d_in = d_in;
    m.d_hidden = d_hidden;
    m.d_out = d_out;
    m.w1 = layout.add_matrix(prefix + ".w1", d_in, d_hidden);
    m.b1 = layout.add_vector(prefix + ".b1", d_hidden);
    m.w2 = layout.add_matrix(prefix + ".w2", d_hidden, d_out);
    m.b2 = layout.add_vector(prefix + ".b2", d_out);
    return m;
}

template <typename T>
void init_mlp(ParamSet<T>& params, const MlpParams& m, std::mt19937_64& rng) {
    init_uniform_fan_in(params, m.w1, m.d_in, rng);
    init_uniform_fan_in(params, m.b1, m.d_in, rng);
    init_uniform_fan_in(params, m.w2, m.d_hidden, rng);
    init_uniform_fan_in(params, m.b2, m.d_hidden, rng);
}

template <typename T>
Mat<T> mlp_forward(const Mat<T>& x, const ParamSet<T>& params, const MlpParams& m, MlpCache<T>* cache) {
    if (static_cast<std::size_t>(x.cols()) != m.d_in) {
        throw ShapeError("mlp: input width " + std::to_string(x.cols()) + " but layer expects " +
                         std::to_string(m.d_in));
    }
    Mat<T> pre = x * params.mat(m.w1);
    pre.rowwise() += params.row(m.b1);
    Mat<T> hidden = pre.cwiseMax(T(0));
    Mat<T> out = hidden * params.mat(m.w2);
    out.rowwise() += params.row(m.b2);
    if (cache) {
        cache->x = x;
        cache->pre = std::move(pre);
        cache->hidden = std::move(hidden);
    }
    return out;
}

template <typename T>
Mat<T> mlp_backward(const MlpCache<T>& c, const Mat<T>& dout, const ParamSet<T>& params, const MlpParams& m,
                    ParamSet<T>& grad) {
    grad.mat(m.w2).noalias() += c.hidden.transpose() * dout;
    grad.row(m.b2) += dout.colwise().sum();
    Mat<T> dpre = dout * params.mat(m.w2).transpose();
    dpre.array() *= (c.pre.array() > T(0)).template cast<T>();
    grad.mat(m.w1).noalias() += c.x.transpose() * dpre;
    grad.row(m.b1) += dpre.colwise().sum();
    return dpre * params.mat(m.w1).transpose();
}

AlignmentParams register_alignment(ParamLayout& layout, std::size_t d_model, std::size_t d_align) {
    AlignmentParams a;
    const std::array<const char*, 4> names{"text1", "text2", "audio", "video"};
    for (std::size_t i = 0; i < 4; ++i) {
        a.mlps[i] = register_mlp(layout, std::string("align.") + names[i], d_model, d_model, d_align);
    }
    return a;
}

template <typename T>
AlignedTokens<T> align_project(const TokenSet<T>& tokens, const ParamSet<T>& params, const AlignmentParams& a,
                               bool normalize, AlignCache<T>* cache) {
    AlignedTokens<T> out;
    for (std::size_t i = 0; i < 4; ++i) {
        Mat<T> raw = mlp_forward(tokens.tokens[i], params, a.mlps[i], cache ? &cache->mlp[i] : nullptr);
        if (normalize) {
            const ColVec<T> n = row_norms(raw).cwiseMax(static_cast<T>(kNormFloor));
            out.rows[i] = raw.array().colwise() / n.array();
        } else {
            out.rows[i] = raw;
        }
        if (cache) cache->raw[i] = std::move(raw);
    }
    return out;
}

template <typename T>
std::array<Mat<T>, 4> align_project_backward(const AlignCache<T>& cache, const AlignedTokens<T>& daligned,
                                             const ParamSet<T>& params, const AlignmentParams& a, bool normalize,
                                             ParamSet<T>& grad) {
    std::array<Mat<T>, 4> dtokens;
    for (std::size_t i = 0; i < 4; ++i) {
        Mat<T> draw;
        if (normalize) {
            const Mat<T>& x = cache.raw[i];
            const ColVec<T> n = row_norms(x).cwiseMax(static_cast<T>(kNormFloor));
            const Mat<T> y = x.array().colwise() / n.array();
            const Mat<T>& dy = daligned.rows[i];
            const ColVec<T> ydy = (y.array() * dy.array()).rowwise().sum();
            draw = dy - (y.array().colwise() * ydy.array()).matrix();
            draw = draw.array().colwise() / n.array();
        } else {
            draw = daligned.rows[i];
        }
        dtokens[i] = mlp_backward(cache.mlp[i], draw, params, a.mlps[i], grad);
    }
    return dtokens;
}

template <typename T>
Mat<T> cosine_similarity_matrix(const Mat<T>& A, const Mat<T>& B) {
    if (A.cols() != B.cols()) throw ShapeError("cosine_similarity_matrix: embedding widths differ");
    const ColVec<T> na = row_norms(A);
    const ColVec<T> nb = row_norms(B);
    Mat<T> dots = A * B.transpose();
    Mat<T> denom = na * nb.transpose();
    denom.array() += static_cast<T>(kCosineEps);
    return dots.cwiseQuotient(denom);
}

template <typename T>
void cosine_similarity_backward(const Mat<T>& A, const Mat<T>& B, const Mat<T>& dM, Mat<T>& dA, Mat<T>& dB) {
    const ColVec<T> na = row_norms(A);
    const ColVec<T> nb = row_norms(B);
    const Mat<T> dots = A * B.transpose();
    Mat<T> denom = na * nb.transpose();
    denom.array() += static_cast<T>(kCosineEps);
    // dM_ij/dA_i = B_j / D_ij - dots_ij * nb_j * A_i / (na_i * D_ij^2), symmetric for B.
    const Mat<T> w = dM.cwiseQuotient(denom);
    const Mat<T> w2 = (w.array() * dots.array() / denom.array()).matrix();
    const ColVec<T> safe_na = na.cwiseMax(static_cast<T>(kNormFloor));
    const ColVec<T> safe_nb = nb.cwiseMax(static_cast<T>(kNormFloor));
    const ColVec<T> coef_a = (w2 * nb).cwiseQuotient(safe_na);
    const ColVec<T> coef_b = (w2.transpose() * na).cwiseQuotient(safe_nb);
    dA.noalias() += w * B;
    dA -= (A.array().colwise() * coef_a.array()).matrix();
    dB.noalias() += w.transpose() * A;
    dB -= (B.array().colwise() * coef_b.array()).matrix();
}

double info_nce_from_similarity(const Mat<double>& M, double tau) {
    if (!(tau > 0.0)) throw ArgumentError("info_nce: temperature must be > 0");
    const Mat<double> z = M / tau;
    const auto n = static_cast<double>(z.rows());
    const ColVec<double> lse_r = logsumexp_rows(z);
    const ColVec<double> lse_c = logsumexp_rows(z.transpose());
    double sum = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i) sum += (lse_r(i) - z(i, i)) + (lse_c(i) - z(i, i));
    return sum / (2.0 * n);
}

template <typename T>
double info_nce(const Mat<T>& A, const Mat<T>& B, double tau, Mat<T>* dA, Mat<T>* dB, T scale) {
    if (!(tau > 0.0)) throw ArgumentError("info_nce: temperature must be > 0");
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw ShapeError("info_nce: A and B must have equal shapes");
    if (A.rows() == 0) throw ShapeError("info_nce: empty batch");
    const Mat<T> M = cosine_similarity_matrix(A, B);
    const Mat<double> Md = M.template cast<double>();
    const double loss = info_nce_from_similarity(Md, tau);
    if (dA && dB) {
        const Eigen::Index n = M.rows();
        const Mat<double> z = Md / tau;
        Mat<double> sr = z;
        for (Eigen::Index i = 0; i < n; ++i) {
            auto r = sr.row(i);
            r.array() -= r.maxCoeff();
            r = r.array().exp().matrix();
            r /= r.sum();
        }
        Mat<double> sc = z.transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
            auto r = sc.row(i);
            r.array() -= r.maxCoeff();
            r = r.array().exp().matrix();
            r /= r.sum();
        }
        Mat<double> dz = sr + sc.transpose();
        dz.diagonal().array() -= 2.0;
        dz /= 2.0 * static_cast<double>(n);
        const Mat<T> dM = (dz * (static_cast<double>(scale) / tau)).template cast<T>();
        cosine_similarity_backward(A, B, dM, *dA, *dB);
    }
    return loss;
}

template <typename T>
double norm_align_loss(const Mat<T>& t1, const Mat<T>& a, const Mat<T>& t2, const Mat<T>& v, int p,
                  AlignedTokens<T>* grad, T scale) {
    if (p != 1 && p != 2) throw ArgumentError("norm_align_loss: p must be 1 or 2");
    check_same_shape(t1, a, "norm_align_loss (t1, a)");
    check_same_shape(t2, v, "norm_align_loss (t2, v)");
    check_same_shape(t1, t2, "norm_align_loss (t1, t2)");
    const Eigen::Index n = t1.rows();
    const Mat<T> d1 = t1 - a;
    const Mat<T> d2 = t2 - v;
    double sum = 0.0;
    ColVec<T> n1, n2;
    if (p == 1) {
        n1 = d1.cwiseAbs().rowwise().sum();
        n2 = d2.cwiseAbs().rowwise().sum();
    } else {
        n1 = row_norms(d1);
        n2 = row_norms(d2);
    }
    for (Eigen::Index i = 0; i < n; ++i) sum += static_cast<double>(n1(i)) + static_cast<double>(n2(i));
    const double loss = sum / (2.0 * static_cast<double>(n));

    if (grad) {
        const T c = scale / static_cast<T>(2 * n);
        Mat<T> g1, g2;
        if (p == 1) {
            // Subgradient 0 at the kink.
            g1 = d1.unaryExpr([](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
            g2 = d2.unaryExpr([](T x) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
        } else {
            const ColVec<T> inv1 = n1.unaryExpr([](T x) { return x > T(0) ? T(1) / x : T(0); });
            const ColVec<T> inv2 = n2.unaryExpr([](T x) { return x > T(0) ? T(1) / x : T(0); });
            g1 = d1.array().colwise() * inv1.array();
            g2 = d2.array().colwise() * inv2.array();
        }
        g1 *= c;
        g2 *= c;
        grad->rows[0] += g1;
        grad->rows[2] -= g1;
        grad->rows[1] += g2;
        grad->rows[3] -= g2;
    }
    return loss;
}

template <typename T>
LossBreakdown alignment_loss(const AlignedTokens<T>& al, const LossConfig& cfg, AlignedTokens<T>* grad, T scale) {
    LossBreakdown out;
    out.alpha = cfg.alpha;
    out.omega = cfg.omega;
    if (cfg.use_contrastive) {
        out.ttcl = static_cast<double>(info_nce(al.t1(), al.t2(), cfg.tau, grad ? &grad->rows[0] : nullptr,
                                                grad ? &grad->rows[1] : nullptr, scale));
        out.avcl = static_cast<double>(info_nce(al.a(), al.v(), cfg.tau, grad ? &grad->rows[2] : nullptr,
                                                grad ? &grad->rows[3] : nullptr, scale));
    }
    if (cfg.use_norm_alignment) {
        out.tatvm = static_cast<double>(norm_align_loss(al.t1(), al.a(), al.t2(), al.v(), cfg.p, grad,
                                                        static_cast<T>(scale * static_cast<T>(cfg.alpha))));
    }
    out.align = out.ttcl + out.avcl + out.alpha * out.tatvm;
    return out;
}

#define MIAR_INSTANTIATE(T)                                                                                      \
    template void init_mlp<T>(ParamSet<T>&, const MlpParams&, std::mt19937_64&);                                \
    template Mat<T> mlp_forward<T>(const Mat<T>&, const ParamSet<T>&, const MlpParams&, MlpCache<T>*);          \
    template Mat<T> mlp_backward<T>(const MlpCache<T>&, const Mat<T>&, const ParamSet<T>&, const MlpParams&,    \
                                    ParamSet<T>&);                                                               \
    template AlignedTokens<T> align_project<T>(const TokenSet<T>&, const ParamSet<T>&, const AlignmentParams&,  \
                                               bool, AlignCache<T>*);                                            \
    template std::array<Mat<T>, 4> align_project_backward<T>(const AlignCache<T>&, const AlignedTokens<T>&,     \
                                                             const ParamSet<T>&, const AlignmentParams&, bool,   \
                                                             ParamSet<T>&);                                      \
    template Mat<T> cosine_similarity_matrix<T>(const Mat<T>&, const Mat<T>&);                                  \
    template void cosine_similarity_backward<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, Mat<T>&, Mat<T>&); \
    template double info_nce<T>(const Mat<T>&, const Mat<T>&, double, Mat<T>*, Mat<T>*, T);                          \
    template double norm_align_loss<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&, int,              \
                                  AlignedTokens<T>*, T);                                                         \
    template LossBreakdown alignment_loss<T>(const AlignedTokens<T>&, const LossConfig&, AlignedTokens<T>*, T);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
