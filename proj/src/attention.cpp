#include "miar/attention.hpp"

#include <cmath>

namespace miar {

namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void softmax_rows(Mat<T>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        r.array() -= r.maxCoeff();
        r = r.array().exp().matrix();
        r /= r.sum();
    }
}

template <typename T>
Mat<T> layer_norm(const Mat<T>& z, const ParamSet<T>& params, const LayerNormParams& ln, Mat<T>& xhat,
                  ColVec<T>& inv_std) {
    const auto d = static_cast<T>(z.cols());
    const ColVec<T> mean = z.rowwise().sum() / d;
    xhat = z.colwise() - mean;
    const ColVec<T> var = xhat.array().square().rowwise().sum() / d;
    inv_std = (var.array() + static_cast<T>(kLayerNormEps)).rsqrt();
    xhat = xhat.array().colwise() * inv_std.array();
    Mat<T> y = xhat.array().rowwise() * params.row(ln.gamma).array();
    y.rowwise() += params.row(ln.beta);
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& inv_std,
                           const ParamSet<T>& params, const LayerNormParams& ln, ParamSet<T>& grad) {
    grad.row(ln.gamma) += (dy.array() * xhat.array()).colwise().sum().matrix();
    grad.row(ln.beta) += dy.colwise().sum();
    const Mat<T> dxhat = dy.array().rowwise() * params.row(ln.gamma).array();
    const auto d = static_cast<T>(dy.cols());
    const ColVec<T> mean_dx = dxhat.rowwise().sum() / d;
    const ColVec<T> mean_dx_x = (dxhat.array() * xhat.array()).rowwise().sum().matrix() / d;
    Mat<T> dz = dxhat.colwise() - mean_dx;
    dz -= (xhat.array().colwise() * mean_dx_x.array()).matrix();
    dz = dz.array().colwise() * inv_std.array();
    return dz;
}

template <typename T>
void check_width(const Mat<T>& x, std::size_t d, const char* what) {
    if (static_cast<std::size_t>(x.cols()) != d) {
        throw ShapeError(std::string(what) + ": width " + std::to_string(x.cols()) + " but block expects " +
                         std::to_string(d));
    }
    if (x.rows() == 0) throw ShapeError(std::string(what) + ": empty sequence");
}

}  // namespace

AttentionParams register_attention(ParamLayout& layout, const std::string& prefix, std::size_t d_model,
                                   std::size_t n_heads, std::size_t ffn_mult) {
    AttentionParams a;
    a.d_model = d_model;
    a.n_heads = n_heads;
    a.d_ff = d_model * ffn_mult;
    a.wq = layout.add_matrix(prefix + ".wq", d_model, d_model);
    a.bq = layout.add_vector(prefix + ".bq", d_model);
    a.wk = layout.add_matrix(prefix + ".wk", d_model, d_model);
    a.bk = layout.add_vector(prefix + ".bk", d_model);
    a.wv = layout.add_matrix(prefix + ".wv", d_model, d_model);
    a.bv = layout.add_vector(prefix + ".bv", d_model);
    a.wo = layout.add_matrix(prefix + ".wo", d_model, d_model);
    a.bo = layout.add_vector(prefix + ".bo", d_model);
    a.ln1 = {layout.add_vector(prefix + ".ln1.gamma", d_model), layout.add_vector(prefix + ".ln1.beta", d_model)};
    a.w1 = layout.add_matrix(prefix + ".ffn.w1", d_model, a.d_ff);
    a.b1 = layout.add_vector(prefix + ".ffn.b1", a.d_ff);
    a.w2 = layout.add_matrix(prefix + ".ffn.w2", a.d_ff, d_model);
    a.b2 = layout.add_vector(prefix + ".ffn.b2", d_model);
    a.ln2 = {layout.add_vector(prefix + ".ln2.gamma", d_model), layout.add_vector(prefix + ".ln2.beta", d_model)};
    return a;
}

template <typename T>
void init_attention(ParamSet<T>& params, const AttentionParams& a, std::mt19937_64& rng) {
    for (auto [w, b] : {std::pair{a.wq, a.bq}, std::pair{a.wk, a.bk}, std::pair{a.wv, a.bv},
                        std::pair{a.wo, a.bo}, std::pair{a.w1, a.b1}}) {
        init_uniform_fan_in(params, w, a.d_model, rng);
        init_uniform_fan_in(params, b, a.d_model, rng);
    }
    init_uniform_fan_in(params, a.w2, a.d_ff, rng);
    init_uniform_fan_in(params, a.b2, a.d_ff, rng);
    for (const auto& ln : {a.ln1, a.ln2}) {
        init_constant(params, ln.gamma, T(1));
        init_constant(params, ln.beta, T(0));
    }
}

template <typename T>
Mat<T> Dropout::mask(Eigen::Index rows, Eigen::Index cols) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    Mat<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(*rng) < rate ? T(0) : keep;
    return m;
}

template <typename T>
AttentionOutput<T> scaled_dot_attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v) {
    if (q.cols() != k.cols()) {
        throw ShapeError("scaled_dot_attention: query head dim " + std::to_string(q.cols()) + " vs key head dim " +
                         std::to_string(k.cols()));
    }
    if (k.rows() != v.rows()) throw ShapeError("scaled_dot_attention: key/value length mismatch");
    if (q.rows() == 0 || k.rows() == 0) throw ShapeError("scaled_dot_attention: empty sequence");
    AttentionOutput<T> out;
    const T scale = T(1) / std::sqrt(static_cast<T>(q.cols()));
    out.scores.noalias() = (q * k.transpose()) * scale;
    softmax_rows(out.scores);
    out.values.noalias() = out.scores * v;
    return out;
}

template <typename T>
Mat<T> mha_block(const Mat<T>& xq, const Mat<T>& xkv, const ParamSet<T>& params, const AttentionParams& a,
                 const Dropout& dropout, MhaCache<T>* cache, std::vector<Mat<T>>* scores_out) {
    check_width(xq, a.d_model, "mha_block query");
    check_width(xkv, a.d_model, "mha_block key/value");
    const auto H = static_cast<Eigen::Index>(a.n_heads);
    const auto dh = static_cast<Eigen::Index>(a.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> q = xq * params.mat(a.wq);
    q.rowwise() += params.row(a.bq);
    Mat<T> k = xkv * params.mat(a.wk);
    k.rowwise() += params.row(a.bk);
    Mat<T> v = xkv * params.mat(a.wv);
    v.rowwise() += params.row(a.bv);

    Mat<T> concat(xq.rows(), static_cast<Eigen::Index>(a.d_model));
    if (cache) {
        cache->scores.resize(a.n_heads);
        cache->attn_mask.assign(a.n_heads, Mat<T>());
    }
    if (scores_out) scores_out->resize(a.n_heads);
    Mat<T> s;
    for (Eigen::Index h = 0; h < H; ++h) {
        s.noalias() = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose();
        s *= scale;
        softmax_rows(s);
        if (scores_out) (*scores_out)[h] = s;
        if (dropout.active()) {
            Mat<T> m = dropout.mask<T>(s.rows(), s.cols());
            concat.middleCols(h * dh, dh).noalias() = (s.array() * m.array()).matrix() * v.middleCols(h * dh, dh);
            if (cache) cache->attn_mask[h] = std::move(m);
        } else {
            concat.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
        }
        if (cache) cache->scores[h] = s;
    }

    Mat<T> z1 = xq + concat * params.mat(a.wo);
    z1.rowwise() += params.row(a.bo);
    Mat<T> xhat1;
    ColVec<T> inv1;
    Mat<T> y1 = layer_norm(z1, params, a.ln1, xhat1, inv1);

    Mat<T> pre = y1 * params.mat(a.w1);
    pre.rowwise() += params.row(a.b1);
    Mat<T> hidden = pre.cwiseMax(T(0));
    Mat<T> fmask;
    if (dropout.active()) {
        fmask = dropout.mask<T>(hidden.rows(), hidden.cols());
        hidden.array() *= fmask.array();
    }
    Mat<T> z2 = y1 + hidden * params.mat(a.w2);
    z2.rowwise() += params.row(a.b2);
    Mat<T> xhat2;
    ColVec<T> inv2;
    Mat<T> y = layer_norm(z2, params, a.ln2, xhat2, inv2);

    if (cache) {
        cache->xq = xq;
        cache->xkv = xkv;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->concat = std::move(concat);
        cache->xhat1 = std::move(xhat1);
        cache->inv_std1 = std::move(inv1);
        cache->y1 = std::move(y1);
        cache->pre = std::move(pre);
        cache->ffn_mask = std::move(fmask);
        cache->hidden = std::move(hidden);
        cache->xhat2 = std::move(xhat2);
        cache->inv_std2 = std::move(inv2);
    }
    return y;
}

template <typename T>
void mha_block_backward(const MhaCache<T>& c, const Mat<T>& dout, const ParamSet<T>& params,
                        const AttentionParams& a, ParamSet<T>& grad, Mat<T>& dquery, Mat<T>& dkv) {
    const auto H = static_cast<Eigen::Index>(a.n_heads);
    const auto dh = static_cast<Eigen::Index>(a.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    // Second sublayer: y = LN2(y1 + FFN(y1)).
    const Mat<T> dz2 = layer_norm_backward(dout, c.xhat2, c.inv_std2, params, a.ln2, grad);
    grad.mat(a.w2).noalias() += c.hidden.transpose() * dz2;
    grad.row(a.b2) += dz2.colwise().sum();
    Mat<T> dpre = dz2 * params.mat(a.w2).transpose();
    if (c.ffn_mask.size() > 0) dpre.array() *= c.ffn_mask.array();
    dpre.array() *= (c.pre.array() > T(0)).template cast<T>();
    grad.mat(a.w1).noalias() += c.y1.transpose() * dpre;
    grad.row(a.b1) += dpre.colwise().sum();
    Mat<T> dy1 = dz2;
    dy1.noalias() += dpre * params.mat(a.w1).transpose();

    // First sublayer: y1 = LN1(xq + MHA(xq, xkv)).
    const Mat<T> dz1 = layer_norm_backward(dy1, c.xhat1, c.inv_std1, params, a.ln1, grad);
    grad.mat(a.wo).noalias() += c.concat.transpose() * dz1;
    grad.row(a.bo) += dz1.colwise().sum();
    const Mat<T> dconcat = dz1 * params.mat(a.wo).transpose();

    Mat<T> dq(c.q.rows(), c.q.cols());
    Mat<T> dk(c.k.rows(), c.k.cols());
    Mat<T> dv(c.v.rows(), c.v.cols());
    Mat<T> dp;
    for (Eigen::Index h = 0; h < H; ++h) {
        const Mat<T>& s = c.scores[h];
        const auto dO = dconcat.middleCols(h * dh, dh);
        const auto vh = c.v.middleCols(h * dh, dh);
        dp.noalias() = dO * vh.transpose();
        if (c.attn_mask[h].size() > 0) {
            dv.middleCols(h * dh, dh).noalias() = (s.array() * c.attn_mask[h].array()).matrix().transpose() * dO;
            dp.array() *= c.attn_mask[h].array();
        } else {
            dv.middleCols(h * dh, dh).noalias() = s.transpose() * dO;
        }
        // Softmax Jacobian: dlogit = s * (dp - rowsum(dp * s)).
        const ColVec<T> rowdot = (dp.array() * s.array()).rowwise().sum();
        Mat<T> dlogit = (s.array() * (dp.colwise() - rowdot).array()).matrix();
        dlogit *= scale;
        dq.middleCols(h * dh, dh).noalias() = dlogit * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = dlogit.transpose() * c.q.middleCols(h * dh, dh);
    }

    grad.mat(a.wq).noalias() += c.xq.transpose() * dq;
    grad.row(a.bq) += dq.colwise().sum();
    grad.mat(a.wk).noalias() += c.xkv.transpose() * dk;
    grad.row(a.bk) += dk.colwise().sum();
    grad.mat(a.wv).noalias() += c.xkv.transpose() * dv;
    grad.row(a.bv) += dv.colwise().sum();

    dquery += dz1;
    dquery.noalias() += dq * params.mat(a.wq).transpose();
    dkv.noalias() += dk * params.mat(a.wk).transpose();
    dkv.noalias() += dv * params.mat(a.wv).transpose();
}

#define MIAR_INSTANTIATE(T)                                                                                   \
    template void init_attention<T>(ParamSet<T>&, const AttentionParams&, std::mt19937_64&);                 \
    template Mat<T> Dropout::mask<T>(Eigen::Index, Eigen::Index) const;                                       \
    template AttentionOutput<T> scaled_dot_attention<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&);         \
    template Mat<T> mha_block<T>(const Mat<T>&, const Mat<T>&, const ParamSet<T>&, const AttentionParams&,    \
                                 const Dropout&, MhaCache<T>*, std::vector<Mat<T>>*);                         \
    template void mha_block_backward<T>(const MhaCache<T>&, const Mat<T>&, const ParamSet<T>&,                \
                                        const AttentionParams&, ParamSet<T>&, Mat<T>&, Mat<T>&);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
