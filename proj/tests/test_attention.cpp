#include <gtest/gtest.h>

#include <numeric>

#include "miar/attention.hpp"
#include "miar/errors.hpp"
#include "test_support.hpp"

using namespace miar;
using namespace miar::test;

namespace {

struct Block {
    std::shared_ptr<ParamLayout> layout = std::make_shared<ParamLayout>();
    AttentionParams a;
    ParamSet<double> p;

    Block(std::size_t d, std::size_t h, std::size_t ffn_mult = 2, std::uint64_t seed = 1) {
        a = register_attention(*layout, "blk", d, h, ffn_mult);
        p = ParamSet<double>(layout);
        std::mt19937_64 rng(seed);
        init_attention(p, a, rng);
        // Non-trivial layer norm affine so its gradients are exercised.
        std::uniform_real_distribution<double> u(0.5, 1.5);
        for (auto id : {a.ln1.gamma, a.ln2.gamma})
            for (Eigen::Index i = 0; i < p.row(id).size(); ++i) p.row(id)(i) = u(rng);
        for (auto id : {a.ln1.beta, a.ln2.beta})
            for (Eigen::Index i = 0; i < p.row(id).size(); ++i) p.row(id)(i) = u(rng) - 1.0;
    }
};

using Grid = std::vector<std::vector<double>>;

Grid to_grid(const Mat<double>& m) {
    Grid g(m.rows(), std::vector<double>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) g[i][j] = m(i, j);
    return g;
}

Mat<double> from_grid(const Grid& g) {
    Mat<double> m(static_cast<Eigen::Index>(g.size()), static_cast<Eigen::Index>(g[0].size()));
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g[0].size(); ++j) m(i, j) = g[i][j];
    return m;
}

// x W + b with W stored [in, out].
Grid affine(const Grid& x, const Mat<double>& w, const RowVec<double>& b) {
    Grid y(x.size(), std::vector<double>(w.cols()));
    for (std::size_t t = 0; t < x.size(); ++t)
        for (Eigen::Index o = 0; o < w.cols(); ++o) {
            double acc = b(o);
            for (Eigen::Index i = 0; i < w.rows(); ++i) acc += x[t][i] * w(i, o);
            y[t][o] = acc;
        }
    return y;
}

Grid layer_norm(const Grid& z, const RowVec<double>& g, const RowVec<double>& b) {
    Grid y = z;
    for (std::size_t t = 0; t < z.size(); ++t) {
        const double n = static_cast<double>(z[t].size());
        double mean = 0;
        for (double v : z[t]) mean += v;
        mean /= n;
        double var = 0;
        for (double v : z[t]) var += (v - mean) * (v - mean);
        var /= n;
        for (std::size_t k = 0; k < z[t].size(); ++k) y[t][k] = g(k) * (z[t][k] - mean) / std::sqrt(var + 1e-5) + b(k);
    }
    return y;
}

// Single-head attention by explicit loops.
Grid attention_oracle(const Grid& q, const Grid& k, const Grid& v, Grid* scores = nullptr) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
    Grid out(q.size(), std::vector<double>(v[0].size(), 0.0));
    Grid s(q.size(), std::vector<double>(k.size()));
    for (std::size_t i = 0; i < q.size(); ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < k.size(); ++j) {
            double dot = 0;
            for (std::size_t c = 0; c < q[0].size(); ++c) dot += q[i][c] * k[j][c];
            s[i][j] = dot * scale;
            mx = std::max(mx, s[i][j]);
        }
        double z = 0;
        for (auto& x : s[i]) z += (x = std::exp(x - mx));
        for (auto& x : s[i]) x /= z;
        for (std::size_t j = 0; j < k.size(); ++j)
            for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += s[i][j] * v[j][c];
    }
    if (scores) *scores = s;
    return out;
}

Mat<double> mha_oracle(const Mat<double>& xq_m, const Mat<double>& xkv_m, const Block& b) {
    const auto& a = b.a;
    const auto& p = b.p;
    const Grid xq = to_grid(xq_m), xkv = to_grid(xkv_m);
    const Grid q = affine(xq, p.mat(a.wq), p.row(a.bq));
    const Grid k = affine(xkv, p.mat(a.wk), p.row(a.bk));
    const Grid v = affine(xkv, p.mat(a.wv), p.row(a.bv));
    const std::size_t dh = a.head_dim();
    Grid concat(xq.size(), std::vector<double>(a.d_model));
    for (std::size_t h = 0; h < a.n_heads; ++h) {
        const auto slice = [&](const Grid& g) {
            Grid s(g.size(), std::vector<double>(dh));
            for (std::size_t t = 0; t < g.size(); ++t)
                for (std::size_t c = 0; c < dh; ++c) s[t][c] = g[t][h * dh + c];
            return s;
        };
        const Grid o = attention_oracle(slice(q), slice(k), slice(v));
        for (std::size_t t = 0; t < o.size(); ++t)
            for (std::size_t c = 0; c < dh; ++c) concat[t][h * dh + c] = o[t][c];
    }
    Grid z1 = affine(concat, p.mat(a.wo), p.row(a.bo));
    for (std::size_t t = 0; t < z1.size(); ++t)
        for (std::size_t c = 0; c < a.d_model; ++c) z1[t][c] += xq[t][c];
    const Grid y1 = layer_norm(z1, p.row(a.ln1.gamma), p.row(a.ln1.beta));
    Grid hid = affine(y1, p.mat(a.w1), p.row(a.b1));
    for (auto& r : hid)
        for (auto& x : r) x = std::max(0.0, x);
    Grid z2 = affine(hid, p.mat(a.w2), p.row(a.b2));
    for (std::size_t t = 0; t < z2.size(); ++t)
        for (std::size_t c = 0; c < a.d_model; ++c) z2[t][c] += y1[t][c];
    return from_grid(layer_norm(z2, p.row(a.ln2.gamma), p.row(a.ln2.beta)));
}

}  // namespace

TEST(ScaledDotAttention, SingleKeyBroadcastsValue) {
    std::mt19937_64 rng(1);
    const Mat<double> q = random_mat(5, 4, rng), k = random_mat(1, 4, rng), v = random_mat(1, 3, rng);
    const auto out = scaled_dot_attention(q, k, v);
    for (Eigen::Index i = 0; i < 5; ++i) {
        EXPECT_DOUBLE_EQ(out.scores(i, 0), 1.0);
        EXPECT_LT((out.values.row(i) - v.row(0)).cwiseAbs().maxCoeff(), 1e-15);
    }
}

TEST(ScaledDotAttention, ZeroQueryGivesUniformScores) {
    std::mt19937_64 rng(2);
    const Mat<double> q = Mat<double>::Zero(2, 4), k = random_mat(3, 4, rng), v = random_mat(3, 5, rng);
    const auto out = scaled_dot_attention(q, k, v);
    const RowVec<double> mean = v.colwise().mean();
    for (Eigen::Index i = 0; i < 2; ++i) {
        for (Eigen::Index j = 0; j < 3; ++j) EXPECT_NEAR(out.scores(i, j), 1.0 / 3.0, 1e-15);
        EXPECT_LT((out.values.row(i) - mean).cwiseAbs().maxCoeff(), 1e-14);
    }
}

TEST(ScaledDotAttention, MatchesLoopOracle) {
    std::mt19937_64 rng(3);
    const Mat<double> q = random_mat(2, 4, rng), k = random_mat(3, 4, rng), v = random_mat(3, 4, rng);
    Grid s;
    const Mat<double> want = from_grid(attention_oracle(to_grid(q), to_grid(k), to_grid(v), &s));
    const auto got = scaled_dot_attention(q, k, v);
    EXPECT_LT(max_abs_diff(got.values, want), 1e-6);
    EXPECT_LT(max_abs_diff(got.scores, from_grid(s)), 1e-6);
}

TEST(ScaledDotAttention, LargeLogitsStayFinite) {
    const Mat<double> q = Mat<double>::Constant(1, 2, 500.0);
    const Mat<double> k = (Mat<double>(2, 2) << 1.0, 1.0, -1.0, -1.0).finished();
    const Mat<double> v = (Mat<double>(2, 1) << 2.0, 7.0).finished();
    const auto out = scaled_dot_attention(q, k, v);
    EXPECT_TRUE(out.values.allFinite());
    EXPECT_NEAR(out.values(0, 0), 2.0, 1e-12);
}

TEST(ScaledDotAttention, HeadDimMismatchIsShapeError) {
    const Mat<double> q = Mat<double>::Zero(2, 4), k = Mat<double>::Zero(3, 5), v = Mat<double>::Zero(3, 5);
    EXPECT_THROW(scaled_dot_attention(q, k, v), ShapeError);
}

TEST(MhaBlock, MatchesLoopOracle) {
    Block b(8, 2, 2, 7);
    std::mt19937_64 rng(4);
    const Mat<double> xq = random_mat(3, 8, rng), xkv = random_mat(5, 8, rng);
    EXPECT_LT(max_abs_diff(mha_block(xq, xkv, b.p, b.a), mha_oracle(xq, xkv, b)), 1e-10);
}

TEST(MhaBlock, OutputShapeFollowsQuery) {
    Block b(50, 5, 4, 2);
    std::mt19937_64 rng(5);
    const Mat<double> out = mha_block(random_mat(3, 50, rng), random_mat(9, 50, rng), b.p, b.a);
    EXPECT_EQ(out.rows(), 3);
    EXPECT_EQ(out.cols(), 50);
}

TEST(MhaBlock, ScoreRowsSumToOne) {
    Block b(8, 2, 2, 3);
    std::mt19937_64 rng(6);
    std::vector<Mat<double>> scores;
    mha_block(random_mat(4, 8, rng), random_mat(6, 8, rng), b.p, b.a, Dropout{}, static_cast<MhaCache<double>*>(nullptr), &scores);
    ASSERT_EQ(scores.size(), 2u);
    for (const auto& s : scores) {
        EXPECT_EQ(s.rows(), 4);
        EXPECT_EQ(s.cols(), 6);
        for (Eigen::Index i = 0; i < s.rows(); ++i) EXPECT_NEAR(s.row(i).sum(), 1.0, 1e-12);
    }
}

TEST(MhaBlock, WidthMismatchIsShapeError) {
    Block b(8, 2);
    EXPECT_THROW(mha_block(Mat<double>(Mat<double>::Zero(2, 6)), Mat<double>(Mat<double>::Zero(2, 8)), b.p, b.a),
                 ShapeError);
}

TEST(MhaBlock, GradientMatchesFiniteDifferences) {
    // N = 2 samples, L = 3, d = 8, h = 2; loss = sum of all outputs.
    Block b(8, 2, 2, 9);
    std::mt19937_64 rng(7);
    const std::array<Mat<double>, 2> xq{random_mat(3, 8, rng), random_mat(3, 8, rng)};
    const std::array<Mat<double>, 2> xkv{random_mat(3, 8, rng), random_mat(3, 8, rng)};
    ParamSet<double> grad(b.layout);
    std::array<Mat<double>, 2> dq, dkv;
    for (int n = 0; n < 2; ++n) {
        MhaCache<double> cache;
        const Mat<double> y = mha_block(xq[n], xkv[n], b.p, b.a, Dropout{}, &cache);
        dq[n] = Mat<double>::Zero(3, 8);
        dkv[n] = Mat<double>::Zero(3, 8);
        mha_block_backward(cache, Mat<double>(Mat<double>::Ones(3, 8)), b.p, b.a, grad, dq[n], dkv[n]);
    }
    // Summed LN outputs have near-zero gradient w.r.t. pre-norm weights, so weight
    // the outputs to keep every path informative.
    const Mat<double> wts = random_mat(3, 8, rng);
    ParamSet<double> grad_w(b.layout);
    for (int n = 0; n < 2; ++n) {
        MhaCache<double> cache;
        mha_block(xq[n], xkv[n], b.p, b.a, Dropout{}, &cache);
        Mat<double> a = Mat<double>::Zero(3, 8), c = Mat<double>::Zero(3, 8);
        mha_block_backward(cache, wts, b.p, b.a, grad_w, a, c);
    }
    const auto sum_loss = [&] {
        double s = 0;
        for (int n = 0; n < 2; ++n) s += mha_block(xq[n], xkv[n], b.p, b.a).sum();
        return s;
    };
    const auto weighted_loss = [&] {
        double s = 0;
        for (int n = 0; n < 2; ++n) s += (mha_block(xq[n], xkv[n], b.p, b.a).array() * wts.array()).sum();
        return s;
    };
    const auto all = all_indices(b.p.size());
    const auto r1 = finite_difference(b.p, grad, sum_loss, all);
    EXPECT_LE(r1.max_rel, 1e-4) << r1.worst;
    const auto r2 = finite_difference(b.p, grad_w, weighted_loss, all);
    EXPECT_LE(r2.max_rel, 1e-4) << r2.worst;

    // Input gradients.
    for (int n = 0; n < 2; ++n) {
        for (Eigen::Index i = 0; i < 24; ++i) {
            Mat<double> up = xq[n], dn = xq[n];
            up.data()[i] += 1e-6;
            dn.data()[i] -= 1e-6;
            const double fd = (mha_block(up, xkv[n], b.p, b.a).sum() - mha_block(dn, xkv[n], b.p, b.a).sum()) / 2e-6;
            EXPECT_NEAR(dq[n].data()[i], fd, 1e-6);
            up = xkv[n];
            dn = xkv[n];
            up.data()[i] += 1e-6;
            dn.data()[i] -= 1e-6;
            const double fk = (mha_block(xq[n], up, b.p, b.a).sum() - mha_block(xq[n], dn, b.p, b.a).sum()) / 2e-6;
            EXPECT_NEAR(dkv[n].data()[i], fk, 1e-6);
        }
    }
}

TEST(MhaBlock, DropoutIsDeterministicPerSeedAndInactiveInEval) {
    Block b(8, 2, 2, 4);
    std::mt19937_64 rng(8);
    const Mat<double> x = random_mat(4, 8, rng);
    std::mt19937_64 r1(5), r2(5);
    const Mat<double> a = mha_block(x, x, b.p, b.a, Dropout{0.3, &r1});
    const Mat<double> c = mha_block(x, x, b.p, b.a, Dropout{0.3, &r2});
    EXPECT_EQ(a, c);
    const Mat<double> eval = mha_block(x, x, b.p, b.a, Dropout{0.3, nullptr});
    EXPECT_EQ(eval, mha_block(x, x, b.p, b.a));
    EXPECT_GT(max_abs_diff(a, eval), 0.0);
}

TEST(MhaBlock, DropoutBackwardMatchesFiniteDifferences) {
    // A fixed mask makes the block differentiable; replay the same seed per evaluation.
    Block b(8, 2, 2, 5);
    std::mt19937_64 rng(9);
    const Mat<double> xq = random_mat(3, 8, rng), xkv = random_mat(4, 8, rng), w = random_mat(3, 8, rng);
    const auto run = [&](MhaCache<double>* cache) {
        std::mt19937_64 r(77);
        return mha_block(xq, xkv, b.p, b.a, Dropout{0.25, &r}, cache);
    };
    MhaCache<double> cache;
    run(&cache);
    ParamSet<double> grad(b.layout);
    Mat<double> dq = Mat<double>::Zero(3, 8), dkv = Mat<double>::Zero(4, 8);
    mha_block_backward(cache, w, b.p, b.a, grad, dq, dkv);
    const auto loss = [&] { return (run(nullptr).array() * w.array()).sum(); };
    EXPECT_LE(finite_difference(b.p, grad, loss, all_indices(b.p.size())).max_rel, 1e-4);
}

TEST(Tfa, SingleStepAttentionIsIdentity) {
    // With one time step the attention output is just the value projection of
    // that step, so the block reduces to its affine/LayerNorm/FFN pipeline.
    Block b(8, 2, 2, 6);
    std::mt19937_64 rng(10);
    const Mat<double> x = random_mat(1, 8, rng);
    std::vector<Mat<double>> scores;
    const Mat<double> y = tfa(x, b.p, b.a, Dropout{}, static_cast<MhaCache<double>*>(nullptr), &scores);
    for (const auto& s : scores) EXPECT_DOUBLE_EQ(s(0, 0), 1.0);

    Mat<double> v = x * b.p.mat(b.a.wv);
    v.rowwise() += b.p.row(b.a.bv);
    Mat<double> z1 = x + v * b.p.mat(b.a.wo);
    z1.rowwise() += b.p.row(b.a.bo);
    const Grid y1 = layer_norm(to_grid(z1), b.p.row(b.a.ln1.gamma), b.p.row(b.a.ln1.beta));
    Grid h = affine(y1, b.p.mat(b.a.w1), b.p.row(b.a.b1));
    for (auto& r : h)
        for (auto& e : r) e = std::max(0.0, e);
    Grid z2 = affine(h, b.p.mat(b.a.w2), b.p.row(b.a.b2));
    for (std::size_t c = 0; c < 8; ++c) z2[0][c] += y1[0][c];
    const Mat<double> want = from_grid(layer_norm(z2, b.p.row(b.a.ln2.gamma), b.p.row(b.a.ln2.beta)));
    EXPECT_LT(max_abs_diff(y, want), 1e-12);
}

TEST(Tfa, PermutationEquivariant) {
    Block b(50, 5, 4, 8);
    std::mt19937_64 rng(11);
    const Mat<double> x = random_mat(50, 50, rng);
    std::vector<int> perm(50);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Mat<double> xp(50, 50);
    for (int t = 0; t < 50; ++t) xp.row(t) = x.row(perm[t]);
    const Mat<double> y = tfa(x, b.p, b.a);
    const Mat<double> yp = tfa(xp, b.p, b.a);
    ASSERT_EQ(y.rows(), 50);
    ASSERT_EQ(y.cols(), 50);
    double worst = 0;
    for (int t = 0; t < 50; ++t) worst = std::max(worst, (yp.row(t) - y.row(perm[t])).cwiseAbs().maxCoeff());
    EXPECT_LT(worst, 1e-10);
}

TEST(Tfa, BackwardMatchesFiniteDifferencesOnInput) {
    Block b(8, 2, 2, 12);
    std::mt19937_64 rng(12);
    const Mat<double> x = random_mat(4, 8, rng), w = random_mat(4, 8, rng);
    MhaCache<double> cache;
    tfa(x, b.p, b.a, Dropout{}, &cache);
    ParamSet<double> grad(b.layout);
    Mat<double> dx = Mat<double>::Zero(4, 8);
    tfa_backward(cache, w, b.p, b.a, grad, dx);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Mat<double> up = x, dn = x;
        up.data()[i] += 1e-6;
        dn.data()[i] -= 1e-6;
        const double fd =
            ((tfa(up, b.p, b.a).array() * w.array()).sum() - (tfa(dn, b.p, b.a).array() * w.array()).sum()) / 2e-6;
        EXPECT_NEAR(dx.data()[i], fd, 1e-6);
    }
}

TEST(AttentionInit, LayerNormStartsAtIdentity) {
    auto layout = std::make_shared<ParamLayout>();
    const auto a = register_attention(*layout, "x", 8, 2, 4);
    ParamSet<float> p(layout);
    std::mt19937_64 rng(1);
    init_attention(p, a, rng);
    EXPECT_TRUE((p.row(a.ln1.gamma).array() == 1.0f).all());
    EXPECT_TRUE((p.row(a.ln2.beta).array() == 0.0f).all());
    EXPECT_EQ(layout->block(a.w1).shape, (std::vector<std::size_t>{8, 32}));
}
