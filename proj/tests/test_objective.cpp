#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include "miar/errors.hpp"
#include "miar/objective.hpp"
#include "test_support.hpp"

using namespace miar;
using namespace miar::test;

namespace {

struct Head {
    std::shared_ptr<ParamLayout> layout = std::make_shared<ParamLayout>();
    PredictionHead h;
    ParamSet<double> p;

    Head(std::size_t d, bool homog = false, std::uint64_t seed = 1) {
        h = register_head(*layout, d, homog);
        p = ParamSet<double>(layout);
        std::mt19937_64 rng(seed);
        init_mlp(p, h, rng);
    }
};

TokenSet<double> tokens(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng, bool homog = false) {
    TokenSet<double> t;
    for (auto& m : t.tokens) m = random_mat(n, d, rng);
    if (homog) t.homogeneous = random_mat(n, d, rng);
    return t;
}

// Weighted binary F1 from an explicit confusion matrix.
double weighted_f1_oracle(const std::vector<int>& truth, const std::vector<int>& guess) {
    double total = 0;
    double weighted = 0;
    for (int cls : {0, 1}) {
        double tp = 0, fp = 0, fn = 0, support = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
            if (truth[i] == cls) ++support;
            if (truth[i] == cls && guess[i] == cls) ++tp;
            if (truth[i] != cls && guess[i] == cls) ++fp;
            if (truth[i] == cls && guess[i] != cls) ++fn;
        }
        const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        weighted += support * f1;
        total += support;
    }
    return weighted / total;
}

}  // namespace

TEST(Head, ZeroWeightsPredictBias) {
    Head h(8);
    h.p.set_zero();
    h.p.scalar(h.h.b2) = 0.75;
    std::mt19937_64 rng(1);
    for (double y : predict_head(tokens(5, 8, rng), h.p, h.h)) EXPECT_EQ(y, 0.75);
}

TEST(Head, OneOutputPerSample) {
    Head h(8);
    std::mt19937_64 rng(2);
    for (Eigen::Index n : {1, 3, 17}) EXPECT_EQ(predict_head(tokens(n, 8, rng), h.p, h.h).size(), std::size_t(n));
}

TEST(Head, MatchesMatrixProductOracle) {
    Head h(4, false, 3);
    std::mt19937_64 rng(3);
    const auto t = tokens(3, 4, rng);
    const auto pred = predict_head(t, h.p, h.h);
    const auto w1 = h.p.mat(h.h.w1), w2 = h.p.mat(h.h.w2);
    const auto b1 = h.p.row(h.h.b1);
    for (Eigen::Index i = 0; i < 3; ++i) {
        std::vector<double> x;
        for (const auto& m : t.tokens)
            for (Eigen::Index k = 0; k < 4; ++k) x.push_back(m(i, k));
        double y = h.p.scalar(h.h.b2);
        for (Eigen::Index j = 0; j < 4; ++j) {
            double a = b1(j);
            for (Eigen::Index k = 0; k < 16; ++k) a += x[k] * w1(k, j);
            y += std::max(0.0, a) * w2(j, 0);
        }
        EXPECT_NEAR(pred[i], y, 1e-6);
    }
}

TEST(Head, HomogeneousWidensInput) {
    Head h(4, true);
    EXPECT_EQ(h.h.d_in, 20u);
    std::mt19937_64 rng(4);
    EXPECT_EQ(head_input(tokens(2, 4, rng, true)).cols(), 20);
    EXPECT_EQ(predict_head(tokens(2, 4, rng, true), h.p, h.h).size(), 2u);
    EXPECT_THROW(predict_head(tokens(2, 4, rng, false), h.p, h.h), ShapeError);
}

TEST(TaskLoss, HandEvaluated) {
    const std::vector<double> a{0.0, 0.0};
    const std::vector<float> la{1.0f, -1.0f};
    EXPECT_DOUBLE_EQ(task_loss<double>(a, la), 1.0);
    const std::vector<double> b{3.0};
    const std::vector<float> lb{-3.0f};
    EXPECT_DOUBLE_EQ(task_loss<double>(b, lb), 36.0);
    const std::vector<double> c{0.5, -1.25};
    const std::vector<float> lc{0.5f, -1.25f};
    EXPECT_EQ(task_loss<double>(c, lc), 0.0);
}

TEST(TaskLoss, LengthMismatchIsShapeError) {
    const std::vector<double> p{1.0, 2.0};
    const std::vector<float> l{1.0f};
    EXPECT_THROW(task_loss<double>(p, l), ShapeError);
}

TEST(TotalLoss, Arithmetic) {
    LossBreakdown b;
    b.align = 2.0;
    const auto t = total_loss(1.0, b, 0.1);
    EXPECT_NEAR(t.total, 1.2, 1e-15);
    EXPECT_EQ(total_loss(0.7, b, 0.0).total, 0.7);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 10.0);
    for (int i = 0; i < 100; ++i) {
        b.align = u(rng);
        const double task = u(rng), omega = u(rng) / 10.0;
        const auto r = total_loss(task, b, omega);
        EXPECT_NEAR(r.total - r.task - omega * r.align, 0.0, 1e-12);
    }
}

TEST(Acc7, RoundingAndClamping) {
    const std::vector<double> p{2.6, -3.7, 0.4}, l{3, -3, 0};
    EXPECT_EQ(acc7(p, l), 1.0);
    EXPECT_EQ(acc7(l, l), 1.0);
    const std::vector<double> half{0.5}, zero{0.0};
    EXPECT_EQ(acc7(half, zero), 0.0);
    EXPECT_EQ(sentiment_class7(0.5), 1);
    EXPECT_EQ(sentiment_class7(-0.5), -1);
    EXPECT_EQ(sentiment_class7(-2.49), -2);
    EXPECT_EQ(sentiment_class7(9.0), 3);
}

TEST(Acc2, ExcludeZeroWorkedExample) {
    const std::vector<double> l{-2, -1, 1, 2, 0}, p{-0.5, 0.4, 0.2, 1.1, 0.3};
    const auto [acc, f1] = acc2_f1(p, l, Acc2Mode::exclude_zero);
    EXPECT_EQ(acc, 0.75);
    EXPECT_NEAR(f1, 0.7333, 1e-4);
    EXPECT_NEAR(f1, (0.8 + 2.0 / 3.0) / 2.0, 1e-12);
}

TEST(Acc2, PerfectPredictions) {
    const std::vector<double> l{-2.2, -0.4, 1.0, 2.5};
    const auto [acc, f1] = acc2_f1(l, l, Acc2Mode::exclude_zero);
    EXPECT_EQ(acc, 1.0);
    EXPECT_EQ(f1, 1.0);
}

TEST(Acc2, NonNegativeModeCountsZeroAsPositive) {
    const std::vector<double> l{0, -1, 2, -3}, p{0.0, 0.3, 1.0, -0.1};
    const auto [acc, f1] = acc2_f1(p, l, Acc2Mode::nonneg_vs_neg);
    EXPECT_EQ(acc, 0.75);
    EXPECT_NEAR(f1, weighted_f1_oracle({1, 0, 1, 0}, {1, 1, 1, 0}), 1e-12);
}

TEST(Acc2, AllZeroLabelsRejectedInExcludeMode) {
    const std::vector<double> l{0, 0}, p{1, -1};
    EXPECT_THROW(acc2_f1(p, l, Acc2Mode::exclude_zero), ArgumentError);
    EXPECT_NO_THROW(acc2_f1(p, l, Acc2Mode::nonneg_vs_neg));
}

TEST(Acc2, WeightedF1MatchesConfusionOracle) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> l(23), p(23);
        std::vector<int> truth, guess;
        for (std::size_t i = 0; i < l.size(); ++i) {
            l[i] = std::round(u(rng) * 2.0) / 2.0;
            p[i] = u(rng) + 0.5 * l[i];
            if (l[i] == 0.0) continue;
            truth.push_back(l[i] > 0);
            guess.push_back(p[i] > 0);
        }
        const auto [acc, f1] = acc2_f1(p, l, Acc2Mode::exclude_zero);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) hit += truth[i] == guess[i];
        EXPECT_EQ(acc, static_cast<double>(hit) / static_cast<double>(truth.size()));
        EXPECT_NEAR(f1, weighted_f1_oracle(truth, guess), 1e-4);
    }
}

TEST(Metrics, ReportSerializesDocumentedKeys) {
    const std::vector<double> l{-2, -1, 1, 2, 0}, p{-0.5, 0.4, 0.2, 1.1, 0.3};
    const auto m = compute_metrics(p, l, Acc2Mode::exclude_zero);
    const nlohmann::json j = m;
    for (const char* k : {"acc2", "f1", "acc7", "mse", "acc2_mode"}) EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j.size(), 5u);
    EXPECT_EQ(j["acc2_mode"], "exclude_zero");
    const auto back = metrics_from_json(j);
    EXPECT_EQ(back.acc2, m.acc2);
    EXPECT_EQ(back.f1, m.f1);
    EXPECT_EQ(back.mse, m.mse);
    double mse = 0;
    for (std::size_t i = 0; i < l.size(); ++i) mse += (p[i] - l[i]) * (p[i] - l[i]);
    EXPECT_NEAR(m.mse, mse / 5.0, 1e-15);
    EXPECT_NEAR(m.acc7, 0.2, 1e-15);
}
