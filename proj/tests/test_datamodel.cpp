#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "miar/datamodel.hpp"
#include "miar/errors.hpp"
#include "test_support.hpp"

using namespace miar;
using miar::test::TempDir;

namespace {

SyntheticSpec small_spec(std::size_t n, std::uint64_t seed = 7) {
    SyntheticSpec s;
    s.n_samples = n;
    s.seed = seed;
    return s;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

bool bitwise_equal(const RawModalityBatch& a, const RawModalityBatch& b) {
    const auto same = [](std::span<const float> x, std::span<const float> y) {
        return x.size() == y.size() && std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
    };
    return a.text1.shape() == b.text1.shape() && a.text2.shape() == b.text2.shape() &&
           a.audio.shape() == b.audio.shape() && a.vision.shape() == b.vision.shape() &&
           same(a.text1.data(), b.text1.data()) && same(a.text2.data(), b.text2.data()) &&
           same(a.audio.data(), b.audio.data()) && same(a.vision.data(), b.vision.data()) &&
           same(a.labels, b.labels);
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    return nlohmann::json::parse(in);
}

void write_manifest(const std::filesystem::path& dir, const nlohmann::json& j) {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << j.dump(2);
}

}  // namespace

TEST(Synthetic, SameSeedGivesIdenticalTensors) {
    const auto a = generate_synthetic(small_spec(100));
    const auto b = generate_synthetic(small_spec(100));
    EXPECT_TRUE(bitwise_equal(a.batch, b.batch));
}

TEST(Synthetic, LabelsWithinRange) {
    const auto s = generate_synthetic(small_spec(100));
    ASSERT_EQ(s.batch.size(), 100u);
    for (float y : s.batch.labels) {
        EXPECT_GE(y, -3.0f);
        EXPECT_LE(y, 3.0f);
    }
}

TEST(Synthetic, DefaultShapes) {
    const auto s = generate_synthetic(small_spec(4));
    EXPECT_EQ(s.batch.text1.shape(), (std::array<std::size_t, 3>{4, 50, 32}));
    EXPECT_EQ(s.batch.audio.shape(), (std::array<std::size_t, 3>{4, 50, 74}));
    EXPECT_EQ(s.batch.vision.shape(), (std::array<std::size_t, 3>{4, 50, 35}));
}

TEST(Synthetic, SplitsDrawDistinctSamples) {
    auto spec = small_spec(10);
    spec.split = SplitName::valid;
    const auto v = generate_synthetic(spec);
    spec.split = SplitName::train;
    const auto t = generate_synthetic(spec);
    EXPECT_NE(v.batch.labels, t.batch.labels);
}

TEST(Synthetic, ZeroSignalLeavesChannelsUncorrelated) {
    auto spec = small_spec(500);
    spec.signal_strength = {0.0, 0.0, 0.0, 0.0};
    const auto s = generate_synthetic(spec);
    std::vector<double> y(s.batch.labels.begin(), s.batch.labels.end());
    const std::array<const Tensor3*, 4> streams{&s.batch.text1, &s.batch.text2, &s.batch.audio, &s.batch.vision};
    double worst = 0.0;
    for (const Tensor3* t : streams) {
        for (std::size_t k = 0; k < t->d(); ++k) {
            std::vector<double> x(t->n());
            for (std::size_t i = 0; i < t->n(); ++i) x[i] = t->at(i, 0, k);
            worst = std::max(worst, std::abs(pearson(x, y)));
        }
    }
    EXPECT_LT(worst, 0.3);
}

TEST(Synthetic, StrongSignalCorrelatesWithLabel) {
    const auto s = generate_synthetic(small_spec(200));
    std::vector<double> y(s.batch.labels.begin(), s.batch.labels.end());
    // Projection of the time-mean onto the best channel is strongly label-driven.
    double best = 0.0;
    for (std::size_t k = 0; k < s.batch.audio.d(); ++k) {
        std::vector<double> x(s.batch.size());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = s.batch.audio.sample(i).col(k).mean();
        best = std::max(best, std::abs(pearson(x, y)));
    }
    EXPECT_GT(best, 0.5);
}

TEST(Synthetic, InvalidSpecRejected) {
    auto spec = small_spec(0);
    EXPECT_THROW(generate_synthetic(spec), Error);
    spec = small_spec(4);
    spec.noise_std = -1.0;
    EXPECT_THROW(generate_synthetic(spec), Error);
}

TEST(PadOrTruncate, EqualLengthIsIdentity) {
    const auto s = generate_synthetic(small_spec(2));
    EXPECT_EQ(pad_or_truncate(s.batch.audio, std::size_t{50}), s.batch.audio);
}

TEST(PadOrTruncate, ShortSequenceZeroPadded) {
    Tensor3 x(1, 3, 2);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t k = 0; k < 2; ++k) x.at(0, t, k) = static_cast<float>(1 + t * 2 + k);
    const Tensor3 y = pad_or_truncate(x, std::size_t{5});
    ASSERT_EQ(y.l(), 5u);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(y.at(0, t, k), x.at(0, t, k));
    for (std::size_t t = 3; t < 5; ++t)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_EQ(y.at(0, t, k), 0.0f);
}

TEST(PadOrTruncate, LongSequenceKeepsPrefix) {
    Tensor3 x(2, 7, 3);
    std::mt19937_64 rng(3);
    for (auto& v : x.data()) v = std::uniform_real_distribution<float>(-1, 1)(rng);
    const Tensor3 y = pad_or_truncate(x, std::size_t{5});
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(y.at(i, t, k), x.at(i, t, k));
}

TEST(PadOrTruncate, NonPositiveLengthRejected) {
    Tensor3 x(1, 3, 2);
    EXPECT_THROW(pad_or_truncate(x, 0LL), ArgumentError);
    EXPECT_THROW(pad_or_truncate(x, -4LL), ArgumentError);
}

TEST(Container, RoundTripIsBitwise) {
    TempDir dir("container");
    const auto s = generate_synthetic(small_spec(3));
    write_container(s, dir.path());
    const auto back = load_container(dir.path(), SplitName::train);
    EXPECT_TRUE(bitwise_equal(s.batch, back.batch));
}

TEST(Container, ManifestRecordsShapes) {
    TempDir dir("manifest");
    const auto s = generate_synthetic(small_spec(3));
    write_container(s, dir.path());
    const auto m = read_manifest(dir.path());
    EXPECT_EQ(m["splits"]["train"]["vision"]["shape"], nlohmann::json({3, 50, 35}));
    EXPECT_EQ(m["splits"]["train"]["audio"]["shape"], nlohmann::json({3, 50, 74}));
    EXPECT_EQ(m["splits"]["train"]["labels"]["shape"], nlohmann::json({3}));
}

TEST(Container, SplitsMergeIntoOneManifest) {
    TempDir dir("merge");
    auto spec = small_spec(3);
    write_container(generate_synthetic(spec), dir.path());
    spec.split = SplitName::valid;
    spec.n_samples = 2;
    write_container(generate_synthetic(spec), dir.path());
    EXPECT_TRUE(container_has_split(dir.path(), SplitName::train));
    EXPECT_TRUE(container_has_split(dir.path(), SplitName::valid));
    EXPECT_FALSE(container_has_split(dir.path(), SplitName::test));
    EXPECT_EQ(load_container(dir.path(), SplitName::train).batch.size(), 3u);
    EXPECT_EQ(load_container(dir.path(), SplitName::valid).batch.size(), 2u);
}

TEST(Container, MosiSizedTrainSplit) {
    TempDir dir("mosi");
    SyntheticSpec spec;
    spec.n_samples = 1284;
    spec.seq_len = 2;
    spec.d_text1 = spec.d_text2 = 2;
    write_container(generate_synthetic(spec), dir.path());
    EXPECT_EQ(load_container(dir.path(), SplitName::train).batch.size(), 1284u);
}

TEST(Container, TruncatedFileIsIntegrityError) {
    TempDir dir("trunc");
    SyntheticSpec spec;
    spec.n_samples = 10;
    write_container(generate_synthetic(spec), dir.path());
    // Rewrite the vision blob with 9 samples while the manifest still says 10.
    std::vector<float> nine(9 * 50 * 35, 0.0f);
    write_f32_file(dir.path() / "train_vision.f32", nine);
    EXPECT_THROW(load_container(dir.path(), SplitName::train), IntegrityError);
}

TEST(Container, ManifestShapeMismatchIsIntegrityError) {
    TempDir dir("shape");
    write_container(generate_synthetic(small_spec(3)), dir.path());
    auto m = read_manifest(dir.path());
    m["splits"]["train"]["audio"]["shape"] = {10, 50, 74};
    write_manifest(dir.path(), m);
    EXPECT_THROW(load_container(dir.path(), SplitName::train), IntegrityError);
}

TEST(Container, NanLabelRejectedOnWrite) {
    TempDir dir("nan");
    auto s = generate_synthetic(small_spec(3));
    s.batch.labels[1] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(write_container(s, dir.path()), DataError);
}

TEST(Container, OutOfRangeLabelRejected) {
    auto s = generate_synthetic(small_spec(3));
    s.batch.labels[0] = 3.5f;
    EXPECT_THROW(s.batch.validate(), DataError);
}

TEST(Container, NanLabelRejectedOnLoad) {
    TempDir dir("nanload");
    write_container(generate_synthetic(small_spec(3)), dir.path());
    std::vector<float> labels{0.5f, std::numeric_limits<float>::quiet_NaN(), -1.0f};
    write_f32_file(dir.path() / "train_labels.f32", labels);
    EXPECT_THROW(load_container(dir.path(), SplitName::train), DataError);
}

TEST(Container, MissingSplitOrDirectory) {
    TempDir dir("missing");
    write_container(generate_synthetic(small_spec(3)), dir.path());
    EXPECT_THROW(load_container(dir.path(), SplitName::test), IoError);
    EXPECT_THROW(load_container(dir.path() / "nope", SplitName::train), IoError);
}

TEST(Batch, SelectCopiesSamplesInOrder) {
    const auto s = generate_synthetic(small_spec(5));
    const std::vector<std::size_t> idx{4, 1};
    const auto sub = s.batch.select(idx);
    ASSERT_EQ(sub.size(), 2u);
    EXPECT_EQ(sub.labels[0], s.batch.labels[4]);
    EXPECT_EQ(sub.labels[1], s.batch.labels[1]);
    EXPECT_EQ(Mat<float>(sub.audio.sample(0)), Mat<float>(s.batch.audio.sample(4)));
}

TEST(Batch, InconsistentSampleCountIsShapeError) {
    auto s = generate_synthetic(small_spec(3));
    s.batch.vision = Tensor3(2, 50, 35);
    EXPECT_THROW(s.batch.validate(), ShapeError);
}

TEST(SplitNames, ParseAndPrint) {
    EXPECT_EQ(parse_split_name("valid"), SplitName::valid);
    EXPECT_EQ(to_string(SplitName::test), "test");
    EXPECT_THROW(parse_split_name("dev"), Error);
}
