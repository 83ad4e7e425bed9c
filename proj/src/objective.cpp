#include "miar/objective.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

namespace miar {

namespace {

void check_lengths(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw ShapeError(std::string(what) + ": " + std::to_string(a) + " predictions vs " + std::to_string(b) +
                         " labels");
    }
    if (a == 0) throw ArgumentError(std::string(what) + ": empty input");
}

double binary_f1(std::size_t tp, std::size_t fp, std::size_t fn) {
    const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp) + static_cast<double>(fn);
    return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

}  // namespace

PredictionHead register_head(ParamLayout& layout, std::size_t d_model, bool use_homogeneous) {
    const std::size_t d_in = (use_homogeneous ? 5 : 4) * d_model;
    return register_mlp(layout, "head", d_in, d_model, 1);
}

template <typename T>
Mat<T> head_input(const TokenSet<T>& tokens) {
    const Eigen::Index n = tokens.size();
    const Eigen::Index d = tokens.tokens[0].cols();
    for (const auto& t : tokens.tokens) {
        if (t.rows() != n || t.cols() != d) throw ShapeError("predict_head: token shapes differ across streams");
    }
    const bool homog = tokens.homogeneous.size() > 0;
    if (homog && (tokens.homogeneous.rows() != n || tokens.homogeneous.cols() != d)) {
        throw ShapeError("predict_head: homogeneous features have the wrong shape");
    }
    Mat<T> x(n, (homog ? 5 : 4) * d);
    for (Eigen::Index k = 0; k < 4; ++k) x.middleCols(k * d, d) = tokens.tokens[static_cast<std::size_t>(k)];
    if (homog) x.middleCols(4 * d, d) = tokens.homogeneous;
    return x;
}

template <typename T>
std::vector<T> predict_head(const TokenSet<T>& tokens, const ParamSet<T>& params, const PredictionHead& head,
                            MlpCache<T>* cache) {
    const Mat<T> out = mlp_forward(head_input(tokens), params, head, cache);
    return std::vector<T>(out.data(), out.data() + out.size());
}

template <typename T>
double task_loss(std::span<const T> pred, std::span<const float> labels) {
    check_lengths(pred.size(), labels.size(), "task_loss");
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = static_cast<double>(labels[i]) - static_cast<double>(pred[i]);
        sum += e * e;
    }
    return sum / static_cast<double>(pred.size());
}

LossBreakdown total_loss(double task, LossBreakdown b, double omega) {
    b.task = task;
    b.omega = omega;
    b.total = task + omega * b.align;
    return b;
}

void to_json(nlohmann::json& j, const MetricsReport& m) {
    j = nlohmann::json{{"acc2", m.acc2}, {"f1", m.f1}, {"acc7", m.acc7}, {"mse", m.mse},
                       {"acc2_mode", to_string(m.acc2_mode)}};
}

MetricsReport metrics_from_json(const nlohmann::json& j) {
    MetricsReport m;
    m.acc2 = j.at("acc2").get<double>();
    m.f1 = j.at("f1").get<double>();
    m.acc7 = j.at("acc7").get<double>();
    m.mse = j.at("mse").get<double>();
    m.acc2_mode = parse_acc2_mode(j.at("acc2_mode").get<std::string>());
    return m;
}

int sentiment_class7(double x) {
    return static_cast<int>(std::clamp(std::round(x), -3.0, 3.0));
}

double acc7(std::span<const double> pred, std::span<const double> labels) {
    check_lengths(pred.size(), labels.size(), "acc7");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += sentiment_class7(pred[i]) == sentiment_class7(labels[i]);
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::pair<double, double> acc2_f1(std::span<const double> pred, std::span<const double> labels, Acc2Mode mode) {
    check_lengths(pred.size(), labels.size(), "acc2_f1");
    // Positive class: label > 0 (exclude_zero) or label >= 0 (nonneg_vs_neg).
    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        bool truth = false;
        bool guess = false;
        if (mode == Acc2Mode::exclude_zero) {
            if (labels[i] == 0.0) continue;
            truth = labels[i] > 0.0;
            guess = pred[i] > 0.0;
        } else {
            truth = labels[i] >= 0.0;
            guess = pred[i] >= 0.0;
        }
        if (truth && guess) ++tp;
        else if (!truth && !guess) ++tn;
        else if (guess) ++fp;
        else ++fn;
    }
    const std::size_t n = tp + tn + fp + fn;
    if (n == 0) throw ArgumentError("acc2_f1: every label is zero, nothing to score in exclude_zero mode");
    const double acc = static_cast<double>(tp + tn) / static_cast<double>(n);
    const double f1_pos = binary_f1(tp, fp, fn);
    const double f1_neg = binary_f1(tn, fn, fp);
    const double support_pos = static_cast<double>(tp + fn);
    const double support_neg = static_cast<double>(tn + fp);
    const double f1 = (support_pos * f1_pos + support_neg * f1_neg) / static_cast<double>(n);
    return {acc, f1};
}

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> labels, Acc2Mode mode) {
    MetricsReport m;
    m.acc2_mode = mode;
    std::tie(m.acc2, m.f1) = acc2_f1(pred, labels, mode);
    m.acc7 = acc7(pred, labels);
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - labels[i]) * (pred[i] - labels[i]);
    m.mse = sum / static_cast<double>(pred.size());
    return m;
}

#define MIAR_INSTANTIATE(T)                                                                                  \
    template Mat<T> head_input<T>(const TokenSet<T>&);                                                       \
    template std::vector<T> predict_head<T>(const TokenSet<T>&, const ParamSet<T>&, const PredictionHead&,   \
                                            MlpCache<T>*);                                                   \
    template double task_loss<T>(std::span<const T>, std::span<const float>);

MIAR_INSTANTIATE(float)
MIAR_INSTANTIATE(double)

#undef MIAR_INSTANTIATE

}  // namespace miar
