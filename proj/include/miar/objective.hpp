#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "miar/alignment.hpp"
#include "miar/config.hpp"

namespace miar {

// Prediction head: [text1 | text2 | audio | video (| homogeneous)] -> MLP -> scalar.
using PredictionHead = MlpParams;

PredictionHead register_head(ParamLayout& layout, std::size_t d_model, bool use_homogeneous);

// Concatenated head input [N, 4*d_model (+ d_model)].
template <typename T>
Mat<T> head_input(const TokenSet<T>& tokens);

// One unclamped prediction per sample.
template <typename T>
std::vector<T> predict_head(const TokenSet<T>& tokens, const ParamSet<T>& params, const PredictionHead& head,
                            MlpCache<T>* cache = nullptr);

// (1/N) sum (y - yhat)^2, accumulated in double.
template <typename T>
double task_loss(std::span<const T> pred, std::span<const float> labels);

// Completes a breakdown: total = task + omega * align.
LossBreakdown total_loss(double task, LossBreakdown breakdown, double omega);

struct MetricsReport {
    double acc2 = 0.0;
    double f1 = 0.0;
    double acc7 = 0.0;
    double mse = 0.0;
    Acc2Mode acc2_mode = Acc2Mode::exclude_zero;
};

void to_json(nlohmann::json& j, const MetricsReport& m);
MetricsReport metrics_from_json(const nlohmann::json& j);

// clamp(round-half-away-from-zero(x), -3, 3)
int sentiment_class7(double x);

double acc7(std::span<const double> pred, std::span<const double> labels);

// (acc2, support-weighted binary F1).
std::pair<double, double> acc2_f1(std::span<const double> pred, std::span<const double> labels, Acc2Mode mode);

MetricsReport compute_metrics(std::span<const double> pred, std::span<const double> labels, Acc2Mode mode);

}  // namespace miar
