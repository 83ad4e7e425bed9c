#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "miar/config.hpp"
#include "miar/model.hpp"

namespace miar {

struct StepRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    LossBreakdown loss;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    LossBreakdown train;    // mean over the epoch's steps
    MetricsReport valid;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::vector<StepRecord> steps;
    std::size_t best_epoch = 0;  // 0 = initialization
    bool early_stopped = false;
};

struct Checkpoint {
    TrainConfig config;  // model dims filled from the training data
    ModelParams model;
    ParamSet<float> params;
    std::size_t epoch = 0;
    std::vector<EpochRecord> history;

    // SHA-256 over the parameter bytes, canonical config and epoch.
    std::string digest() const;
};

// <dir>/params.f32 plus <dir>/checkpoint.json.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
// Throws CheckpointError when the stored digest does not match.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Minibatch Adam on L_total; seeded shuffle, init and dropout streams are
// independent. The returned checkpoint holds the weights of the epoch with
// the lowest validation MSE.
std::pair<Checkpoint, TrainHistory> train_model(const TrainConfig& config, const DatasetSplit& train,
                                                const DatasetSplit& valid, const EpochCallback& on_epoch = {});

MetricsReport evaluate_model(const Checkpoint& ckpt, const DatasetSplit& split);
MetricsReport evaluate_model(const Checkpoint& ckpt, const DatasetSplit& split, Acc2Mode mode);

// Central-difference check of an analytic gradient at the listed indices.
// Relative error per coordinate: |g_a - g_f| / max(1, |g_a| + |g_f|).
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::string worst_block;
};

GradCheckResult check_gradient(const std::function<double(const std::vector<double>&)>& loss,
                               const std::vector<double>& theta, const std::vector<double>& analytic,
                               const std::vector<std::size_t>& indices, double eps,
                               const ParamLayout* layout = nullptr);

struct GradCheckOptions {
    std::size_t n_samples = 4;
    std::size_t seq_len = 8;
    bool toy_dims = true;
};

// Full L_total in double precision with dropout off and p = 2, on a random tiny
// batch, over a per-block sample of `sample_fraction` of the parameters.
GradCheckResult grad_check(const TrainConfig& config, double sample_fraction, double eps = 1e-5,
                           const GradCheckOptions& options = {});

struct AblationRow {
    bool contrastive = true;
    bool norm = true;
    MetricsReport metrics;
    double align_contribution = 0.0;  // omega * mean align of the final epoch
};

struct SweepRow {
    double omega = 0.0;
    MetricsReport metrics;
};

// Four variants {contrastive on/off} x {norm on/off}, same seed, scored on `eval`.
std::vector<AblationRow> run_ablation(const TrainConfig& config, const DatasetSplit& train, const DatasetSplit& valid,
                                      const DatasetSplit& eval);

std::vector<double> default_omega_grid();
std::vector<SweepRow> sweep_omega(const TrainConfig& config, const DatasetSplit& train, const DatasetSplit& valid,
                                  const DatasetSplit& eval, const std::vector<double>& values);

void to_json(nlohmann::json& j, const LossBreakdown& b);
void to_json(nlohmann::json& j, const TrainHistory& h);

// JSON and CSV side by side: <stem>.json, <stem>.csv.
void write_history(const TrainHistory& h, const std::filesystem::path& dir);
void write_ablation(const std::vector<AblationRow>& rows, const std::filesystem::path& dir);
void write_sweep(const std::vector<SweepRow>& rows, const std::filesystem::path& dir);

}  // namespace miar
