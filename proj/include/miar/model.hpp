#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "miar/alignment.hpp"
#include "miar/datamodel.hpp"
#include "miar/fusion.hpp"
#include "miar/objective.hpp"
#include "miar/projection.hpp"

namespace miar {

// Every learnable block of the network, registered in one flat layout:
// four stream projections (+ optional shared homogeneous map), four CMF
// networks with disjoint parameters, four alignment MLPs, prediction head.
struct ModelParams {
    ModelConfig config;
    std::shared_ptr<const ParamLayout> layout;
    ProjectionParams projection;
    std::array<CmfParams, 4> cmf;
    AlignmentParams alignment;
    PredictionHead head;

    const CmfParams& cmf_for(Stream s) const { return cmf[static_cast<std::size_t>(s)]; }
};

ModelParams build_model(const ModelConfig& config);

// Fan-in-scaled uniform init, layer norms at (1, 0); deterministic in seed.
template <typename T>
ParamSet<T> init_model_params(const ModelParams& model, std::uint64_t seed);

// Half-open flat index range [begin, end) of all blocks whose name starts with `prefix`.
std::pair<std::size_t, std::size_t> param_range(const ParamLayout& layout, const std::string& prefix);

enum class Mode { train, eval };

template <typename T>
struct FusionIntermediate {
    // [stream][sample]
    std::array<std::vector<Mat<T>>, 4> projected;
    std::array<std::vector<CmfTrace<T>>, 4> cmf;
};

// Projection -> four CMF networks -> TokenSet. Train mode draws dropout masks
// from `dropout_rng`; eval mode disables dropout and is deterministic.
// Intermediates are recorded with dropout off.
template <typename T>
TokenSet<T> miar_forward(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch,
                         Mode mode, std::mt19937_64* dropout_rng = nullptr,
                         FusionIntermediate<T>* intermediate = nullptr, std::vector<Mat<T>>* score_log = nullptr);

template <typename T>
struct BatchResult {
    LossBreakdown loss;
    std::vector<T> predictions;
};

// Forward pass plus L_total = MSE + omega * L_align. When `grad` is non-null
// (same layout as params) the analytic gradient of L_total is accumulated.
template <typename T>
BatchResult<T> loss_and_gradient(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch,
                                 const LossConfig& loss, Mode mode, std::mt19937_64* dropout_rng,
                                 ParamSet<T>* grad);

// Eval-mode predictions for every sample.
template <typename T>
std::vector<T> predict(const ModelParams& model, const ParamSet<T>& params, const RawModalityBatch& batch);

}  // namespace miar
