#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

namespace miar {

enum class Acc2Mode { exclude_zero, nonneg_vs_neg };

std::string to_string(Acc2Mode m);
Acc2Mode parse_acc2_mode(const std::string& s);

struct ModelConfig {
    // Raw input widths; the trainer fills these from the dataset.
    std::size_t d_text1 = 32;
    std::size_t d_text2 = 32;
    std::size_t d_audio = 74;
    std::size_t d_vision = 35;

    std::size_t d_model = 50;
    std::size_t n_heads = 5;
    std::size_t n_layers = 2;      // stacked cross-modal layers per branch
    std::size_t ffn_mult = 4;
    std::size_t kernel_size = 1;   // projection Conv1D width
    std::size_t d_align = 32;
    double dropout = 0.1;
    bool positional_encoding = false;
    bool use_homogeneous = false;

    // Throws ConfigError.
    void validate() const;
};

struct LossConfig {
    double tau = 0.07;
    double alpha = 1.0;
    double omega = 0.1;
    int p = 1;
    bool normalize_alignment = true;
    bool use_contrastive = true;
    bool use_norm_alignment = true;

    void validate() const;
};

struct TrainConfig {
    ModelConfig model;
    LossConfig loss;
    double learning_rate = 1e-4;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    std::uint64_t seed = 101;
    Acc2Mode acc2_mode = Acc2Mode::exclude_zero;
    std::size_t patience = 0;       // 0 disables early stopping
    double clip_grad_norm = 0.0;    // 0 disables clipping

    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void to_json(nlohmann::json& j, const LossConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
// Strict readers: unknown keys or wrong types raise SchemaError.
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

}  // namespace miar
