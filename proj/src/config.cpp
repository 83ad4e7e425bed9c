#include "miar/config.hpp"

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "miar/errors.hpp"

namespace miar {

using nlohmann::json;

namespace {

// Reads `key` into `out` when present, enforcing the JSON type of `out`.
template <typename V>
void read_key(const json& j, const char* key, V& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    const json& v = *it;
    if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw SchemaError(std::string("key '") + key + "' must be a boolean");
        out = v.get<bool>();
    } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) throw SchemaError(std::string("key '") + key + "' must be an integer");
        if constexpr (std::is_unsigned_v<V>) {
            if (v.is_number_unsigned() || v.get<long long>() >= 0) {
                out = v.get<V>();
            } else {
                throw SchemaError(std::string("key '") + key + "' must be non-negative");
            }
        } else {
            out = v.get<V>();
        }
    } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw SchemaError(std::string("key '") + key + "' must be a number");
        out = v.get<V>();
    } else {
        if (!v.is_string()) throw SchemaError(std::string("key '") + key + "' must be a string");
        out = v.get<V>();
    }
}

void reject_unknown(const json& j, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw SchemaError("configuration must be a JSON object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) throw SchemaError("unknown configuration key '" + key + "'");
    }
}

const std::set<std::string> kModelKeys{
    "d_text1", "d_text2", "d_audio", "d_vision", "d_model", "n_heads", "n_layers", "ffn_mult",
    "kernel_size", "d_align", "dropout", "positional_encoding", "use_homogeneous"};

const std::set<std::string> kLossKeys{"tau", "alpha", "omega", "p", "normalize_alignment", "use_contrastive",
                                      "use_norm_alignment"};

const std::set<std::string> kTrainKeys{"learning_rate", "batch_size", "epochs", "seed",
                                       "acc2_mode", "patience", "clip_grad_norm"};

void read_model(const json& j, ModelConfig& c) {
    read_key(j, "d_text1", c.d_text1);
    read_key(j, "d_text2", c.d_text2);
    read_key(j, "d_audio", c.d_audio);
    read_key(j, "d_vision", c.d_vision);
    read_key(j, "d_model", c.d_model);
    read_key(j, "n_heads", c.n_heads);
    read_key(j, "n_layers", c.n_layers);
    read_key(j, "ffn_mult", c.ffn_mult);
    read_key(j, "kernel_size", c.kernel_size);
    read_key(j, "d_align", c.d_align);
    read_key(j, "dropout", c.dropout);
    read_key(j, "positional_encoding", c.positional_encoding);
    read_key(j, "use_homogeneous", c.use_homogeneous);
}

}  // namespace

std::string to_string(Acc2Mode m) { return m == Acc2Mode::exclude_zero ? "exclude_zero" : "nonneg_vs_neg"; }

Acc2Mode parse_acc2_mode(const std::string& s) {
    if (s == "exclude_zero") return Acc2Mode::exclude_zero;
    if (s == "nonneg_vs_neg") return Acc2Mode::nonneg_vs_neg;
    throw SchemaError("acc2_mode must be 'exclude_zero' or 'nonneg_vs_neg', got '" + s + "'");
}

void ModelConfig::validate() const {
    if (d_text1 == 0 || d_text2 == 0 || d_audio == 0 || d_vision == 0) {
        throw ConfigError("input feature dims must be positive");
    }
    if (d_model == 0) throw ConfigError("d_model must be positive");
    if (n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("d_model=" + std::to_string(d_model) + " is not divisible by n_heads=" +
                          std::to_string(n_heads));
    }
    if (n_layers == 0) throw ConfigError("n_layers (stacked cross-modal layers) must be >= 1");
    if (ffn_mult == 0) throw ConfigError("ffn_mult must be >= 1");
    if (kernel_size == 0) throw ConfigError("kernel_size must be >= 1");
    if (d_align == 0) throw ConfigError("d_align must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void LossConfig::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be > 0");
    if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
    if (!(omega >= 0.0) || !std::isfinite(omega)) throw ConfigError("omega must be >= 0");
    if (p != 1 && p != 2) throw ConfigError("p must be 1 or 2");
}

void TrainConfig::validate() const {
    model.validate();
    loss.validate();
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(clip_grad_norm >= 0.0)) throw ConfigError("clip_grad_norm must be >= 0");
}

void to_json(json& j, const ModelConfig& c) {
    j = json{{"d_text1", c.d_text1},
             {"d_text2", c.d_text2},
             {"d_audio", c.d_audio},
             {"d_vision", c.d_vision},
             {"d_model", c.d_model},
             {"n_heads", c.n_heads},
             {"n_layers", c.n_layers},
             {"ffn_mult", c.ffn_mult},
             {"kernel_size", c.kernel_size},
             {"d_align", c.d_align},
             {"dropout", c.dropout},
             {"positional_encoding", c.positional_encoding},
             {"use_homogeneous", c.use_homogeneous}};
}

void to_json(json& j, const LossConfig& c) {
    j = json{{"tau", c.tau},
             {"alpha", c.alpha},
             {"omega", c.omega},
             {"p", c.p},
             {"normalize_alignment", c.normalize_alignment},
             {"use_contrastive", c.use_contrastive},
             {"use_norm_alignment", c.use_norm_alignment}};
}

void to_json(json& j, const TrainConfig& c) {
    j = json(c.model);
    j.update(json(c.loss));
    j["learning_rate"] = c.learning_rate;
    j["batch_size"] = c.batch_size;
    j["epochs"] = c.epochs;
    j["seed"] = c.seed;
    j["acc2_mode"] = to_string(c.acc2_mode);
    j["patience"] = c.patience;
    j["clip_grad_norm"] = c.clip_grad_norm;
}

ModelConfig model_config_from_json(const json& j) {
    reject_unknown(j, kModelKeys);
    ModelConfig c;
    read_model(j, c);
    return c;
}

TrainConfig train_config_from_json(const json& j) {
    std::set<std::string> allowed = kModelKeys;
    allowed.insert(kLossKeys.begin(), kLossKeys.end());
    allowed.insert(kTrainKeys.begin(), kTrainKeys.end());
    reject_unknown(j, allowed);

    TrainConfig c;
    read_model(j, c.model);
    read_key(j, "tau", c.loss.tau);
    read_key(j, "alpha", c.loss.alpha);
    read_key(j, "omega", c.loss.omega);
    read_key(j, "p", c.loss.p);
    read_key(j, "normalize_alignment", c.loss.normalize_alignment);
    read_key(j, "use_contrastive", c.loss.use_contrastive);
    read_key(j, "use_norm_alignment", c.loss.use_norm_alignment);
    read_key(j, "learning_rate", c.learning_rate);
    read_key(j, "batch_size", c.batch_size);
    read_key(j, "epochs", c.epochs);
    read_key(j, "seed", c.seed);
    std::string mode = to_string(c.acc2_mode);
    read_key(j, "acc2_mode", mode);
    c.acc2_mode = parse_acc2_mode(mode);
    read_key(j, "patience", c.patience);
    read_key(j, "clip_grad_norm", c.clip_grad_norm);
    return c;
}

}  // namespace miar
