#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "miar/config.hpp"
#include "miar/datamodel.hpp"

namespace miar::cli {

// Synthetic data drawn when no data_dir is given. Feature widths come from
// the model section (d_text1, d_text2, d_audio, d_vision).
struct SyntheticData {
    std::size_t n_train = 500;
    std::size_t n_valid = 100;
    std::size_t n_test = 100;
    std::size_t seq_len = kDefaultSeqLen;
    std::array<double, 4> signal_strength{2.0, 2.0, 2.0, 2.0};
    double noise_std = 0.5;
    std::uint64_t seed = 101;

    SyntheticSpec spec(const ModelConfig& m, SplitName split) const;
};

struct CliConfig {
    TrainConfig train;
    std::optional<std::filesystem::path> data_dir;
    std::optional<std::filesystem::path> out_dir;
    SplitName eval_split = SplitName::test;
    SyntheticData synthetic;
    std::vector<double> omega_values;  // sweep grid; empty means the default grid
};

// Strict: unknown keys and type mismatches raise SchemaError.
CliConfig config_from_json(const nlohmann::json& j);
CliConfig parse_config(const std::filesystem::path& file);
void to_json(nlohmann::json& j, const CliConfig& c);

// Parses "0,0.05,0.1"; throws ArgumentError on malformed entries.
std::vector<double> parse_value_list(const std::string& text);

// Runs one subcommand. Exit codes: 0 success, 1 runtime failure, 2 usage error.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace miar::cli
