#include "miar/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "miar/errors.hpp"
#include "miar/trainer.hpp"

namespace miar::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::set<std::string> kCliKeys{"data_dir", "out_dir", "eval_split", "synthetic", "omega_values"};
const std::set<std::string> kSyntheticKeys{"n_train", "n_valid", "n_test",  "seq_len",
                                           "signal_strength", "noise_std", "seed"};

std::size_t read_size(const json& j, const char* key, std::size_t fallback) {
    auto it = j.find(key);
    if (it == j.end()) return fallback;
    if (!it->is_number_unsigned() && !(it->is_number_integer() && it->get<long long>() >= 0)) {
        throw SchemaError(std::string("key '") + key + "' must be a non-negative integer");
    }
    return it->get<std::size_t>();
}

double read_number(const json& v, const std::string& key) {
    if (!v.is_number()) throw SchemaError("key '" + key + "' must be a number");
    return v.get<double>();
}

SyntheticData synthetic_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("key 'synthetic' must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!kSyntheticKeys.count(key)) throw SchemaError("unknown configuration key 'synthetic." + key + "'");
    }
    SyntheticData s;
    s.n_train = read_size(j, "n_train", s.n_train);
    s.n_valid = read_size(j, "n_valid", s.n_valid);
    s.n_test = read_size(j, "n_test", s.n_test);
    s.seq_len = read_size(j, "seq_len", s.seq_len);
    s.seed = read_size(j, "seed", s.seed);
    if (auto it = j.find("noise_std"); it != j.end()) s.noise_std = read_number(*it, "synthetic.noise_std");
    if (auto it = j.find("signal_strength"); it != j.end()) {
        if (it->is_number()) {
            s.signal_strength.fill(it->get<double>());
        } else if (it->is_array() && it->size() == 4) {
            for (std::size_t k = 0; k < 4; ++k) s.signal_strength[k] = read_number((*it)[k], "synthetic.signal_strength");
        } else {
            throw SchemaError("key 'synthetic.signal_strength' must be a number or an array of 4 numbers");
        }
    }
    return s;
}

void write_json(const fs::path& file, const json& j) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot write " + file.string());
    out << j.dump(2) << "\n";
}

fs::path resolve_out(const CliConfig& cfg, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (cfg.out_dir) return *cfg.out_dir;
    if (const char* env = std::getenv("MIAR_OUT"); env && *env) return env;
    return "miar_out";
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

DatasetSplit load_split(const CliConfig& cfg, SplitName split) {
    if (cfg.data_dir) return load_container(*cfg.data_dir, split);
    return generate_synthetic(cfg.synthetic.spec(cfg.train.model, split));
}

// Fills model input widths from the data so the resolved config is complete.
void adopt_dims(CliConfig& cfg, const DatasetSplit& s) {
    cfg.train.model.d_text1 = s.batch.text1.d();
    cfg.train.model.d_text2 = s.batch.text2.d();
    cfg.train.model.d_audio = s.batch.audio.d();
    cfg.train.model.d_vision = s.batch.vision.d();
}

void write_resolved(const CliConfig& cfg, const fs::path& out) {
    write_json(out / "resolved_config.json", json(cfg));
}

std::string fixed(double v, int digits = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

struct Common {
    std::string config;
    std::string out;
    std::string data;
};

CliConfig load_cli_config(const Common& c) {
    CliConfig cfg = c.config.empty() ? CliConfig{} : parse_config(c.config);
    if (!c.data.empty()) cfg.data_dir = c.data;
    if (cfg.data_dir) cfg.data_dir = fs::absolute(*cfg.data_dir);
    return cfg;
}

int run_gen_data(const Common& c, std::ostream& out) {
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    for (SplitName s : {SplitName::train, SplitName::valid, SplitName::test}) {
        const auto split = generate_synthetic(cfg.synthetic.spec(cfg.train.model, s));
        write_container(split, dir);
        out << "wrote " << to_string(s) << " split: " << split.batch.size() << " samples\n";
    }
    write_resolved(cfg, dir);
    return 0;
}

int run_train(const Common& c, std::ostream& out) {
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    const auto train = load_split(cfg, SplitName::train);
    const auto valid = load_split(cfg, SplitName::valid);
    adopt_dims(cfg, train);
    write_resolved(cfg, dir);

    const auto t0 = std::chrono::steady_clock::now();
    auto [ckpt, history] = train_model(cfg.train, train, valid, [&](const EpochRecord& e) {
        out << "epoch " << e.epoch << " train_total=" << fixed(e.train.total, 6) << " valid_acc2="
            << fixed(e.valid.acc2) << " valid_mse=" << fixed(e.valid.mse) << "\n"
            << std::flush;
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_checkpoint(ckpt, dir / "checkpoint");
    write_history(history, dir);
    json metrics{{"best_epoch", history.best_epoch},
                 {"epochs_run", history.epochs.size()},
                 {"early_stopped", history.early_stopped},
                 {"wall_seconds", secs},
                 {"valid", evaluate_model(ckpt, valid)}};
    if (cfg.eval_split != SplitName::valid && (!cfg.data_dir || container_has_split(*cfg.data_dir, cfg.eval_split))) {
        metrics[std::string(to_string(cfg.eval_split))] = evaluate_model(ckpt, load_split(cfg, cfg.eval_split));
    }
    write_json(dir / "metrics.json", metrics);
    out << "best epoch " << history.best_epoch << ", checkpoint written to " << (dir / "checkpoint").string() << "\n";
    return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& split_flag, std::ostream& out) {
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    if (!split_flag.empty()) cfg.eval_split = parse_split_name(split_flag);
    const fs::path ckpt_dir = checkpoint.empty() ? dir / "checkpoint" : fs::path(checkpoint);
    const Checkpoint ckpt = load_checkpoint(ckpt_dir);
    const auto split = load_split(cfg, cfg.eval_split);
    write_resolved(cfg, dir);
    const MetricsReport m = evaluate_model(ckpt, split, cfg.train.acc2_mode);
    write_json(dir / "eval_metrics.json", json(m));
    out << json(m).dump() << "\n";
    return 0;
}

int run_ablate(const Common& c, std::ostream& out) {
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    const auto train = load_split(cfg, SplitName::train);
    const auto valid = load_split(cfg, SplitName::valid);
    const auto eval = load_split(cfg, cfg.eval_split);
    adopt_dims(cfg, train);
    write_resolved(cfg, dir);
    const auto rows = run_ablation(cfg.train, train, valid, eval);
    write_ablation(rows, dir);
    for (const auto& r : rows) {
        out << "contrastive=" << (r.contrastive ? "on " : "off") << " norm=" << (r.norm ? "on " : "off")
            << " acc2=" << fixed(r.metrics.acc2) << " f1=" << fixed(r.metrics.f1) << " acc7=" << fixed(r.metrics.acc7)
            << " mse=" << fixed(r.metrics.mse) << "\n";
    }
    return 0;
}

int run_sweep(const Common& c, const std::string& values, std::ostream& out) {
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    if (!values.empty()) cfg.omega_values = parse_value_list(values);
    if (cfg.omega_values.empty()) cfg.omega_values = default_omega_grid();
    const auto train = load_split(cfg, SplitName::train);
    const auto valid = load_split(cfg, SplitName::valid);
    const auto eval = load_split(cfg, cfg.eval_split);
    adopt_dims(cfg, train);
    write_resolved(cfg, dir);
    const auto rows = sweep_omega(cfg.train, train, valid, eval, cfg.omega_values);
    write_sweep(rows, dir);
    for (const auto& r : rows) {
        out << "omega=" << r.omega << " acc2=" << fixed(r.metrics.acc2) << " f1=" << fixed(r.metrics.f1)
            << " acc7=" << fixed(r.metrics.acc7) << " mse=" << fixed(r.metrics.mse) << "\n";
    }
    return 0;
}

int run_grad_check(const Common& c, double fraction, double eps, std::ostream& out) {
    constexpr double kThreshold = 1e-4;
    CliConfig cfg = load_cli_config(c);
    const fs::path dir = resolve_out(cfg, c.out);
    make_dir(dir);
    cfg.out_dir = fs::absolute(dir);
    write_resolved(cfg, dir);
    const auto r = grad_check(cfg.train, fraction, eps);
    const bool ok = r.max_rel_error <= kThreshold;
    write_json(dir / "grad_check.json", json{{"max_rel_error", r.max_rel_error},
                                             {"checked", r.checked},
                                             {"worst_block", r.worst_block},
                                             {"threshold", kThreshold},
                                             {"passed", ok}});
    out << "max_rel_error=" << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat
        << " checked=" << r.checked << " worst_block=" << r.worst_block << (ok ? " OK" : " FAILED") << "\n";
    return ok ? 0 : 1;
}

bool usage_category(const std::string& cat) { return cat == "schema" || cat == "config" || cat == "argument"; }

}  // namespace

SyntheticSpec SyntheticData::spec(const ModelConfig& m, SplitName split) const {
    SyntheticSpec s;
    s.n_samples = split == SplitName::train ? n_train : split == SplitName::valid ? n_valid : n_test;
    s.seq_len = seq_len;
    s.d_text1 = m.d_text1;
    s.d_text2 = m.d_text2;
    s.d_audio = m.d_audio;
    s.d_vision = m.d_vision;
    s.signal_strength = signal_strength;
    s.noise_std = noise_std;
    s.seed = seed;
    s.split = split;
    return s;
}

CliConfig config_from_json(const json& j) {
    if (!j.is_object()) throw SchemaError("configuration must be a JSON object");
    json rest = json::object();
    CliConfig c;
    for (const auto& [key, v] : j.items()) {
        if (!kCliKeys.count(key)) {
            rest[key] = v;
            continue;
        }
        if (key == "data_dir" || key == "out_dir" || key == "eval_split") {
            if (!v.is_string()) throw SchemaError("key '" + key + "' must be a string");
        }
        if (key == "data_dir") c.data_dir = v.get<std::string>();
        if (key == "out_dir") c.out_dir = v.get<std::string>();
        if (key == "eval_split") {
            try {
                c.eval_split = parse_split_name(v.get<std::string>());
            } catch (const Error& e) {
                throw SchemaError(std::string("key 'eval_split': ") + e.what());
            }
        }
        if (key == "synthetic") c.synthetic = synthetic_from_json(v);
        if (key == "omega_values") {
            if (!v.is_array()) throw SchemaError("key 'omega_values' must be an array of numbers");
            for (const auto& w : v) c.omega_values.push_back(read_number(w, "omega_values"));
        }
    }
    c.train = train_config_from_json(rest);
    c.train.validate();
    return c;
}

CliConfig parse_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw IoError("cannot open config file " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

void to_json(json& j, const CliConfig& c) {
    j = json(c.train);
    if (c.data_dir) j["data_dir"] = c.data_dir->string();
    if (c.out_dir) j["out_dir"] = c.out_dir->string();
    j["eval_split"] = std::string(to_string(c.eval_split));
    const auto& s = c.synthetic;
    j["synthetic"] = json{{"n_train", s.n_train},
                          {"n_valid", s.n_valid},
                          {"n_test", s.n_test},
                          {"seq_len", s.seq_len},
                          {"signal_strength", s.signal_strength},
                          {"noise_std", s.noise_std},
                          {"seed", s.seed}};
    if (!c.omega_values.empty()) j["omega_values"] = c.omega_values;
}

std::vector<double> parse_value_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            throw ArgumentError("malformed value '" + item + "' in list '" + text + "'");
        }
        if (used != item.size()) throw ArgumentError("malformed value '" + item + "' in list '" + text + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ArgumentError("empty value list");
    return out;
}

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"MIAR multimodal emotion recognition: training, evaluation, ablation and sweeps", "miar"};
    app.require_subcommand(1);
    app.footer(
        "Config keys (JSON object; unknown keys are rejected):\n"
        "  model: d_model=50 n_heads=5 n_layers=2 ffn_mult=4 kernel_size=1 d_align=32 dropout=0.1\n"
        "         positional_encoding=false use_homogeneous=false d_text1=32 d_text2=32 d_audio=74 d_vision=35\n"
        "  loss:  tau=0.07 alpha=1 omega=0.1 p=1 normalize_alignment=true use_contrastive=true\n"
        "         use_norm_alignment=true\n"
        "  train: learning_rate=1e-4 batch_size=16 epochs=100 seed=101 acc2_mode=exclude_zero patience=0\n"
        "         clip_grad_norm=0\n"
        "  run:   data_dir (synthetic data when absent) out_dir eval_split=test omega_values\n"
        "  synthetic: {n_train=500 n_valid=100 n_test=100 seq_len=50 signal_strength=2 noise_std=0.5 seed=101}\n"
        "Output root: --out, else out_dir, else $MIAR_OUT, else ./miar_out\n"
        "Exit codes: 0 success, 1 runtime failure, 2 usage error");

    Common common;
    const auto add_common = [&](CLI::App* sub, bool data) {
        sub->add_option("--config", common.config, "JSON configuration file")->check(CLI::ExistingFile);
        sub->add_option("--out", common.out, "Output directory");
        if (data) sub->add_option("--data", common.data, "Dataset container directory (overrides data_dir)");
    };

    auto* gen = app.add_subcommand("gen-data", "Write a synthetic train/valid/test container to --out");
    add_common(gen, false);
    auto* train = app.add_subcommand("train", "Train and write checkpoint, history and metrics");
    add_common(train, true);
    auto* eval = app.add_subcommand("eval", "Score a checkpoint on one split");
    add_common(eval, true);
    std::string checkpoint;
    std::string split;
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory (default <out>/checkpoint)");
    eval->add_option("--split", split, "Split to score: train, valid or test (default eval_split)");
    auto* ablate = app.add_subcommand("ablate", "Four-cell contrastive/norm alignment ablation");
    add_common(ablate, true);
    auto* sweep = app.add_subcommand("sweep-omega", "Retrain for each omega and tabulate metrics");
    add_common(sweep, true);
    std::string values;
    sweep->add_option("--values", values, "Comma-separated omega values (default 0,0.05,0.1,0.15,0.2)");
    auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the full loss gradient");
    add_common(gc, false);
    double fraction = 0.05;
    double eps = 1e-5;
    gc->add_option("--fraction", fraction, "Fraction of parameters sampled per block")->capture_default_str();
    gc->add_option("--eps", eps, "Central-difference step")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error[usage]: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        if (gen->parsed()) return run_gen_data(common, out);
        if (train->parsed()) return run_train(common, out);
        if (eval->parsed()) return run_eval(common, checkpoint, split, out);
        if (ablate->parsed()) return run_ablate(common, out);
        if (sweep->parsed()) return run_sweep(common, values, out);
        if (gc->parsed()) return run_grad_check(common, fraction, eps, out);
    } catch (const Error& e) {
        err << "error[" << e.category() << "]: " << e.what() << "\n";
        return usage_category(e.category()) ? 2 : 1;
    } catch (const std::exception& e) {
        err << "error[internal]: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return 2;
}

}  // namespace miar::cli
