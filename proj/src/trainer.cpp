#include "miar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "miar/optimizer.hpp"

namespace miar {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kDropoutStream = 0x2545F4914F6CDD1Dull;
constexpr std::uint64_t kGradCheckStream = 0xC2B2AE3D27D4EB4Full;

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw CheckpointError("SHA-256 digest computation failed");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return out.str();
}

std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

template <typename T>
std::vector<double> to_double_vec(const std::vector<T>& v) {
    return {v.begin(), v.end()};
}

LossBreakdown mean_breakdown(const std::vector<StepRecord>& steps, std::size_t first) {
    LossBreakdown m;
    const std::size_t n = steps.size() - first;
    if (n == 0) return m;
    for (std::size_t i = first; i < steps.size(); ++i) {
        const auto& s = steps[i].loss;
        m.ttcl += s.ttcl;
        m.avcl += s.avcl;
        m.tatvm += s.tatvm;
        m.align += s.align;
        m.task += s.task;
        m.total += s.total;
    }
    const double inv = 1.0 / static_cast<double>(n);
    m.ttcl *= inv;
    m.avcl *= inv;
    m.tatvm *= inv;
    m.align *= inv;
    m.task *= inv;
    m.total *= inv;
    m.alpha = steps.back().loss.alpha;
    m.omega = steps.back().loss.omega;
    return m;
}

void check_dims(const ModelConfig& m, const RawModalityBatch& b, const char* what) {
    if (b.text1.d() != m.d_text1 || b.text2.d() != m.d_text2 || b.audio.d() != m.d_audio ||
        b.vision.d() != m.d_vision) {
        throw ShapeError(std::string(what) + " split feature widths do not match the training split");
    }
}

json epoch_json(const EpochRecord& e) {
    return json{{"epoch", e.epoch}, {"train", e.train}, {"valid", e.valid}};
}

EpochRecord epoch_from_json(const json& j) {
    EpochRecord e;
    e.epoch = j.at("epoch").get<std::size_t>();
    const json& t = j.at("train");
    e.train.ttcl = t.at("ttcl").get<double>();
    e.train.avcl = t.at("avcl").get<double>();
    e.train.tatvm = t.at("tatvm").get<double>();
    e.train.align = t.at("align").get<double>();
    e.train.task = t.at("task").get<double>();
    e.train.total = t.at("total").get<double>();
    e.train.alpha = t.at("alpha").get<double>();
    e.train.omega = t.at("omega").get<double>();
    e.valid = metrics_from_json(j.at("valid"));
    return e;
}

void write_text(const fs::path& file, const std::string& text) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw IoError("cannot write " + file.string());
    out << text;
    if (!out) throw IoError("short write to " + file.string());
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

}  // namespace

std::string Checkpoint::digest() const {
    std::string bytes(reinterpret_cast<const char*>(params.values().data()), params.size() * sizeof(float));
    bytes += json(config).dump();
    bytes += "|epoch=" + std::to_string(epoch);
    return sha256_hex(bytes);
}

void save_checkpoint(const Checkpoint& c, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    write_f32_file(dir / "params.f32", c.params.values());
    json blocks = json::array();
    for (const auto& b : c.params.layout().blocks()) {
        blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"shape", b.shape}});
    }
    json history = json::array();
    for (const auto& e : c.history) history.push_back(epoch_json(e));
    const json j{{"format", "miar-checkpoint"},
                 {"version", 1},
                 {"config", c.config},
                 {"epoch", c.epoch},
                 {"digest", c.digest()},
                 {"params_file", "params.f32"},
                 {"param_count", c.params.size()},
                 {"blocks", blocks},
                 {"history", history}};
    write_text(dir / "checkpoint.json", j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const fs::path& dir) {
    std::ifstream in(dir / "checkpoint.json");
    if (!in) throw IoError("cannot open " + (dir / "checkpoint.json").string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw CheckpointError(std::string("malformed checkpoint.json: ") + e.what());
    }
    Checkpoint c;
    try {
        c.config = train_config_from_json(j.at("config"));
        c.epoch = j.at("epoch").get<std::size_t>();
        for (const auto& e : j.at("history")) c.history.push_back(epoch_from_json(e));
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint.json is missing fields: ") + e.what());
    }
    c.model = build_model(c.config.model);
    const auto values = read_f32_file(dir / j.value("params_file", "params.f32"));
    if (values.size() != c.model.layout->total_size()) {
        throw CheckpointError("params.f32 holds " + std::to_string(values.size()) + " floats but the model needs " +
                              std::to_string(c.model.layout->total_size()));
    }
    c.params = ParamSet<float>(c.model.layout);
    std::copy(values.begin(), values.end(), c.params.values().begin());
    const std::string stored = j.value("digest", "");
    if (stored != c.digest()) throw CheckpointError("digest mismatch in " + dir.string());
    return c;
}

std::pair<Checkpoint, TrainHistory> train_model(const TrainConfig& config_in, const DatasetSplit& train,
                                                const DatasetSplit& valid, const EpochCallback& on_epoch) {
    if (train.batch.size() == 0) throw ArgumentError("train_model: training split is empty");
    if (valid.batch.size() == 0) throw ArgumentError("train_model: validation split is empty");
    train.batch.validate();
    valid.batch.validate();

    TrainConfig config = config_in;
    config.model.d_text1 = train.batch.text1.d();
    config.model.d_text2 = train.batch.text2.d();
    config.model.d_audio = train.batch.audio.d();
    config.model.d_vision = train.batch.vision.d();
    config.validate();
    check_dims(config.model, valid.batch, "validation");

    Checkpoint ckpt;
    ckpt.config = config;
    ckpt.model = build_model(config.model);
    ckpt.params = init_model_params<float>(ckpt.model, config.seed);
    ckpt.epoch = 0;

    TrainHistory history;
    if (config.epochs == 0) return {ckpt, history};

    ParamSet<float> params = ckpt.params;
    ParamSet<float> grad(ckpt.model.layout);
    Adam<float> adam(params.size(), config.learning_rate);
    std::mt19937_64 shuffle_rng(config.seed ^ kShuffleStream);
    std::mt19937_64 dropout_rng(config.seed ^ kDropoutStream);
    const std::vector<double> valid_labels = to_double(valid.batch.labels);

    std::vector<std::size_t> order(train.batch.size());
    double best_mse = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    std::size_t global_step = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const std::size_t first_step = history.steps.size();
        for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            const RawModalityBatch batch =
                train.batch.select(std::span<const std::size_t>(order.data() + start, stop - start));
            grad.set_zero();
            const auto res =
                loss_and_gradient(ckpt.model, params, batch, config.loss, Mode::train, &dropout_rng, &grad);
            if (!std::isfinite(res.loss.total)) {
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b));
            }
            for (std::size_t i = 0; i < grad.size(); ++i) {
                if (!std::isfinite(grad.values()[i])) {
                    throw NumericError("non-finite gradient in block '" +
                                       grad.layout().block(grad.layout().block_of(i)).name + "' at epoch " +
                                       std::to_string(epoch) + ", batch " + std::to_string(b));
                }
            }
            if (config.clip_grad_norm > 0.0) clip_grad_norm(grad, config.clip_grad_norm);
            adam.step(params, grad);
            history.steps.push_back({epoch, global_step++, res.loss});
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train = mean_breakdown(history.steps, first_step);
        const auto pred = predict(ckpt.model, params, valid.batch);
        rec.valid = compute_metrics(to_double_vec(pred), valid_labels, config.acc2_mode);
        history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);

        if (rec.valid.mse < best_mse) {
            best_mse = rec.valid.mse;
            history.best_epoch = epoch;
            ckpt.params = params;
            ckpt.epoch = epoch;
            since_best = 0;
        } else if (config.patience > 0 && ++since_best >= config.patience) {
            history.early_stopped = true;
            break;
        }
    }
    ckpt.history = history.epochs;
    return {ckpt, history};
}

MetricsReport evaluate_model(const Checkpoint& ckpt, const DatasetSplit& split, Acc2Mode mode) {
    if (ckpt.params.size() != ckpt.model.layout->total_size()) {
        throw CheckpointError("checkpoint parameters do not match the model layout");
    }
    check_dims(ckpt.config.model, split.batch, "evaluation");
    const auto pred = predict(ckpt.model, ckpt.params, split.batch);
    return compute_metrics(to_double_vec(pred), to_double(split.batch.labels), mode);
}

MetricsReport evaluate_model(const Checkpoint& ckpt, const DatasetSplit& split) {
    return evaluate_model(ckpt, split, ckpt.config.acc2_mode);
}

GradCheckResult check_gradient(const std::function<double(const std::vector<double>&)>& loss,
                               const std::vector<double>& theta, const std::vector<double>& analytic,
                               const std::vector<std::size_t>& indices, double eps, const ParamLayout* layout) {
    if (!(eps > 0.0)) throw ArgumentError("grad_check: finite-difference step must be > 0");
    if (analytic.size() != theta.size()) throw ShapeError("grad_check: analytic gradient size mismatch");
    GradCheckResult r;
    std::vector<double> probe = theta;
    for (std::size_t i : indices) {
        const auto block_name = [&] {
            return layout ? layout->block(layout->block_of(i)).name : "index " + std::to_string(i);
        };
        if (!std::isfinite(analytic[i])) throw NumericError("non-finite analytic gradient in " + block_name());
        probe[i] = theta[i] + eps;
        const double up = loss(probe);
        probe[i] = theta[i] - eps;
        const double down = loss(probe);
        probe[i] = theta[i];
        const double fd = (up - down) / (2.0 * eps);
        if (!std::isfinite(fd)) throw NumericError("non-finite finite-difference gradient in " + block_name());
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]) + std::abs(fd));
        ++r.checked;
        if (err > r.max_rel_error || r.worst_block.empty()) {
            r.max_rel_error = std::max(r.max_rel_error, err);
            if (err >= r.max_rel_error) r.worst_block = block_name();
        }
    }
    return r;
}

GradCheckResult grad_check(const TrainConfig& config, double sample_fraction, double eps,
                           const GradCheckOptions& options) {
    if (!(eps > 0.0)) throw ArgumentError("grad_check: finite-difference step must be > 0");
    if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
        throw ArgumentError("grad_check: sample fraction must lie in (0, 1]");
    }
    ModelConfig mc = config.model;
    if (options.toy_dims) {
        mc.d_model = 8;
        mc.n_heads = 2;
        mc.d_align = 4;
        mc.d_text1 = 6;
        mc.d_text2 = 5;
        mc.d_audio = 7;
        mc.d_vision = 4;
        mc.ffn_mult = std::min<std::size_t>(mc.ffn_mult, 2);
    }
    mc.dropout = 0.0;
    LossConfig lc = config.loss;
    lc.p = 2;

    const ModelParams model = build_model(mc);
    const ParamSet<double> params = init_model_params<float>(model, config.seed).cast<double>();

    SyntheticSpec spec;
    spec.n_samples = options.n_samples;
    spec.seq_len = options.seq_len;
    spec.d_text1 = mc.d_text1;
    spec.d_text2 = mc.d_text2;
    spec.d_audio = mc.d_audio;
    spec.d_vision = mc.d_vision;
    spec.noise_std = 1.0;
    spec.seed = config.seed ^ kGradCheckStream;
    const RawModalityBatch batch = generate_synthetic(spec).batch;

    ParamSet<double> grad(model.layout);
    loss_and_gradient(model, params, batch, lc, Mode::eval, nullptr, &grad);

    std::mt19937_64 rng(config.seed ^ kGradCheckStream);
    std::vector<std::size_t> indices;
    for (const auto& b : model.layout->blocks()) {
        std::vector<std::size_t> idx(b.size());
        std::iota(idx.begin(), idx.end(), b.offset);
        std::shuffle(idx.begin(), idx.end(), rng);
        const auto take = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::ceil(sample_fraction * static_cast<double>(b.size()))));
        indices.insert(indices.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(take, idx.size())));
    }

    ParamSet<double> probe = params;
    const auto loss = [&](const std::vector<double>& theta) {
        std::copy(theta.begin(), theta.end(), probe.values().begin());
        return loss_and_gradient<double>(model, probe, batch, lc, Mode::eval, nullptr, nullptr).loss.total;
    };
    const std::vector<double> theta(params.values().begin(), params.values().end());
    const std::vector<double> analytic(grad.values().begin(), grad.values().end());
    return check_gradient(loss, theta, analytic, indices, eps, model.layout.get());
}

std::vector<AblationRow> run_ablation(const TrainConfig& config, const DatasetSplit& train, const DatasetSplit& valid,
                                      const DatasetSplit& eval) {
    std::vector<AblationRow> rows;
    for (bool contrastive : {false, true}) {
        for (bool norm : {false, true}) {
            TrainConfig c = config;
            c.loss.use_contrastive = contrastive;
            c.loss.use_norm_alignment = norm;
            auto [ckpt, hist] = train_model(c, train, valid);
            AblationRow row;
            row.contrastive = contrastive;
            row.norm = norm;
            row.metrics = evaluate_model(ckpt, eval);
            row.align_contribution = hist.epochs.empty() ? 0.0 : c.loss.omega * hist.epochs.back().train.align;
            rows.push_back(row);
        }
    }
    return rows;
}

std::vector<double> default_omega_grid() { return {0.0, 0.05, 0.1, 0.15, 0.2}; }

std::vector<SweepRow> sweep_omega(const TrainConfig& config, const DatasetSplit& train, const DatasetSplit& valid,
                                  const DatasetSplit& eval, const std::vector<double>& values) {
    if (values.empty()) throw ArgumentError("sweep_omega: no omega values given");
    for (double w : values) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ArgumentError("sweep_omega: omega must be >= 0, got " + fmt(w));
    }
    std::vector<SweepRow> rows;
    for (double w : values) {
        TrainConfig c = config;
        c.loss.omega = w;
        auto [ckpt, hist] = train_model(c, train, valid);
        rows.push_back({w, evaluate_model(ckpt, eval)});
    }
    return rows;
}

void to_json(json& j, const LossBreakdown& b) {
    j = json{{"ttcl", b.ttcl}, {"avcl", b.avcl}, {"tatvm", b.tatvm}, {"align", b.align},
             {"task", b.task}, {"total", b.total}, {"alpha", b.alpha}, {"omega", b.omega}};
}

void to_json(json& j, const TrainHistory& h) {
    json epochs = json::array();
    for (const auto& e : h.epochs) epochs.push_back(epoch_json(e));
    json steps = json::array();
    for (const auto& s : h.steps) steps.push_back({{"epoch", s.epoch}, {"step", s.step}, {"loss", s.loss}});
    j = json{{"epochs", epochs}, {"steps", steps}, {"best_epoch", h.best_epoch}, {"early_stopped", h.early_stopped}};
}

void write_history(const TrainHistory& h, const fs::path& dir) {
    write_text(dir / "history.json", json(h).dump(2) + "\n");
    std::ostringstream csv;
    csv << "epoch,ttcl,avcl,tatvm,align,task,total,valid_acc2,valid_f1,valid_acc7,valid_mse\n";
    for (const auto& e : h.epochs) {
        csv << e.epoch << ',' << fmt(e.train.ttcl) << ',' << fmt(e.train.avcl) << ',' << fmt(e.train.tatvm) << ','
            << fmt(e.train.align) << ',' << fmt(e.train.task) << ',' << fmt(e.train.total) << ','
            << fmt(e.valid.acc2) << ',' << fmt(e.valid.f1) << ',' << fmt(e.valid.acc7) << ',' << fmt(e.valid.mse)
            << '\n';
    }
    write_text(dir / "history.csv", csv.str());
}

void write_ablation(const std::vector<AblationRow>& rows, const fs::path& dir) {
    json j = json::array();
    std::ostringstream csv;
    csv << "contrastive,norm,acc2,f1,acc7,mse,align_contribution\n";
    for (const auto& r : rows) {
        j.push_back({{"contrastive", r.contrastive},
                     {"norm", r.norm},
                     {"metrics", r.metrics},
                     {"align_contribution", r.align_contribution}});
        csv << (r.contrastive ? "true" : "false") << ',' << (r.norm ? "true" : "false") << ',' << fmt(r.metrics.acc2)
            << ',' << fmt(r.metrics.f1) << ',' << fmt(r.metrics.acc7) << ',' << fmt(r.metrics.mse) << ','
            << fmt(r.align_contribution) << '\n';
    }
    write_text(dir / "ablation.json", j.dump(2) + "\n");
    write_text(dir / "ablation.csv", csv.str());
}

void write_sweep(const std::vector<SweepRow>& rows, const fs::path& dir) {
    json j = json::array();
    std::ostringstream csv;
    csv << "omega,acc2,f1,acc7,mse\n";
    for (const auto& r : rows) {
        j.push_back({{"omega", r.omega}, {"metrics", r.metrics}});
        csv << fmt(r.omega) << ',' << fmt(r.metrics.acc2) << ',' << fmt(r.metrics.f1) << ',' << fmt(r.metrics.acc7)
            << ',' << fmt(r.metrics.mse) << '\n';
    }
    write_text(dir / "sweep_omega.json", j.dump(2) + "\n");
    write_text(dir / "sweep_omega.csv", csv.str());
}

}  // namespace miar
