#pragma once

#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <algorithm>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sre/core.hpp"
#include "sre/error.hpp"
#include "sre/io.hpp"
#include "sre/metrics.hpp"
#include "sre/neural.hpp"
#include "sre/oracle.hpp"
#include "sre/paradigm.hpp"
#include "sre/sampler.hpp"
#include "sre/schedule.hpp"
#include "sre/tasks.hpp"
#include "sre/tsampling.hpp"

namespace sre::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config sections

struct TaskConfig {
    std::string kind = "gaussian";
    std::size_t order = 3;
    double sigma = 0.1;
    std::size_t length = 8;
    double phi = 0.9;
    std::vector<double> mean{0.0, 0.0};
    double rho = 0.8;
    double scale = 1.0;
    std::size_t n = 0;
    std::size_t dim = 1;
    std::optional<json> mixture;
};

struct ParadigmConfig {
    std::string kind = "rectified-flow";
    std::size_t d_steps = 1000;
    std::string beta_schedule = "linear";
};

struct DenoiserConfig {
    std::string kind = "oracle";
    std::string prediction = "x0";
    std::vector<std::size_t> encoder{64, 64};
    std::vector<std::size_t> head{64};
    std::size_t level_dims = 16;
    std::size_t position_dims = 16;
    bool uncertainty_head = false;
    bool variance_head = false;
    std::string activation = "silu";
    std::string checkpoint;
};

struct TSamplerConfig {
    std::string kind = "independent-uniform";
    std::string reweighter = "uniform";
    double m = 0.0;
    double s = 1.0;
};

struct LossConfig {
    std::string kind = "mse";
    double weight = 1.0;
    std::string target = "x0";
};

struct TrainingConfig {
    std::string optimizer = "adam";
    double lr = 1e-3;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    std::vector<LossConfig> losses{LossConfig{}};
};

struct ScheduleConfig {
    std::string kind = "parallel";
    std::size_t d = 64;
    double overlap = 0.0;
    std::string order = "index";
    std::vector<std::size_t> explicit_order;
    std::uint64_t order_seed = 0;
    std::size_t k = 1;
    std::size_t window = 1;
    std::size_t stride = 1;
};

struct Clamp {
    std::size_t variable = 0;
    std::vector<double> value;
};

struct SamplerConfig {
    std::string method = "ddim";
    double eta = 0.0;
    bool learned_variance = false;
    std::uint64_t seed = 0;
    std::size_t chains = 100;
    bool record = false;
    std::vector<Clamp> conditioning;
};

struct OutputConfig {
    std::string directory = "out";
    std::vector<std::string> formats{"csv"};
};

struct RunConfig {
    TaskConfig task;
    ParadigmConfig paradigm;
    DenoiserConfig denoiser;
    TSamplerConfig tsampler;
    TrainingConfig training;
    ScheduleConfig schedule;
    SamplerConfig sampler;
    OutputConfig output;
};

// ---------------------------------------------------------------------------
// Strict parsing

namespace detail {

/// Rejects unknown keys and reads typed values with their dotted path in
/// every error message.
class Section {
public:
    Section(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
        for (const auto& [key, _] : j_.items()) {
            bool ok = false;
            for (const char* a : allowed) ok = ok || key == a;
            if (!ok) throw ConfigError("unknown config key '" + key_path(key) + "'");
        }
    }

    template <typename T>
    void read(const char* key, T& out) const {
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + key_path(key) + "' has the wrong type: " + e.what());
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    const json& at(const char* key) const { return j_.at(key); }
    std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json& j_;
    std::string path_;
};

inline const json& section_or_empty(const json& root, const char* key) {
    static const json empty = json::object();
    return root.contains(key) ? root.at(key) : empty;
}

template <typename E>
E lookup(const std::map<std::string, E>& table, const std::string& value, const std::string& key) {
    const auto it = table.find(value);
    if (it == table.end()) {
        std::string options;
        for (const auto& [name, _] : table) options += (options.empty() ? "" : ", ") + name;
        throw ConfigError("config key '" + key + "' has unknown value '" + value + "' (expected one of: " + options + ")");
    }
    return it->second;
}

inline const std::map<std::string, ParadigmKind> kParadigms{
    {"ddpm-discrete", ParadigmKind::DdpmDiscrete}, {"cosine-flow", ParadigmKind::CosineFlow}, {"rectified-flow", ParadigmKind::RectifiedFlow}};
inline const std::map<std::string, BetaSchedule> kBetaSchedules{{"linear", BetaSchedule::Linear}, {"cosine", BetaSchedule::Cosine}};
inline const std::map<std::string, PredictionKind> kPredictions{
    {"epsilon", PredictionKind::Epsilon}, {"x0", PredictionKind::X0}, {"v", PredictionKind::V}, {"u", PredictionKind::U}};
inline const std::map<std::string, TSamplerKind> kTSamplers{{"independent-uniform", TSamplerKind::IndependentUniform},
                                                            {"uniform-tbar", TSamplerKind::UniformTbar},
                                                            {"shared-scalar", TSamplerKind::SharedScalar}};
inline const std::map<std::string, ScalarReweighter> kReweighters{{"uniform", ScalarReweighter::Uniform},
                                                                  {"logit-normal", ScalarReweighter::LogitNormal}};
inline const std::map<std::string, ScheduleKind> kSchedules{{"parallel", ScheduleKind::Parallel},
                                                            {"sequential", ScheduleKind::Sequential},
                                                            {"next-k", ScheduleKind::NextK},
                                                            {"rolling-window", ScheduleKind::RollingWindow},
                                                            {"adaptive-certainty", ScheduleKind::AdaptiveCertainty}};
inline const std::map<std::string, StepKind> kMethods{{"ddpm-ancestral", StepKind::DdpmAncestral},
                                                      {"ddim", StepKind::Ddim},
                                                      {"euler-flow", StepKind::EulerFlow},
                                                      {"heun-flow", StepKind::HeunFlow}};
inline const std::map<std::string, LossKind> kLosses{
    {"mse", LossKind::Mse}, {"nll", LossKind::Nll}, {"vlb", LossKind::Vlb}, {"cosine", LossKind::Cosine}};
inline const std::map<std::string, OptimizerKind> kOptimizers{{"sgd", OptimizerKind::Sgd}, {"adam", OptimizerKind::Adam}};
inline const std::map<std::string, int> kTasks{{"gaussian", 0}, {"latin-square", 1}, {"sequence", 2}, {"mixture", 3}};
inline const std::map<std::string, int> kOrders{{"index", 0}, {"explicit", 1}, {"random", 2}, {"graph", 3}};
inline const std::map<std::string, Activation> kActivations{{"silu", Activation::Silu}, {"identity", Activation::Identity}};

template <typename E>
std::string name_of(const std::map<std::string, E>& table, E value) {
    for (const auto& [name, v] : table)
        if (v == value) return name;
    return "?";
}

}  // namespace detail

/// Parses a config document. Unknown keys anywhere are errors.
inline RunConfig parse_config(const json& root) {
    using detail::Section;
    RunConfig cfg;
    Section top(root, "", {"task", "paradigm", "denoiser", "tsampler", "training", "schedule", "sampler", "output"});

    {
        Section s(detail::section_or_empty(root, "task"), "task",
                  {"kind", "order", "sigma", "length", "phi", "mean", "rho", "scale", "n", "dim", "mixture"});
        auto& t = cfg.task;
        s.read("kind", t.kind);
        s.read("order", t.order);
        s.read("sigma", t.sigma);
        s.read("length", t.length);
        s.read("phi", t.phi);
        s.read("mean", t.mean);
        s.read("rho", t.rho);
        s.read("scale", t.scale);
        s.read("n", t.n);
        s.read("dim", t.dim);
        if (s.has("mixture")) t.mixture = s.at("mixture");
        detail::lookup(detail::kTasks, t.kind, "task.kind");
    }
    {
        Section s(detail::section_or_empty(root, "paradigm"), "paradigm", {"kind", "d_steps", "beta_schedule"});
        s.read("kind", cfg.paradigm.kind);
        s.read("d_steps", cfg.paradigm.d_steps);
        s.read("beta_schedule", cfg.paradigm.beta_schedule);
    }
    {
        Section s(detail::section_or_empty(root, "denoiser"), "denoiser",
                  {"kind", "prediction", "encoder", "head", "level_dims", "position_dims", "uncertainty_head",
                   "variance_head", "activation", "checkpoint"});
        auto& d = cfg.denoiser;
        s.read("kind", d.kind);
        s.read("prediction", d.prediction);
        s.read("encoder", d.encoder);
        s.read("head", d.head);
        s.read("level_dims", d.level_dims);
        s.read("position_dims", d.position_dims);
        s.read("uncertainty_head", d.uncertainty_head);
        s.read("variance_head", d.variance_head);
        s.read("activation", d.activation);
        s.read("checkpoint", d.checkpoint);
        if (d.kind != "oracle" && d.kind != "neural")
            throw ConfigError("config key 'denoiser.kind' has unknown value '" + d.kind + "' (expected oracle or neural)");
    }
    {
        Section s(detail::section_or_empty(root, "tsampler"), "tsampler", {"kind", "reweighter", "m", "s"});
        s.read("kind", cfg.tsampler.kind);
        s.read("reweighter", cfg.tsampler.reweighter);
        s.read("m", cfg.tsampler.m);
        s.read("s", cfg.tsampler.s);
    }
    {
        Section s(detail::section_or_empty(root, "training"), "training", {"optimizer", "lr", "steps", "batch", "seed", "losses"});
        auto& t = cfg.training;
        s.read("optimizer", t.optimizer);
        s.read("lr", t.lr);
        s.read("steps", t.steps);
        s.read("batch", t.batch);
        s.read("seed", t.seed);
        if (s.has("losses")) {
            const json& arr = s.at("losses");
            if (!arr.is_array()) throw ConfigError("config key 'training.losses' must be an array");
            t.losses.clear();
            for (std::size_t i = 0; i < arr.size(); ++i) {
                Section ls(arr[i], "training.losses[" + std::to_string(i) + "]", {"kind", "weight", "target"});
                LossConfig l;
                ls.read("kind", l.kind);
                ls.read("weight", l.weight);
                ls.read("target", l.target);
                t.losses.push_back(l);
            }
        }
    }
    {
        Section s(detail::section_or_empty(root, "schedule"), "schedule",
                  {"kind", "d", "overlap", "order", "explicit_order", "order_seed", "k", "window", "stride"});
        auto& sc = cfg.schedule;
        s.read("kind", sc.kind);
        s.read("d", sc.d);
        s.read("overlap", sc.overlap);
        s.read("order", sc.order);
        s.read("explicit_order", sc.explicit_order);
        s.read("order_seed", sc.order_seed);
        s.read("k", sc.k);
        s.read("window", sc.window);
        s.read("stride", sc.stride);
    }
    {
        Section s(detail::section_or_empty(root, "sampler"), "sampler",
                  {"method", "eta", "learned_variance", "seed", "chains", "record", "conditioning"});
        auto& sm = cfg.sampler;
        s.read("method", sm.method);
        s.read("eta", sm.eta);
        s.read("learned_variance", sm.learned_variance);
        s.read("seed", sm.seed);
        s.read("chains", sm.chains);
        s.read("record", sm.record);
        if (s.has("conditioning")) {
            const json& arr = s.at("conditioning");
            if (!arr.is_array()) throw ConfigError("config key 'sampler.conditioning' must be an array");
            for (std::size_t i = 0; i < arr.size(); ++i) {
                Section cs(arr[i], "sampler.conditioning[" + std::to_string(i) + "]", {"variable", "value"});
                Clamp c;
                cs.read("variable", c.variable);
                cs.read("value", c.value);
                sm.conditioning.push_back(c);
            }
        }
    }
    {
        Section s(detail::section_or_empty(root, "output"), "output", {"directory", "formats"});
        s.read("directory", cfg.output.directory);
        s.read("formats", cfg.output.formats);
        for (const auto& f : cfg.output.formats)
            if (f != "csv" && f != "ppm") throw ConfigError("config key 'output.formats' has unknown format '" + f + "'");
    }
    return cfg;
}

inline json to_json(const RunConfig& c) {
    json j;
    j["task"] = {{"kind", c.task.kind}, {"order", c.task.order}, {"sigma", c.task.sigma}, {"length", c.task.length},
                 {"phi", c.task.phi},   {"mean", c.task.mean},   {"rho", c.task.rho},     {"scale", c.task.scale},
                 {"n", c.task.n},       {"dim", c.task.dim}};
    if (c.task.mixture) j["task"]["mixture"] = *c.task.mixture;
    j["paradigm"] = {{"kind", c.paradigm.kind}, {"d_steps", c.paradigm.d_steps}, {"beta_schedule", c.paradigm.beta_schedule}};
    j["denoiser"] = {{"kind", c.denoiser.kind},
                     {"prediction", c.denoiser.prediction},
                     {"encoder", c.denoiser.encoder},
                     {"head", c.denoiser.head},
                     {"level_dims", c.denoiser.level_dims},
                     {"position_dims", c.denoiser.position_dims},
                     {"uncertainty_head", c.denoiser.uncertainty_head},
                     {"variance_head", c.denoiser.variance_head},
                     {"activation", c.denoiser.activation},
                     {"checkpoint", c.denoiser.checkpoint}};
    j["tsampler"] = {{"kind", c.tsampler.kind}, {"reweighter", c.tsampler.reweighter}, {"m", c.tsampler.m}, {"s", c.tsampler.s}};
    json losses = json::array();
    for (const auto& l : c.training.losses) losses.push_back({{"kind", l.kind}, {"weight", l.weight}, {"target", l.target}});
    j["training"] = {{"optimizer", c.training.optimizer}, {"lr", c.training.lr},     {"steps", c.training.steps},
                     {"batch", c.training.batch},         {"seed", c.training.seed}, {"losses", losses}};
    j["schedule"] = {{"kind", c.schedule.kind},
                     {"d", c.schedule.d},
                     {"overlap", c.schedule.overlap},
                     {"order", c.schedule.order},
                     {"explicit_order", c.schedule.explicit_order},
                     {"order_seed", c.schedule.order_seed},
                     {"k", c.schedule.k},
                     {"window", c.schedule.window},
                     {"stride", c.schedule.stride}};
    json cond = json::array();
    for (const auto& cl : c.sampler.conditioning) cond.push_back({{"variable", cl.variable}, {"value", cl.value}});
    j["sampler"] = {{"method", c.sampler.method}, {"eta", c.sampler.eta},       {"learned_variance", c.sampler.learned_variance},
                    {"seed", c.sampler.seed},     {"chains", c.sampler.chains}, {"record", c.sampler.record},
                    {"conditioning", cond}};
    j["output"] = {{"directory", c.output.directory}, {"formats", c.output.formats}};
    return j;
}

// ---------------------------------------------------------------------------
// Resolution into library objects

enum class Subcommand { Train, Sample, Eval, VizSchedule };

inline std::string to_string(Subcommand s) {
    switch (s) {
        case Subcommand::Train: return "train";
        case Subcommand::Sample: return "sample";
        case Subcommand::Eval: return "eval";
        case Subcommand::VizSchedule: return "viz-schedule";
    }
    return "?";
}

/// Everything a run needs, built and cross-validated from a RunConfig.
struct Resolved {
    RunConfig config;
    TaskDomain task;
    Paradigm paradigm = Paradigm::rectified_flow();
    PredictionKind prediction = PredictionKind::X0;
    NetShape net_shape;
    TSampler tsampler;
    LossSpec loss;
    OptimizerConfig optimizer;
    ScheduleSpec schedule;
    StepMethod method;
    Matrix clamped;                 // n x dim, values of conditioned variables
    std::vector<bool> conditioned;  // n
};

namespace detail {

inline GaussianMixture parse_mixture(const json& j, std::size_t D) {
    Section s(j, "task.mixture", {"weights", "means", "covariances"});
    std::vector<double> weights;
    std::vector<std::vector<double>> means;
    std::vector<std::vector<std::vector<double>>> covs;
    s.read("weights", weights);
    s.read("means", means);
    s.read("covariances", covs);
    std::vector<Vector> mv;
    std::vector<Matrix> cv;
    for (const auto& m : means) {
        if (m.size() != D) throw ConfigError("task.mixture.means entries must have length n*dim = " + std::to_string(D));
        mv.push_back(Eigen::Map<const Vector>(m.data(), static_cast<Eigen::Index>(D)));
    }
    for (const auto& c : covs) {
        if (c.size() != D) throw ConfigError("task.mixture.covariances entries must be n*dim square matrices");
        Matrix m(static_cast<Eigen::Index>(D), static_cast<Eigen::Index>(D));
        for (std::size_t r = 0; r < D; ++r) {
            if (c[r].size() != D) throw ConfigError("task.mixture.covariances entries must be n*dim square matrices");
            for (std::size_t q = 0; q < D; ++q) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) = c[r][q];
        }
        cv.push_back(std::move(m));
    }
    try {
        return GaussianMixture(std::move(weights), std::move(mv), std::move(cv));
    } catch (const Error& e) {
        throw ConfigError(std::string("task.mixture: ") + e.what());
    }
}

inline TaskDomain build_task(const TaskConfig& t) {
    try {
        switch (lookup(kTasks, t.kind, "task.kind")) {
            case 0: return gaussian_task(Eigen::Map<const Vector>(t.mean.data(), static_cast<Eigen::Index>(t.mean.size())), t.rho, t.scale);
            case 1: return latin_square_mixture(t.order, t.sigma);
            case 2: return sequence_task(t.length, t.phi);
            default:
                if (!t.mixture) throw ConfigError("task.kind=mixture requires task.mixture");
                if (t.n < 1 || t.dim < 1) throw ConfigError("task.kind=mixture requires task.n and task.dim");
                return mixture_task(parse_mixture(*t.mixture, t.n * t.dim), t.n, t.dim);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("task: ") + e.what());
    }
}

[[noreturn]] inline void incompatible(const std::string& a, const std::string& b, const std::string& why) {
    throw ConfigError("incompatible config: " + a + " with " + b + ": " + why);
}

inline fs::path resolve_path(const std::string& p, const fs::path& base) {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() ? path : fs::absolute(base / path);
}

}  // namespace detail

/// Builds and cross-validates everything before any work starts.
/// `base_dir` anchors relative paths (the config file's directory).
inline Resolved resolve(RunConfig cfg, Subcommand cmd, const fs::path& base_dir = fs::current_path()) {
    using detail::incompatible;
    using detail::lookup;
    Resolved r;

    r.task = detail::build_task(cfg.task);
    const std::size_t n = r.task.n;
    const std::size_t dim = r.task.dim;

    const ParadigmKind pk = lookup(detail::kParadigms, cfg.paradigm.kind, "paradigm.kind");
    if (pk == ParadigmKind::DdpmDiscrete) {
        if (cfg.paradigm.d_steps < 1) throw ConfigError("paradigm.d_steps must be >= 1");
        r.paradigm = Paradigm::ddpm(cfg.paradigm.d_steps, lookup(detail::kBetaSchedules, cfg.paradigm.beta_schedule, "paradigm.beta_schedule"));
    } else {
        r.paradigm = pk == ParadigmKind::CosineFlow ? Paradigm::cosine_flow() : Paradigm::rectified_flow();
    }

    // Denoiser and net shape.
    r.prediction = lookup(detail::kPredictions, cfg.denoiser.prediction, "denoiser.prediction");
    const bool neural = cfg.denoiser.kind == "neural";
    if (neural) {
        if (r.prediction == PredictionKind::U && r.paradigm.is_discrete())
            incompatible("denoiser.prediction=u", "paradigm.kind=ddpm-discrete", "velocity is undefined for discrete steps");
        if (r.prediction == PredictionKind::Epsilon && !r.paradigm.is_discrete())
            incompatible("denoiser.prediction=epsilon", "paradigm.kind=" + cfg.paradigm.kind,
                         "x0 cannot be recovered from epsilon at level 1");
        r.net_shape.tokenizer = {dim, cfg.denoiser.level_dims, cfg.denoiser.position_dims};
        if (cfg.denoiser.level_dims % 2 || cfg.denoiser.position_dims % 2)
            throw ConfigError("denoiser.level_dims and denoiser.position_dims must be even");
        r.net_shape.encoder = cfg.denoiser.encoder;
        r.net_shape.head = cfg.denoiser.head;
        r.net_shape.uncertainty_head = cfg.denoiser.uncertainty_head;
        r.net_shape.variance_head = cfg.denoiser.variance_head;
        r.net_shape.activation = lookup(detail::kActivations, cfg.denoiser.activation, "denoiser.activation");
        r.net_shape.kind = r.prediction;
    }
    if (cmd == Subcommand::Train && !neural) throw ConfigError("train requires denoiser.kind=neural");
    if (neural && (cmd == Subcommand::Sample || (cmd == Subcommand::VizSchedule && cfg.schedule.kind == "adaptive-certainty"))) {
        if (cfg.denoiser.checkpoint.empty()) throw ConfigError("denoiser.kind=neural requires denoiser.checkpoint for " + to_string(cmd));
        const fs::path ck = detail::resolve_path(cfg.denoiser.checkpoint, base_dir);
        if (!fs::exists(ck)) throw ConfigError("denoiser.checkpoint '" + ck.string() + "' does not exist");
        cfg.denoiser.checkpoint = ck.string();
    }

    // Training.
    r.tsampler.kind = lookup(detail::kTSamplers, cfg.tsampler.kind, "tsampler.kind");
    r.tsampler.reweighter = lookup(detail::kReweighters, cfg.tsampler.reweighter, "tsampler.reweighter");
    r.tsampler.m = cfg.tsampler.m;
    r.tsampler.s = cfg.tsampler.s;
    if (r.tsampler.reweighter == ScalarReweighter::LogitNormal && !(r.tsampler.s > 0.0))
        throw ConfigError("tsampler.s must be > 0 for tsampler.reweighter=logit-normal");
    r.optimizer.kind = lookup(detail::kOptimizers, cfg.training.optimizer, "training.optimizer");
    r.optimizer.lr = cfg.training.lr;
    r.optimizer.steps = cfg.training.steps;
    r.optimizer.batch = cfg.training.batch;
    if (!(cfg.training.lr >= 0.0)) throw ConfigError("training.lr must be >= 0");
    if (cfg.training.batch < 1) throw ConfigError("training.batch must be >= 1");
    for (std::size_t i = 0; i < cfg.training.losses.size(); ++i) {
        const auto& l = cfg.training.losses[i];
        const std::string key = "training.losses[" + std::to_string(i) + "]";
        LossTerm term{lookup(detail::kLosses, l.kind, key + ".kind"), l.weight,
                      lookup(detail::kPredictions, l.target, key + ".target")};
        if (!(l.weight >= 0.0)) throw ConfigError(key + ".weight must be >= 0");
        if (term.kind == LossKind::Vlb && !r.paradigm.is_discrete())
            incompatible(key + ".kind=vlb", "paradigm.kind=" + cfg.paradigm.kind, "vlb requires ddpm-discrete");
        if (term.kind == LossKind::Cosine && term.target != PredictionKind::U)
            incompatible(key + ".kind=cosine", key + ".target=" + l.target, "cosine supervision requires target u");
        if ((term.kind == LossKind::Cosine || term.target == PredictionKind::U) && r.paradigm.is_discrete())
            incompatible(key + ".target=u", "paradigm.kind=ddpm-discrete", "velocity is undefined for discrete steps");
        if (neural && term.kind == LossKind::Nll && !cfg.denoiser.uncertainty_head)
            incompatible(key + ".kind=nll", "denoiser.uncertainty_head=false", "nll needs the uncertainty head");
        if (neural && term.kind == LossKind::Vlb && !cfg.denoiser.variance_head)
            incompatible(key + ".kind=vlb", "denoiser.variance_head=false", "vlb needs the learned-variance head");
        r.loss.terms.push_back(term);
    }
    if (cmd == Subcommand::Train) {
        bool positive = false;
        for (const auto& t : r.loss.terms) positive = positive || t.weight > 0.0;
        if (!positive) throw ConfigError("training.losses needs at least one entry with positive weight");
    }

    // Sampler.
    r.method.kind = lookup(detail::kMethods, cfg.sampler.method, "sampler.method");
    r.method.eta = cfg.sampler.eta;
    r.method.learned_variance = cfg.sampler.learned_variance;
    if (!(cfg.sampler.eta >= 0.0)) throw ConfigError("sampler.eta must be >= 0");
    if (r.method.kind == StepKind::DdpmAncestral && !r.paradigm.is_discrete())
        incompatible("sampler.method=ddpm-ancestral", "paradigm.kind=" + cfg.paradigm.kind, "ancestral steps need the ddpm grid");
    if ((r.method.kind == StepKind::EulerFlow || r.method.kind == StepKind::HeunFlow) && r.paradigm.is_discrete())
        incompatible("sampler.method=" + cfg.sampler.method, "paradigm.kind=ddpm-discrete", "flow steps need time derivatives");
    if (r.method.learned_variance) {
        if (r.method.kind != StepKind::DdpmAncestral)
            incompatible("sampler.learned_variance=true", "sampler.method=" + cfg.sampler.method, "learned variance needs ddpm-ancestral");
        if (!neural || !cfg.denoiser.variance_head)
            incompatible("sampler.learned_variance=true", "denoiser.variance_head=false", "learned variance needs the variance head");
    }
    if (cmd == Subcommand::Sample && cfg.sampler.chains < 1) throw ConfigError("sampler.chains must be >= 1");

    // Conditioning.
    r.clamped = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
    r.conditioned.assign(n, false);
    for (std::size_t i = 0; i < cfg.sampler.conditioning.size(); ++i) {
        const Clamp& c = cfg.sampler.conditioning[i];
        const std::string key = "sampler.conditioning[" + std::to_string(i) + "]";
        if (c.variable >= n) throw ConfigError(key + ".variable is out of range for task with n=" + std::to_string(n));
        if (c.value.size() != dim) throw ConfigError(key + ".value must have length dim=" + std::to_string(dim));
        r.conditioned[c.variable] = true;
        for (std::size_t j = 0; j < dim; ++j) r.clamped(static_cast<Eigen::Index>(c.variable), static_cast<Eigen::Index>(j)) = c.value[j];
    }

    // Schedule.
    auto& s = r.schedule;
    s.kind = lookup(detail::kSchedules, cfg.schedule.kind, "schedule.kind");
    s.d = cfg.schedule.d;
    s.overlap = cfg.schedule.overlap;
    s.k = cfg.schedule.k;
    s.window = cfg.schedule.window;
    s.stride = cfg.schedule.stride;
    switch (lookup(detail::kOrders, cfg.schedule.order, "schedule.order")) {
        case 0: s.order.mode = OrderSpec::Mode::Explicit; break;
        case 1:
            s.order.mode = OrderSpec::Mode::Explicit;
            s.order.order = cfg.schedule.explicit_order;
            if (s.order.order.empty()) throw ConfigError("schedule.order=explicit requires schedule.explicit_order");
            break;
        case 2:
            s.order.mode = OrderSpec::Mode::Random;
            s.order.seed = cfg.schedule.order_seed;
            break;
        default:
            s.order.mode = OrderSpec::Mode::Graph;
            if (!r.task.graph) incompatible("schedule.order=graph", "task.kind=" + cfg.task.kind, "this task has no dependency graph");
            s.order.graph = r.task.graph;
            break;
    }
    if (s.d < 1) throw ConfigError("schedule.d must be >= 1");
    if (s.kind == ScheduleKind::AdaptiveCertainty && neural && !cfg.denoiser.uncertainty_head)
        incompatible("schedule.kind=adaptive-certainty", "denoiser.uncertainty_head=false", "certainty ordering needs predicted uncertainty");

    if (cmd != Subcommand::Train) {
        ScheduleMatrix T;
        try {
            T = build_schedule(s, n, r.conditioned);
        } catch (const Error& e) {
            throw ConfigError(std::string("schedule: ") + e.what());
        }
        if (r.paradigm.is_discrete()) {
            // Levels the run will visit must sit on the ddpm grid.
            std::vector<double> visited;
            if (T.partial) {
                const std::size_t m = std::count(r.conditioned.begin(), r.conditioned.end(), false);
                const std::size_t groups = std::max<std::size_t>(1, (m + s.k - 1) / s.k);
                const std::size_t ramp = (s.d + groups - 1) / groups;
                for (std::size_t q = 0; q <= ramp; ++q) visited.push_back(1.0 - static_cast<double>(q) / static_cast<double>(ramp));
                if (r.method.kind == StepKind::DdpmAncestral && ramp != r.paradigm.d_steps())
                    incompatible("schedule.d", "paradigm.d_steps", "ddpm-ancestral needs one column per grid step");
            } else {
                visited.assign(T.levels.data(), T.levels.data() + T.levels.size());
            }
            for (double v : visited)
                if (!r.paradigm.grid_index(v))
                    incompatible("schedule.d=" + std::to_string(s.d), "paradigm.d_steps=" + std::to_string(r.paradigm.d_steps()),
                                 "schedule levels fall off the ddpm grid");
            if (r.method.kind == StepKind::DdpmAncestral && !T.partial) {
                for (Eigen::Index row = 0; row < T.levels.rows(); ++row)
                    for (Eigen::Index c = 1; c < T.levels.cols(); ++c) {
                        const auto from = *r.paradigm.grid_index(T.levels(row, c - 1));
                        const auto to = *r.paradigm.grid_index(T.levels(row, c));
                        if (from != to && from != to + 1)
                            incompatible("sampler.method=ddpm-ancestral", "schedule.d=" + std::to_string(s.d),
                                         "ancestral steps must move between adjacent grid levels");
                    }
            }
        }
    }

    cfg.output.directory = detail::resolve_path(cfg.output.directory, fs::current_path()).string();
    r.config = std::move(cfg);
    return r;
}

// ---------------------------------------------------------------------------
// Running

namespace detail {

/// Number of worker threads: SRE_THREADS when set, else hardware concurrency.
inline std::size_t thread_count(std::size_t jobs) {
    std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SRE_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v >= 1) threads = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
        }
    }
    return std::max<std::size_t>(1, std::min(threads, jobs));
}

/// Runs fn(i) for i in [0, count) on a small pool; results are kept in index
/// order so output never depends on scheduling.
template <typename R, typename F>
std::vector<R> parallel_map(std::size_t count, F fn) {
    std::vector<std::optional<R>> slots(count);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) {
            try {
                slots[i] = fn(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = count;
            }
        }
    };
    const std::size_t threads = thread_count(count);
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
    std::vector<R> out;
    out.reserve(count);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

inline bool wants(const RunConfig& c, const char* format) {
    return std::find(c.output.formats.begin(), c.output.formats.end(), format) != c.output.formats.end();
}

}  // namespace detail

/// The configured denoiser as a reentrant callable.
inline Denoiser make_denoiser(const Resolved& r) {
    if (r.config.denoiser.kind == "oracle") {
        return [gmm = r.task.mixture, paradigm = r.paradigm](const ReasoningState& s) { return oracle_denoise(gmm, s, paradigm); };
    }
    DenoiserNet net = load_net(r.config.denoiser.checkpoint);
    if (net.shape().dim() != r.task.dim) throw ConfigError("checkpoint dim does not match task dim");
    return [net = std::move(net), positions = r.task.positions, paradigm = r.paradigm](const ReasoningState& s) {
        return net_forward(net, s, positions, paradigm);
    };
}

struct ChainResult {
    InferenceResult result;
};

/// Runs one sampling chain. Chain c uses the seed substream_seed(seed, c).
inline InferenceResult run_chain(const Resolved& r, const Denoiser& denoiser, std::size_t chain, bool record) {
    const std::uint64_t chain_seed = substream_seed(r.config.sampler.seed, chain);
    const ReasoningState init = noise_state(r.clamped, r.conditioned, chain_seed);
    if (r.schedule.kind == ScheduleKind::AdaptiveCertainty) {
        AdaptivePolicy policy{r.schedule.k, r.schedule.d, std::nullopt};
        return run_adaptive(denoiser, init, policy, r.paradigm, r.method, chain_seed, record);
    }
    const ScheduleMatrix T = build_schedule(r.schedule, r.task.n, r.conditioned);
    return run_inference(denoiser, init, T, r.paradigm, r.method, chain_seed, record);
}

inline void write_resolved(const Resolved& r, const std::string& dir) {
    auto os = io::open_out((fs::path(dir) / "resolved_config.json").string());
    os << to_json(r.config).dump(2) << '\n';
}

inline void cmd_train(const Resolved& r) {
    const std::string dir = r.config.output.directory;
    Rng init_rng(substream_seed(r.config.training.seed, std::uint64_t{0x1417}));
    DenoiserNet net = DenoiserNet::initialized(r.net_shape, init_rng);
    TrainTask task{r.task.n, r.task.dim, r.task.positions, [&](Rng& rng) { return r.task.draw(rng); }};
    TrainResult res = train(std::move(net), task, r.paradigm, r.tsampler, r.loss, r.optimizer, r.config.training.seed);
    save_net(res.net, (fs::path(dir) / "checkpoint.bin").string());
    io::write_loss_trace_csv(res.losses, (fs::path(dir) / "loss_trace.csv").string());
}

inline void cmd_sample(const Resolved& r) {
    const std::string dir = r.config.output.directory;
    const Denoiser denoiser = make_denoiser(r);
    const std::size_t chains = r.config.sampler.chains;
    auto results = detail::parallel_map<InferenceResult>(chains, [&](std::size_t c) {
        return run_chain(r, denoiser, c, r.config.sampler.record && c == 0);
    });
    std::vector<ReasoningState> finals;
    std::vector<Prediction> first;
    for (auto& res : results) {
        finals.push_back(res.final_state);
        if (res.first_prediction) first.push_back(*res.first_prediction);
    }
    io::write_samples_csv(finals, (fs::path(dir) / "samples.csv").string());
    if (first.size() == finals.size()) io::write_predictions_csv(first, (fs::path(dir) / "predictions.csv").string());
    if (r.config.sampler.record) io::write_trajectory_csv(results.front().trajectory, (fs::path(dir) / "trajectory.csv").string());
    if (detail::wants(r.config, "ppm")) {
        const Image img = r.task.kind == TaskKind::LatinSquare ? render_board(finals.front(), r.task.order) : render_state(finals.front());
        write_pnm(img, (fs::path(dir) / "sample_0.pgm").string());
    }
}

inline Metrics cmd_eval(const Resolved& r, const std::string& samples_path) {
    const std::string dir = r.config.output.directory;
    const std::string path = samples_path.empty() ? (fs::path(dir) / "samples.csv").string() : samples_path;
    if (!fs::exists(path)) throw ConfigError("samples file '" + path + "' does not exist");
    const auto samples = io::read_samples_csv(path, r.task.n, r.task.dim, r.conditioned);
    const fs::path pred_path = fs::path(path).parent_path() / "predictions.csv";
    std::optional<std::vector<Prediction>> preds;
    if (fs::exists(pred_path)) {
        preds = io::read_predictions_csv(pred_path.string(), r.task.n, r.task.dim);
        if (preds->size() != samples.size()) preds.reset();
    }
    const Metrics m = evaluate_samples(samples, r.task, preds ? &*preds : nullptr);
    io::write_metrics_json(m, (fs::path(dir) / "metrics.json").string());
    return m;
}

inline void cmd_viz_schedule(const Resolved& r) {
    const std::string dir = r.config.output.directory;
    ScheduleMatrix T = build_schedule(r.schedule, r.task.n, r.conditioned);
    if (T.partial) {
        // Realize the adaptive ordering with one chain of the configured denoiser.
        const Denoiser denoiser = make_denoiser(r);
        T.levels = run_chain(r, denoiser, 0, false).realized_levels;
        T.partial = false;
    }
    write_pnm(render_schedule(T), (fs::path(dir) / "schedule.pgm").string());
    io::write_schedule_csv(T, (fs::path(dir) / "schedule.csv").string());
}

/// Loads, validates and executes one subcommand. Returns the process exit
/// code: 0 on success, 1 for configuration errors, 2 for runtime errors.
inline int run_config(const std::string& config_path, Subcommand cmd, std::optional<std::uint64_t> seed_override = std::nullopt,
                      std::optional<std::string> out_override = std::nullopt, const std::string& samples_path = {},
                      std::ostream& err = std::cerr) {
    Resolved r;
    try {
        std::ifstream is(config_path);
        if (!is) throw ConfigError("cannot read config file '" + config_path + "'");
        json root;
        try {
            root = json::parse(is);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        RunConfig cfg = parse_config(root);
        if (seed_override) cfg.sampler.seed = cfg.training.seed = *seed_override;
        if (out_override) cfg.output.directory = *out_override;
        const fs::path base = fs::absolute(fs::path(config_path)).parent_path();
        r = resolve(std::move(cfg), cmd, base);
        fs::create_directories(r.config.output.directory);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    }

    try {
        write_resolved(r, r.config.output.directory);
        switch (cmd) {
            case Subcommand::Train: cmd_train(r); break;
            case Subcommand::Sample: cmd_sample(r); break;
            case Subcommand::Eval: cmd_eval(r, samples_path); break;
            case Subcommand::VizSchedule: cmd_viz_schedule(r); break;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

}  // namespace sre::cli
