#include "run_config.hpp"

#include "maunet/errors.hpp"

#include <fstream>
#include <set>

namespace maunet::cli {

namespace {

using nlohmann::json;

template <typename T>
void take(const json& j, const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

void take_path(const json& j, const char* key, std::filesystem::path& field) {
    std::string s = field.string();
    take(j, key, s);
    field = s;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
}

std::string schedule_name(OmegaSchedule s) { return s == OmegaSchedule::constant ? "constant" : "linear_ramp"; }

OmegaSchedule parse_schedule(const std::string& s) {
    if (s == "linear_ramp") return OmegaSchedule::linear_ramp;
    if (s == "constant") return OmegaSchedule::constant;
    throw ConfigError("omega_schedule must be 'linear_ramp' or 'constant', got '" + s + "'");
}

}  // namespace

void RunConfig::validate() const {
    train.validate();
    distill.validate();
    if (synthetic_count < 2) throw ConfigError("synthetic_count must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must lie in (0, 1)");
    if (resolution < 16 || resolution % 16 != 0) throw ConfigError("--resolution must be a positive multiple of 16");
    if (base_width < 1) throw ConfigError("base_width must be >= 1");
    if (model != "student" && model != "teacher") throw ConfigError("--model must be 'student' or 'teacher'");
    if (split != "all" && split != "train" && split != "val") throw ConfigError("--split must be all, train or val");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("--threshold must lie in (0, 1)");
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["command"] = c.command;
    j["data"] = c.data.string();
    j["out"] = c.out.string();
    j["synthetic_count"] = c.synthetic_count;
    j["data_seed"] = c.data_seed;
    j["train_fraction"] = c.train_fraction;
    j["resolution"] = c.resolution;
    j["base_width"] = c.base_width;
    j["model"] = c.model;
    j["teacher"] = c.teacher.string();
    j["checkpoint"] = c.checkpoint.string();
    j["plan"] = c.plan.string();
    j["split"] = c.split;
    j["threshold"] = c.threshold;
    j["dump_attn"] = c.dump_attn;
    j["overlays"] = c.overlays;
    j["train"] = {{"epochs", c.train.epochs},       {"batch", c.train.batch},   {"lr", c.train.lr},
                  {"weight_decay", c.train.weight_decay}, {"beta1", c.train.beta1}, {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps}, {"seed", c.train.seed}};
    const DistillConfig& d = c.distill;
    nlohmann::ordered_json dj;
    dj["lambda"] = d.lambda;
    dj["omega_schedule"] = schedule_name(d.omega_schedule);
    dj["omega_start"] = d.omega_start;
    dj["omega_end"] = d.omega_end;
    dj["tau_h"] = d.tau_h;
    dj["tau_l"] = d.tau_l;
    dj["rho"] = d.rho;
    dj["ema_decay"] = d.ema_decay;
    dj["temperature"] = d.temperature;
    dj["contrast_temperature"] = d.contrast_temperature;
    dj["contrast_pixels"] = d.contrast_pixels;
    dj["stage1_fraction"] = d.stage1_fraction;
    j["distill"] = dj;
    return j;
}

void merge_json(RunConfig& c, const json& j) {
    reject_unknown(j,
                   {"command", "data", "out", "synthetic_count", "data_seed", "train_fraction", "resolution",
                    "base_width", "model", "teacher", "checkpoint", "plan", "split", "threshold", "dump_attn",
                    "overlays", "train", "distill"},
                   "");
    take(j, "command", c.command);
    take_path(j, "data", c.data);
    take_path(j, "out", c.out);
    take(j, "synthetic_count", c.synthetic_count);
    take(j, "data_seed", c.data_seed);
    take(j, "train_fraction", c.train_fraction);
    take(j, "resolution", c.resolution);
    take(j, "base_width", c.base_width);
    take(j, "model", c.model);
    take_path(j, "teacher", c.teacher);
    take_path(j, "checkpoint", c.checkpoint);
    take_path(j, "plan", c.plan);
    take(j, "split", c.split);
    take(j, "threshold", c.threshold);
    take(j, "dump_attn", c.dump_attn);
    take(j, "overlays", c.overlays);
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, {"epochs", "batch", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "seed"}, "train.");
        take(t, "epochs", c.train.epochs);
        take(t, "batch", c.train.batch);
        take(t, "lr", c.train.lr);
        take(t, "weight_decay", c.train.weight_decay);
        take(t, "beta1", c.train.beta1);
        take(t, "beta2", c.train.beta2);
        take(t, "adam_eps", c.train.adam_eps);
        take(t, "seed", c.train.seed);
    }
    if (j.contains("distill")) {
        const json& d = j.at("distill");
        reject_unknown(d,
                       {"lambda", "omega_schedule", "omega_start", "omega_end", "tau_h", "tau_l", "rho", "ema_decay",
                        "temperature", "contrast_temperature", "contrast_pixels", "stage1_fraction"},
                       "distill.");
        take(d, "lambda", c.distill.lambda);
        std::string schedule = schedule_name(c.distill.omega_schedule);
        take(d, "omega_schedule", schedule);
        c.distill.omega_schedule = parse_schedule(schedule);
        take(d, "omega_start", c.distill.omega_start);
        take(d, "omega_end", c.distill.omega_end);
        take(d, "tau_h", c.distill.tau_h);
        take(d, "tau_l", c.distill.tau_l);
        take(d, "rho", c.distill.rho);
        take(d, "ema_decay", c.distill.ema_decay);
        take(d, "temperature", c.distill.temperature);
        take(d, "contrast_temperature", c.distill.contrast_temperature);
        take(d, "contrast_pixels", c.distill.contrast_pixels);
        take(d, "stage1_fraction", c.distill.stage1_fraction);
    }
}

json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config: cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("--config: " + path.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace maunet::cli
