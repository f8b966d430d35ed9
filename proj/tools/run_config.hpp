#pragma once

#include "maunet/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace maunet::cli {

/// Everything a command needs, fully resolved. Defaults mirror a batch of 8,
/// lr 1e-3 and seed 42. An empty data path selects the synthetic generator.
struct RunConfig {
    std::string command;
    std::filesystem::path data;
    std::filesystem::path out = "runs";
    int synthetic_count = 80;
    std::uint64_t data_seed = 42;  // synthetic generation and the train/val split
    double train_fraction = 0.8;
    int resolution = 64;
    int base_width = 8;
    std::string model = "student";  // eval: which plan the checkpoint belongs to
    std::filesystem::path teacher;     // distill: teacher checkpoint
    std::filesystem::path checkpoint;  // eval
    std::filesystem::path plan;        // count: optional custom plan JSON
    std::string split = "all";         // eval: all, train or val
    double threshold = 0.5;
    bool dump_attn = false;
    bool overlays = true;
    TrainConfig train;
    DistillConfig distill;

    /// Throws ConfigError.
    void validate() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Overlays the keys present in `j` onto `cfg`. Unknown keys and wrong
/// types raise ConfigError.
void merge_json(RunConfig& cfg, const nlohmann::json& j);
/// Reads a JSON config file. Throws ConfigError (also for a missing file).
nlohmann::json read_config_file(const std::filesystem::path& path);

}  // namespace maunet::cli
