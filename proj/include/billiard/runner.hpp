#pragma once

#include <optional>
#include <string>
#include <vector>

#include "billiard/geometry.hpp"
#include "billiard/transfer_operator.hpp"

namespace billiard {

inline constexpr const char* kVersion = "0.1.0";

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
    std::string table_json;          // inline table description
    std::vector<double> t_grid;
    int n_max = 8;
    std::vector<UlamGridSpec> grid_ladder;
    int samples_per_cell = 64;
    int measure_samples_per_cell = 128;
    int growth_curves = 8;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string output_dir = "out";
    std::vector<std::string> suites; // geometry | complexity | spectrum | statistics | all
    int threads = 0;
    int validation_samples = 20000;
    double horizon_bound = 15.0;

    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig from_file(const std::string& path);
    std::string canonical() const; // content string the cache key hashes over
};

/// Content-hash key over table, parameters, seed and code version.
std::string cache_key(const ExperimentConfig& config, const std::string& suite);

struct RunResult {
    int exit_code = 0; // 0 ok, 1 verdict failure, 2 config error, 3 internal
    std::vector<std::string> artifacts;
    std::vector<std::string> failures;
};

RunResult run_experiment(const ExperimentConfig& config);

} // namespace billiard
