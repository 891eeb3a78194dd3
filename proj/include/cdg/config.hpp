#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdg/diffusion.hpp"
#include "cdg/geometry.hpp"
#include "cdg/guidance.hpp"

namespace cdg {

struct ScheduleParams {
    std::size_t steps = 28;
    double sigma_max = 10.0;
    double sigma_min = 0.01;

    SigmaSchedule build() const { return SigmaSchedule::log_spaced(steps, sigma_max, sigma_min); }
};

// One JSON document drives every command. Every field is optional; unknown
// keys are rejected.
struct RunConfig {
    std::uint64_t seed = 0;
    PipelineParams pipeline;
    ScheduleParams schedule;
    GuidanceConfig guidance;
    GeometryOptions geometry;
    std::vector<double> sweep_grid;  // empty: 0, 0.1, ..., 2.0
    std::vector<std::string> prompts;
    std::filesystem::path output_dir = "cdg_out";

    // Propagates `seed` into the pipeline and geometry parameters.
    void set_seed(std::uint64_t s);
    void validate() const;
};

RunConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir);
RunConfig load_config(const std::filesystem::path& path);

// Echo of the effective configuration (stable key order).
nlohmann::ordered_json to_json(const RunConfig& config);
nlohmann::ordered_json to_json(const GuidanceConfig& config);

// 0, 0.1, ..., 2.0 built from integers so every value is the nearest double.
std::vector<double> default_sweep_grid();

} // namespace cdg
