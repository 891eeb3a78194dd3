#include "cdg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "cdg/error.hpp"

namespace cdg {

namespace {

using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) {
        fail(ErrorCode::Config, where + " must be an object");
    }
    for (const auto& [key, _] : obj.items()) {
        if (!allowed.count(key)) {
            fail(ErrorCode::Config, "unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key) || obj.at(key).is_null()) {
        return;
    }
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        fail(ErrorCode::Config, where + "." + key + ": " + e.what());
    }
}

template <typename T>
void read_optional(const json& obj, const char* key, std::optional<T>& out, const std::string& where) {
    if (!obj.contains(key)) {
        return;
    }
    if (obj.at(key).is_null()) {
        out.reset();
        return;
    }
    T value{};
    read(obj, key, value, where);
    out = value;
}

std::vector<std::string> read_prompts_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::Config, "cannot open prompts file " + path.string());
    }
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        prompts.push_back(line);
    }
    while (!prompts.empty() && prompts.back().empty()) {
        prompts.pop_back();
    }
    return prompts;
}

template <typename T>
nlohmann::ordered_json optional_json(const std::optional<T>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

} // namespace

std::vector<double> default_sweep_grid() {
    std::vector<double> grid;
    for (int i = 0; i <= 20; ++i) {
        grid.push_back(static_cast<double>(i) / 10.0);
    }
    return grid;
}

void RunConfig::set_seed(std::uint64_t s) {
    seed = s;
    pipeline.seed = s;
    pipeline.encoder.seed = s;
    pipeline.model.seed = s;
    geometry.seed = s;
}

void RunConfig::validate() const {
    pipeline.encoder.validate();
    guidance.validate();
    if (guidance.lambda_block >= pipeline.encoder.blocks) {
        fail(ErrorCode::Config, "guidance.lambda_block must be below encoder.blocks");
    }
    if (pipeline.model.cond_dim == 0 || pipeline.model.data_dim == 0 || pipeline.model.components == 0) {
        fail(ErrorCode::Config, "model dimensions must be positive");
    }
    if (!(pipeline.importance.wpr.epsilon > 0.0) || pipeline.importance.wpr.max_iters == 0) {
        fail(ErrorCode::Config, "importance.epsilon and importance.max_iters must be positive");
    }
    if (!(geometry.energy_threshold > 0.0 && geometry.energy_threshold <= 1.0)) {
        fail(ErrorCode::Config, "geometry.energy_threshold must lie in (0, 1]");
    }
    for (double r : sweep_grid) {
        if (!(r >= 0.0 && r <= 2.0)) {
            fail(ErrorCode::Config, "sweep grid values must lie in [0, 2]");
        }
    }
    schedule.build();
}

RunConfig parse_config(const json& doc, const std::filesystem::path& base_dir) {
    RunConfig cfg;
    reject_unknown(doc,
                   {"seed", "encoder", "model", "schedule", "importance", "attention_bias_weight", "guidance",
                    "geometry", "sweep", "prompts", "prompts_file", "output_dir"},
                   "config");

    std::uint64_t seed = 0;
    read(doc, "seed", seed, "config");

    if (doc.contains("encoder")) {
        const json& e = doc.at("encoder");
        reject_unknown(e, {"vocab_size", "embed_dim", "heads", "blocks", "seq_len"}, "encoder");
        auto& p = cfg.pipeline.encoder;
        read(e, "vocab_size", p.vocab_size, "encoder");
        read(e, "embed_dim", p.embed_dim, "encoder");
        read(e, "heads", p.heads, "encoder");
        read(e, "blocks", p.blocks, "encoder");
        read(e, "seq_len", p.seq_len, "encoder");
    }
    if (doc.contains("model")) {
        const json& m = doc.at("model");
        reject_unknown(m, {"components", "data_dim", "cond_dim", "spreads", "weights", "mean_scale"}, "model");
        auto& p = cfg.pipeline.model;
        read(m, "components", p.components, "model");
        read(m, "data_dim", p.data_dim, "model");
        read(m, "cond_dim", p.cond_dim, "model");
        if (m.contains("spreads") && m.at("spreads").is_number()) {
            p.spreads = {m.at("spreads").get<double>()};
        } else {
            read(m, "spreads", p.spreads, "model");
        }
        read(m, "weights", p.weights, "model");
        read(m, "mean_scale", p.mean_scale, "model");
    }
    if (doc.contains("schedule")) {
        const json& s = doc.at("schedule");
        reject_unknown(s, {"steps", "sigma_max", "sigma_min"}, "schedule");
        read(s, "steps", cfg.schedule.steps, "schedule");
        read(s, "sigma_max", cfg.schedule.sigma_max, "schedule");
        read(s, "sigma_min", cfg.schedule.sigma_min, "schedule");
    }
    if (doc.contains("importance")) {
        const json& i = doc.at("importance");
        reject_unknown(i, {"epsilon", "max_iters", "fusion"}, "importance");
        read(i, "epsilon", cfg.pipeline.importance.wpr.epsilon, "importance");
        read(i, "max_iters", cfg.pipeline.importance.wpr.max_iters, "importance");
        if (i.contains("fusion")) {
            const json& f = i.at("fusion");
            reject_unknown(f, {"enabled", "v_min", "v_max"}, "importance.fusion");
            auto& fc = cfg.pipeline.importance.fusion;
            read(f, "enabled", fc.enabled, "importance.fusion");
            read_optional(f, "v_min", fc.v_min, "importance.fusion");
            read_optional(f, "v_max", fc.v_max, "importance.fusion");
        }
    }
    read(doc, "attention_bias_weight", cfg.pipeline.attention_bias_weight, "config");
    if (doc.contains("guidance")) {
        const json& g = doc.at("guidance");
        reject_unknown(g, {"mode", "guidance_scale", "r_deg", "lambda_block", "reuse_first_step_mask"}, "guidance");
        std::string mode = to_string(cfg.guidance.mode);
        read(g, "mode", mode, "guidance");
        cfg.guidance.mode = parse_guidance_mode(mode);
        read(g, "guidance_scale", cfg.guidance.guidance_scale, "guidance");
        read_optional(g, "r_deg", cfg.guidance.r_deg, "guidance");
        read(g, "lambda_block", cfg.guidance.lambda_block, "guidance");
        read(g, "reuse_first_step_mask", cfg.guidance.reuse_first_step_mask, "guidance");
    }
    if (doc.contains("geometry")) {
        const json& g = doc.at("geometry");
        reject_unknown(g, {"subspace_dim", "energy_threshold"}, "geometry");
        read_optional(g, "subspace_dim", cfg.geometry.subspace_dim, "geometry");
        read(g, "energy_threshold", cfg.geometry.energy_threshold, "geometry");
    }
    if (doc.contains("sweep")) {
        const json& s = doc.at("sweep");
        reject_unknown(s, {"r_deg_grid"}, "sweep");
        read(s, "r_deg_grid", cfg.sweep_grid, "sweep");
    }
    read(doc, "prompts", cfg.prompts, "config");
    if (doc.contains("prompts_file")) {
        std::filesystem::path p = doc.at("prompts_file").get<std::string>();
        if (p.is_relative()) {
            p = base_dir / p;
        }
        for (auto& line : read_prompts_file(p)) {
            cfg.prompts.push_back(std::move(line));
        }
    }
    std::string out_dir = cfg.output_dir.string();
    read(doc, "output_dir", out_dir, "config");
    cfg.output_dir = out_dir;

    cfg.set_seed(seed);
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        fail(ErrorCode::Io, "cannot open config file " + path.string());
    }
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        fail(ErrorCode::Config, "cannot parse " + path.string() + ": " + e.what());
    }
    return parse_config(doc, path.parent_path());
}

nlohmann::ordered_json to_json(const GuidanceConfig& g) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(g.mode);
    j["guidance_scale"] = g.guidance_scale;
    j["r_deg"] = g.r_deg ? nlohmann::ordered_json(*g.r_deg) : nlohmann::ordered_json(nullptr);
    j["lambda_block"] = g.lambda_block;
    j["reuse_first_step_mask"] = g.reuse_first_step_mask;
    return j;
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    const auto& e = c.pipeline.encoder;
    j["encoder"] = {{"vocab_size", e.vocab_size}, {"embed_dim", e.embed_dim}, {"heads", e.heads},
                    {"blocks", e.blocks}, {"seq_len", e.seq_len}};
    const auto& m = c.pipeline.model;
    j["model"] = {{"components", m.components}, {"data_dim", m.data_dim}, {"cond_dim", m.cond_dim},
                  {"spreads", m.spreads}, {"weights", m.weights}, {"mean_scale", m.mean_scale}};
    j["schedule"] = {{"steps", c.schedule.steps}, {"sigma_max", c.schedule.sigma_max},
                     {"sigma_min", c.schedule.sigma_min}};
    const auto& imp = c.pipeline.importance;
    j["importance"] = {{"epsilon", imp.wpr.epsilon},
                       {"max_iters", imp.wpr.max_iters},
                       {"fusion",
                        {{"enabled", imp.fusion.enabled},
                         {"v_min", optional_json(imp.fusion.v_min)},
                         {"v_max", optional_json(imp.fusion.v_max)}}}};
    j["attention_bias_weight"] = c.pipeline.attention_bias_weight;
    j["guidance"] = to_json(c.guidance);
    j["geometry"] = {{"subspace_dim", optional_json(c.geometry.subspace_dim)},
                     {"energy_threshold", c.geometry.energy_threshold}};
    j["sweep"] = {{"r_deg_grid", c.sweep_grid.empty() ? default_sweep_grid() : c.sweep_grid}};
    j["prompts"] = c.prompts;
    return j;
}

} // namespace cdg
