#include "cdg/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdg/config.hpp"
#include "cdg/degradation.hpp"
#include "cdg/diffusion.hpp"
#include "cdg/error.hpp"
#include "cdg/geometry.hpp"
#include "cdg/importance.hpp"

namespace cdg {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

struct GlobalOptions {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool timing = false;
};

std::string fmt_double(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

// Output directory that refuses to overwrite existing files unless forced.
class OutputDir {
public:
    OutputDir(fs::path root, bool force) : root_(std::move(root)), force_(force) {}

    void reserve(const std::vector<std::string>& names) const {
        for (const auto& name : names) {
            if (!force_ && fs::exists(root_ / name)) {
                fail(ErrorCode::Config, "refusing to overwrite " + (root_ / name).string() + " (pass --force)");
            }
        }
    }

    fs::path write(const std::string& name, const std::string& content) const {
        std::error_code ec;
        fs::create_directories(root_, ec);
        if (ec) {
            fail(ErrorCode::Io, "cannot create " + root_.string() + ": " + ec.message());
        }
        const fs::path path = root_ / name;
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) {
            fail(ErrorCode::Io, "cannot write " + path.string());
        }
        f << content;
        if (!f) {
            fail(ErrorCode::Io, "write failed for " + path.string());
        }
        return path;
    }

    fs::path write_json(const std::string& name, const ojson& doc) const { return write(name, doc.dump(2) + "\n"); }

private:
    fs::path root_;
    bool force_;
};

struct Context {
    RunConfig config;
    OutputDir out;
    bool timing;
};

Context make_context(const GlobalOptions& g) {
    RunConfig config;
    if (!g.config_path.empty()) {
        config = load_config(g.config_path);
    }
    if (g.seed) {
        config.set_seed(*g.seed);
    }
    if (!g.out_dir.empty()) {
        config.output_dir = g.out_dir;
    }
    config.validate();
    return {config, OutputDir(config.output_dir, g.force), g.timing};
}

std::string resolve_prompt(const RunConfig& config, const std::optional<std::string>& prompt) {
    if (prompt) {
        return *prompt;
    }
    if (config.prompts.empty()) {
        fail(ErrorCode::Config, "no --prompt given and the config lists no prompts");
    }
    return config.prompts.front();
}

void require_prompts(const RunConfig& config) {
    if (config.prompts.empty()) {
        fail(ErrorCode::Config, "the config lists no prompts");
    }
}

ojson token_json(const TokenSequence& tokens, std::size_t i) {
    ojson j;
    j["position"] = i;
    j["token"] = tokens.text[i];
    j["id"] = tokens.ids[i];
    j["type"] = to_string(tokens.types[i]);
    return j;
}

std::vector<std::size_t> ranks_of(const ImportanceScores& s) {
    std::vector<std::size_t> rank(s.sorted_indices.size());
    for (std::size_t r = 0; r < s.sorted_indices.size(); ++r) {
        rank[s.sorted_indices[r]] = r + 1;
    }
    return rank;
}

int cmd_rank_tokens(const Context& ctx, const std::optional<std::string>& prompt_arg, std::ostream& out) {
    ctx.out.reserve({"rankings.json", "rankings.csv"});
    const RunConfig& cfg = ctx.config;
    const std::string prompt = resolve_prompt(cfg, prompt_arg);
    const CdgPipeline pipeline(cfg.pipeline);
    const TokenSequence tokens = pipeline.encoder().tokenize(prompt);
    const EncodedPrompt encoded = pipeline.encoder().encode_full(tokens);
    const double sigma = cfg.schedule.sigma_max;
    const Vector x = pipeline.initial_latent(sigma, cfg.seed);
    const ImportanceResult imp = pipeline.importance_at(encoded, x, sigma, cfg.guidance.lambda_block);
    const std::vector<std::size_t> rank = ranks_of(imp.fused);

    ojson doc;
    doc["prompt"] = prompt;
    doc["lambda_block"] = cfg.guidance.lambda_block;
    doc["sigma"] = sigma;
    doc["seed"] = cfg.seed;
    ojson heads = ojson::array();
    for (std::size_t h = 0; h < imp.per_head.size(); ++h) {
        ojson hj;
        hj["head"] = h;
        hj["variance"] = imp.head_variances[h];
        hj["converged"] = static_cast<bool>(imp.head_converged[h]);
        hj["scores"] = imp.per_head[h].scores;
        hj["sorted_indices"] = imp.per_head[h].sorted_indices;
        heads.push_back(std::move(hj));
    }
    doc["heads"] = std::move(heads);
    ojson toks = ojson::array();
    std::ostringstream csv;
    csv << "position,token,type,score,rank\n";
    for (std::size_t i = 0; i < tokens.length(); ++i) {
        ojson tj = token_json(tokens, i);
        tj["score"] = imp.fused.scores[i];
        tj["rank"] = rank[i];
        toks.push_back(std::move(tj));
        csv << i << ',' << csv_field(tokens.text[i]) << ',' << to_string(tokens.types[i]) << ','
            << fmt_double(imp.fused.scores[i]) << ',' << rank[i] << '\n';
    }
    doc["tokens"] = std::move(toks);
    doc["sorted_indices"] = imp.fused.sorted_indices;

    ctx.out.write_json("rankings.json", doc);
    ctx.out.write("rankings.csv", csv.str());
    out << "ranked " << tokens.length() << " tokens; top: " << tokens.text[imp.fused.sorted_indices.front()] << "\n";
    return kExitOk;
}

int cmd_build_mask(const Context& ctx, const std::optional<std::string>& prompt_arg,
                   const std::optional<double>& r_deg_arg, std::ostream& out) {
    ctx.out.reserve({"mask.json"});
    const RunConfig& cfg = ctx.config;
    const std::string prompt = resolve_prompt(cfg, prompt_arg);
    const double r_deg = r_deg_arg ? *r_deg_arg : cfg.guidance.r_deg.value_or(1.0);
    const DegradationRatios ratios = map_ratio(r_deg);
    const CdgPipeline pipeline(cfg.pipeline);
    const TokenSequence tokens = pipeline.encoder().tokenize(prompt);

    DegradationMask mask;
    const bool type_only = is_type_only(ratios);
    if (type_only) {
        mask = build_type_only_mask(tokens);
    } else {
        const EncodedPrompt encoded = pipeline.encoder().encode_full(tokens);
        const double sigma = cfg.schedule.sigma_max;
        const Vector x = pipeline.initial_latent(sigma, cfg.seed);
        const ImportanceResult imp = pipeline.importance_at(encoded, x, sigma, cfg.guidance.lambda_block);
        mask = build_mask(tokens, imp.fused, ratios);
    }

    ojson doc;
    doc["prompt"] = prompt;
    doc["r_deg"] = ratios.r_deg;
    doc["r_content"] = ratios.r_content;
    doc["r_ctxagg"] = ratios.r_ctxagg;
    doc["k_content"] = mask.k_content;
    doc["k_ctxagg"] = mask.k_ctxagg;
    doc["type_only"] = type_only;
    doc["replaced_indices"] = mask.replaced_indices;
    ojson positions = ojson::array();
    for (std::size_t i = 0; i < tokens.length(); ++i) {
        ojson pj = token_json(tokens, i);
        pj["bit"] = mask.bits[i];
        pj["rank_within_type"] = mask.rank_within_type[i];
        positions.push_back(std::move(pj));
    }
    doc["positions"] = std::move(positions);
    ctx.out.write_json("mask.json", doc);
    out << "replaced " << mask.replaced_indices.size() << " of " << tokens.length() << " positions\n";
    return kExitOk;
}

std::string trajectory_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "trajectory_%03zu.csv", i);
    return buf;
}

std::string trajectory_csv(const SamplerRun& run) {
    std::ostringstream csv;
    csv << "step,sigma";
    for (std::size_t i = 0; i < run.trajectory.front().size(); ++i) {
        csv << ",x" << i;
    }
    csv << '\n';
    for (std::size_t s = 0; s < run.trajectory.size(); ++s) {
        csv << s << ',' << fmt_double(run.sigmas[s]);
        for (double v : run.trajectory[s]) {
            csv << ',' << fmt_double(v);
        }
        csv << '\n';
    }
    return csv.str();
}

int cmd_sample(const Context& ctx, std::ostream& out) {
    const RunConfig& cfg = ctx.config;
    require_prompts(cfg);
    std::vector<std::string> names{"metadata.json"};
    for (std::size_t i = 0; i < cfg.prompts.size(); ++i) {
        names.push_back(trajectory_name(i));
    }
    ctx.out.reserve(names);

    const CdgPipeline pipeline(cfg.pipeline);
    const SigmaSchedule schedule = cfg.schedule.build();
    ojson runs = ojson::array();
    double total_ms = 0.0;
    for (std::size_t i = 0; i < cfg.prompts.size(); ++i) {
        const TokenSequence tokens = pipeline.encoder().tokenize(cfg.prompts[i]);
        const std::uint64_t seed = cfg.seed + i;
        const SamplerRun run = pipeline.sample(tokens, schedule, cfg.guidance, seed);
        total_ms += run.wall_time_ms;
        ctx.out.write(trajectory_name(i), trajectory_csv(run));

        ojson rj;
        rj["prompt_index"] = i;
        rj["prompt"] = cfg.prompts[i];
        rj["seed"] = seed;
        rj["trajectory_file"] = trajectory_name(i);
        rj["steps"] = schedule.steps();
        rj["wpr_call_count"] = run.wpr_call_count;
        const auto& first = run.masks_used.empty() ? nullptr : run.masks_used.front();
        rj["first_step_replaced_indices"] = first ? ojson(first->replaced_indices) : ojson(nullptr);
        rj["final_latent"] = run.final_latent();
        if (ctx.timing) {
            rj["wall_time_ms"] = run.wall_time_ms;
        }
        runs.push_back(std::move(rj));
    }
    ojson doc;
    doc["config"] = to_json(cfg);
    doc["runs"] = std::move(runs);
    ctx.out.write_json("metadata.json", doc);
    out << "sampled " << cfg.prompts.size() << " prompt(s), " << schedule.steps() << " steps, mode "
        << to_string(cfg.guidance.mode) << ", " << fmt_double(total_ms) << " ms\n";
    return kExitOk;
}

double distance(const Vector& a, const Vector& b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(acc);
}

int cmd_sweep(const Context& ctx, const std::vector<double>& grid_arg, std::ostream& out) {
    ctx.out.reserve({"sweep.csv"});
    const RunConfig& cfg = ctx.config;
    require_prompts(cfg);
    std::vector<double> grid = !grid_arg.empty() ? grid_arg : (cfg.sweep_grid.empty() ? default_sweep_grid() : cfg.sweep_grid);
    for (double r : grid) {
        map_ratio(r);
    }

    const CdgPipeline pipeline(cfg.pipeline);
    const SigmaSchedule schedule = cfg.schedule.build();
    GuidanceConfig conditional = cfg.guidance;
    conditional.mode = GuidanceMode::None;
    GuidanceConfig guided = cfg.guidance;
    if (!guided.uses_degradation()) {
        guided.mode = GuidanceMode::CDG;
    }

    std::vector<TokenSequence> tokens;
    std::vector<Vector> reference;
    for (std::size_t i = 0; i < cfg.prompts.size(); ++i) {
        tokens.push_back(pipeline.encoder().tokenize(cfg.prompts[i]));
        reference.push_back(pipeline.sample(tokens.back(), schedule, conditional, cfg.seed + i).final_latent());
    }

    std::ostringstream csv;
    csv << "r_deg,prompt_index,mode,k_content,k_ctxagg,replaced_count,distance_to_conditional,wpr_call_count\n";
    for (double r : grid) {
        guided.r_deg = r;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const SamplerRun run = pipeline.sample(tokens[i], schedule, guided, cfg.seed + i);
            const DegradationMask& mask = *run.masks_used.front();
            csv << fmt_double(r) << ',' << i << ',' << to_string(guided.mode) << ',' << mask.k_content << ','
                << mask.k_ctxagg << ',' << mask.replaced_indices.size() << ','
                << fmt_double(distance(run.final_latent(), reference[i])) << ',' << run.wpr_call_count << '\n';
        }
    }
    ctx.out.write("sweep.csv", csv.str());
    out << "swept " << grid.size() << " ratios x " << tokens.size() << " prompts\n";
    return kExitOk;
}

ojson method_json(const MethodGeometry& m) {
    ojson j;
    j["decoupling_mean"] = m.decoupling_mean;
    j["interference_mean"] = m.interference_mean;
    j["num_valid_prompts"] = m.num_valid_prompts;
    j["decoupling_pooled"] = m.decoupling_pooled;
    j["interference_pooled"] = m.interference_pooled;
    j["decoupling"] = m.decoupling;
    j["interference"] = m.interference;
    return j;
}

int cmd_diagnose(const Context& ctx, std::ostream& out) {
    ctx.out.reserve({"geometry.csv", "geometry.json"});
    const RunConfig& cfg = ctx.config;
    require_prompts(cfg);
    const CdgPipeline pipeline(cfg.pipeline);
    const SigmaSchedule schedule = cfg.schedule.build();
    std::vector<TokenSequence> tokens;
    for (const auto& p : cfg.prompts) {
        tokens.push_back(pipeline.encoder().tokenize(p));
    }
    GuidanceConfig cfg_method = cfg.guidance;
    cfg_method.mode = GuidanceMode::CFG;
    GuidanceConfig cdg_method = cfg.guidance;
    if (cdg_method.mode != GuidanceMode::CDG) {
        cdg_method.mode = GuidanceMode::CDG;
        if (!cdg_method.r_deg) {
            cdg_method.r_deg = 1.0;
        }
    }
    const GeometryReport report = run_geometry_sweep(pipeline, schedule, tokens, cfg_method, cdg_method, cfg.geometry);

    std::ostringstream csv;
    csv << "sigma,method,decoupling_mean,interference_mean,num_valid_prompts\n";
    ojson records = ojson::array();
    for (const auto& r : report.records) {
        for (const auto& [name, m] : {std::pair<const char*, const MethodGeometry&>{"cfg", r.cfg}, {"cdg", r.cdg}}) {
            csv << fmt_double(r.sigma) << ',' << name << ',' << fmt_double(m.decoupling_mean) << ','
                << fmt_double(m.interference_mean) << ',' << m.num_valid_prompts << '\n';
        }
        ojson rj;
        rj["sigma"] = r.sigma;
        rj["subspace_dim"] = r.subspace_dim;
        rj["cfg"] = method_json(r.cfg);
        rj["cdg"] = method_json(r.cdg);
        records.push_back(std::move(rj));
    }
    ojson doc;
    doc["config"] = to_json(cfg);
    doc["methods"] = {{"cfg", to_json(cfg_method)}, {"cdg", to_json(cdg_method)}};
    doc["records"] = std::move(records);
    ctx.out.write("geometry.csv", csv.str());
    ctx.out.write_json("geometry.json", doc);
    out << "geometry over " << report.records.size() << " noise levels, " << tokens.size() << " prompts\n";
    return kExitOk;
}

int exit_code_for(ErrorCode code) {
    switch (code) {
    case ErrorCode::Config:
    case ErrorCode::Io:
    case ErrorCode::InvalidRatio:
    case ErrorCode::PromptTooLong:
        return kExitUsage;
    default:
        return kExitRuntime;
    }
}

} // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Condition-degradation guidance on a toy conditional diffusion model", "cdg"};
    app.require_subcommand(1);
    app.fallthrough();

    GlobalOptions g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config_path, "Run-config JSON file");
    app.add_option("--out", g.out_dir, "Output directory (overrides output_dir)");
    auto* seed_opt = app.add_option("--seed", seed, "Seed (overrides the config seed)");
    app.add_flag("--force", g.force, "Overwrite existing output files");
    app.add_flag("--timing", g.timing, "Record wall-clock time in sample metadata");

    std::optional<std::string> prompt;
    std::optional<double> r_deg;
    std::vector<double> grid;

    auto* rank = app.add_subcommand("rank-tokens", "Token importance rankings for one prompt");
    rank->add_option("--prompt", prompt, "Prompt text (default: first config prompt)");
    auto* mask = app.add_subcommand("build-mask", "Degradation mask for one prompt");
    mask->add_option("--prompt", prompt, "Prompt text (default: first config prompt)");
    mask->add_option("--r-deg", r_deg, "Unified degradation ratio in [0, 2]");
    auto* sample = app.add_subcommand("sample", "Guided sampling of every config prompt");
    auto* sweep = app.add_subcommand("sweep", "Sampling over a grid of degradation ratios");
    sweep->add_option("--grid", grid, "Comma-separated R_deg values")->delimiter(',');
    auto* diagnose = app.add_subcommand("diagnose", "Guidance geometry across noise levels");

    try {
        std::vector<std::string> args;
        for (int i = argc - 1; i > 0; --i) {
            args.emplace_back(argv[i]);
        }
        app.parse(args);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "cdg: " << e.what() << "\n";
        return kExitUsage;
    }
    if (seed_opt->count() > 0) {
        g.seed = seed;
    }

    try {
        const Context ctx = make_context(g);
        if (rank->parsed()) return cmd_rank_tokens(ctx, prompt, out);
        if (mask->parsed()) return cmd_build_mask(ctx, prompt, r_deg, out);
        if (sample->parsed()) return cmd_sample(ctx, out);
        if (sweep->parsed()) return cmd_sweep(ctx, grid, out);
        if (diagnose->parsed()) return cmd_diagnose(ctx, out);
    } catch (const Error& e) {
        err << "cdg: " << e.what() << "\n";
        return exit_code_for(e.code());
    } catch (const std::exception& e) {
        err << "cdg: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

} // namespace cdg
