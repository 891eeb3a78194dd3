#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdg/cli.hpp"
#include "cdg/config.hpp"
#include "cdg/error.hpp"

using namespace cdg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* const kPrompts[] = {"a man is cooking minecraft style", "a red car parked on the street",
                                "two cats sleeping on a sofa", "a photo of an astronaut riding a horse",
                                "an old lighthouse on a cliff at sunset", "a bowl of fresh fruit on a table",
                                "a child flying a kite in the park", "a snowy mountain village at night"};

struct Sandbox {
    fs::path root;
    Sandbox() {
        root = fs::temp_directory_path() / ("cdg_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
        fs::remove_all(root);
        fs::create_directories(root);
    }
    ~Sandbox() { fs::remove_all(root); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    fs::path config(const json& doc, const std::string& name = "config.json") const {
        const fs::path p = root / name;
        std::ofstream(p) << doc.dump(2);
        return p;
    }
};

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run(std::vector<std::string> args) {
    args.insert(args.begin(), "cdg");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(std::move(cells));
    }
    return rows;
}

json base_config() {
    json doc;
    doc["seed"] = 0;
    doc["prompts"] = std::vector<std::string>(std::begin(kPrompts), std::end(kPrompts));
    return doc;
}

} // namespace

TEST_CASE("missing or malformed configuration is a usage error") {
    Sandbox box;
    auto r = run({"--config", (box.root / "nope.json").string(), "sample"});
    CHECK(r.code == 2);
    CHECK(r.err.find("nope.json") != std::string::npos);

    std::ofstream(box.root / "bad.json") << "{ not json";
    r = run({"--config", (box.root / "bad.json").string(), "sample"});
    CHECK(r.code == 2);

    json unknown = base_config();
    unknown["guidance"]["scale"] = 3;
    r = run({"--config", box.config(unknown).string(), "sample"});
    CHECK(r.code == 2);
    CHECK(r.err.find("scale") != std::string::npos);

    CHECK(run({"--config", box.config(base_config()).string()}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"--help"}).code == 0);
}

TEST_CASE("the installed tool reports exit codes") {
    const char* tool = std::getenv("CDG_TOOL");
    if (tool == nullptr) {
        MESSAGE("CDG_TOOL not set; skipping subprocess check");
        return;
    }
    Sandbox box;
    const std::string cmd = std::string(tool) + " --config " + (box.root / "missing.json").string() + " sample 2>" +
                            (box.root / "err.txt").string();
    const int status = std::system(cmd.c_str());
    CHECK(WEXITSTATUS(status) == 2);
    CHECK_FALSE(slurp(box.root / "err.txt").empty());
}

TEST_CASE("rank-tokens") {
    Sandbox box;
    const auto cfg = box.config(base_config()).string();
    SUBCASE("default prompt puts content words on top") {
        const auto out = box.root / "rank";
        REQUIRE(run({"--config", cfg, "--out", out.string(), "rank-tokens"}).code == 0);
        const json doc = read_json(out / "rankings.json");
        const auto& tokens = doc["tokens"];
        std::size_t content = 0;
        for (const auto& t : tokens) content += t["type"] == "content";
        CHECK(content == 6);
        const auto order = doc["sorted_indices"].get<std::vector<std::size_t>>();
        for (std::size_t r = 0; r < content; ++r) CHECK(tokens[order[r]]["type"] == "content");
        CHECK(doc["heads"].size() == 4);
        const auto csv = read_csv(out / "rankings.csv");
        CHECK(csv.front() == std::vector<std::string>{"position", "token", "type", "score", "rank"});
        CHECK(csv.size() == 17);
    }
    SUBCASE("empty prompt") {
        const auto out = box.root / "empty";
        REQUIRE(run({"--config", cfg, "--out", out.string(), "rank-tokens", "--prompt", ""}).code == 0);
        for (const auto& t : read_json(out / "rankings.json")["tokens"]) CHECK(t["type"] == "ctxagg");
    }
    SUBCASE("over-long prompt") {
        const auto r = run({"--config", cfg, "--out", (box.root / "long").string(), "rank-tokens", "--prompt",
                            "1 2 3 4 5 6 7 8 9 10 11 12 13 14 15"});
        CHECK(r.code == 2);
    }
}

TEST_CASE("build-mask") {
    Sandbox box;
    const auto cfg = box.config(base_config()).string();
    auto mask_at = [&](const std::string& r, const std::string& prompt, const std::string& config) {
        const auto out = box.root / ("mask_" + r + "_" + std::to_string(prompt.size()));
        REQUIRE(run({"--config", config, "--out", out.string(), "build-mask", "--prompt", prompt, "--r-deg", r}).code == 0);
        return read_json(out / "mask.json");
    };
    const json one = mask_at("1.0", kPrompts[0], cfg);
    CHECK(one["type_only"] == true);
    for (const auto& p : one["positions"]) CHECK(p["bit"] == (p["type"] == "content" ? 0 : 1));
    const json zero = mask_at("0", kPrompts[0], cfg);
    for (const auto& p : zero["positions"]) CHECK(p["bit"] == 1);

    json small = base_config();
    small["encoder"]["seq_len"] = 8;
    const json ex = mask_at("1.25", "a man is cooking", box.config(small, "small.json").string());
    CHECK(ex["k_content"] == 4);
    CHECK(ex["k_ctxagg"] == 1);
    const auto replaced = ex["replaced_indices"].get<std::vector<std::size_t>>();
    CHECK(replaced.size() == 5);
    std::size_t content = 0;
    for (std::size_t i : replaced) content += ex["positions"][i]["type"] == "content";
    CHECK(content == 4);
    // The replaced CtxAgg position is the one ranked first within its type.
    for (std::size_t i : replaced)
        if (ex["positions"][i]["type"] == "ctxagg") CHECK(ex["positions"][i]["rank_within_type"] == 1);

    CHECK(run({"--config", cfg, "--out", (box.root / "bad").string(), "build-mask", "--r-deg", "2.5"}).code == 2);
}

TEST_CASE("sample") {
    Sandbox box;
    auto final_latents = [&](json doc, const std::string& name) {
        doc["prompts"] = std::vector<std::string>{kPrompts[0], kPrompts[1]};
        const auto out = box.root / name;
        const Result r = run({"--config", box.config(doc, name + ".json").string(), "--out", out.string(), "sample"});
        REQUIRE(r.code == 0);
        const json meta = read_json(out / "metadata.json");
        std::vector<std::vector<double>> finals;
        for (const auto& run : meta["runs"]) finals.push_back(run["final_latent"].get<std::vector<double>>());
        return std::pair{meta, finals};
    };
    json cfg = base_config();
    cfg["guidance"] = {{"mode", "cfg"}, {"guidance_scale", 5.0}};
    json cdg2 = base_config();
    cdg2["guidance"] = {{"mode", "cdg"}, {"guidance_scale", 5.0}, {"r_deg", 2.0}};
    const auto [meta_cfg, f_cfg] = final_latents(cfg, "cfg");
    const auto [meta_cdg, f_cdg] = final_latents(cdg2, "cdg2");
    CHECK(f_cfg == f_cdg);
    CHECK(meta_cdg["runs"][0]["wpr_call_count"] == 1);
    CHECK_FALSE(meta_cfg["runs"][0].contains("wall_time_ms"));

    json none = base_config();
    none["guidance"] = {{"mode", "none"}};
    json w1 = base_config();
    w1["guidance"] = {{"mode", "cdg"}, {"guidance_scale", 1.0}, {"r_deg", 1.1}};
    CHECK(final_latents(none, "none").second == final_latents(w1, "w1").second);

    const auto traj = read_csv(box.root / "cfg" / "trajectory_000.csv");
    CHECK(traj.front().size() == 10);
    CHECK(traj.front()[0] == "step");
    CHECK(traj.front()[1] == "sigma");
    CHECK(traj.size() == 30);

    SUBCASE("outputs are not overwritten without --force") {
        const auto out = (box.root / "cfg").string();
        const auto c = box.config(cfg, "again.json").string();
        const auto r = run({"--config", c, "--out", out, "sample"});
        CHECK(r.code == 2);
        CHECK(r.err.find("--force") != std::string::npos);
        CHECK(run({"--config", c, "--out", out, "--force", "sample"}).code == 0);
    }
    SUBCASE("timing is opt-in") {
        const auto out = box.root / "timed";
        REQUIRE(run({"--config", box.config(cfg, "t.json").string(), "--out", out.string(), "--timing", "sample"}).code == 0);
        CHECK(read_json(out / "metadata.json")["runs"][0]["wall_time_ms"].is_number());
    }
}

TEST_CASE("sweep") {
    Sandbox box;
    SUBCASE("three-point grid") {
        json doc = base_config();
        doc["prompts"] = std::vector<std::string>{kPrompts[0], kPrompts[2]};
        const auto out = box.root / "small";
        REQUIRE(run({"--config", box.config(doc).string(), "--out", out.string(), "sweep", "--grid", "0,1,2"}).code == 0);
        const auto csv = read_csv(out / "sweep.csv");
        REQUIRE(csv.size() == 7);
        CHECK(csv.front() == std::vector<std::string>{"r_deg", "prompt_index", "mode", "k_content", "k_ctxagg",
                                                      "replaced_count", "distance_to_conditional", "wpr_call_count"});
        for (std::size_t p = 0; p < 2; ++p) {
            std::size_t prev = 0;
            for (std::size_t g = 0; g < 3; ++g) {
                const auto& row = csv[1 + g * 2 + p];
                CHECK(row[1] == std::to_string(p));
                const auto count = std::stoul(row[5]);
                CHECK(count >= prev);
                prev = count;
                if (g == 0) CHECK(std::stod(row[6]) == 0.0);
            }
        }
    }
    SUBCASE("full default grid over eight prompts") {
        const auto out = box.root / "full";
        REQUIRE(run({"--config", box.config(base_config()).string(), "--out", out.string(), "sweep"}).code == 0);
        CHECK(read_csv(out / "sweep.csv").size() == 1 + 168);
    }
}

TEST_CASE("diagnose") {
    Sandbox box;
    json doc = base_config();
    doc["guidance"] = {{"mode", "cdg"}, {"r_deg", 2.0}};
    const auto out = box.root / "geo";
    REQUIRE(run({"--config", box.config(doc).string(), "--out", out.string(), "diagnose"}).code == 0);
    const auto csv = read_csv(out / "geometry.csv");
    CHECK(csv.front() == std::vector<std::string>{"sigma", "method", "decoupling_mean", "interference_mean",
                                                  "num_valid_prompts"});
    REQUIRE(csv.size() == 1 + 56);
    for (std::size_t i = 1; i < csv.size(); i += 2) {
        CHECK(csv[i][1] == "cfg");
        CHECK(csv[i + 1][1] == "cdg");
        CHECK(csv[i][2] == csv[i + 1][2]);
        CHECK(csv[i][3] == csv[i + 1][3]);
        for (std::size_t c : {2u, 3u}) {
            const double v = std::stod(csv[i][c]);
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    const json geo = read_json(out / "geometry.json");
    CHECK(geo["records"].size() == 28);
}

TEST_CASE("every command is byte-deterministic") {
    Sandbox box;
    json doc = base_config();
    doc["prompts"] = std::vector<std::string>{kPrompts[3], kPrompts[4], kPrompts[5]};
    doc["guidance"] = {{"mode", "cdg"}, {"r_deg", 1.1}, {"guidance_scale", 4.0}};
    const auto cfg = box.config(doc).string();
    const std::vector<std::vector<std::string>> commands{
        {"rank-tokens"}, {"build-mask", "--r-deg", "0.6"}, {"sample"}, {"sweep", "--grid", "0,0.5,1.5"}, {"diagnose"}};
    for (const auto& cmd : commands) {
        std::vector<fs::path> dirs;
        for (int rep = 0; rep < 2; ++rep) {
            dirs.push_back(box.root / (cmd.front() + std::to_string(rep)));
            std::vector<std::string> args{"--config", cfg, "--out", dirs.back().string()};
            args.insert(args.end(), cmd.begin(), cmd.end());
            REQUIRE(run(args).code == 0);
        }
        std::size_t files = 0;
        for (const auto& entry : fs::directory_iterator(dirs[0])) {
            ++files;
            CHECK(slurp(entry.path()) == slurp(dirs[1] / entry.path().filename()));
        }
        CHECK(files > 0);
    }
}

TEST_CASE("config parsing") {
    Sandbox box;
    json doc;
    doc["seed"] = 5;
    doc["model"] = {{"components", 3}, {"spreads", {0.2, 0.3, 0.4}}};
    doc["schedule"] = {{"steps", 10}, {"sigma_max", 20.0}, {"sigma_min", 0.05}};
    doc["importance"] = {{"epsilon", 1e-9}, {"max_iters", 300}, {"fusion", {{"enabled", true}, {"v_min", 0.0}}}};
    doc["geometry"] = {{"subspace_dim", 2}};
    doc["sweep"] = {{"r_deg_grid", {0.0, 0.5}}};
    doc["prompts_file"] = "prompts.txt";
    std::ofstream(box.root / "prompts.txt") << "first prompt\n\nsecond prompt\n";
    const RunConfig c = load_config(box.config(doc));
    CHECK(c.seed == 5);
    CHECK(c.pipeline.seed == 5);
    CHECK(c.geometry.seed == 5);
    CHECK(c.pipeline.model.spreads == std::vector<double>{0.2, 0.3, 0.4});
    CHECK(c.schedule.steps == 10);
    CHECK(c.pipeline.importance.wpr.max_iters == 300);
    CHECK(c.pipeline.importance.fusion.enabled);
    CHECK(c.pipeline.importance.fusion.v_min == 0.0);
    CHECK_FALSE(c.pipeline.importance.fusion.v_max.has_value());
    CHECK(c.geometry.subspace_dim == 2u);
    CHECK(c.sweep_grid == std::vector<double>{0.0, 0.5});
    CHECK(c.prompts == std::vector<std::string>{"first prompt", "", "second prompt"});

    const auto grid = default_sweep_grid();
    CHECK(grid.size() == 21);
    CHECK(grid[3] == 0.3);
    CHECK(grid[17] == 1.7);

    json bad;
    bad["guidance"] = {{"mode", "cdg"}, {"guidance_scale", 0.5}};
    CHECK_THROWS_AS(load_config(box.config(bad, "bad.json")).validate(), Error);
    CHECK_THROWS_AS(load_config(box.root / "absent.json"), Error);
}
