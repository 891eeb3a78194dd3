#include <doctest.h>

#include <cmath>
#include <random>

#include "cdg/diffusion.hpp"
#include "cdg/error.hpp"
#include "cdg/random.hpp"
#include "oracles.hpp"

using namespace cdg;

namespace {

// Component maps M_j = m_j e^T / |e|^2 place the means at m_j for embedding e.
std::vector<Matrix> maps_for(const std::vector<Vector>& means, std::span<const double> e) {
    const double n2 = dot(e, e);
    std::vector<Matrix> out;
    for (const auto& m : means) {
        Matrix map(m.size(), e.size());
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < e.size(); ++j) map(i, j) = m[i] * e[j] / n2;
        out.push_back(std::move(map));
    }
    return out;
}

const Vector kUnitE{1.0};

GmmConditionalModel fixed_model(const std::vector<Vector>& means, Vector spreads, Vector weights) {
    return GmmConditionalModel(maps_for(means, kUnitE), std::move(spreads), std::move(weights));
}

double rel_err(const Vector& a, const Vector& ref) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ref[i]) * (a[i] - ref[i]);
        den += ref[i] * ref[i];
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

double max_abs(const Vector& a, const Vector& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("single component denoiser is the Gaussian closed form") {
    const Vector m{1.5, -0.5, 2.0};
    const auto model = fixed_model({m}, {0.7}, {1.0});
    const Vector x{0.2, 0.9, -1.0};
    for (double sigma : {0.01, 0.3, 1.0, 5.0}) {
        const Vector d = model.denoise(x, sigma, kUnitE);
        const double s2 = 0.49, v2 = sigma * sigma;
        for (std::size_t i = 0; i < 3; ++i) CHECK(d[i] == doctest::Approx((s2 * x[i] + v2 * m[i]) / (s2 + v2)).epsilon(1e-14));
    }
}

TEST_CASE("denoiser tends to the identity as sigma vanishes") {
    GmmParams gp;
    gp.seed = 3;
    const GmmConditionalModel model(gp);
    std::mt19937_64 rng(1);
    Vector e(gp.cond_dim);
    fill_normal(rng, e);
    const Vector x0 = model.sample_clean(rng, e);
    CHECK(max_abs(model.denoise(x0, 1e-3, e), x0) < 1e-4);
}

TEST_CASE("denoiser matches the Monte-Carlo posterior mean") {
    const oracle::Mixture mix{{{2.0, 1.0}, {-1.5, 0.5}, {0.0, -2.0}}, {0.5, 0.8, 0.3}, {0.2, 0.5, 0.3}};
    const auto model = fixed_model(mix.means, {mix.spreads.begin(), mix.spreads.end()}, {mix.weights.begin(), mix.weights.end()});
    for (double sigma : {0.1, 0.5, 2.0}) {
        const Vector x{1.8, 0.9};
        const Vector d = model.denoise(x, sigma, kUnitE);
        const Vector mc = oracle::monte_carlo_posterior_mean(mix, x, sigma, sigma > 1.0 ? 1000000 : 200000, 77);
        CHECK(rel_err(d, mc) < 1e-2);
    }
}

TEST_CASE("score agrees with the analytic mixture gradient and finite differences") {
    const oracle::Mixture mix{{{2.0, 1.0, 0.0}, {-1.5, 0.5, 1.0}, {0.0, -2.0, -1.0}}, {0.5, 0.8, 0.3}, {0.2, 0.5, 0.3}};
    const auto model = fixed_model(mix.means, {mix.spreads.begin(), mix.spreads.end()}, {mix.weights.begin(), mix.weights.end()});
    std::mt19937_64 rng(12);
    std::normal_distribution<double> n01;
    std::uniform_real_distribution<double> logsig(std::log(0.1), std::log(5.0));
    for (int rep = 0; rep < 30; ++rep) {
        Vector x(3);
        for (auto& v : x) v = 2 * n01(rng);
        const double sigma = std::exp(logsig(rng));
        const Vector s = model.score(x, sigma, kUnitE);
        CHECK(max_abs(s, model.analytic_score(x, sigma, kUnitE)) < 1e-8);
        CHECK(max_abs(s, oracle::finite_difference_gradient(mix, x, sigma)) < 1e-6);
        CHECK(model.log_density(x, sigma, kUnitE) ==
              doctest::Approx(static_cast<double>(oracle::log_density(mix, x, sigma))).epsilon(1e-12));
    }
}

TEST_CASE("score special cases") {
    SUBCASE("point mass") {
        const Vector m{1.0, -2.0};
        const auto model = fixed_model({m}, {1e-9}, {1.0});
        const Vector x{0.5, 0.5};
        const Vector s = model.score(x, 0.4, kUnitE);
        for (std::size_t i = 0; i < 2; ++i) CHECK(s[i] == doctest::Approx((m[i] - x[i]) / 0.16).epsilon(1e-12));
    }
    SUBCASE("symmetry point") {
        const auto model = fixed_model({{3.0, 1.0}, {-3.0, 1.0}}, {0.5, 0.5}, {0.5, 0.5});
        const Vector s = model.score(Vector{0.0, -0.7}, 0.8, kUnitE);
        CHECK(std::abs(s[0]) < 1e-15);
        CHECK(s[1] > 0.0);
    }
    SUBCASE("far from all components responsibilities stay finite") {
        const auto model = fixed_model({{3.0, 1.0}, {-3.0, 1.0}}, {0.1, 0.1}, {0.5, 0.5});
        const Vector r = model.responsibilities(Vector{1e4, -1e4}, 0.01, kUnitE);
        CHECK(std::isfinite(r[0]));
        CHECK(r[0] + r[1] == doctest::Approx(1.0));
        CHECK(std::isfinite(model.denoise(Vector{1e4, -1e4}, 0.01, kUnitE)[0]));
    }
}

TEST_CASE("model parameter validation") {
    CHECK_THROWS_AS(fixed_model({{1.0}}, {0.0}, {1.0}), Error);
    CHECK_THROWS_AS(fixed_model({{1.0}, {2.0}}, {0.5, 0.5}, {0.5, 0.6}), Error);
    CHECK_THROWS_AS(fixed_model({{1.0}, {2.0}}, {0.5}, {0.5, 0.5}), Error);
    GmmParams gp;
    gp.weights = {0.1, 0.2, 0.3, 0.4};
    gp.spreads = {0.5, 0.6, 0.7, 0.8};
    const GmmConditionalModel ok(gp);
    CHECK(ok.weights() == gp.weights);
    CHECK(ok.spreads() == gp.spreads);
}

TEST_CASE("sigma schedule") {
    const auto s = SigmaSchedule::log_spaced(28, 10.0, 0.01);
    CHECK(s.steps() == 28);
    CHECK(s.sigmas.front() == 10.0);
    CHECK(s.sigmas[27] == 0.01);
    CHECK(s.sigmas.back() == 0.0);
    CHECK_NOTHROW(s.validate());
    CHECK(s.sigmas[14] / s.sigmas[15] == doctest::Approx(s.sigmas[1] / s.sigmas[2]).epsilon(1e-12));
    SigmaSchedule bad{{1.0, 1.0, 0.0}};
    CHECK_THROWS_AS(bad.validate(), Error);
    SigmaSchedule no_zero{{2.0, 1.0}};
    CHECK_THROWS_AS(no_zero.validate(), Error);
    CHECK_THROWS_AS(SigmaSchedule::log_spaced(0, 1.0, 0.1), Error);
}

TEST_CASE("attention provider") {
    PipelineParams pp;
    const CdgPipeline pipe(pp);
    const auto prompt = pipe.encoder().encode_full(pipe.encoder().tokenize("a snowy mountain village at night"));
    const Vector x1 = pipe.initial_latent(5.0, 1);
    const Vector x2 = pipe.initial_latent(5.0, 2);

    const AttentionProvider off(8, 32, 0.0, 0);
    CHECK(off(pipe.encoder(), prompt, x1, 5.0, 1).heads == prompt.attention[1].heads);
    CHECK(off(pipe.encoder(), prompt, x1, 5.0, 0).heads == prompt.attention[0].heads);

    const auto a1 = pipe.attention_provider()(pipe.encoder(), prompt, x1, 5.0, 1);
    const auto a2 = pipe.attention_provider()(pipe.encoder(), prompt, x2, 5.0, 1);
    CHECK_FALSE(a1.heads == a2.heads);
    for (const auto& h : a1.heads) {
        for (std::size_t i = 0; i < h.rows(); ++i) {
            double s = 0;
            for (double v : h.row(i)) {
                CHECK(v > 0.0);
                s += v;
            }
            CHECK(std::abs(s - 1.0) < 1e-9);
        }
    }
    CHECK_THROWS_AS(pipe.attention_provider()(pipe.encoder(), prompt, x1, 5.0, 2), Error);
    CHECK_THROWS_AS(pipe.attention_provider()(pipe.encoder(), prompt, Vector(3), 5.0, 1), Error);
    CHECK_THROWS_AS(AttentionProvider(8, 32, -1.0, 0), Error);
}

TEST_CASE("sampler run bookkeeping") {
    const CdgPipeline pipe(PipelineParams{});
    const auto sched = SigmaSchedule::log_spaced(28, 10.0, 0.01);
    const auto t = pipe.encoder().tokenize("a photo of an astronaut riding a horse");
    GuidanceConfig g;
    g.r_deg = 1.1;
    const auto once = pipe.sample(t, sched, g, 0);
    CHECK(once.trajectory.size() == 29);
    CHECK(once.masks_used.size() == 28);
    CHECK(once.wpr_call_count == 1);
    for (const auto& m : once.masks_used) CHECK(m == once.masks_used.front());
    CHECK(once.trajectory.front() == pipe.initial_latent(10.0, 0));

    g.reuse_first_step_mask = false;
    CHECK(pipe.sample(t, sched, g, 0).wpr_call_count == 28);

    g.r_deg = 1.0;
    const auto typed = pipe.sample(t, sched, g, 0);
    CHECK(typed.wpr_call_count == 0);
    CHECK(*typed.masks_used.front() == build_type_only_mask(t));

    g.mode = GuidanceMode::CFG;
    const auto cfg = pipe.sample(t, sched, g, 0);
    CHECK(cfg.wpr_call_count == 0);
    CHECK(cfg.masks_used.front() == nullptr);
    for (const auto& x : cfg.trajectory)
        for (double v : x) CHECK(std::isfinite(v));

    g.mode = GuidanceMode::CDG;
    g.lambda_block = 2;
    CHECK_THROWS_AS(pipe.sample(t, sched, g, 0), Error);
}

TEST_CASE("sampler reductions") {
    const CdgPipeline pipe(PipelineParams{});
    const auto sched = SigmaSchedule::log_spaced(28, 10.0, 0.01);
    const auto t = pipe.encoder().tokenize("a child flying a kite in the park");
    GuidanceConfig cfg;
    cfg.mode = GuidanceMode::CFG;
    GuidanceConfig cdg;
    cdg.r_deg = 2.0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto a = pipe.sample(t, sched, cfg, seed);
        const auto b = pipe.sample(t, sched, cdg, seed);
        for (std::size_t k = 0; k < a.trajectory.size(); ++k) CHECK(max_abs(a.trajectory[k], b.trajectory[k]) <= 1e-12);
    }

    SUBCASE("guidance scale one is the conditional trajectory") {
        GuidanceConfig none;
        none.mode = GuidanceMode::None;
        GuidanceConfig w1 = cdg;
        w1.guidance_scale = 1.0;
        w1.r_deg = 0.7;
        const auto a = pipe.sample(t, sched, none, 4);
        CHECK(pipe.sample(t, sched, w1, 4).trajectory == a.trajectory);
        w1.mode = GuidanceMode::CFG;
        CHECK(pipe.sample(t, sched, w1, 4).trajectory == a.trajectory);
    }
    SUBCASE("mask reuse is irrelevant when attention ignores the latent") {
        PipelineParams pp;
        pp.attention_bias_weight = 0.0;
        const CdgPipeline still(pp);
        GuidanceConfig g;
        g.r_deg = 0.5;
        const auto a = still.sample(t, sched, g, 1);
        g.reuse_first_step_mask = false;
        const auto b = still.sample(t, sched, g, 1);
        CHECK(a.trajectory == b.trajectory);
        CHECK(b.wpr_call_count == 28);
    }
    SUBCASE("per-step masks can differ with a latent-dependent bias") {
        GuidanceConfig g;
        g.r_deg = 0.5;
        g.reuse_first_step_mask = false;
        std::size_t changes = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const auto r = pipe.sample(t, sched, g, seed);
            for (std::size_t k = 1; k < r.masks_used.size(); ++k) changes += !(*r.masks_used[k] == *r.masks_used[0]);
        }
        MESSAGE("per-step mask changes over 10 runs: " << changes);
        CHECK(changes > 0);
    }
}

TEST_CASE("unguided sampling lands on the mixture") {
    PipelineParams pp;
    const CdgPipeline base(pp);
    const auto t = base.encoder().tokenize("a bowl of fresh fruit on a table");
    const Vector e = base.pooler()(base.encoder().encode(t));
    const std::vector<Vector> means{{3, 0, 0, 0, 1, 0, 0, 0}, {-2, 2, 0, 0, 0, 0, 1, 0}};
    const CdgPipeline pipe(base.encoder(), base.pooler(), GmmConditionalModel(maps_for(means, e), {0.3, 0.3}, {0.4, 0.6}),
                           base.attention_provider(), {});
    const auto sched = SigmaSchedule::log_spaced(100, 60.0, 0.005);
    GuidanceConfig none;
    none.mode = GuidanceMode::None;
    int near = 0, first = 0;
    const int runs = 400;
    for (int r = 0; r < runs; ++r) {
        const Vector x = pipe.sample(t, sched, none, r).final_latent();
        double d0 = 0, d1 = 0;
        for (std::size_t i = 0; i < 8; ++i) {
            d0 += (x[i] - means[0][i]) * (x[i] - means[0][i]);
            d1 += (x[i] - means[1][i]) * (x[i] - means[1][i]);
        }
        first += d0 < d1;
        near += std::min(d0, d1) < 9 * 0.09 * 8;
    }
    CHECK(near == runs);
    CHECK(std::abs(first / double(runs) - 0.4) < 0.08);
}
