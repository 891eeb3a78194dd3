#include "cdg/diffusion.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "cdg/error.hpp"
#include "cdg/random.hpp"

namespace cdg {

namespace {

enum Stream : std::uint64_t {
    kStreamModel = 10ULL << 40,
    kStreamAttentionBias = 11ULL << 40,
    kStreamLatent = 12ULL << 40,
};

double log_sum_exp(std::span<const double> v) {
    const double mx = *std::max_element(v.begin(), v.end());
    double acc = 0.0;
    for (double x : v) {
        acc += std::exp(x - mx);
    }
    return mx + std::log(acc);
}

} // namespace

GmmConditionalModel::GmmConditionalModel(const GmmParams& params) {
    const std::size_t j = params.components;
    if (j == 0 || params.data_dim == 0 || params.cond_dim == 0) {
        fail(ErrorCode::Config, "model dimensions must be positive");
    }
    auto rng = make_rng(params.seed, kStreamModel);
    const double stddev = params.mean_scale / std::sqrt(static_cast<double>(params.cond_dim));
    for (std::size_t c = 0; c < j; ++c) {
        Matrix m(params.data_dim, params.cond_dim);
        fill_normal(rng, m.data(), stddev);
        maps_.push_back(std::move(m));
    }
    if (params.spreads.size() == 1) {
        spreads_.assign(j, params.spreads.front());
    } else if (params.spreads.size() == j) {
        spreads_ = params.spreads;
    } else {
        fail(ErrorCode::Config, "spreads must have 1 or J entries");
    }
    if (params.weights.empty()) {
        weights_.assign(j, 1.0 / static_cast<double>(j));
    } else if (params.weights.size() == j) {
        weights_ = params.weights;
    } else {
        fail(ErrorCode::Config, "weights must have J entries");
    }
    validate();
}

GmmConditionalModel::GmmConditionalModel(std::vector<Matrix> maps, Vector spreads, Vector weights)
    : maps_(std::move(maps)), spreads_(std::move(spreads)), weights_(std::move(weights)) {
    validate();
}

void GmmConditionalModel::validate() const {
    if (maps_.empty() || spreads_.size() != maps_.size() || weights_.size() != maps_.size()) {
        fail(ErrorCode::Config, "model needs matching maps, spreads and weights");
    }
    for (const auto& m : maps_) {
        if (m.rows() != maps_.front().rows() || m.cols() != maps_.front().cols() || m.empty()) {
            fail(ErrorCode::Config, "component maps must share a shape");
        }
    }
    if (std::any_of(spreads_.begin(), spreads_.end(), [](double s) { return !(s > 0.0); })) {
        fail(ErrorCode::Config, "spreads must be positive");
    }
    if (std::any_of(weights_.begin(), weights_.end(), [](double w) { return !(w > 0.0); })) {
        fail(ErrorCode::Config, "weights must be positive");
    }
    const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-12) {
        fail(ErrorCode::Config, "weights must sum to 1");
    }
}

Vector GmmConditionalModel::mean(std::size_t j, std::span<const double> e) const {
    if (e.size() != cond_dim()) {
        fail(ErrorCode::InvalidInput, "condition embedding has wrong dimension");
    }
    return mat_vec(maps_[j], e);
}

std::vector<Vector> GmmConditionalModel::means(std::span<const double> e) const {
    std::vector<Vector> out;
    out.reserve(components());
    for (std::size_t j = 0; j < components(); ++j) {
        out.push_back(mean(j, e));
    }
    return out;
}

void GmmConditionalModel::log_terms(std::span<const double> x, double sigma, std::span<const double> e,
                                    std::vector<Vector>& ms, Vector& logw) const {
    if (!(sigma > 0.0)) {
        fail(ErrorCode::InvalidInput, "sigma must be positive");
    }
    if (x.size() != data_dim()) {
        fail(ErrorCode::InvalidInput, "latent has wrong dimension");
    }
    ms = means(e);
    logw.resize(components());
    const double dim = static_cast<double>(data_dim());
    for (std::size_t j = 0; j < components(); ++j) {
        const double var = spreads_[j] * spreads_[j] + sigma * sigma;
        double dist2 = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double diff = x[i] - ms[j][i];
            dist2 += diff * diff;
        }
        logw[j] = std::log(weights_[j]) - 0.5 * dim * std::log(2.0 * std::numbers::pi * var) - 0.5 * dist2 / var;
    }
}

Vector GmmConditionalModel::responsibilities(std::span<const double> x, double sigma,
                                             std::span<const double> e) const {
    std::vector<Vector> ms;
    Vector logw;
    log_terms(x, sigma, e, ms, logw);
    const double lse = log_sum_exp(logw);
    for (auto& v : logw) {
        v = std::exp(v - lse);
    }
    return logw;
}

Vector GmmConditionalModel::denoise(std::span<const double> x, double sigma, std::span<const double> e) const {
    std::vector<Vector> ms;
    Vector logw;
    log_terms(x, sigma, e, ms, logw);
    const double lse = log_sum_exp(logw);
    const double s2 = sigma * sigma;
    Vector d(x.size(), 0.0);
    for (std::size_t j = 0; j < components(); ++j) {
        const double gamma = std::exp(logw[j] - lse);
        const double spread2 = spreads_[j] * spreads_[j];
        const double inv = 1.0 / (spread2 + s2);
        for (std::size_t i = 0; i < x.size(); ++i) {
            d[i] += gamma * (spread2 * x[i] + s2 * ms[j][i]) * inv;
        }
    }
    return d;
}

Vector GmmConditionalModel::score(std::span<const double> x, double sigma, std::span<const double> e) const {
    Vector d = denoise(x, sigma, e);
    const double s2 = sigma * sigma;
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = (d[i] - x[i]) / s2;
    }
    return d;
}

Prediction GmmConditionalModel::predict_noise(std::span<const double> x, double sigma,
                                              std::span<const double> e) const {
    return noise_from_denoised(denoise(x, sigma, e), x, sigma);
}

double GmmConditionalModel::log_density(std::span<const double> x, double sigma, std::span<const double> e) const {
    std::vector<Vector> ms;
    Vector logw;
    log_terms(x, sigma, e, ms, logw);
    return log_sum_exp(logw);
}

Vector GmmConditionalModel::analytic_score(std::span<const double> x, double sigma,
                                           std::span<const double> e) const {
    std::vector<Vector> ms;
    Vector logw;
    log_terms(x, sigma, e, ms, logw);
    const double lse = log_sum_exp(logw);
    Vector g(x.size(), 0.0);
    for (std::size_t j = 0; j < components(); ++j) {
        const double gamma = std::exp(logw[j] - lse);
        const double var = spreads_[j] * spreads_[j] + sigma * sigma;
        for (std::size_t i = 0; i < x.size(); ++i) {
            g[i] += gamma * (ms[j][i] - x[i]) / var;
        }
    }
    return g;
}

Vector GmmConditionalModel::sample_clean(std::mt19937_64& rng, std::span<const double> e) const {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    const std::size_t j = pick(rng);
    Vector x = mean(j, e);
    std::normal_distribution<double> noise(0.0, spreads_[j]);
    for (auto& v : x) {
        v += noise(rng);
    }
    return x;
}

SigmaSchedule SigmaSchedule::log_spaced(std::size_t steps, double sigma_max, double sigma_min) {
    if (steps == 0) {
        fail(ErrorCode::Config, "schedule needs at least one step");
    }
    if (!(sigma_max > 0.0 && sigma_min > 0.0)) {
        fail(ErrorCode::Config, "sigma bounds must be positive");
    }
    if (steps > 1 && !(sigma_max > sigma_min)) {
        fail(ErrorCode::Config, "sigma_max must exceed sigma_min");
    }
    SigmaSchedule s;
    s.sigmas.reserve(steps + 1);
    const double lmax = std::log(sigma_max);
    const double lmin = std::log(sigma_min);
    for (std::size_t i = 0; i < steps; ++i) {
        if (i == 0) {
            s.sigmas.push_back(sigma_max);
        } else if (i + 1 == steps) {
            s.sigmas.push_back(sigma_min);
        } else {
            const double t = static_cast<double>(i) / static_cast<double>(steps - 1);
            s.sigmas.push_back(std::exp(lmax + t * (lmin - lmax)));
        }
    }
    s.sigmas.push_back(0.0);
    s.validate();
    return s;
}

void SigmaSchedule::validate() const {
    if (sigmas.size() < 2 || sigmas.back() != 0.0) {
        fail(ErrorCode::Config, "schedule must hold at least one level and end at 0");
    }
    for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
        if (!(sigmas[i] > sigmas[i + 1])) {
            fail(ErrorCode::Config, "schedule must be strictly decreasing");
        }
    }
}

AttentionProvider::AttentionProvider(std::size_t data_dim, std::size_t embed_dim, double bias_weight,
                                     std::uint64_t seed)
    : map_(embed_dim, data_dim + 1), bias_weight_(bias_weight) {
    if (!(bias_weight >= 0.0) || !std::isfinite(bias_weight)) {
        fail(ErrorCode::Config, "attention bias weight must be finite and nonnegative");
    }
    auto rng = make_rng(seed, kStreamAttentionBias);
    fill_normal(rng, map_.data(), 1.0 / std::sqrt(static_cast<double>(data_dim + 1)));
}

Vector AttentionProvider::query_bias(std::span<const double> x, double sigma) const {
    if (x.size() + 1 != map_.cols()) {
        fail(ErrorCode::InvalidInput, "latent has wrong dimension for the attention provider");
    }
    if (bias_weight_ == 0.0) {
        return {};
    }
    Vector features(x.begin(), x.end());
    features.push_back(std::log(sigma));
    Vector bias = mat_vec(map_, features);
    for (auto& v : bias) {
        v *= bias_weight_;
    }
    return bias;
}

AttentionMap AttentionProvider::operator()(const TextEncoder& encoder, const EncodedPrompt& prompt,
                                           std::span<const double> x, double sigma,
                                           std::size_t lambda_block) const {
    if (lambda_block >= encoder.params().blocks) {
        fail(ErrorCode::InvalidInput, "lambda_block " + std::to_string(lambda_block) + " >= encoder blocks");
    }
    return encoder.block_attention(prompt, lambda_block, query_bias(x, sigma));
}

CdgPipeline::CdgPipeline(const PipelineParams& params)
    : CdgPipeline(TextEncoder([&] {
                      EncoderParams p = params.encoder;
                      p.seed = params.seed;
                      return p;
                  }()),
                  Pooler(params.encoder.embed_dim, params.model.cond_dim, params.seed),
                  GmmConditionalModel([&] {
                      GmmParams p = params.model;
                      p.seed = params.seed;
                      return p;
                  }()),
                  AttentionProvider(params.model.data_dim, params.encoder.embed_dim,
                                    params.attention_bias_weight, params.seed),
                  params.importance) {}

CdgPipeline::CdgPipeline(TextEncoder encoder, Pooler pooler, GmmConditionalModel model, AttentionProvider provider,
                         ImportanceOptions importance)
    : encoder_(std::move(encoder)),
      pooler_(std::move(pooler)),
      model_(std::move(model)),
      provider_(std::move(provider)),
      importance_(importance) {
    if (pooler_.in_dim() != encoder_.params().embed_dim || pooler_.out_dim() != model_.cond_dim()) {
        fail(ErrorCode::Config, "pooler does not connect encoder width to model condition width");
    }
    null_embedding_ = pooler_(encoder_.null_condition());
}

ImportanceResult CdgPipeline::importance_at(const EncodedPrompt& prompt, std::span<const double> x, double sigma,
                                            std::size_t lambda_block) const {
    return compute_importance(provider_(encoder_, prompt, x, sigma, lambda_block), importance_);
}

Vector CdgPipeline::initial_latent(double sigma_max, std::uint64_t seed) const {
    auto rng = make_rng(seed, kStreamLatent);
    Vector x(model_.data_dim());
    fill_normal(rng, x, sigma_max);
    return x;
}

SamplerRun CdgPipeline::sample(const TokenSequence& tokens, const SigmaSchedule& schedule,
                               const GuidanceConfig& config, std::uint64_t seed) const {
    schedule.validate();
    return sample_from(tokens, schedule, config, initial_latent(schedule.sigma_max(), seed));
}

SamplerRun CdgPipeline::sample_from(const TokenSequence& tokens, const SigmaSchedule& schedule,
                                    const GuidanceConfig& config, Vector x_T) const {
    const auto start = std::chrono::steady_clock::now();
    config.validate();
    schedule.validate();
    if (x_T.size() != model_.data_dim()) {
        fail(ErrorCode::InvalidInput, "initial latent has wrong dimension");
    }
    if (config.uses_degradation() && config.lambda_block >= encoder_.params().blocks) {
        fail(ErrorCode::InvalidInput, "lambda_block out of range");
    }

    SamplerRun run;
    run.config = config;
    run.sigmas = schedule.sigmas;
    run.trajectory.reserve(schedule.steps() + 1);
    run.masks_used.reserve(schedule.steps());

    const EncodedPrompt prompt = encoder_.encode_full(tokens);
    const Vector cond_embedding = pooler_(prompt.condition);
    const double w = config.guidance_scale;

    DegradationRatios ratios;
    if (config.uses_degradation()) {
        ratios = map_ratio(*config.r_deg);
    }
    std::shared_ptr<const DegradationMask> cached;
    std::shared_ptr<const DegradationMask> pooled_for;
    Vector degraded_embedding;

    Vector x = std::move(x_T);
    run.trajectory.push_back(x);
    for (std::size_t step = 0; step < schedule.steps(); ++step) {
        const double sigma = schedule.sigmas[step];
        const double next = schedule.sigmas[step + 1];
        const Prediction eps_cond = model_.predict_noise(x, sigma, cond_embedding);

        std::shared_ptr<const DegradationMask> mask;
        if (config.uses_degradation()) {
            if (is_type_only(ratios)) {
                if (!cached) {
                    cached = std::make_shared<const DegradationMask>(build_type_only_mask(tokens));
                }
                mask = cached;
            } else if (config.reuse_first_step_mask && cached) {
                mask = cached;
            } else {
                const ImportanceResult imp = importance_at(prompt, x, sigma, config.lambda_block);
                ++run.wpr_call_count;
                mask = std::make_shared<const DegradationMask>(build_mask(tokens, imp.fused, ratios));
                if (config.reuse_first_step_mask) {
                    cached = mask;
                }
            }
            if (!pooled_for || (pooled_for != mask && !(*pooled_for == *mask))) {
                degraded_embedding = pooler_(apply_mask(prompt.condition, encoder_.null_condition(), *mask));
            }
            pooled_for = mask;
        }

        Prediction eps;
        switch (config.mode) {
        case GuidanceMode::None:
            eps = eps_cond;
            break;
        case GuidanceMode::CFG:
            eps = combine_cfg(eps_cond, model_.predict_noise(x, sigma, null_embedding_), w);
            break;
        case GuidanceMode::CDG:
            eps = combine_cdg(eps_cond, model_.predict_noise(x, sigma, degraded_embedding), w);
            break;
        case GuidanceMode::CFGStar:
            eps = combine_cfg_star(model_.predict_noise(x, sigma, degraded_embedding),
                                   model_.predict_noise(x, sigma, null_embedding_), w);
            break;
        }

        // Euler step of dx/dsigma = -sigma * score = eps
        const double h = next - sigma;
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] += h * eps.value[i];
        }
        run.trajectory.push_back(x);
        run.masks_used.push_back(std::move(mask));
    }

    run.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return run;
}

} // namespace cdg
