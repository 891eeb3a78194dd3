#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <vector>

#include "cdg/degradation.hpp"
#include "cdg/encoder.hpp"
#include "cdg/guidance.hpp"
#include "cdg/importance.hpp"
#include "cdg/linalg.hpp"

namespace cdg {

struct GmmParams {
    std::size_t components = 4;
    std::size_t data_dim = 8;
    std::size_t cond_dim = 32;
    // One spread per component, or a single value shared by all.
    std::vector<double> spreads{0.5};
    // Empty means uniform.
    std::vector<double> weights;
    double mean_scale = 4.0;
    std::uint64_t seed = 0;
};

// p(x | e) = sum_j pi_j N(x; M_j e, s_j^2 I). Its noised marginals are known in
// closed form, so the posterior-mean denoiser below is the exact minimizer of
// the denoising objective.
class GmmConditionalModel {
public:
    explicit GmmConditionalModel(const GmmParams& params);
    GmmConditionalModel(std::vector<Matrix> maps, Vector spreads, Vector weights);

    std::size_t components() const noexcept { return maps_.size(); }
    std::size_t data_dim() const noexcept { return maps_.front().rows(); }
    std::size_t cond_dim() const noexcept { return maps_.front().cols(); }
    const Vector& spreads() const noexcept { return spreads_; }
    const Vector& weights() const noexcept { return weights_; }

    Vector mean(std::size_t j, std::span<const double> e) const;
    std::vector<Vector> means(std::span<const double> e) const;

    // Posterior responsibilities of each component for noisy x.
    Vector responsibilities(std::span<const double> x, double sigma, std::span<const double> e) const;

    // E[x0 | x_sigma = x, e]
    Vector denoise(std::span<const double> x, double sigma, std::span<const double> e) const;
    // (denoise - x) / sigma^2
    Vector score(std::span<const double> x, double sigma, std::span<const double> e) const;
    // Noise-space form of the denoiser.
    Prediction predict_noise(std::span<const double> x, double sigma, std::span<const double> e) const;

    // log p(x; sigma | e) and its gradient, evaluated directly from the mixture.
    double log_density(std::span<const double> x, double sigma, std::span<const double> e) const;
    Vector analytic_score(std::span<const double> x, double sigma, std::span<const double> e) const;

    // Draw x0 ~ p(x | e).
    Vector sample_clean(std::mt19937_64& rng, std::span<const double> e) const;

private:
    void validate() const;
    void log_terms(std::span<const double> x, double sigma, std::span<const double> e,
                   std::vector<Vector>& means, Vector& logw) const;

    std::vector<Matrix> maps_;
    Vector spreads_;
    Vector weights_;
};

struct SigmaSchedule {
    Vector sigmas;  // strictly decreasing positive levels followed by a terminal 0

    std::size_t steps() const noexcept { return sigmas.empty() ? 0 : sigmas.size() - 1; }
    double sigma_max() const { return sigmas.front(); }

    // `steps` log-spaced levels from sigma_max down to sigma_min, then 0.
    static SigmaSchedule log_spaced(std::size_t steps, double sigma_max, double sigma_min);
    void validate() const;
};

// Latent-conditioned query bias for recomputing block attention at each
// denoising state: bias = weight * W [x; log sigma], W seeded.
class AttentionProvider {
public:
    AttentionProvider(std::size_t data_dim, std::size_t embed_dim, double bias_weight, std::uint64_t seed);

    double bias_weight() const noexcept { return bias_weight_; }
    Vector query_bias(std::span<const double> x, double sigma) const;

    AttentionMap operator()(const TextEncoder& encoder, const EncodedPrompt& prompt, std::span<const double> x,
                            double sigma, std::size_t lambda_block) const;

private:
    Matrix map_;  // embed_dim x (data_dim + 1)
    double bias_weight_;
};

struct SamplerRun {
    GuidanceConfig config;
    Vector sigmas;
    std::vector<Vector> trajectory;  // steps + 1 latents, trajectory[0] = x_T
    // Mask applied at each step (null for modes without degradation). Steps
    // that reuse a cached mask share the pointer.
    std::vector<std::shared_ptr<const DegradationMask>> masks_used;
    std::size_t wpr_call_count = 0;
    double wall_time_ms = 0.0;

    const Vector& final_latent() const { return trajectory.back(); }
};

struct PipelineParams {
    EncoderParams encoder;
    GmmParams model;
    double attention_bias_weight = 0.1;
    ImportanceOptions importance;
    std::uint64_t seed = 0;
};

// Text encoder, pooling head, toy denoiser and attention provider bundled so a
// prompt can be sampled end to end.
class CdgPipeline {
public:
    explicit CdgPipeline(const PipelineParams& params);
    CdgPipeline(TextEncoder encoder, Pooler pooler, GmmConditionalModel model, AttentionProvider provider,
                ImportanceOptions importance);

    const TextEncoder& encoder() const noexcept { return encoder_; }
    const Pooler& pooler() const noexcept { return pooler_; }
    const GmmConditionalModel& model() const noexcept { return model_; }
    const AttentionProvider& attention_provider() const noexcept { return provider_; }
    const ImportanceOptions& importance_options() const noexcept { return importance_; }
    const Vector& null_embedding() const noexcept { return null_embedding_; }

    // Importance ranking at a given denoising state.
    ImportanceResult importance_at(const EncodedPrompt& prompt, std::span<const double> x, double sigma,
                                   std::size_t lambda_block) const;

    // Initial latent x_T ~ N(0, sigma_T^2 I) for `seed`.
    Vector initial_latent(double sigma_max, std::uint64_t seed) const;

    SamplerRun sample(const TokenSequence& tokens, const SigmaSchedule& schedule, const GuidanceConfig& config,
                      std::uint64_t seed) const;
    SamplerRun sample_from(const TokenSequence& tokens, const SigmaSchedule& schedule,
                           const GuidanceConfig& config, Vector x_T) const;

private:
    TextEncoder encoder_;
    Pooler pooler_;
    GmmConditionalModel model_;
    AttentionProvider provider_;
    ImportanceOptions importance_;
    Vector null_embedding_;
};

} // namespace cdg
