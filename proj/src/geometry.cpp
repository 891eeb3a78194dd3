#include "cdg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "cdg/error.hpp"
#include "cdg/random.hpp"

namespace cdg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

enum Stream : std::uint64_t {
    kStreamClean = 20ULL << 40,
    kStreamNoise = 21ULL << 40,
};

// Orthonormal basis of the column span of delta.
Matrix column_span(const Matrix& delta) {
    if (delta.rows() == 0 || delta.cols() == 0 || frobenius_norm(delta) == 0.0) {
        fail(ErrorCode::UndefinedMetric, "guidance delta is zero");
    }
    const SvdResult svd = thin_svd(delta);
    const std::size_t rank = std::max<std::size_t>(1, numerical_rank(svd.s));
    Matrix basis(delta.rows(), rank);
    for (std::size_t i = 0; i < delta.rows(); ++i) {
        for (std::size_t j = 0; j < rank; ++j) {
            basis(i, j) = svd.u(i, j);
        }
    }
    return basis;
}

} // namespace

std::size_t default_subspace_dim(const PredictionStack& stack, double energy) {
    const SvdResult svd = thin_svd(stack.rows);
    const std::size_t rank = numerical_rank(svd.s);
    if (rank == 0) {
        fail(ErrorCode::RankDeficient, "prediction stack is zero");
    }
    double total = 0.0;
    for (double s : svd.s) {
        total += s * s;
    }
    std::size_t k = 0;
    double acc = 0.0;
    while (k < svd.s.size()) {
        acc += svd.s[k] * svd.s[k];
        ++k;
        if (acc >= energy * total) {
            break;
        }
    }
    const std::size_t cap = std::max<std::size_t>(1, stack.rows.rows() - 1);
    return std::max<std::size_t>(1, std::min({k, cap, rank}));
}

Matrix estimate_subspace(const PredictionStack& stack, std::size_t k) {
    if (k == 0) {
        fail(ErrorCode::InvalidInput, "subspace dimension must be positive");
    }
    const SvdResult svd = thin_svd(stack.rows);
    if (k > numerical_rank(svd.s)) {
        fail(ErrorCode::RankDeficient, "k = " + std::to_string(k) + " exceeds numerical rank " +
                                           std::to_string(numerical_rank(svd.s)));
    }
    Matrix basis(stack.rows.cols(), k);
    for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t i = 0; i < stack.rows.cols(); ++i) {
            basis(i, j) = svd.vt(j, i);
        }
    }
    return basis;
}

double decoupling(const Matrix& delta, const Matrix& basis) {
    const Vector sines = principal_angle_sines_squared(column_span(delta), basis);
    const double mean = std::accumulate(sines.begin(), sines.end(), 0.0) / static_cast<double>(sines.size());
    return std::clamp(mean, 0.0, 1.0);
}

double decoupling(std::span<const double> delta, const Matrix& basis) { return decoupling(Matrix::column(delta), basis); }

double interference(const Matrix& delta, const Matrix& basis) {
    const double total = frobenius_norm(delta);
    if (total == 0.0) {
        fail(ErrorCode::UndefinedMetric, "guidance delta is zero");
    }
    const double inside = frobenius_norm(project_onto(basis, delta));
    return std::clamp((inside * inside) / (total * total), 0.0, 1.0);
}

double interference(std::span<const double> delta, const Matrix& basis) {
    return interference(Matrix::column(delta), basis);
}

namespace {

struct PromptState {
    EncodedPrompt encoded;
    Vector embedding;
    Vector x0;
    Vector noise;
};

Vector negative_embedding(const CdgPipeline& pipeline, const PromptState& prompt, const GuidanceConfig& config,
                          std::span<const double> x, double sigma) {
    if (config.mode == GuidanceMode::CFG) {
        return pipeline.null_embedding();
    }
    const DegradationRatios ratios = map_ratio(*config.r_deg);
    DegradationMask mask;
    if (is_type_only(ratios)) {
        mask = build_type_only_mask(prompt.encoded.tokens);
    } else {
        const ImportanceResult imp = pipeline.importance_at(prompt.encoded, x, sigma, config.lambda_block);
        mask = build_mask(prompt.encoded.tokens, imp.fused, ratios);
    }
    return pipeline.pooler()(
        apply_mask(prompt.encoded.condition, pipeline.encoder().null_condition(), mask));
}

// Guidance delta of one method in noise space. CFG* contrasts c_deg with the
// null condition; the other modes contrast c with their negative.
Vector method_delta(const CdgPipeline& pipeline, const PromptState& prompt, const GuidanceConfig& config,
                    const Prediction& eps_cond, std::span<const double> x, double sigma) {
    const GmmConditionalModel& model = pipeline.model();
    switch (config.mode) {
    case GuidanceMode::None:
        fail(ErrorCode::Config, "geometry sweep needs a guided mode");
    case GuidanceMode::CFGStar: {
        const Prediction eps_deg = model.predict_noise(x, sigma, negative_embedding(pipeline, prompt, config, x, sigma));
        return guidance_delta(eps_deg, model.predict_noise(x, sigma, pipeline.null_embedding()));
    }
    case GuidanceMode::CFG:
    case GuidanceMode::CDG:
        break;
    }
    const Prediction eps_neg = model.predict_noise(x, sigma, negative_embedding(pipeline, prompt, config, x, sigma));
    return guidance_delta(eps_cond, eps_neg);
}

MethodGeometry evaluate(const std::vector<Vector>& deltas, const Matrix& basis) {
    MethodGeometry out;
    out.decoupling.assign(deltas.size(), kNaN);
    out.interference.assign(deltas.size(), kNaN);
    std::vector<Vector> valid;
    double dsum = 0.0;
    double isum = 0.0;
    for (std::size_t p = 0; p < deltas.size(); ++p) {
        try {
            out.decoupling[p] = decoupling(deltas[p], basis);
            out.interference[p] = interference(deltas[p], basis);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::UndefinedMetric) {
                throw;
            }
            out.decoupling[p] = kNaN;
            out.interference[p] = kNaN;
            continue;
        }
        dsum += out.decoupling[p];
        isum += out.interference[p];
        valid.push_back(deltas[p]);
    }
    out.num_valid_prompts = valid.size();
    if (valid.empty()) {
        out.decoupling_mean = out.interference_mean = kNaN;
        out.decoupling_pooled = out.interference_pooled = kNaN;
        return out;
    }
    out.decoupling_mean = dsum / static_cast<double>(valid.size());
    out.interference_mean = isum / static_cast<double>(valid.size());
    const Matrix pooled = Matrix::from_rows(valid).transposed();
    out.decoupling_pooled = decoupling(pooled, basis);
    out.interference_pooled = interference(pooled, basis);
    return out;
}

} // namespace

GeometryReport run_geometry_sweep(const CdgPipeline& pipeline, const SigmaSchedule& schedule,
                                  const std::vector<TokenSequence>& prompts, const GuidanceConfig& config_cfg,
                                  const GuidanceConfig& config_cdg, const GeometryOptions& options) {
    schedule.validate();
    config_cfg.validate();
    config_cdg.validate();
    if (config_cfg.guidance_scale != config_cdg.guidance_scale) {
        fail(ErrorCode::Config, "geometry sweep methods must share the guidance scale");
    }
    const std::size_t min_prompts = options.subspace_dim.value_or(1) + 1;
    if (prompts.size() < min_prompts) {
        fail(ErrorCode::InvalidInput, "geometry sweep needs at least k + 1 prompts");
    }

    const GmmConditionalModel& model = pipeline.model();
    std::vector<PromptState> states;
    states.reserve(prompts.size());
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        PromptState s;
        s.encoded = pipeline.encoder().encode_full(prompts[p]);
        s.embedding = pipeline.pooler()(s.encoded.condition);
        auto clean_rng = make_rng(options.seed, kStreamClean + p);
        s.x0 = model.sample_clean(clean_rng, s.embedding);
        auto noise_rng = make_rng(options.seed, kStreamNoise + p);
        s.noise.resize(model.data_dim());
        fill_normal(noise_rng, s.noise);
        states.push_back(std::move(s));
    }

    GeometryReport report;
    for (std::size_t step = 0; step < schedule.steps(); ++step) {
        const double sigma = schedule.sigmas[step];
        std::vector<Vector> latents;
        std::vector<Prediction> eps_cond;
        PredictionStack stack{sigma, Matrix(states.size(), model.data_dim())};
        for (std::size_t p = 0; p < states.size(); ++p) {
            Vector x = states[p].x0;
            for (std::size_t i = 0; i < x.size(); ++i) {
                x[i] += sigma * states[p].noise[i];
            }
            Prediction eps = model.predict_noise(x, sigma, states[p].embedding);
            std::copy(eps.value.begin(), eps.value.end(), stack.rows.row(p).begin());
            latents.push_back(std::move(x));
            eps_cond.push_back(std::move(eps));
        }

        GeometryRecord record;
        record.sigma = sigma;
        record.subspace_dim = options.subspace_dim.value_or(default_subspace_dim(stack, options.energy_threshold));
        const Matrix basis = estimate_subspace(stack, record.subspace_dim);

        std::vector<Vector> cfg_deltas;
        std::vector<Vector> cdg_deltas;
        for (std::size_t p = 0; p < states.size(); ++p) {
            cfg_deltas.push_back(method_delta(pipeline, states[p], config_cfg, eps_cond[p], latents[p], sigma));
            cdg_deltas.push_back(method_delta(pipeline, states[p], config_cdg, eps_cond[p], latents[p], sigma));
        }
        record.cfg = evaluate(cfg_deltas, basis);
        record.cdg = evaluate(cdg_deltas, basis);
        report.records.push_back(std::move(record));
    }
    return report;
}

} // namespace cdg
