#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdg/diffusion.hpp"
#include "cdg/guidance.hpp"
#include "cdg/linalg.hpp"

namespace cdg {

// Conditional noise predictions of many prompts at one noise level.
struct PredictionStack {
    double sigma = 0.0;
    Matrix rows;  // num_prompts x d_x
};

// Smallest k whose leading singular values hold `energy` of the squared mass,
// capped at num_prompts - 1 and at the numerical rank.
std::size_t default_subspace_dim(const PredictionStack& stack, double energy = 0.9);

// d_x x k orthonormal basis of the top-k right-singular subspace.
Matrix estimate_subspace(const PredictionStack& stack, std::size_t k);

// Mean sin^2 of the principal angles between span(delta) and span(basis).
// `delta` holds one guidance vector per column; a zero delta is an
// UndefinedMetric error. 1 means orthogonal.
double decoupling(const Matrix& delta, const Matrix& basis);
double decoupling(std::span<const double> delta, const Matrix& basis);

// ||P delta||_F^2 / ||delta||_F^2 for the orthogonal projector onto span(basis).
double interference(const Matrix& delta, const Matrix& basis);
double interference(std::span<const double> delta, const Matrix& basis);

struct MethodGeometry {
    double decoupling_mean = 0.0;
    double interference_mean = 0.0;
    std::size_t num_valid_prompts = 0;
    // Metrics of the stacked deltas of all valid prompts; NaN when none valid.
    double decoupling_pooled = 0.0;
    double interference_pooled = 0.0;
    // Per prompt, NaN where the delta vanished.
    std::vector<double> decoupling;
    std::vector<double> interference;
};

struct GeometryRecord {
    double sigma = 0.0;
    std::size_t subspace_dim = 0;
    MethodGeometry cfg;
    MethodGeometry cdg;
};

struct GeometryReport {
    std::vector<GeometryRecord> records;
};

struct GeometryOptions {
    std::optional<std::size_t> subspace_dim;
    double energy_threshold = 0.9;
    std::uint64_t seed = 0;
};

// For every positive sigma of the schedule: draw one noisy latent per prompt
// (shared by both methods), estimate S_c(sigma) from the stacked conditional
// predictions and score each method's guidance delta against it.
GeometryReport run_geometry_sweep(const CdgPipeline& pipeline, const SigmaSchedule& schedule,
                                  const std::vector<TokenSequence>& prompts, const GuidanceConfig& config_cfg,
                                  const GuidanceConfig& config_cdg, const GeometryOptions& options);

} // namespace cdg
