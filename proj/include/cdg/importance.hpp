#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cdg/attention_map.hpp"
#include "cdg/linalg.hpp"

namespace cdg {

struct ImportanceScores {
    Vector scores;                            // nonnegative, sums to 1
    std::vector<std::size_t> sorted_indices;  // descending score, ties by position
};

// Stable descending ranking of already-normalized scores.
ImportanceScores make_scores(Vector scores);

struct WprOptions {
    double epsilon = 1e-8;
    std::size_t max_iters = 1000;
};

struct WprResult {
    ImportanceScores scores;
    bool converged = false;
    std::size_t iterations = 0;
};

// Row-normalizes `a` (every row must have positive mass).
Matrix row_normalize(const Matrix& a);

// Weighted PageRank on the attention graph: s <- row_norm(a)^T s, L1
// normalized, from the uniform vector until the L1 step is below epsilon.
// No damping; strictly positive maps are irreducible and aperiodic.
WprResult wpr_single_head(const Matrix& a, double epsilon = 1e-8, std::size_t max_iters = 1000);

// Population variance of the score values.
double head_variance(const ImportanceScores& scores);

struct FusionConfig {
    bool enabled = false;
    // Unset bounds default to the 10th/90th percentile of the observed head
    // variances at fusion time.
    std::optional<double> v_min;
    std::optional<double> v_max;
};

// Linear-interpolated percentile, p in [0, 100].
double percentile(std::vector<double> values, double p);

// Variance-filtered root-mean-square fusion, L1-renormalized.
ImportanceScores fuse_heads(std::span<const ImportanceScores> per_head, const FusionConfig& cfg);

// Column sums of an N_img x N_text cross-attention matrix.
ImportanceScores cross_attention_baseline(const Matrix& c);

struct ImportanceOptions {
    WprOptions wpr;
    FusionConfig fusion;
};

struct ImportanceResult {
    std::vector<ImportanceScores> per_head;
    std::vector<double> head_variances;
    std::vector<bool> head_converged;
    ImportanceScores fused;
};

// Full pipeline for one attention map: WPR per head then fusion.
ImportanceResult compute_importance(const AttentionMap& map, const ImportanceOptions& options);

} // namespace cdg
