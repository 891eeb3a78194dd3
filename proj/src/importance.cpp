#include "cdg/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdg/error.hpp"

namespace cdg {

namespace {

void l1_normalize(Vector& v) {
    const double sum = std::accumulate(v.begin(), v.end(), 0.0);
    for (auto& x : v) {
        x /= sum;
    }
}

} // namespace

ImportanceScores make_scores(Vector scores) {
    ImportanceScores out;
    out.sorted_indices.resize(scores.size());
    std::iota(out.sorted_indices.begin(), out.sorted_indices.end(), std::size_t{0});
    std::stable_sort(out.sorted_indices.begin(), out.sorted_indices.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    out.scores = std::move(scores);
    return out;
}

Matrix row_normalize(const Matrix& a) {
    if (a.rows() == 0 || a.rows() != a.cols()) {
        fail(ErrorCode::InvalidInput, "attention map must be square and non-empty");
    }
    Matrix out = a;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto row = out.row(i);
        double sum = 0.0;
        for (double v : row) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                fail(ErrorCode::InvalidInput, "attention entries must be finite and nonnegative");
            }
            sum += v;
        }
        if (sum <= 0.0) {
            fail(ErrorCode::DegenerateGraph, "row " + std::to_string(i) + " has no outgoing weight");
        }
        const double inv = 1.0 / sum;
        for (auto& v : row) {
            v *= inv;
        }
    }
    return out;
}

WprResult wpr_single_head(const Matrix& a, double epsilon, std::size_t max_iters) {
    const Matrix p = row_normalize(a);
    const std::size_t n = p.rows();
    Vector s(n, 1.0 / static_cast<double>(n));
    Vector next(n);

    const double* __restrict pd = p.data().data();

    WprResult result;
    for (std::size_t it = 1; it <= max_iters; ++it) {
        double* __restrict acc = next.data();
        std::fill(acc, acc + n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double si = s[i];
            const double* __restrict row = pd + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                acc[j] += row[j] * si;
            }
        }
        double total = 0.0;
        for (double v : next) {
            total += v;
        }
        const double inv = 1.0 / total;
        double step = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            next[j] *= inv;
            step += std::abs(next[j] - s[j]);
        }
        s.swap(next);
        result.iterations = it;
        if (step < epsilon) {
            result.converged = true;
            break;
        }
    }
    result.scores = make_scores(std::move(s));
    return result;
}

double head_variance(const ImportanceScores& scores) {
    const auto& s = scores.scores;
    if (s.empty()) {
        return 0.0;
    }
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    double acc = 0.0;
    for (double v : s) {
        acc += (v - mean) * (v - mean);
    }
    return acc / static_cast<double>(s.size());
}

double percentile(std::vector<double> values, double p) {
    if (values.empty()) {
        fail(ErrorCode::InvalidInput, "percentile of an empty set");
    }
    std::sort(values.begin(), values.end());
    const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

ImportanceScores fuse_heads(std::span<const ImportanceScores> per_head, const FusionConfig& cfg) {
    if (per_head.empty()) {
        fail(ErrorCode::InvalidInput, "fuse_heads needs at least one head");
    }
    const std::size_t n = per_head.front().scores.size();
    for (const auto& h : per_head) {
        if (h.scores.size() != n) {
            fail(ErrorCode::InvalidInput, "heads disagree on sequence length");
        }
    }

    std::vector<double> keep(per_head.size(), 1.0);
    if (cfg.enabled) {
        std::vector<double> variances;
        variances.reserve(per_head.size());
        for (const auto& h : per_head) {
            variances.push_back(head_variance(h));
        }
        const double v_min = cfg.v_min.value_or(percentile(variances, 10.0));
        const double v_max = cfg.v_max.value_or(percentile(variances, 90.0));
        if (v_min < 0.0 || v_min > v_max) {
            fail(ErrorCode::Config, "fusion bounds must satisfy 0 <= v_min <= v_max");
        }
        for (std::size_t h = 0; h < per_head.size(); ++h) {
            keep[h] = (variances[h] >= v_min && variances[h] <= v_max) ? 1.0 : 0.0;
        }
    }
    const double kept = std::accumulate(keep.begin(), keep.end(), 0.0);
    if (kept == 0.0) {
        fail(ErrorCode::AllHeadsFiltered, "no head variance inside [v_min, v_max]");
    }

    Vector fused(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t h = 0; h < per_head.size(); ++h) {
            const double s = per_head[h].scores[i];
            acc += s * s * keep[h];
        }
        fused[i] = std::sqrt(acc / kept);
    }
    l1_normalize(fused);
    return make_scores(std::move(fused));
}

ImportanceScores cross_attention_baseline(const Matrix& c) {
    if (c.cols() == 0) {
        fail(ErrorCode::InvalidInput, "cross attention has no text columns");
    }
    Vector s(c.cols(), 0.0);
    for (std::size_t j = 0; j < c.rows(); ++j) {
        for (std::size_t i = 0; i < c.cols(); ++i) {
            const double v = c(j, i);
            if (!(v >= 0.0)) {
                fail(ErrorCode::InvalidInput, "cross attention entries must be nonnegative");
            }
            s[i] += v;
        }
    }
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    if (total <= 0.0) {
        fail(ErrorCode::DegenerateGraph, "cross attention has no mass");
    }
    l1_normalize(s);
    return make_scores(std::move(s));
}

ImportanceResult compute_importance(const AttentionMap& map, const ImportanceOptions& options) {
    if (map.heads.empty()) {
        fail(ErrorCode::InvalidInput, "attention map has no heads");
    }
    ImportanceResult out;
    for (const auto& head : map.heads) {
        WprResult r = wpr_single_head(head, options.wpr.epsilon, options.wpr.max_iters);
        out.head_variances.push_back(head_variance(r.scores));
        out.head_converged.push_back(r.converged);
        out.per_head.push_back(std::move(r.scores));
    }
    out.fused = fuse_heads(out.per_head, options.fusion);
    return out;
}

} // namespace cdg
