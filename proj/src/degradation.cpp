#include "cdg/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdg/error.hpp"

namespace cdg {

namespace {

// Snaps products like 0.7 * 10 = 6.9999999999999991 back onto the integer the
// caller meant before flooring.
constexpr double kFloorSlack = 1e-9;

} // namespace

DegradationRatios map_ratio(double r_deg) {
    if (!(r_deg >= 0.0 && r_deg <= 2.0)) {
        fail(ErrorCode::InvalidRatio, "R_deg must lie in [0, 2], got " + std::to_string(r_deg));
    }
    return {r_deg, std::min(r_deg, 1.0), std::max(r_deg - 1.0, 0.0)};
}

std::size_t replacement_count(double ratio, std::size_t count) {
    const double k = std::floor(ratio * static_cast<double>(count) + kFloorSlack);
    return std::min(count, static_cast<std::size_t>(std::max(k, 0.0)));
}

bool is_type_only(const DegradationRatios& ratios) { return ratios.r_content == 1.0 && ratios.r_ctxagg == 0.0; }

DegradationMask build_mask(const TokenSequence& tokens, const ImportanceScores& importance,
                           const DegradationRatios& ratios) {
    const std::size_t n = tokens.length();
    if (importance.scores.size() != n || importance.sorted_indices.size() != n) {
        fail(ErrorCode::InvalidInput, "importance does not cover every token position");
    }

    DegradationMask mask;
    mask.bits.assign(n, 1);
    mask.rank_within_type.assign(n, 0);
    mask.k_content = replacement_count(ratios.r_content, tokens.count(TokenType::Content));
    mask.k_ctxagg = replacement_count(ratios.r_ctxagg, tokens.count(TokenType::CtxAgg));

    std::size_t content_rank = 0;
    std::size_t ctxagg_rank = 0;
    for (std::size_t pos : importance.sorted_indices) {
        if (pos >= n) {
            fail(ErrorCode::InvalidInput, "ranking references position out of range");
        }
        const bool content = tokens.types[pos] == TokenType::Content;
        const std::size_t rank = content ? ++content_rank : ++ctxagg_rank;
        mask.rank_within_type[pos] = rank;
        if (rank <= (content ? mask.k_content : mask.k_ctxagg)) {
            mask.bits[pos] = 0;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (mask.bits[i] == 0) {
            mask.replaced_indices.push_back(i);
        }
    }
    return mask;
}

DegradationMask build_type_only_mask(const TokenSequence& tokens) {
    const std::size_t n = tokens.length();
    DegradationMask mask;
    mask.bits.assign(n, 1);
    mask.rank_within_type.assign(n, 0);
    mask.k_content = tokens.count(TokenType::Content);
    // Positional order stands in for the within-type ranks; every Content
    // token is replaced so the ranking carries no decision.
    std::size_t content_rank = 0;
    std::size_t ctxagg_rank = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (tokens.types[i] == TokenType::Content) {
            mask.bits[i] = 0;
            mask.rank_within_type[i] = ++content_rank;
            mask.replaced_indices.push_back(i);
        } else {
            mask.rank_within_type[i] = ++ctxagg_rank;
        }
    }
    return mask;
}

Condition apply_mask(const Condition& c, const Condition& null, const DegradationMask& mask) {
    const Matrix& a = c.embeddings;
    const Matrix& b = null.embeddings;
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() != mask.size()) {
        fail(ErrorCode::InvalidInput, "condition, null condition and mask shapes disagree");
    }
    Condition out{a};
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.bits[i] == 0) {
            auto src = b.row(i);
            std::copy(src.begin(), src.end(), out.embeddings.row(i).begin());
        }
    }
    return out;
}

} // namespace cdg
