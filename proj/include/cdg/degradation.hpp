#pragma once

#include <cstdint>
#include <vector>

#include "cdg/encoder.hpp"
#include "cdg/importance.hpp"

namespace cdg {

// Unified ratio in [0, 2] split into per-type replacement ratios. Content
// tokens are exhausted before any context-aggregating token is touched.
struct DegradationRatios {
    double r_deg = 0.0;
    double r_content = 0.0;
    double r_ctxagg = 0.0;
};

DegradationRatios map_ratio(double r_deg);

struct DegradationMask {
    std::vector<std::uint8_t> bits;  // 1 keeps c_i, 0 replaces it with the null row
    std::size_t k_content = 0;
    std::size_t k_ctxagg = 0;
    std::vector<std::size_t> replaced_indices;  // ascending
    std::vector<std::size_t> rank_within_type;  // 1-based, informational

    std::size_t size() const noexcept { return bits.size(); }

    // Masks are equal when they replace the same positions.
    friend bool operator==(const DegradationMask& a, const DegradationMask& b) {
        return a.bits == b.bits && a.k_content == b.k_content && a.k_ctxagg == b.k_ctxagg &&
               a.replaced_indices == b.replaced_indices;
    }
};

// floor(ratio * count), tolerant to representation error in the ratio.
std::size_t replacement_count(double ratio, std::size_t count);

DegradationMask build_mask(const TokenSequence& tokens, const ImportanceScores& importance,
                           const DegradationRatios& ratios);

// Mask for R_deg == 1 from token types alone: every Content position is
// replaced and every CtxAgg position kept.
DegradationMask build_type_only_mask(const TokenSequence& tokens);

// True when the ratios need no importance ranking (R_deg == 1).
bool is_type_only(const DegradationRatios& ratios);

// Row i: m_i * c_i + (1 - m_i) * null_i.
Condition apply_mask(const Condition& c, const Condition& null, const DegradationMask& mask);

} // namespace cdg
