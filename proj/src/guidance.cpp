#include "cdg/guidance.hpp"

#include <string>

#include "cdg/error.hpp"

namespace cdg {

const char* to_string(GuidanceMode mode) {
    switch (mode) {
    case GuidanceMode::None: return "none";
    case GuidanceMode::CFG: return "cfg";
    case GuidanceMode::CDG: return "cdg";
    case GuidanceMode::CFGStar: return "cfg_star";
    }
    return "none";
}

GuidanceMode parse_guidance_mode(std::string_view text) {
    if (text == "none") return GuidanceMode::None;
    if (text == "cfg") return GuidanceMode::CFG;
    if (text == "cdg") return GuidanceMode::CDG;
    if (text == "cfg_star" || text == "cfg*") return GuidanceMode::CFGStar;
    fail(ErrorCode::Config, "unknown guidance mode '" + std::string(text) + "'");
}

void GuidanceConfig::validate() const {
    if (!(guidance_scale >= 1.0)) {
        fail(ErrorCode::Config, "guidance_scale must be >= 1");
    }
    if (uses_degradation()) {
        if (!r_deg) {
            fail(ErrorCode::Config, std::string("mode ") + to_string(mode) + " requires r_deg");
        }
        if (!(*r_deg >= 0.0 && *r_deg <= 2.0)) {
            fail(ErrorCode::InvalidRatio, "r_deg must lie in [0, 2]");
        }
    }
}

namespace {

void require_compatible(const Prediction& a, const Prediction& b) {
    if (a.sigma != b.sigma) {
        fail(ErrorCode::InvalidInput, "predictions at different sigma");
    }
    if (a.value.size() != b.value.size()) {
        fail(ErrorCode::InvalidInput, "predictions of different dimension");
    }
}

Prediction extrapolate(const Prediction& anchor, const Prediction& negative, double w) {
    require_compatible(anchor, negative);
    Prediction out{anchor.value, anchor.sigma};
    const double gain = w - 1.0;
    for (std::size_t i = 0; i < out.value.size(); ++i) {
        out.value[i] += gain * (anchor.value[i] - negative.value[i]);
    }
    return out;
}

} // namespace

Prediction noise_from_denoised(std::span<const double> denoised, std::span<const double> x, double sigma) {
    if (denoised.size() != x.size() || !(sigma > 0.0)) {
        fail(ErrorCode::InvalidInput, "noise_from_denoised needs matching sizes and sigma > 0");
    }
    Prediction eps{Vector(x.size()), sigma};
    for (std::size_t i = 0; i < x.size(); ++i) {
        eps.value[i] = (x[i] - denoised[i]) / sigma;
    }
    return eps;
}

Vector denoised_from_noise(const Prediction& eps, std::span<const double> x) {
    if (eps.value.size() != x.size()) {
        fail(ErrorCode::InvalidInput, "denoised_from_noise size mismatch");
    }
    Vector d(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        d[i] = x[i] - eps.sigma * eps.value[i];
    }
    return d;
}

Vector score_from_noise(const Prediction& eps) {
    Vector s(eps.value.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = -eps.value[i] / eps.sigma;
    }
    return s;
}

Prediction combine_cfg(const Prediction& cond, const Prediction& uncond, double w) {
    return extrapolate(cond, uncond, w);
}

Prediction combine_cdg(const Prediction& cond, const Prediction& degraded, double w) {
    return extrapolate(cond, degraded, w);
}

Prediction combine_cfg_star(const Prediction& degraded, const Prediction& uncond, double w) {
    return extrapolate(degraded, uncond, w);
}

Vector guidance_delta(const Prediction& cond, const Prediction& negative) {
    require_compatible(cond, negative);
    Vector d(cond.value.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = cond.value[i] - negative.value[i];
    }
    return d;
}

} // namespace cdg
