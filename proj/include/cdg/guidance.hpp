#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "cdg/linalg.hpp"

namespace cdg {

enum class GuidanceMode { None, CFG, CDG, CFGStar };

const char* to_string(GuidanceMode mode);
GuidanceMode parse_guidance_mode(std::string_view text);

struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::CDG;
    double guidance_scale = 7.0;  // w; 1 disables guidance
    std::optional<double> r_deg = 1.0;
    std::size_t lambda_block = 1;
    bool reuse_first_step_mask = true;

    bool uses_degradation() const noexcept {
        return mode == GuidanceMode::CDG || mode == GuidanceMode::CFGStar;
    }
    void validate() const;
};

// Noise-space prediction at noise level sigma.
struct Prediction {
    Vector value;
    double sigma = 1.0;
};

// Conversions at the denoiser / noise / score boundaries for latent x.
Prediction noise_from_denoised(std::span<const double> denoised, std::span<const double> x, double sigma);
Vector denoised_from_noise(const Prediction& eps, std::span<const double> x);
// (D - x) / sigma^2 == -eps / sigma
Vector score_from_noise(const Prediction& eps);

// cond + (w - 1) * (cond - uncond)
Prediction combine_cfg(const Prediction& cond, const Prediction& uncond, double w);
// cond + (w - 1) * (cond - degraded)
Prediction combine_cdg(const Prediction& cond, const Prediction& degraded, double w);
// degraded + (w - 1) * (degraded - uncond)
Prediction combine_cfg_star(const Prediction& degraded, const Prediction& uncond, double w);

// cond - negative
Vector guidance_delta(const Prediction& cond, const Prediction& negative);

} // namespace cdg
