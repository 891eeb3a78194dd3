#pragma once

#include <vector>

#include "cdg/linalg.hpp"

namespace cdg {

// Per-head N x N self-attention weights (rows are query positions).
struct AttentionMap {
    std::vector<Matrix> heads;

    std::size_t num_heads() const noexcept { return heads.size(); }
    std::size_t size() const noexcept { return heads.empty() ? 0 : heads.front().rows(); }
};

} // namespace cdg
