#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cdg/attention_map.hpp"
#include "cdg/linalg.hpp"

namespace cdg {

struct EncoderParams {
    std::size_t vocab_size = 4096;
    std::size_t embed_dim = 32;
    std::size_t heads = 4;
    std::size_t blocks = 2;
    std::size_t seq_len = 16;
    std::uint64_t seed = 0;

    std::size_t head_dim() const noexcept { return embed_dim / heads; }
    void validate() const;
};

enum class TokenType { Content, CtxAgg };

const char* to_string(TokenType t);

inline constexpr std::uint32_t kPadId = 0;
inline constexpr std::uint32_t kBosId = 1;
inline constexpr std::uint32_t kEosId = 2;
inline constexpr std::uint32_t kFirstWordId = 3;

struct TokenSequence {
    std::vector<std::uint32_t> ids;
    std::vector<TokenType> types;
    std::vector<std::string> text;  // "<bos>", word, "<eos>", "<pad>"

    std::size_t length() const noexcept { return ids.size(); }
    std::size_t count(TokenType t) const;
};

// Lowercased whitespace-split words become Content tokens between BOS and
// EOS; PAD fills the remainder. Throws PromptTooLong past seq_len - 2 words.
TokenSequence tokenize(std::string_view prompt, const EncoderParams& params);

struct Condition {
    Matrix embeddings;  // N x d
};

// Per-block cached projections; attention can be recomputed with a query bias
// without re-running the block.
struct BlockCache {
    Matrix queries;  // N x d, heads are contiguous column slices
    Matrix keys;     // N x d
};

struct EncodedPrompt {
    TokenSequence tokens;
    Condition condition;
    std::vector<AttentionMap> attention;  // one per block
    std::vector<BlockCache> blocks;
};

class TextEncoder {
public:
    explicit TextEncoder(EncoderParams params);

    const EncoderParams& params() const noexcept { return params_; }

    TokenSequence tokenize(std::string_view prompt) const { return cdg::tokenize(prompt, params_); }
    EncodedPrompt encode_full(const TokenSequence& tokens) const;
    Condition encode(const TokenSequence& tokens) const { return encode_full(tokens).condition; }

    // Encoding of the empty prompt, computed once at construction.
    const Condition& null_condition() const noexcept { return null_.condition; }
    const EncodedPrompt& null_prompt() const noexcept { return null_; }

    // Block attention with `query_bias` (length d, or empty) added to every
    // query row before the softmax.
    AttentionMap block_attention(const EncodedPrompt& prompt, std::size_t block,
                                 std::span<const double> query_bias) const;

    // Same map computed directly from the cached queries and keys.
    AttentionMap attention_from(const BlockCache& cache, std::span<const double> query_bias) const;

private:
    struct BlockWeights {
        Matrix wq, wk, wv, wo;  // d x d
    };

    std::span<const double> base_embedding(std::uint32_t id) const { return embeddings_.row(id); }

    EncoderParams params_;
    std::vector<BlockWeights> weights_;
    Matrix embeddings_;  // vocab_size x d
    Matrix positional_;
    EncodedPrompt null_;
};

// Mean over token rows followed by a fixed seeded linear map to out_dim.
class Pooler {
public:
    Pooler(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed);

    std::size_t in_dim() const noexcept { return map_.cols(); }
    std::size_t out_dim() const noexcept { return map_.rows(); }

    Vector operator()(const Condition& c) const;

private:
    Matrix map_;  // out_dim x in_dim
};

} // namespace cdg
