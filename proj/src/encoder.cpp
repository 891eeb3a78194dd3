#include "cdg/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <string>

#include "cdg/error.hpp"
#include "cdg/random.hpp"

namespace cdg {

namespace {

// Embedding scales: word tokens carry large-norm embeddings, special tokens
// start near the origin and acquire content through attention.
constexpr double kWordEmbeddingNorm = 2.0;
constexpr double kSpecialEmbeddingNorm = 0.3;
constexpr double kPositionalNorm = 0.3;
// Gain of the query projection; keys share most of it so attention favours
// similar tokens.
constexpr double kQueryGain = 1.75;
constexpr double kKeyNoise = 0.3;
constexpr double kOutputGain = 0.5;

enum Stream : std::uint64_t {
    kStreamEmbedding = 1ULL << 40,
    kStreamBlock = 2ULL << 40,
    kStreamPositional = 3ULL << 40,
    kStreamPooler = 4ULL << 40,
};

std::uint32_t word_id(const std::string& word, std::size_t vocab_size) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(word.data());
    const std::uint64_t h = fnv1a({bytes, word.size()});
    return kFirstWordId + static_cast<std::uint32_t>(h % (vocab_size - kFirstWordId));
}

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    fill_normal(rng, m.data(), stddev);
    return m;
}

void softmax_row(std::span<double> row) {
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (auto& v : row) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (auto& v : row) {
        v /= sum;
    }
}

} // namespace

void EncoderParams::validate() const {
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
        fail(ErrorCode::Config, "embed_dim must be a positive multiple of heads");
    }
    if (blocks < 1) {
        fail(ErrorCode::Config, "encoder needs at least one block");
    }
    if (seq_len < 4) {
        fail(ErrorCode::Config, "seq_len must be at least 4");
    }
    if (vocab_size <= kFirstWordId) {
        fail(ErrorCode::Config, "vocab_size too small");
    }
}

const char* to_string(TokenType t) { return t == TokenType::Content ? "content" : "ctxagg"; }

std::size_t TokenSequence::count(TokenType t) const {
    return static_cast<std::size_t>(std::count(types.begin(), types.end(), t));
}

TokenSequence tokenize(std::string_view prompt, const EncoderParams& params) {
    params.validate();
    std::vector<std::string> words;
    {
        std::istringstream in{std::string(prompt)};
        std::string w;
        while (in >> w) {
            std::transform(w.begin(), w.end(), w.begin(),
                           [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
            words.push_back(std::move(w));
        }
    }
    const std::size_t n = params.seq_len;
    if (words.size() > n - 2) {
        fail(ErrorCode::PromptTooLong, std::to_string(words.size()) + " words exceed the limit of " +
                                           std::to_string(n - 2));
    }

    TokenSequence seq;
    seq.ids.reserve(n);
    seq.types.reserve(n);
    seq.text.reserve(n);
    seq.ids.push_back(kBosId);
    seq.types.push_back(TokenType::CtxAgg);
    seq.text.emplace_back("<bos>");
    for (auto& w : words) {
        seq.ids.push_back(word_id(w, params.vocab_size));
        seq.types.push_back(TokenType::Content);
        seq.text.push_back(std::move(w));
    }
    seq.ids.push_back(kEosId);
    seq.types.push_back(TokenType::CtxAgg);
    seq.text.emplace_back("<eos>");
    while (seq.ids.size() < n) {
        seq.ids.push_back(kPadId);
        seq.types.push_back(TokenType::CtxAgg);
        seq.text.emplace_back("<pad>");
    }
    return seq;
}

TextEncoder::TextEncoder(EncoderParams params) : params_(params) {
    params_.validate();
    const std::size_t d = params_.embed_dim;
    const double stddev = kQueryGain / std::sqrt(static_cast<double>(d));
    for (std::size_t b = 0; b < params_.blocks; ++b) {
        auto rng = make_rng(params_.seed, kStreamBlock + b);
        BlockWeights w;
        w.wq = random_matrix(rng, d, d, stddev);
        w.wk = w.wq + random_matrix(rng, d, d, kKeyNoise * stddev);
        w.wv = random_matrix(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
        w.wo = random_matrix(rng, d, d, kOutputGain / std::sqrt(static_cast<double>(d)));
        weights_.push_back(std::move(w));
    }

    embeddings_ = Matrix(params_.vocab_size, d);
    {
        auto rng = make_rng(params_.seed, kStreamEmbedding);
        fill_normal(rng, embeddings_.data(), 1.0 / std::sqrt(static_cast<double>(d)));
        for (std::uint32_t id = 0; id < params_.vocab_size; ++id) {
            const double norm = id >= kFirstWordId ? kWordEmbeddingNorm : kSpecialEmbeddingNorm;
            for (auto& v : embeddings_.row(id)) {
                v *= norm;
            }
        }
    }

    positional_ = Matrix(params_.seq_len, d);
    for (std::size_t p = 0; p < params_.seq_len; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(p) * freq;
            positional_(p, i) = (i % 2 == 0 ? std::sin(angle) : std::cos(angle)) * kPositionalNorm *
                                std::sqrt(2.0 / static_cast<double>(d));
        }
    }

    null_ = encode_full(cdg::tokenize("", params_));
}

AttentionMap TextEncoder::attention_from(const BlockCache& cache, std::span<const double> query_bias) const {
    const std::size_t n = cache.queries.rows();
    const std::size_t dh = params_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    if (!query_bias.empty() && query_bias.size() != params_.embed_dim) {
        fail(ErrorCode::InvalidInput, "query bias length must equal embed_dim");
    }
    AttentionMap map;
    map.heads.reserve(params_.heads);
    Vector q(dh);
    for (std::size_t h = 0; h < params_.heads; ++h) {
        const std::size_t off = h * dh;
        Matrix a(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t t = 0; t < dh; ++t) {
                q[t] = (cache.queries(i, off + t) + (query_bias.empty() ? 0.0 : query_bias[off + t])) * scale;
            }
            auto row = a.row(i);
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = dot(q, cache.keys.row(j).subspan(off, dh));
            }
            softmax_row(row);
        }
        map.heads.push_back(std::move(a));
    }
    return map;
}

EncodedPrompt TextEncoder::encode_full(const TokenSequence& tokens) const {
    const std::size_t n = params_.seq_len;
    const std::size_t d = params_.embed_dim;
    const std::size_t dh = params_.head_dim();
    if (tokens.length() != n || tokens.types.size() != n) {
        fail(ErrorCode::InvalidInput, "token sequence length does not match seq_len");
    }

    Matrix x(n, d);
    for (std::size_t p = 0; p < n; ++p) {
        if (tokens.ids[p] >= params_.vocab_size) {
            fail(ErrorCode::InvalidInput, "token id outside the vocabulary");
        }
        const auto e = base_embedding(tokens.ids[p]);
        for (std::size_t i = 0; i < d; ++i) {
            x(p, i) = e[i] + positional_(p, i);
        }
    }

    EncodedPrompt out;
    out.tokens = tokens;
    for (const auto& w : weights_) {
        BlockCache cache{x * w.wq, x * w.wk};
        AttentionMap attn = attention_from(cache, {});
        const Matrix values = x * w.wv;
        Matrix mixed(n, d);
        for (std::size_t h = 0; h < params_.heads; ++h) {
            const Matrix& a = attn.heads[h];
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    const double aij = a(i, j);
                    for (std::size_t t = 0; t < dh; ++t) {
                        mixed(i, h * dh + t) += aij * values(j, h * dh + t);
                    }
                }
            }
        }
        x = x + mixed * w.wo;
        out.attention.push_back(std::move(attn));
        out.blocks.push_back(std::move(cache));
    }
    out.condition.embeddings = std::move(x);
    return out;
}

AttentionMap TextEncoder::block_attention(const EncodedPrompt& prompt, std::size_t block,
                                          std::span<const double> query_bias) const {
    if (block >= prompt.blocks.size()) {
        fail(ErrorCode::InvalidInput, "block index " + std::to_string(block) + " out of range");
    }
    if (query_bias.empty() || block >= prompt.attention.size()) {
        return attention_from(prompt.blocks[block], query_bias);
    }
    if (query_bias.size() != params_.embed_dim) {
        fail(ErrorCode::InvalidInput, "query bias length must equal embed_dim");
    }
    // A query bias adds the same logit b.k_j to every row, so the biased map is
    // the cached one with column j scaled by exp(b.k_j) and rows renormalized.
    const BlockCache& cache = prompt.blocks[block];
    const std::size_t n = cache.keys.rows();
    const std::size_t dh = params_.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    AttentionMap map = prompt.attention[block];
    Vector w(n);
    for (std::size_t h = 0; h < params_.heads; ++h) {
        const std::size_t off = h * dh;
        const auto b = query_bias.subspan(off, dh);
        for (std::size_t j = 0; j < n; ++j) {
            w[j] = dot(b, cache.keys.row(j).subspan(off, dh)) * scale;
        }
        const double mx = *std::max_element(w.begin(), w.end());
        for (auto& v : w) {
            v = std::exp(v - mx);
        }
        Matrix& a = map.heads[h];
        for (std::size_t i = 0; i < n; ++i) {
            auto row = a.row(i);
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] *= w[j];
                sum += row[j];
            }
            for (auto& v : row) {
                v /= sum;
            }
        }
    }
    return map;
}

Pooler::Pooler(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
    if (in_dim == 0 || out_dim == 0) {
        fail(ErrorCode::Config, "pooler dimensions must be positive");
    }
    auto rng = make_rng(seed, kStreamPooler);
    map_ = random_matrix(rng, out_dim, in_dim, 1.0 / std::sqrt(static_cast<double>(in_dim)));
}

Vector Pooler::operator()(const Condition& c) const {
    const Matrix& e = c.embeddings;
    if (e.cols() != in_dim() || e.rows() == 0) {
        fail(ErrorCode::InvalidInput, "pooler input width mismatch");
    }
    Vector mean(e.cols(), 0.0);
    for (std::size_t r = 0; r < e.rows(); ++r) {
        for (std::size_t i = 0; i < e.cols(); ++i) {
            mean[i] += e(r, i);
        }
    }
    for (auto& v : mean) {
        v /= static_cast<double>(e.rows());
    }
    return mat_vec(map_, mean);
}

} // namespace cdg
