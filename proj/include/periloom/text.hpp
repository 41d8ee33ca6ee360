#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "periloom/corpus.hpp"

namespace periloom::text {

/// Special ids are fixed and occupy the lowest slots in this order.
enum SpecialId : int { kPad = 0, kUnk = 1, kCls = 2, kSep = 3, kMask = 4, kBos = 5, kEos = 6 };
inline constexpr int kNumSpecials = 7;

class Vocabulary {
public:
    Vocabulary();

    static const std::vector<std::string>& special_tokens();

    int size() const { return static_cast<int>(tokens_.size()); }
    int min_count() const { return min_count_; }

    /// UNK for unknown tokens. Special literals ("[MASK]" etc.) match case-insensitively.
    int lookup(const std::string& token) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    bool contains(const std::string& token) const { return index_.count(token) > 0; }
    static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

    nlohmann::ordered_json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);
    std::uint64_t hash() const;

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_ && min_count_ == o.min_count_; }

    friend Vocabulary build_vocab(const corpus::Dataset& ds, int min_count);
    friend Vocabulary build_vocab(const std::vector<const corpus::Dataset*>& corpora, int min_count);

private:
    void add(const std::string& token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int min_count_ = 1;
};

/// Frequency-descending, then lexicographic. Tokens below min_count map to UNK.
Vocabulary build_vocab(const corpus::Dataset& ds, int min_count);
/// Pooled counts over several corpora.
Vocabulary build_vocab(const std::vector<const corpus::Dataset*>& corpora, int min_count);

enum class Style { Encoder, Decoder };

struct TokenSeq {
    std::vector<int> ids;             // exactly max_len
    std::vector<std::uint8_t> attention;
    int length = 0;                   // positions >= length are PAD

    std::vector<int> active() const { return {ids.begin(), ids.begin() + length}; }
    bool operator==(const TokenSeq&) const = default;
};

struct MaskedSeq {
    TokenSeq input;                   // post-corruption
    std::vector<int> targets;         // original id at flagged positions, -1 elsewhere
    std::vector<std::uint8_t> flagged;

    int num_flagged() const;
    bool operator==(const MaskedSeq&) const = default;
};

/// Encoder: CLS ... SEP; Decoder: BOS ... EOS. Truncation keeps the prefix.
TokenSeq encode(const std::string& text, const Vocabulary& vocab, int max_len, Style style);

/// Encoder/decoder prompt without the closing SEP/EOS (used for completion).
TokenSeq encode_prompt(const std::string& text, const Vocabulary& vocab, int max_len, Style style);

/// Space-joined non-special tokens.
std::string decode(const TokenSeq& seq, const Vocabulary& vocab);

/// Each eligible position (not special, not PAD) is flagged with probability
/// `rate`; flagged inputs become MASK (80%), a random non-special token (10%)
/// or stay unchanged (10%). Resamples until at least one position is flagged
/// when rate > 0 and anything is eligible.
MaskedSeq apply_mlm_mask(const TokenSeq& seq, double rate, std::uint64_t seed, const Vocabulary& vocab);

}  // namespace periloom::text
