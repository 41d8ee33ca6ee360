#include "periloom/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "periloom/error.hpp"
#include "periloom/hash.hpp"
#include "periloom/random.hpp"

namespace periloom::text {

const std::vector<std::string>& Vocabulary::special_tokens() {
    static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                      "[MASK]", "[BOS]", "[EOS]"};
    return specials;
}

Vocabulary::Vocabulary() {
    for (const auto& s : special_tokens()) add(s);
}

void Vocabulary::add(const std::string& token) {
    if (index_.count(token)) return;
    index_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
}

int Vocabulary::lookup(const std::string& token) const {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    if (token.size() > 2 && token.front() == '[' && token.back() == ']') {
        std::string upper = token;
        for (auto& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
        const auto& sp = special_tokens();
        for (int i = 0; i < kNumSpecials; ++i)
            if (sp[static_cast<std::size_t>(i)] == upper) return i;
    }
    return kUnk;
}

nlohmann::ordered_json Vocabulary::to_json() const {
    nlohmann::ordered_json j;
    j["specials"] = special_tokens();
    j["tokens"] = std::vector<std::string>(tokens_.begin() + kNumSpecials, tokens_.end());
    j["min_count"] = min_count_;
    return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    try {
        if (j.at("specials").get<std::vector<std::string>>() != special_tokens())
            throw CompatibilityError("vocabulary: special token list differs from this build");
        v.min_count_ = j.at("min_count").get<int>();
        for (const auto& t : j.at("tokens").get<std::vector<std::string>>()) {
            if (v.index_.count(t)) throw ParseError(0, "vocabulary: duplicate token '" + t + "'");
            v.add(t);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(0, std::string("vocabulary: ") + e.what());
    }
    return v;
}

std::uint64_t Vocabulary::hash() const { return fnv1a64(to_json().dump()); }

Vocabulary build_vocab(const std::vector<const corpus::Dataset*>& corpora, int min_count) {
    if (min_count < 1) throw ValidationError("min_count", "must be >= 1");
    std::map<std::string, long long> counts;
    std::size_t docs = 0;
    for (const auto* ds : corpora) {
        docs += ds->size();
        for (const auto& note : ds->notes)
            for (auto& tok : corpus::tokenize(note.text)) ++counts[tok];
    }
    if (docs == 0) throw DataError("build_vocab: empty dataset");
    std::vector<std::pair<std::string, long long>> items(counts.begin(), counts.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    v.min_count_ = min_count;
    for (const auto& [tok, c] : items)
        if (c >= min_count && v.lookup(tok) == kUnk) v.add(tok);
    return v;
}

Vocabulary build_vocab(const corpus::Dataset& ds, int min_count) { return build_vocab({&ds}, min_count); }

int MaskedSeq::num_flagged() const {
    return static_cast<int>(std::count(flagged.begin(), flagged.end(), std::uint8_t{1}));
}

namespace {

TokenSeq pack(std::vector<int> ids, int max_len) {
    TokenSeq s;
    s.length = static_cast<int>(ids.size());
    s.ids = std::move(ids);
    s.ids.resize(static_cast<std::size_t>(max_len), kPad);
    s.attention.assign(static_cast<std::size_t>(max_len), 0);
    std::fill(s.attention.begin(), s.attention.begin() + s.length, std::uint8_t{1});
    return s;
}

}  // namespace

TokenSeq encode(const std::string& text, const Vocabulary& vocab, int max_len, Style style) {
    if (max_len < 3) throw ValidationError("max_len", "must be >= 3");
    const auto toks = corpus::tokenize(text);
    const int open = style == Style::Encoder ? kCls : kBos;
    const int close = style == Style::Encoder ? kSep : kEos;
    std::vector<int> ids{open};
    const auto body = std::min<std::size_t>(toks.size(), static_cast<std::size_t>(max_len - 2));
    for (std::size_t i = 0; i < body; ++i) ids.push_back(vocab.lookup(toks[i]));
    ids.push_back(close);
    return pack(std::move(ids), max_len);
}

TokenSeq encode_prompt(const std::string& text, const Vocabulary& vocab, int max_len, Style style) {
    if (max_len < 3) throw ValidationError("max_len", "must be >= 3");
    const auto toks = corpus::tokenize(text);
    if (toks.size() + 1 > static_cast<std::size_t>(max_len))
        throw ValidationError("prompt", "exceeds max_len " + std::to_string(max_len));
    std::vector<int> ids{style == Style::Encoder ? kCls : kBos};
    for (const auto& t : toks) ids.push_back(vocab.lookup(t));
    return pack(std::move(ids), max_len);
}

std::string decode(const TokenSeq& seq, const Vocabulary& vocab) {
    std::string out;
    for (int i = 0; i < seq.length; ++i) {
        const int id = seq.ids[static_cast<std::size_t>(i)];
        if (Vocabulary::is_special(id) && id != kUnk && id != kMask) continue;
        if (!out.empty()) out += ' ';
        out += vocab.token(id);
    }
    return out;
}

MaskedSeq apply_mlm_mask(const TokenSeq& seq, double rate, std::uint64_t seed, const Vocabulary& vocab) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("mlm_rate", "must be in [0,1]");
    MaskedSeq m;
    m.input = seq;
    m.targets.assign(seq.ids.size(), -1);
    m.flagged.assign(seq.ids.size(), 0);

    std::vector<int> eligible;
    for (int i = 0; i < seq.length; ++i)
        if (!Vocabulary::is_special(seq.ids[static_cast<std::size_t>(i)]) ||
            seq.ids[static_cast<std::size_t>(i)] == kUnk)
            eligible.push_back(i);
    if (rate == 0.0 || eligible.empty()) return m;

    Rng rng(mix_seed(seed, {0x31a}));
    std::vector<int> picked;
    while (picked.empty()) {
        for (int i : eligible)
            if (rng.bernoulli(rate)) picked.push_back(i);
    }
    const int n_regular = vocab.size() - kNumSpecials;
    for (int i : picked) {
        const auto p = static_cast<std::size_t>(i);
        m.flagged[p] = 1;
        m.targets[p] = seq.ids[p];
        const double u = rng.uniform();
        if (u < 0.8) {
            m.input.ids[p] = kMask;
        } else if (u < 0.9) {
            if (n_regular > 0) m.input.ids[p] = kNumSpecials + static_cast<int>(rng.below(static_cast<std::uint64_t>(n_regular)));
        }
    }
    return m;
}

}  // namespace periloom::text
