#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "periloom/finetune.hpp"

namespace periloom::probe {

struct Candidate {
    int id = 0;
    std::string token;
    double probability = 0.0;

    bool operator==(const Candidate&) const = default;
};

/// Output of either probe. Fill-mask fills `candidates`; completion fills
/// `generated`, `continuation` and `stop_reason`.
struct ProbeResult {
    std::string kind;  // "fill_mask" or "complete"
    std::string prompt;
    std::vector<Candidate> candidates;  // probability descending, ties by id
    std::vector<int> generated;
    std::string continuation;
    std::string stop_reason;  // "eos", "budget" or "max_len"
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

    nlohmann::ordered_json to_json() const;
    static ProbeResult from_json(const nlohmann::ordered_json& j);
    /// Human-readable rendering for manual review.
    std::string to_text() const;
};

/// Top-k tokens at the single [MASK] position of an encoder prompt.
/// ValidationError for zero or several masks, k < 1, or an over-long prompt;
/// CompatibilityError for a decoder model. k is clamped to the vocabulary size.
template <class T>
ProbeResult fill_mask(const finetune::FineTunedModel<T>& model, const std::string& prompt, int k);

/// Greedy continuation of a decoder prompt; stops at EOS, after
/// max_new_tokens, or when the sequence reaches max_len.
template <class T>
ProbeResult complete(const finetune::FineTunedModel<T>& model, const std::string& prompt, int max_new_tokens);

}  // namespace periloom::probe
