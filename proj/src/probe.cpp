#include "periloom/probe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "periloom/corpus.hpp"
#include "periloom/error.hpp"
#include "periloom/hash.hpp"

namespace periloom::probe {

namespace {

template <class T>
nlohmann::ordered_json provenance_of(const finetune::FineTunedModel<T>& m) {
    return {{"model_id", finetune::model_id(m)},
            {"variant", transformer::to_string(m.body.arch.variant)},
            {"vocab_hash", hex64(m.vocab.hash())},
            {"model", m.provenance}};
}

// Logits of every packed row for one sequence, dropout off.
template <class T>
std::vector<T> sequence_logits(const transformer::Model<T>& body, const std::vector<int>& ids) {
    transformer::Batch batch;
    batch.ids.push_back(ids);
    const auto fwd = transformer::forward(body, batch);
    return transformer::full_logits(body, fwd);
}

}  // namespace

template <class T>
ProbeResult fill_mask(const finetune::FineTunedModel<T>& model, const std::string& prompt, int k) {
    const auto& arch = model.body.arch;
    if (arch.variant != transformer::Variant::Encoder)
        throw CompatibilityError("fill_mask needs an encoder model, got a decoder");
    if (k < 1) throw ValidationError("k", "must be >= 1");
    const auto toks = corpus::tokenize(prompt);
    if (toks.size() + 2 > static_cast<std::size_t>(arch.max_len))
        throw ValidationError("prompt", "has " + std::to_string(toks.size()) + " tokens; at most " +
                                            std::to_string(arch.max_len - 2) + " fit");
    const auto seq = text::encode(prompt, model.vocab, arch.max_len, text::Style::Encoder);
    const auto ids = seq.active();
    std::vector<std::size_t> masks;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == text::kMask) masks.push_back(i);
    if (masks.size() != 1)
        throw ValidationError("prompt", "needs exactly one [MASK], found " + std::to_string(masks.size()));

    const auto logits = sequence_logits(model.body, ids);
    const auto V = static_cast<std::size_t>(arch.vocab_size);
    const T* row = logits.data() + masks[0] * V;

    // Softmax in double for stable reporting.
    const double mx = static_cast<double>(*std::max_element(row, row + V));
    std::vector<double> p(V);
    double z = 0.0;
    for (std::size_t v = 0; v < V; ++v) z += p[v] = std::exp(static_cast<double>(row[v]) - mx);
    for (auto& x : p) x /= z;

    std::vector<int> order(V);
    std::iota(order.begin(), order.end(), 0);
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), V);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(kk), order.end(), [&](int a, int b) {
        const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
        return p[ua] != p[ub] ? p[ua] > p[ub] : a < b;
    });

    ProbeResult r;
    r.kind = "fill_mask";
    r.prompt = prompt;
    for (std::size_t i = 0; i < kk; ++i)
        r.candidates.push_back({order[i], model.vocab.token(order[i]), p[static_cast<std::size_t>(order[i])]});
    r.provenance = provenance_of(model);
    return r;
}

template <class T>
ProbeResult complete(const finetune::FineTunedModel<T>& model, const std::string& prompt, int max_new_tokens) {
    const auto& arch = model.body.arch;
    if (arch.variant != transformer::Variant::Decoder)
        throw CompatibilityError("complete needs a decoder model, got an encoder");
    if (max_new_tokens < 1) throw ValidationError("max_new_tokens", "must be >= 1");
    if (corpus::tokenize(prompt).empty()) throw ValidationError("prompt", "must not be empty");
    auto ids = text::encode_prompt(prompt, model.vocab, arch.max_len, text::Style::Decoder).active();

    ProbeResult r;
    r.kind = "complete";
    r.prompt = prompt;
    r.stop_reason = "budget";
    const auto V = static_cast<std::size_t>(arch.vocab_size);
    for (int step = 0; step < max_new_tokens; ++step) {
        if (ids.size() >= static_cast<std::size_t>(arch.max_len)) {
            r.stop_reason = "max_len";
            break;
        }
        const auto logits = sequence_logits(model.body, ids);
        const T* row = logits.data() + (ids.size() - 1) * V;
        // max_element returns the first maximum, so ties go to the lowest id.
        const int next = static_cast<int>(std::max_element(row, row + V) - row);
        if (next == text::kEos) {
            r.stop_reason = "eos";
            break;
        }
        ids.push_back(next);
        r.generated.push_back(next);
    }

    for (int id : r.generated) {
        if (!r.continuation.empty()) r.continuation += ' ';
        r.continuation += model.vocab.token(id);
    }
    r.provenance = provenance_of(model);
    return r;
}

nlohmann::ordered_json ProbeResult::to_json() const {
    nlohmann::ordered_json j;
    j["format"] = "periloom.probe";
    j["kind"] = kind;
    j["prompt"] = prompt;
    if (kind == "fill_mask") {
        j["candidates"] = nlohmann::ordered_json::array();
        for (const auto& c : candidates)
            j["candidates"].push_back({{"id", c.id}, {"token", c.token}, {"probability", c.probability}});
    } else {
        j["generated"] = generated;
        j["continuation"] = continuation;
        j["stop_reason"] = stop_reason;
    }
    j["provenance"] = provenance;
    return j;
}

ProbeResult ProbeResult::from_json(const nlohmann::ordered_json& j) {
    try {
        if (j.value("format", std::string{}) != "periloom.probe")
            throw DataError("probe result: missing format tag 'periloom.probe'");
        ProbeResult r;
        r.kind = j.at("kind").get<std::string>();
        r.prompt = j.at("prompt").get<std::string>();
        if (r.kind == "fill_mask") {
            for (const auto& c : j.at("candidates"))
                r.candidates.push_back(
                    {c.at("id").get<int>(), c.at("token").get<std::string>(), c.at("probability").get<double>()});
            if (r.candidates.empty()) throw DataError("probe result: no candidates");
            for (std::size_t i = 1; i < r.candidates.size(); ++i)
                if (r.candidates[i].probability > r.candidates[i - 1].probability)
                    throw DataError("probe result: candidate probabilities are not descending");
        } else if (r.kind == "complete") {
            r.generated = j.at("generated").get<std::vector<int>>();
            r.continuation = j.at("continuation").get<std::string>();
            r.stop_reason = j.at("stop_reason").get<std::string>();
        } else {
            throw DataError("probe result: unknown kind '" + r.kind + "'");
        }
        if (j.contains("provenance")) r.provenance = j.at("provenance");
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("probe result: ") + e.what());
    }
}

std::string ProbeResult::to_text() const {
    std::ostringstream out;
    out << "prompt: " << prompt << "\n";
    if (kind == "fill_mask") {
        int rank = 1;
        for (const auto& c : candidates) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%8.6f", c.probability);
            out << "  " << rank++ << ". " << c.token << "  " << buf << "\n";
        }
    } else {
        out << "completion: " << prompt << " [" << continuation << "]\n";
        out << "stopped: " << stop_reason << " after " << generated.size() << " token(s)\n";
    }
    return out.str();
}

template ProbeResult fill_mask<float>(const finetune::FineTunedModel<float>&, const std::string&, int);
template ProbeResult fill_mask<double>(const finetune::FineTunedModel<double>&, const std::string&, int);
template ProbeResult complete<float>(const finetune::FineTunedModel<float>&, const std::string&, int);
template ProbeResult complete<double>(const finetune::FineTunedModel<double>&, const std::string&, int);

}  // namespace periloom::probe
