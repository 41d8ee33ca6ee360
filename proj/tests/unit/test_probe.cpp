#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "periloom/error.hpp"
#include "periloom/probe.hpp"

using namespace periloom;
using namespace periloom::probe;

namespace {

const char* kPrompt = "[MASK] underwent surgery to remove tumor.";

corpus::Dataset corpus_for(std::uint64_t seed) {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = 80;
    spec.vocab_size = 100;
    spec.length_mean = 6.0;
    spec.length_sd = 2.0;
    spec.seed = seed;
    return corpus::generate_corpus(spec);
}

finetune::FineTunedModel<double> model_for(transformer::Variant v, int max_len = 12) {
    const auto ds = corpus_for(5);
    auto vocab = text::build_vocab(ds, 1);
    transformer::ArchConfig a;
    a.variant = v;
    a.layers = 1;
    a.d_model = 16;
    a.heads = 2;
    a.d_ff = 32;
    a.max_len = max_len;
    a.vocab_size = vocab.size();
    a.dropout = 0.0;
    a.seed = 11;
    finetune::FineTuneConfig c;
    c.epochs = 2;
    c.batch_size = 16;
    c.seed = 2;
    return finetune::pretrain<double>(a, ds, vocab, c);
}

}  // namespace

TEST_CASE("fill_mask ranks the vocabulary at the mask") {
    const auto m = model_for(transformer::Variant::Encoder);
    const auto r = fill_mask(m, kPrompt, 5);
    CHECK(r.kind == "fill_mask");
    REQUIRE(r.candidates.size() == 5);
    double total = 0.0;
    for (std::size_t i = 0; i < r.candidates.size(); ++i) {
        total += r.candidates[i].probability;
        CHECK(r.candidates[i].token == m.vocab.token(r.candidates[i].id));
        if (i > 0) CHECK(r.candidates[i].probability <= r.candidates[i - 1].probability);
    }
    CHECK(total <= 1.0);
    CHECK(r.provenance["model_id"] == finetune::model_id(m));

    const auto all = fill_mask(m, kPrompt, m.vocab.size());
    CHECK(all.candidates.size() == static_cast<std::size_t>(m.vocab.size()));
    const double sum = std::accumulate(all.candidates.begin(), all.candidates.end(), 0.0,
                                       [](double s, const Candidate& c) { return s + c.probability; });
    CHECK(std::abs(sum - 1.0) < 1e-6);
    CHECK(fill_mask(m, kPrompt, 100000).candidates.size() == all.candidates.size());

    // Cross-check the top candidate with the raw logits at the mask (position 1, after CLS).
    const auto seq = text::encode(kPrompt, m.vocab, m.body.arch.max_len, text::Style::Encoder);
    transformer::Batch batch;
    batch.ids.push_back(seq.active());
    const auto logits = transformer::full_logits(m.body, transformer::forward(m.body, batch));
    const auto V = static_cast<std::size_t>(m.vocab.size());
    const auto* row = logits.data() + 1 * V;
    CHECK(r.candidates[0].id == static_cast<int>(std::max_element(row, row + V) - row));

    CHECK(fill_mask(m, kPrompt, 3).candidates == fill_mask(m, kPrompt, 3).candidates);
    CHECK(fill_mask(m, "The [mask] was stable", 1).candidates.size() == 1);
}

TEST_CASE("fill_mask argument errors") {
    const auto m = model_for(transformer::Variant::Encoder);
    CHECK_THROWS_AS(fill_mask(m, "no mask here", 3), ValidationError);
    CHECK_THROWS_AS(fill_mask(m, "[MASK] and [MASK]", 3), ValidationError);
    CHECK_THROWS_AS(fill_mask(m, kPrompt, 0), ValidationError);
    CHECK_THROWS_AS(fill_mask(m, "[MASK] a b c d e f g h i j k l", 3), ValidationError);
    const auto d = model_for(transformer::Variant::Decoder);
    CHECK_THROWS_AS(fill_mask(d, kPrompt, 3), CompatibilityError);
    CHECK_THROWS_AS(complete(m, "patient", 3), CompatibilityError);
}

TEST_CASE("greedy completion is deterministic and prefix monotone") {
    const auto m = model_for(transformer::Variant::Decoder, 16);
    const std::string prompt = "patient underwent";
    const auto a = complete(m, prompt, 6);
    const auto b = complete(m, prompt, 6);
    CHECK(a.generated == b.generated);
    CHECK(a.continuation == b.continuation);

    const auto one = complete(m, prompt, 1);
    CHECK(one.generated.size() + (one.stop_reason == "eos" ? 1u : 0u) == 1u);

    std::vector<int> prev;
    for (int budget = 1; budget <= 8; ++budget) {
        const auto r = complete(m, prompt, budget);
        CHECK(r.generated.size() <= static_cast<std::size_t>(budget));
        REQUIRE(r.generated.size() >= prev.size());
        CHECK(std::equal(prev.begin(), prev.end(), r.generated.begin()));
        if (r.stop_reason == "budget") CHECK(r.generated.size() == static_cast<std::size_t>(budget));
        prev = r.generated;
    }
}

TEST_CASE("completion respects max_len") {
    const int max_len = 8;
    const auto m = model_for(transformer::Variant::Decoder, max_len);
    // BOS plus six words ends at max_len - 1.
    const auto r = complete(m, "a b c d e f", 5);
    CHECK(r.generated.size() <= 1);
    if (r.generated.size() == 1) CHECK(r.stop_reason == "max_len");
    CHECK_THROWS_AS(complete(m, "a b c d e f g h", 1), ValidationError);
    CHECK_THROWS_AS(complete(m, "   ", 1), ValidationError);
    CHECK_THROWS_AS(complete(m, "a", 0), ValidationError);
}

TEST_CASE("probe results round trip through JSON") {
    const auto enc = model_for(transformer::Variant::Encoder);
    const auto dec = model_for(transformer::Variant::Decoder);
    for (const auto& r : {fill_mask(enc, kPrompt, 4), complete(dec, "patient underwent", 4)}) {
        const auto back = ProbeResult::from_json(nlohmann::json::parse(r.to_json().dump()));
        CHECK(nlohmann::json(back.to_json()) == nlohmann::json(r.to_json()));
        CHECK(r.to_text().find("prompt: ") == 0);
    }
    CHECK_THROWS_AS(ProbeResult::from_json(nlohmann::json::parse(R"({"kind":"fill_mask"})")), DataError);
}
