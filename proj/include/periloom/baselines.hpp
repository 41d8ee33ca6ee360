#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "periloom/corpus.hpp"
#include "periloom/tensor_io.hpp"
#include "periloom/text.hpp"

namespace periloom::baselines {

enum class Method { CBOW, GloVe, FastText, Doc2Vec };

const char* to_string(Method m);
Method method_from_string(const std::string& s);

struct BaselineHyperparams {
    int dim = 64;
    int window = 4;
    int epochs = 15;
    double learning_rate = 0.025;
    int negatives = 5;
    double x_max = 100.0;  // GloVe weighting cutoff
    double alpha = 0.75;   // GloVe weighting exponent
    int ngram_min = 3;     // fastText character n-grams
    int ngram_max = 5;
    int buckets = 2048;
    int min_count = 1;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static BaselineHyperparams from_json(const nlohmann::json& j);
};

/// Trained word (and, per method, n-gram / document) tables. Row-major.
struct EmbeddingMatrix {
    Method method = Method::CBOW;
    BaselineHyperparams hp;
    text::Vocabulary vocab;
    int dim = 0;
    std::vector<float> words;   // V x dim: input vectors (GloVe: w + w~)
    std::vector<float> output;  // V x dim: output vectors (word2vec family), used by doc2vec inference
    std::vector<float> ngrams;  // buckets x dim (fastText)
    std::vector<float> docs;    // n_docs x dim, training documents (doc2vec)
    std::vector<double> counts; // V: corpus token counts, the negative-sampling base

    std::span<const float> word(int id) const;
    /// Vector for a surface token. fastText composes n-grams, so OOV tokens
    /// still get a vector; other methods map OOV to UNK.
    std::vector<float> token_vector(const std::string& token) const;
    bool all_finite() const;
};

/// Character n-gram bucket ids of a word (empty when the word is shorter
/// than ngram_min characters).
std::vector<int> ngram_buckets(const std::string& word, int nmin, int nmax, int buckets);

/// GloVe weighting f(x) = (x / x_max)^alpha below x_max, 1 above.
double glove_weight(double x, double x_max, double alpha);

/// Per-epoch training objective, where the method defines one.
struct TrainTrace {
    std::vector<double> objective;
};

EmbeddingMatrix train_cbow(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace = nullptr);
EmbeddingMatrix train_glove(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace = nullptr);
EmbeddingMatrix train_fasttext(const corpus::Dataset& ds, const BaselineHyperparams& hp,
                               TrainTrace* trace = nullptr);
EmbeddingMatrix train_doc2vec(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace = nullptr);
EmbeddingMatrix train(Method m, const corpus::Dataset& ds, const BaselineHyperparams& hp,
                      TrainTrace* trace = nullptr);

/// PV-DM inference with frozen word/output tables; seeded from hp.seed and the text.
std::vector<float> infer_doc2vec(const EmbeddingMatrix& m, const std::string& text);

/// Mean of token vectors (UNK included) for word-level models, inferred
/// vector for doc2vec; zero vector for empty text.
std::vector<float> embed_document(const EmbeddingMatrix& m, const std::string& text);

double cosine(std::span<const float> a, std::span<const float> b);

tensor_io::Container to_container(const EmbeddingMatrix& m);
EmbeddingMatrix from_container(const tensor_io::Container& c);
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

}  // namespace periloom::baselines
