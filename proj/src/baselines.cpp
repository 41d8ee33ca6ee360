#include "periloom/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "periloom/error.hpp"
#include "periloom/hash.hpp"
#include "periloom/random.hpp"

namespace periloom::baselines {

const char* to_string(Method m) {
    switch (m) {
        case Method::CBOW: return "cbow";
        case Method::GloVe: return "glove";
        case Method::FastText: return "fasttext";
        case Method::Doc2Vec: return "doc2vec";
    }
    return "cbow";
}

Method method_from_string(const std::string& s) {
    if (s == "cbow") return Method::CBOW;
    if (s == "glove") return Method::GloVe;
    if (s == "fasttext") return Method::FastText;
    if (s == "doc2vec") return Method::Doc2Vec;
    throw ValidationError("method", "unknown baseline '" + s + "' (expected cbow, glove, fasttext, doc2vec)");
}

void BaselineHyperparams::validate() const {
    if (dim < 1) throw ValidationError("dim", "must be >= 1");
    if (window < 1) throw ValidationError("window", "must be >= 1");
    if (epochs < 0) throw ValidationError("epochs", "must be >= 0");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate", "must be > 0");
    if (negatives < 0) throw ValidationError("negatives", "must be >= 0");
    if (!(x_max > 0.0)) throw ValidationError("x_max", "must be > 0");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ValidationError("alpha", "must be in (0,1]");
    if (ngram_min < 1 || ngram_max < ngram_min) throw ValidationError("ngram_min", "need 1 <= ngram_min <= ngram_max");
    if (buckets < 0) throw ValidationError("buckets", "must be >= 0");
    if (min_count < 1) throw ValidationError("min_count", "must be >= 1");
}

nlohmann::ordered_json BaselineHyperparams::to_json() const {
    return {{"dim", dim},           {"window", window},       {"epochs", epochs},   {"learning_rate", learning_rate},
            {"negatives", negatives}, {"x_max", x_max},       {"alpha", alpha},     {"ngram_min", ngram_min},
            {"ngram_max", ngram_max}, {"buckets", buckets},   {"min_count", min_count}, {"seed", seed}};
}

BaselineHyperparams BaselineHyperparams::from_json(const nlohmann::json& j) {
    BaselineHyperparams h;
    auto get = [&](const char* key, auto& out) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(out);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(key, e.what());
        }
    };
    get("dim", h.dim);
    get("window", h.window);
    get("epochs", h.epochs);
    get("learning_rate", h.learning_rate);
    get("negatives", h.negatives);
    get("x_max", h.x_max);
    get("alpha", h.alpha);
    get("ngram_min", h.ngram_min);
    get("ngram_max", h.ngram_max);
    get("buckets", h.buckets);
    get("min_count", h.min_count);
    get("seed", h.seed);
    return h;
}

std::vector<int> ngram_buckets(const std::string& word, int nmin, int nmax, int buckets) {
    std::vector<int> out;
    if (buckets <= 0 || static_cast<int>(word.size()) < nmin) return out;
    const std::string w = "<" + word + ">";
    for (int n = nmin; n <= nmax; ++n)
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= w.size(); ++i) {
            const auto g = std::string_view(w).substr(i, static_cast<std::size_t>(n));
            if (g == w) continue;  // the whole word has its own vector
            out.push_back(static_cast<int>(fnv1a64(g) % static_cast<std::uint64_t>(buckets)));
        }
    return out;
}

double glove_weight(double x, double x_max, double alpha) {
    if (x <= 0.0) return 0.0;
    return x < x_max ? std::pow(x / x_max, alpha) : 1.0;
}

std::span<const float> EmbeddingMatrix::word(int id) const {
    return {words.data() + static_cast<std::size_t>(id) * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
}

bool EmbeddingMatrix::all_finite() const {
    for (const auto* t : {&words, &output, &ngrams, &docs})
        for (float v : *t)
            if (!std::isfinite(v)) return false;
    return true;
}

namespace {

using Vec = std::vector<float>;

float dot(const float* a, const float* b, int d) {
    float s = 0;
    for (int i = 0; i < d; ++i) s += a[i] * b[i];
    return s;
}

float sigmoid(float x) {
    if (x > 30.f) return 1.f;
    if (x < -30.f) return 0.f;
    return 1.f / (1.f + std::exp(-x));
}

struct Prepared {
    text::Vocabulary vocab;
    std::vector<std::vector<int>> docs;
    std::vector<double> counts;
    std::size_t tokens = 0;
};

Prepared prepare(const corpus::Dataset& ds, const BaselineHyperparams& hp) {
    hp.validate();
    if (ds.empty()) throw DataError("baseline training corpus is empty");
    Prepared p;
    p.vocab = text::build_vocab(ds, hp.min_count);
    p.counts.assign(static_cast<std::size_t>(p.vocab.size()), 0.0);
    for (const auto& n : ds.notes) {
        std::vector<int> ids;
        for (const auto& t : corpus::tokenize(n.text)) ids.push_back(p.vocab.lookup(t));
        for (int id : ids) p.counts[static_cast<std::size_t>(id)] += 1.0;
        p.tokens += ids.size();
        p.docs.push_back(std::move(ids));
    }
    if (p.tokens == 0) throw DataError("baseline training corpus has no tokens");
    return p;
}

/// Unigram^0.75 negative sampler.
class NoiseSampler {
public:
    explicit NoiseSampler(const std::vector<double>& counts) : cdf_(counts.size()) {
        double acc = 0;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            acc += counts[i] > 0 ? std::pow(counts[i], 0.75) : 0.0;
            cdf_[i] = acc;
        }
        total_ = acc;
    }
    int operator()(Rng& rng) const {
        const double u = rng.uniform() * total_;
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf_.begin(), static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
    }

private:
    std::vector<double> cdf_;
    double total_ = 0;
};

Vec uniform_table(std::size_t rows, int d, double half_width, Rng& rng) {
    Vec t(rows * static_cast<std::size_t>(d));
    for (auto& x : t) x = static_cast<float>(rng.uniform(-half_width, half_width));
    return t;
}

/// Negative-sampling update of `out` for hidden vector h and the positive
/// target; accumulates dL/dh * lr into `grad_h` and returns the loss.
float ns_update(const float* h, int target, int d, int negatives, const NoiseSampler& noise, Rng& rng, float lr,
                Vec& out, float* grad_h, bool update_out = true) {
    float loss = 0;
    for (int k = 0; k <= negatives; ++k) {
        int t = target;
        float label = 1.f;
        if (k > 0) {
            t = noise(rng);
            if (t == target) continue;
            label = 0.f;
        }
        float* o = out.data() + static_cast<std::size_t>(t) * static_cast<std::size_t>(d);
        const float p = sigmoid(dot(h, o, d));
        loss += label > 0 ? -std::log(std::max(p, 1e-7f)) : -std::log(std::max(1.f - p, 1e-7f));
        const float g = (label - p) * lr;
        for (int i = 0; i < d; ++i) grad_h[i] += g * o[i];
        if (update_out)
            for (int i = 0; i < d; ++i) o[i] += g * h[i];
    }
    return loss;
}

/// Linearly decayed rate over all processed tokens, as in word2vec.
float decayed(double lr0, std::size_t done, std::size_t total) {
    const double frac = total ? static_cast<double>(done) / static_cast<double>(total) : 0.0;
    return static_cast<float>(lr0 * std::max(1e-4, 1.0 - frac));
}

void check_window(const Prepared& p, int window) {
    std::size_t longest = 0;
    for (const auto& d : p.docs) longest = std::max(longest, d.size());
    if (static_cast<std::size_t>(window) > longest)
        throw DataError("window " + std::to_string(window) + " is larger than every document (longest has " +
                        std::to_string(longest) + " tokens)");
}

EmbeddingMatrix empty_matrix(Method m, const BaselineHyperparams& hp, Prepared& p) {
    EmbeddingMatrix e;
    e.method = m;
    e.hp = hp;
    e.vocab = p.vocab;
    e.dim = hp.dim;
    e.counts = p.counts;
    return e;
}

}  // namespace

// ---------------------------------------------------------------------------
// CBOW

EmbeddingMatrix train_cbow(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace) {
    auto p = prepare(ds, hp);
    check_window(p, hp.window);
    const int d = hp.dim;
    const auto V = static_cast<std::size_t>(p.vocab.size());
    auto e = empty_matrix(Method::CBOW, hp, p);
    Rng rng(mix_seed(hp.seed, {0xcb0}));
    e.words = uniform_table(V, d, 0.5 / d, rng);
    e.output.assign(V * static_cast<std::size_t>(d), 0.f);
    const NoiseSampler noise(p.counts);

    const std::size_t total = p.tokens * static_cast<std::size_t>(hp.epochs);
    std::size_t done = 0;
    Vec h(static_cast<std::size_t>(d)), grad(static_cast<std::size_t>(d));
    std::vector<std::size_t> order(p.docs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        double loss = 0;
        std::size_t events = 0;
        for (auto di : order) {
            const auto& doc = p.docs[di];
            const auto n = static_cast<int>(doc.size());
            for (int c = 0; c < n; ++c, ++done) {
                const float lr = decayed(hp.learning_rate, done, total);
                std::fill(h.begin(), h.end(), 0.f);
                int cw = 0;
                for (int j = std::max(0, c - hp.window); j <= std::min(n - 1, c + hp.window); ++j) {
                    if (j == c) continue;
                    const float* w = e.words.data() + static_cast<std::size_t>(doc[static_cast<std::size_t>(j)]) * d;
                    for (int i = 0; i < d; ++i) h[static_cast<std::size_t>(i)] += w[i];
                    ++cw;
                }
                if (cw == 0) continue;
                for (auto& x : h) x /= static_cast<float>(cw);
                std::fill(grad.begin(), grad.end(), 0.f);
                loss += ns_update(h.data(), doc[static_cast<std::size_t>(c)], d, hp.negatives, noise, rng, lr,
                                  e.output, grad.data());
                ++events;
                for (int j = std::max(0, c - hp.window); j <= std::min(n - 1, c + hp.window); ++j) {
                    if (j == c) continue;
                    float* w = e.words.data() + static_cast<std::size_t>(doc[static_cast<std::size_t>(j)]) * d;
                    for (int i = 0; i < d; ++i) w[i] += grad[static_cast<std::size_t>(i)];
                }
            }
        }
        if (trace) trace->objective.push_back(events ? loss / static_cast<double>(events) : 0.0);
    }
    if (!e.all_finite()) throw InvariantError("cbow: non-finite vectors after training");
    return e;
}

// ---------------------------------------------------------------------------
// GloVe

EmbeddingMatrix train_glove(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace) {
    auto p = prepare(ds, hp);
    const int d = hp.dim;
    const auto V = static_cast<std::size_t>(p.vocab.size());

    // Symmetric co-occurrence counts weighted by 1/distance.
    std::map<std::pair<int, int>, double> cooc;
    for (const auto& doc : p.docs)
        for (std::size_t i = 0; i < doc.size(); ++i)
            for (std::size_t j = i + 1; j < doc.size() && j <= i + static_cast<std::size_t>(hp.window); ++j) {
                const double w = 1.0 / static_cast<double>(j - i);
                cooc[{doc[i], doc[j]}] += w;
                cooc[{doc[j], doc[i]}] += w;
            }
    if (cooc.empty()) throw DataError("glove: co-occurrence matrix is empty (every document has one token)");
    struct Entry {
        int i, j;
        double logx, f;
    };
    std::vector<Entry> entries;
    entries.reserve(cooc.size());
    for (const auto& [k, x] : cooc) entries.push_back({k.first, k.second, std::log(x), glove_weight(x, hp.x_max, hp.alpha)});

    auto e = empty_matrix(Method::GloVe, hp, p);
    Rng rng(mix_seed(hp.seed, {0x610e}));
    std::vector<double> W(V * static_cast<std::size_t>(d)), Wt(V * static_cast<std::size_t>(d)), b(V, 0.0), bt(V, 0.0);
    for (auto* t : {&W, &Wt})
        for (auto& x : *t) x = rng.uniform(-0.5 / d, 0.5 / d);

    auto objective = [&]() {
        double J = 0;
        for (const auto& en : entries) {
            const double* wi = W.data() + static_cast<std::size_t>(en.i) * d;
            const double* wj = Wt.data() + static_cast<std::size_t>(en.j) * d;
            double s = b[static_cast<std::size_t>(en.i)] + bt[static_cast<std::size_t>(en.j)] - en.logx;
            for (int k = 0; k < d; ++k) s += wi[k] * wj[k];
            J += en.f * s * s;
        }
        return J;
    };

    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> gi(static_cast<std::size_t>(d));
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        // Plain SGD, rate decayed linearly per epoch; the objective's factor 2 is folded into the rate.
        const double lr = hp.learning_rate * std::max(1e-4, 1.0 - static_cast<double>(epoch) / hp.epochs);
        rng.shuffle(order);
        for (auto k : order) {
            const auto& en = entries[k];
            double* wi = W.data() + static_cast<std::size_t>(en.i) * d;
            double* wj = Wt.data() + static_cast<std::size_t>(en.j) * d;
            double s = b[static_cast<std::size_t>(en.i)] + bt[static_cast<std::size_t>(en.j)] - en.logx;
            for (int c = 0; c < d; ++c) s += wi[c] * wj[c];
            const double g = en.f * s * lr;
            for (int c = 0; c < d; ++c) {
                gi[static_cast<std::size_t>(c)] = g * wj[c];
                wj[c] -= g * wi[c];
            }
            for (int c = 0; c < d; ++c) wi[c] -= gi[static_cast<std::size_t>(c)];
            b[static_cast<std::size_t>(en.i)] -= g;
            bt[static_cast<std::size_t>(en.j)] -= g;
        }
        if (trace) trace->objective.push_back(objective());
    }
    e.words.resize(V * static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < e.words.size(); ++i) e.words[i] = static_cast<float>(W[i] + Wt[i]);
    if (!e.all_finite()) throw InvariantError("glove: non-finite vectors after training");
    return e;
}

// ---------------------------------------------------------------------------
// fastText (skip-gram over word + character n-gram vectors)

namespace {

/// Rows of the combined input table (words first, then n-gram buckets).
std::vector<std::vector<int>> subword_rows(const text::Vocabulary& vocab, const BaselineHyperparams& hp) {
    std::vector<std::vector<int>> rows(static_cast<std::size_t>(vocab.size()));
    for (int id = 0; id < vocab.size(); ++id) {
        auto& r = rows[static_cast<std::size_t>(id)];
        r.push_back(id);
        if (text::Vocabulary::is_special(id)) continue;
        for (int b : ngram_buckets(vocab.token(id), hp.ngram_min, hp.ngram_max, hp.buckets))
            r.push_back(vocab.size() + b);
    }
    return rows;
}

}  // namespace

EmbeddingMatrix train_fasttext(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace) {
    if (hp.buckets == 0) throw ValidationError("buckets", "fastText needs at least one n-gram bucket");
    auto p = prepare(ds, hp);
    check_window(p, hp.window);
    const int d = hp.dim;
    const auto V = static_cast<std::size_t>(p.vocab.size());
    const auto B = static_cast<std::size_t>(hp.buckets);
    auto e = empty_matrix(Method::FastText, hp, p);
    Rng rng(mix_seed(hp.seed, {0xf7}));
    Vec input = uniform_table(V + B, d, 1.0 / d, rng);
    e.output.assign(V * static_cast<std::size_t>(d), 0.f);
    const NoiseSampler noise(p.counts);
    const auto rows = subword_rows(p.vocab, hp);

    const std::size_t total = p.tokens * static_cast<std::size_t>(hp.epochs);
    std::size_t done = 0;
    Vec h(static_cast<std::size_t>(d)), grad(static_cast<std::size_t>(d));
    std::vector<std::size_t> order(p.docs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        double loss = 0;
        std::size_t events = 0;
        for (auto di : order) {
            const auto& doc = p.docs[di];
            const auto n = static_cast<int>(doc.size());
            for (int c = 0; c < n; ++c, ++done) {
                const float lr = decayed(hp.learning_rate, done, total);
                const auto& comp = rows[static_cast<std::size_t>(doc[static_cast<std::size_t>(c)])];
                const float inv = 1.f / static_cast<float>(comp.size());
                for (int j = std::max(0, c - hp.window); j <= std::min(n - 1, c + hp.window); ++j) {
                    if (j == c) continue;
                    std::fill(h.begin(), h.end(), 0.f);
                    for (int r : comp) {
                        const float* v = input.data() + static_cast<std::size_t>(r) * d;
                        for (int i = 0; i < d; ++i) h[static_cast<std::size_t>(i)] += v[i];
                    }
                    for (auto& x : h) x *= inv;
                    std::fill(grad.begin(), grad.end(), 0.f);
                    loss += ns_update(h.data(), doc[static_cast<std::size_t>(j)], d, hp.negatives, noise, rng, lr,
                                      e.output, grad.data());
                    ++events;
                    for (int r : comp) {
                        float* v = input.data() + static_cast<std::size_t>(r) * d;
                        for (int i = 0; i < d; ++i) v[i] += grad[static_cast<std::size_t>(i)] * inv;
                    }
                }
            }
        }
        if (trace) trace->objective.push_back(events ? loss / static_cast<double>(events) : 0.0);
    }
    e.words.assign(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(V * static_cast<std::size_t>(d)));
    e.ngrams.assign(input.begin() + static_cast<std::ptrdiff_t>(V * static_cast<std::size_t>(d)), input.end());
    if (!e.all_finite()) throw InvariantError("fasttext: non-finite vectors after training");
    return e;
}

// ---------------------------------------------------------------------------
// doc2vec (PV-DM, mean of document and context vectors)

namespace {

/// One PV-DM pass over a document. `train_words` false freezes word and
/// output tables (inference).
double pvdm_pass(const std::vector<int>& doc, float* docvec, Vec& words, Vec& output, int d, int window,
                 int negatives, const NoiseSampler& noise, Rng& rng, double lr0, std::size_t& done, std::size_t total,
                 bool train_words) {
    Vec h(static_cast<std::size_t>(d)), grad(static_cast<std::size_t>(d));
    double loss = 0;
    const auto n = static_cast<int>(doc.size());
    for (int c = 0; c < n; ++c, ++done) {
        const float lr = decayed(lr0, done, total);
        std::copy(docvec, docvec + d, h.begin());
        int cnt = 1;
        for (int j = std::max(0, c - window); j <= std::min(n - 1, c + window); ++j) {
            if (j == c) continue;
            const float* w = words.data() + static_cast<std::size_t>(doc[static_cast<std::size_t>(j)]) * d;
            for (int i = 0; i < d; ++i) h[static_cast<std::size_t>(i)] += w[i];
            ++cnt;
        }
        for (auto& x : h) x /= static_cast<float>(cnt);
        std::fill(grad.begin(), grad.end(), 0.f);
        loss += ns_update(h.data(), doc[static_cast<std::size_t>(c)], d, negatives, noise, rng, lr, output,
                          grad.data(), train_words);
        for (int i = 0; i < d; ++i) docvec[i] += grad[static_cast<std::size_t>(i)];
        if (!train_words) continue;
        for (int j = std::max(0, c - window); j <= std::min(n - 1, c + window); ++j) {
            if (j == c) continue;
            float* w = words.data() + static_cast<std::size_t>(doc[static_cast<std::size_t>(j)]) * d;
            for (int i = 0; i < d; ++i) w[i] += grad[static_cast<std::size_t>(i)];
        }
    }
    return loss;
}

}  // namespace

EmbeddingMatrix train_doc2vec(const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace) {
    auto p = prepare(ds, hp);
    const int d = hp.dim;
    const auto V = static_cast<std::size_t>(p.vocab.size());
    auto e = empty_matrix(Method::Doc2Vec, hp, p);
    Rng rng(mix_seed(hp.seed, {0xd2c}));
    e.words = uniform_table(V, d, 0.5 / d, rng);
    e.docs = uniform_table(p.docs.size(), d, 0.5 / d, rng);
    e.output.assign(V * static_cast<std::size_t>(d), 0.f);
    const NoiseSampler noise(p.counts);

    const std::size_t total = p.tokens * static_cast<std::size_t>(hp.epochs);
    std::size_t done = 0;
    std::vector<std::size_t> order(p.docs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rng.shuffle(order);
        double loss = 0;
        for (auto di : order)
            loss += pvdm_pass(p.docs[di], e.docs.data() + di * static_cast<std::size_t>(d), e.words, e.output, d,
                              hp.window, hp.negatives, noise, rng, hp.learning_rate, done, total, true);
        if (trace) trace->objective.push_back(loss / static_cast<double>(p.tokens));
    }
    if (!e.all_finite()) throw InvariantError("doc2vec: non-finite vectors after training");
    return e;
}

std::vector<float> infer_doc2vec(const EmbeddingMatrix& m, const std::string& text) {
    if (m.method != Method::Doc2Vec) throw CompatibilityError("infer_doc2vec: matrix was not trained with doc2vec");
    const auto toks = corpus::tokenize(text);
    if (toks.empty()) throw DataError("doc2vec inference needs a non-empty document");
    std::vector<int> doc;
    for (const auto& t : toks) doc.push_back(m.vocab.lookup(t));
    const int d = m.dim;
    Rng rng(mix_seed(m.hp.seed, {0x1f, fnv1a64(text)}));
    std::vector<float> v = uniform_table(1, d, 0.5 / d, rng);
    // pvdm_pass leaves both tables untouched when train_words is false
    Vec words = m.words;
    Vec output = m.output;
    const NoiseSampler noise(m.counts);
    const std::size_t total = doc.size() * static_cast<std::size_t>(m.hp.epochs);
    std::size_t done = 0;
    for (int epoch = 0; epoch < m.hp.epochs; ++epoch)
        pvdm_pass(doc, v.data(), words, output, d, m.hp.window, m.hp.negatives, noise, rng, m.hp.learning_rate, done,
                  total, false);
    return v;
}

EmbeddingMatrix train(Method m, const corpus::Dataset& ds, const BaselineHyperparams& hp, TrainTrace* trace) {
    switch (m) {
        case Method::CBOW: return train_cbow(ds, hp, trace);
        case Method::GloVe: return train_glove(ds, hp, trace);
        case Method::FastText: return train_fasttext(ds, hp, trace);
        case Method::Doc2Vec: return train_doc2vec(ds, hp, trace);
    }
    throw InvariantError("unhandled baseline method");
}

// ---------------------------------------------------------------------------
// Embedding

std::vector<float> EmbeddingMatrix::token_vector(const std::string& token) const {
    const int id = vocab.lookup(token);
    const auto d = static_cast<std::size_t>(dim);
    if (method != Method::FastText) {
        auto w = word(id);
        return {w.begin(), w.end()};
    }
    std::vector<float> v(d, 0.f);
    std::size_t parts = 0;
    if (id != text::kUnk) {
        for (std::size_t i = 0; i < d; ++i) v[i] += words[static_cast<std::size_t>(id) * d + i];
        ++parts;
    }
    for (int b : ngram_buckets(token, hp.ngram_min, hp.ngram_max, hp.buckets)) {
        for (std::size_t i = 0; i < d; ++i) v[i] += ngrams[static_cast<std::size_t>(b) * d + i];
        ++parts;
    }
    if (parts == 0) {
        auto w = word(text::kUnk);
        return {w.begin(), w.end()};
    }
    for (auto& x : v) x /= static_cast<float>(parts);
    return v;
}

std::vector<float> embed_document(const EmbeddingMatrix& m, const std::string& text) {
    const auto toks = corpus::tokenize(text);
    const auto d = static_cast<std::size_t>(m.dim);
    if (toks.empty()) return std::vector<float>(d, 0.f);
    if (m.method == Method::Doc2Vec) return infer_doc2vec(m, text);
    // Summed in sorted token order so that permuting a document is bitwise neutral.
    auto sorted = toks;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> acc(d, 0.0);
    for (const auto& t : sorted) {
        const auto tv = m.token_vector(t);
        for (std::size_t i = 0; i < d; ++i) acc[i] += tv[i];
    }
    std::vector<float> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = static_cast<float>(acc[i] / static_cast<double>(toks.size()));
    return v;
}

double cosine(std::span<const float> a, std::span<const float> b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0 || bb == 0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Checkpoints

tensor_io::Container to_container(const EmbeddingMatrix& m) {
    tensor_io::Container c;
    c.meta["format"] = "periloom.embeddings";
    c.meta["method"] = to_string(m.method);
    c.meta["dim"] = m.dim;
    c.meta["hp"] = m.hp.to_json();
    c.meta["vocab"] = m.vocab.to_json();
    const auto d = static_cast<std::int64_t>(m.dim);
    auto rows = [&](const std::vector<float>& t) { return static_cast<std::int64_t>(t.size()) / std::max<std::int64_t>(d, 1); };
    c.add<float>("words", {rows(m.words), d}, m.words);
    c.add<float>("output", {rows(m.output), d}, m.output);
    c.add<float>("ngrams", {rows(m.ngrams), d}, m.ngrams);
    c.add<float>("docs", {rows(m.docs), d}, m.docs);
    c.add<double>("counts", {static_cast<std::int64_t>(m.counts.size())}, m.counts);
    return c;
}

EmbeddingMatrix from_container(const tensor_io::Container& c) {
    if (c.meta.value("format", std::string()) != "periloom.embeddings")
        throw tensor_io::FormatError("container does not hold baseline embeddings");
    EmbeddingMatrix m;
    try {
        m.method = method_from_string(c.meta.at("method").get<std::string>());
        m.dim = c.meta.at("dim").get<int>();
        m.hp = BaselineHyperparams::from_json(c.meta.at("hp"));
        m.vocab = text::Vocabulary::from_json(c.meta.at("vocab"));
    } catch (const nlohmann::json::exception& e) {
        throw tensor_io::FormatError(std::string("embedding header: ") + e.what());
    }
    const auto V = static_cast<std::int64_t>(m.vocab.size());
    m.words = c.get<float>("words", {V, m.dim});
    m.output = c.get<float>("output");
    m.ngrams = c.get<float>("ngrams");
    m.docs = c.get<float>("docs");
    m.counts = c.get<double>("counts", {V});
    if (m.method == Method::FastText && m.ngrams.size() != static_cast<std::size_t>(m.hp.buckets) * m.dim)
        throw tensor_io::ShapeError("fastText n-gram table disagrees with the bucket count");
    if (!m.all_finite()) throw InvariantError("embedding table contains non-finite values");
    return m;
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) { to_container(m).save(path); }

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
    return from_container(tensor_io::Container::load(path));
}

}  // namespace periloom::baselines
