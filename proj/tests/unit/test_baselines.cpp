#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "periloom/baselines.hpp"
#include "periloom/error.hpp"

using namespace periloom;
using namespace periloom::baselines;

namespace {

corpus::Dataset from_texts(const std::vector<std::string>& texts) {
    corpus::Dataset ds;
    ds.tasks = corpus::TaskRegistry({{"y", corpus::TaskKind::BinaryClassification, 2}});
    for (std::size_t i = 0; i < texts.size(); ++i)
        ds.notes.push_back({"d" + std::to_string(i), texts[i], {std::nullopt}});
    return ds;
}

BaselineHyperparams small_hp(std::uint64_t seed = 3) {
    BaselineHyperparams hp;
    hp.dim = 16;
    hp.window = 2;
    hp.epochs = 30;
    hp.buckets = 256;
    hp.seed = seed;
    return hp;
}

std::vector<float> vec_of(const EmbeddingMatrix& m, const std::string& tok) { return m.token_vector(tok); }

// "knee" and "patella" appear in exactly the same contexts; filler words
// appear in unrelated ones.
corpus::Dataset shared_context_corpus() {
    std::vector<std::string> texts;
    const std::vector<std::string> ctx = {"left total replacement revision", "right partial repair open",
                                          "bilateral arthroscopic debridement lateral"};
    const std::vector<std::string> other = {"cardiac bypass graft valve", "colon resection anastomosis stoma",
                                            "spinal fusion lumbar cage"};
    for (int rep = 0; rep < 20; ++rep) {
        for (const auto& c : ctx) {
            auto sp = c.find(' ');
            texts.push_back(c.substr(0, sp) + " knee" + c.substr(sp));
            texts.push_back(c.substr(0, sp) + " patella" + c.substr(sp));
        }
        for (const auto& o : other) texts.push_back(o);
    }
    return from_texts(texts);
}

// Brute-force AUROC over all positive/negative pairs, ties count 1/2.
double pair_auroc(const std::vector<double>& s, const std::vector<int>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                den += 1;
                num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return num / den;
}

}  // namespace

TEST_CASE("method names round-trip and unknown names are rejected") {
    for (auto m : {Method::CBOW, Method::GloVe, Method::FastText, Method::Doc2Vec})
        CHECK(method_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(method_from_string("bert"), ValidationError);
}

TEST_CASE("hyperparameter validation") {
    BaselineHyperparams hp;
    CHECK_NOTHROW(hp.validate());
    hp.alpha = 0.0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp.alpha = 1.0;
    CHECK_NOTHROW(hp.validate());
    hp.dim = 0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp = {};
    hp.window = 0;
    CHECK_THROWS_AS(hp.validate(), ValidationError);
    hp = {};
    hp.ngram_min = 4;
    hp.ngram_max = 3;
    CHECK_THROWS_AS(hp.validate(), ValidationError);

    BaselineHyperparams a;
    a.dim = 7;
    a.seed = 42;
    a.x_max = 10;
    auto b = BaselineHyperparams::from_json(a.to_json());
    CHECK(b.to_json() == a.to_json());
}

TEST_CASE("cbow: shared contexts give higher similarity") {
    auto ds = shared_context_corpus();
    auto m = train_cbow(ds, small_hp());
    CHECK(m.all_finite());
    const auto knee = vec_of(m, "knee"), patella = vec_of(m, "patella");
    for (const char* other : {"cardiac", "colon", "spinal", "graft"})
        CHECK(cosine(knee, patella) > cosine(knee, vec_of(m, other)));
}

TEST_CASE("cbow: determinism, zero epochs and degenerate dim") {
    auto ds = shared_context_corpus();
    auto hp = small_hp();
    hp.epochs = 3;
    CHECK(train_cbow(ds, hp).words == train_cbow(ds, hp).words);
    auto hp2 = hp;
    hp2.seed = 4;
    CHECK(train_cbow(ds, hp2).words != train_cbow(ds, hp).words);

    // epochs=0: the seeded init, identical to the first table drawn from the seed.
    hp.epochs = 0;
    auto init = train_cbow(ds, hp);
    auto again = train_cbow(ds, hp);
    CHECK(init.words == again.words);
    for (float x : init.words) CHECK(std::fabs(x) <= 0.5f / static_cast<float>(hp.dim));
    for (float x : init.output) CHECK(x == 0.0f);

    hp.epochs = 2;
    hp.dim = 1;
    auto tiny = train_cbow(ds, hp);
    CHECK(tiny.dim == 1);
    CHECK(tiny.all_finite());
}

TEST_CASE("cbow: window longer than every document is an error") {
    auto ds = from_texts({"a b c", "d e"});
    auto hp = small_hp();
    hp.window = 4;
    CHECK_THROWS_AS(train_cbow(ds, hp), DataError);
    hp.window = 3;
    CHECK_NOTHROW(train_cbow(ds, hp));
    CHECK_THROWS_AS(train_cbow(from_texts({}), hp), DataError);
}

TEST_CASE("glove weighting endpoints") {
    CHECK(glove_weight(100.0, 100.0, 0.75) == 1.0);
    CHECK(glove_weight(500.0, 100.0, 0.75) == 1.0);
    CHECK(glove_weight(1e-12, 100.0, 0.75) < 1e-9);
    CHECK(glove_weight(0.0, 100.0, 0.75) == 0.0);
    CHECK(glove_weight(50.0, 100.0, 1.0) == doctest::Approx(0.5));
}

TEST_CASE("glove: toy pair fits its log co-occurrence and the objective never rises") {
    // "alpha beta" 30 times: X_ab = X_ba = 30 (distance 1), nothing else.
    std::vector<std::string> texts(30, "alpha beta");
    auto ds = from_texts(texts);
    auto hp = small_hp();
    hp.epochs = 200;
    hp.learning_rate = 0.1;
    TrainTrace trace;
    auto m = train_glove(ds, hp, &trace);
    CHECK(m.all_finite());
    REQUIRE(trace.objective.size() == 200);
    for (std::size_t e = 1; e < trace.objective.size(); ++e)
        CHECK(trace.objective[e] <= trace.objective[e - 1] + 1e-12);
    // Objective = sum of f(30) * residual^2 over the two entries.
    const double f = glove_weight(30.0, hp.x_max, hp.alpha);
    const double residual = std::sqrt(trace.objective.back() / (2.0 * f));
    CHECK(residual < 0.1);

    CHECK_THROWS_AS(train_glove(from_texts({"solo", "alone"}), hp), DataError);
}

TEST_CASE("glove: objective non-increasing on a generated corpus") {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = 300;
    spec.vocab_size = 200;
    auto ds = corpus::generate_corpus(spec);
    auto hp = small_hp();
    hp.epochs = 10;
    TrainTrace trace;
    train_glove(ds, hp, &trace);
    for (std::size_t e = 1; e < trace.objective.size(); ++e)
        CHECK(trace.objective[e] <= trace.objective[e - 1]);
    CHECK(trace.objective.back() < trace.objective.front());
}

TEST_CASE("fasttext: n-gram buckets") {
    CHECK(ngram_buckets("ab", 3, 3, 100).empty());
    // "<abc>" has 3-grams <ab, abc, bc>
    CHECK(ngram_buckets("abc", 3, 3, 100).size() == 3);
    CHECK(ngram_buckets("abc", 3, 3, 0).empty());
    for (int b : ngram_buckets("arthroplasty", 3, 5, 17)) CHECK((b >= 0 && b < 17));
}

TEST_CASE("fasttext: OOV vectors, short words and bucket validation") {
    auto ds = shared_context_corpus();
    auto hp = small_hp();
    hp.epochs = 5;
    auto m = train_fasttext(ds, hp);
    CHECK(m.all_finite());
    CHECK(m.ngrams.size() == static_cast<std::size_t>(hp.buckets * hp.dim));
    auto oov = m.token_vector("kneecap");
    CHECK(oov.size() == static_cast<std::size_t>(hp.dim));
    double norm = 0;
    for (float x : oov) norm += x * x;
    CHECK(norm > 0);
    CHECK(oov != m.token_vector("[UNK]"));

    // "ab" with range (3,3): whole-word vector only.
    auto hp3 = hp;
    hp3.ngram_min = 3;
    hp3.ngram_max = 3;
    auto m3 = train_fasttext(from_texts(std::vector<std::string>(5, "ab cd ab cd")), hp3);
    auto w = m3.word(m3.vocab.lookup("ab"));
    CHECK(m3.token_vector("ab") == std::vector<float>(w.begin(), w.end()));

    hp.buckets = 0;
    CHECK_THROWS_AS(train_fasttext(ds, hp), ValidationError);
}

TEST_CASE("fasttext: shared prefixes are more similar than unrelated words") {
    // Morphology corpus: inflected forms of one stem, each in its own context,
    // plus unrelated words. Only the n-grams tie the inflections together.
    std::vector<std::string> texts;
    const std::vector<std::string> forms = {"arthroplasty", "arthroplasties", "arthroplastic"};
    const std::vector<std::string> ctx = {"red green", "blue yellow", "black white"};
    for (int rep = 0; rep < 20; ++rep)
        for (std::size_t i = 0; i < forms.size(); ++i) {
            texts.push_back(ctx[i] + " " + forms[i] + " " + ctx[i]);
            texts.push_back("cat dog " + std::string(i == 0 ? "colectomy" : i == 1 ? "valvotomy" : "laminectomy") +
                            " fish bird");
        }
    auto hp = small_hp();
    hp.epochs = 10;
    double margin_sum = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
        hp.seed = seed;
        auto m = train_fasttext(from_texts(texts), hp);
        const auto a = m.token_vector("arthroplasty");
        const double related = cosine(a, m.token_vector("arthroplasties"));
        const double unrelated = cosine(a, m.token_vector("colectomy"));
        CHECK(related > unrelated);
        margin_sum += related - unrelated;
    }
    CHECK(margin_sum > 0);
}

TEST_CASE("doc2vec: inference determinism, zero epochs and empty documents") {
    auto ds = shared_context_corpus();
    auto hp = small_hp();
    hp.epochs = 3;
    auto m = train_doc2vec(ds, hp);
    CHECK(m.all_finite());
    CHECK(m.docs.size() == ds.size() * static_cast<std::size_t>(hp.dim));
    const std::string doc = "left knee total replacement";
    CHECK(infer_doc2vec(m, doc) == infer_doc2vec(m, doc));
    CHECK(embed_document(m, doc) == infer_doc2vec(m, doc));
    CHECK_THROWS_AS(infer_doc2vec(m, "   "), DataError);

    // epochs=0 inference returns the seeded init: same for every table, bounded.
    auto m0 = m;
    m0.hp.epochs = 0;
    auto init = infer_doc2vec(m0, doc);
    auto m0b = m0;
    m0b.words.assign(m0b.words.size(), 1.0f);
    CHECK(infer_doc2vec(m0b, doc) == init);
    for (float x : init) CHECK(std::fabs(x) <= 0.5f / static_cast<float>(hp.dim));

    auto cbow = train_cbow(ds, hp);
    CHECK_THROWS_AS(infer_doc2vec(cbow, doc), CompatibilityError);
}

TEST_CASE("doc2vec: duplicated documents end up close") {
    std::vector<std::string> texts;
    const std::vector<std::string> pool = {"cardiac bypass graft valve aortic", "colon resection anastomosis stoma",
                                           "spinal fusion lumbar cage posterior", "hip hemiarthroplasty cemented stem",
                                           "thyroid lobectomy neck incision"};
    for (int rep = 0; rep < 8; ++rep)
        for (const auto& t : pool) texts.push_back(t);
    auto hp = small_hp();
    hp.epochs = 40;
    auto m = train_doc2vec(from_texts(texts), hp);
    const auto d = static_cast<std::size_t>(hp.dim);
    auto doc = [&](std::size_t i) { return std::span<const float>(m.docs.data() + i * d, d); };
    // rows i and i+5 are the same text; i and i+1 are different texts
    double dup = 0, diff = 0;
    for (std::size_t i = 0; i < 5; ++i) {
        dup += cosine(doc(i), doc(i + 5));
        diff += cosine(doc(i), doc((i + 1) % 5));
    }
    CHECK(dup > diff);
}

TEST_CASE("embed_document pooling properties") {
    auto ds = shared_context_corpus();
    auto hp = small_hp();
    hp.epochs = 2;
    for (auto method : {Method::CBOW, Method::GloVe, Method::FastText}) {
        auto m = train(method, ds, hp);
        CHECK(embed_document(m, "knee") == m.token_vector("knee"));
        CHECK(embed_document(m, "knee knee") == embed_document(m, "knee"));
        CHECK(embed_document(m, "left knee revision") == embed_document(m, "revision left knee"));
        CHECK(embed_document(m, "") == std::vector<float>(static_cast<std::size_t>(hp.dim), 0.0f));
        // UNK is included in the mean for word-level lookups
        if (method != Method::FastText)
            CHECK(embed_document(m, "zzzunseen") == m.token_vector("[UNK]"));
    }
    auto d2v = train(Method::Doc2Vec, ds, hp);
    CHECK(embed_document(d2v, "") == std::vector<float>(static_cast<std::size_t>(hp.dim), 0.0f));
}

TEST_CASE("embedding checkpoints round-trip") {
    auto ds = shared_context_corpus();
    auto hp = small_hp();
    hp.epochs = 2;
    const auto dir = std::filesystem::temp_directory_path() / "periloom_test_baselines";
    std::filesystem::create_directories(dir);
    for (auto method : {Method::CBOW, Method::GloVe, Method::FastText, Method::Doc2Vec}) {
        auto m = train(method, ds, hp);
        const auto path = dir / (std::string(to_string(method)) + ".pltc");
        save_embeddings(m, path);
        auto back = load_embeddings(path);
        CHECK(back.method == method);
        CHECK(back.words == m.words);
        CHECK(back.ngrams == m.ngrams);
        CHECK(back.docs == m.docs);
        CHECK(back.counts == m.counts);
        CHECK(back.vocab.size() == m.vocab.size());
        CHECK(embed_document(back, "left knee total") == embed_document(m, "left knee total"));
    }
    tensor_io::Container c;
    c.meta["format"] = "periloom.model";
    CHECK_THROWS_AS(from_container(c), tensor_io::FormatError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("planted signal separates document vectors") {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = 2000;
    spec.vocab_size = 300;
    spec.tasks = {{"death30", {0.1, 1.0, 1.0}}};
    spec.seed = 21;
    auto ds = corpus::generate_corpus(spec);
    BaselineHyperparams hp;  // defaults
    hp.seed = 3;
    for (auto method : {Method::CBOW, Method::GloVe, Method::FastText}) {
        auto m = train(method, ds, hp);
        std::vector<std::vector<double>> x;
        std::vector<int> y;
        for (const auto& n : ds.notes) {
            auto v = embed_document(m, n.text);
            x.emplace_back(v.begin(), v.end());
            y.push_back(*n.labels[0] > 0.5 ? 1 : 0);
        }
        // Linear scorer fit on the first half: w = (S + rI)^-1 (mu1 - mu0),
        // S the pooled within-class covariance. AUROC on the second half.
        const std::size_t half = x.size() / 2, d = static_cast<std::size_t>(hp.dim);
        std::vector<double> mu[2] = {std::vector<double>(d, 0), std::vector<double>(d, 0)};
        double cnt[2] = {0, 0};
        for (std::size_t i = 0; i < half; ++i) {
            cnt[y[i]] += 1;
            for (std::size_t k = 0; k < d; ++k) mu[y[i]][k] += x[i][k];
        }
        for (int c = 0; c < 2; ++c)
            for (auto& v : mu[c]) v /= cnt[c];
        std::vector<std::vector<double>> a(d, std::vector<double>(d + 1, 0.0));
        double trace = 0;
        for (std::size_t i = 0; i < half; ++i)
            for (std::size_t r = 0; r < d; ++r)
                for (std::size_t c = 0; c < d; ++c)
                    a[r][c] += (x[i][r] - mu[y[i]][r]) * (x[i][c] - mu[y[i]][c]) / static_cast<double>(half);
        for (std::size_t r = 0; r < d; ++r) trace += a[r][r];
        for (std::size_t r = 0; r < d; ++r) {
            a[r][r] += 1e-3 * trace / static_cast<double>(d);
            a[r][d] = mu[1][r] - mu[0][r];
        }
        for (std::size_t c = 0; c < d; ++c) {  // Gauss-Jordan, SPD so no pivoting needed
            for (std::size_t r = 0; r < d; ++r) {
                if (r == c) continue;
                const double f = a[r][c] / a[c][c];
                for (std::size_t k = c; k <= d; ++k) a[r][k] -= f * a[c][k];
            }
        }
        std::vector<double> s;
        std::vector<int> yt;
        for (std::size_t i = half; i < x.size(); ++i) {
            double v = 0;
            for (std::size_t k = 0; k < d; ++k) v += a[k][d] / a[k][k] * x[i][k];
            s.push_back(v);
            yt.push_back(y[i]);
        }
        INFO(to_string(method));
        CHECK(pair_auroc(s, yt) > 0.7);
    }
}
