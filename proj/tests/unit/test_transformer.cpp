#include <doctest.h>

#include <cmath>

#include "periloom/error.hpp"
#include "periloom/transformer.hpp"
#include "support/gradcheck.hpp"

using namespace periloom;
using namespace periloom::transformer;

namespace {

ArchConfig small_arch(Variant v, int vocab = 30) {
    ArchConfig a;
    a.variant = v;
    a.layers = 2;
    a.d_model = 16;
    a.heads = 2;
    a.d_ff = 32;
    a.max_len = 12;
    a.vocab_size = vocab;
    a.dropout = 0.0;
    a.seed = 5;
    return a;
}

std::vector<std::vector<int>> sample_ids(int vocab, std::uint64_t seed, std::vector<int> lengths) {
    Rng rng(seed);
    std::vector<std::vector<int>> out;
    for (int n : lengths) {
        std::vector<int> s;
        for (int i = 0; i < n; ++i) s.push_back(text::kNumSpecials + static_cast<int>(rng.below(vocab - text::kNumSpecials)));
        out.push_back(s);
    }
    return out;
}

Batch mlm_batch(int vocab, std::uint64_t seed) {
    Batch b;
    b.ids = sample_ids(vocab, seed, {6, 9, 4});
    Rng rng(seed + 1);
    for (auto& s : b.ids) {
        std::vector<int> t(s.size(), -1);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (rng.bernoulli(0.4) || i == 1) {
                t[i] = s[i];
                s[i] = text::kMask;
            }
        b.targets.push_back(t);
    }
    return b;
}

Batch lm_batch(int vocab, std::uint64_t seed) {
    Batch b;
    b.ids = sample_ids(vocab, seed, {7, 5, 10});
    for (const auto& s : b.ids) {
        std::vector<int> t(s.size(), -1);
        for (std::size_t i = 0; i + 1 < s.size(); ++i) t[i] = s[i + 1];
        b.targets.push_back(t);
    }
    return b;
}

Model<double> gradcheck_model(const ArchConfig& a) {
    auto m = init_params<double>(a);
    testing::randomize_for_gradcheck(m.params, 99);
    return m;
}

}  // namespace

TEST_CASE("init is deterministic and validates shape constraints") {
    auto a = small_arch(Variant::Encoder);
    CHECK(init_params<float>(a).params.data == init_params<float>(a).params.data);
    a.d_model = 8;
    a.heads = 2;
    CHECK_NOTHROW(a.validate());
    a.heads = 3;
    CHECK_THROWS_AS(a.validate(), ValidationError);
    a.heads = 2;
    a.max_len = 2;
    CHECK_THROWS_AS(a.validate(), ValidationError);
}

TEST_CASE("parameter count matches the laid-out tensors") {
    for (bool tie : {true, false})
        for (bool nsp : {false, true}) {
            auto a = small_arch(Variant::Encoder);
            a.tie_embeddings = tie;
            a.nsp = nsp;
            const auto layout = make_layout(a);
            std::size_t sum = 0;
            for (const auto& s : layout.specs) {
                std::size_t n = 1;
                for (int d : s.shape) n *= static_cast<std::size_t>(d);
                sum += n;
            }
            CHECK(a.param_count() == sum);
        }
    ArchConfig def;
    def.vocab_size = 3210;
    // 2 layers of d=64, FFN 256 with tied embeddings.
    const std::size_t d = 64, ff = 256, V = 3210, L = 32;
    const std::size_t per_layer = 4 * (d * d + d) + 4 * d + d * ff + ff + ff * d + d;
    CHECK(def.param_count() == V * d + L * d + 2 * per_layer + 2 * d + V);
}

TEST_CASE("decoder is causal bitwise") {
    const auto m = init_params<double>(small_arch(Variant::Decoder));
    Batch a;
    a.ids = sample_ids(30, 3, {9});
    Batch b = a;
    b.ids[0][5] = b.ids[0][5] == 10 ? 11 : 10;
    const auto la = full_logits(m, forward(m, a));
    const auto lb = full_logits(m, forward(m, b));
    const std::size_t V = 30;
    for (std::size_t i = 0; i < 5 * V; ++i) CHECK(la[i] == lb[i]);
    bool differs = false;
    for (std::size_t i = 5 * V; i < 9 * V; ++i) differs = differs || la[i] != lb[i];
    CHECK(differs);
}

TEST_CASE("encoder outputs ignore PAD content beyond the true length") {
    const auto a = small_arch(Variant::Encoder);
    const auto m = init_params<float>(a);
    text::TokenSeq s;
    s.ids = {text::kCls, 9, 12, text::kSep, text::kPad, text::kPad};
    s.attention = {1, 1, 1, 1, 0, 0};
    s.length = 4;
    auto t = s;
    t.ids[4] = 17;
    t.ids[5] = 21;
    const auto fa = forward(m, make_batch(std::vector{s}));
    const auto fb = forward(m, make_batch(std::vector{t}));
    CHECK(fa.hidden == fb.hidden);
    CHECK(fa.pooled == fb.pooled);
}

TEST_CASE("forward: softmax normalization, layer norm moments, length limit") {
    const auto a = small_arch(Variant::Encoder);
    const auto m = init_params<float>(a);
    Batch b;
    b.ids = sample_ids(30, 4, {5, 12});
    const auto f = forward(m, b);
    const auto logits = full_logits(m, f);
    for (std::size_t r = 0; r < f.rows(); ++r) {
        double mx = -1e300, sum = 0;
        for (std::size_t j = 0; j < 30; ++j) mx = std::max(mx, static_cast<double>(logits[r * 30 + j]));
        for (std::size_t j = 0; j < 30; ++j) sum += std::exp(logits[r * 30 + j] - mx);
        double total = 0;
        for (std::size_t j = 0; j < 30; ++j) total += std::exp(logits[r * 30 + j] - mx) / sum;
        CHECK(std::abs(total - 1.0) < 1e-6);
        for (std::size_t j = 0; j < 30; ++j) CHECK(std::isfinite(logits[r * 30 + j]));
    }
    const auto md = init_params<double>(a);
    const auto fd = forward(md, b);
    for (const auto* xh : {&fd.layers[0].xhat1, &fd.layers[1].xhat2, &fd.xhatf})
        for (std::size_t r = 0; r < fd.rows(); ++r) {
            double mean = 0, var = 0;
            for (std::size_t j = 0; j < 16; ++j) mean += (*xh)[r * 16 + j];
            mean /= 16;
            for (std::size_t j = 0; j < 16; ++j) var += ((*xh)[r * 16 + j] - mean) * ((*xh)[r * 16 + j] - mean);
            var /= 16;
            CHECK(std::abs(mean) < 1e-4);
            CHECK(std::abs(var - 1.0) < 1e-4);
        }
    Batch too_long;
    too_long.ids = sample_ids(30, 5, {13});
    CHECK_THROWS_AS(forward(m, too_long), DataError);
}

TEST_CASE("self loss: near ln|V| at init, exact for uniform logits, mean invariant") {
    for (auto v : {Variant::Encoder, Variant::Decoder}) {
        const auto a = small_arch(v);
        auto m = init_params<double>(a);
        const Batch b = v == Variant::Encoder ? mlm_batch(30, 7) : lm_batch(30, 7);
        const double lnv = std::log(30.0);
        const auto l0 = self_loss(m, forward(m, b), b);
        CHECK(std::abs(l0.value - lnv) / lnv < 0.15);

        Batch dup = b;
        dup.ids.insert(dup.ids.end(), b.ids.begin(), b.ids.end());
        dup.targets.insert(dup.targets.end(), b.targets.begin(), b.targets.end());
        CHECK(self_loss(m, forward(m, dup), dup).value == doctest::Approx(l0.value).epsilon(1e-12));

        auto u = m;
        std::fill_n(u.params.ptr("tok_emb"), 30 * 16, 0.0);
        std::fill_n(u.params.ptr("lm_bias"), 30, 0.0);
        CHECK(self_loss(u, forward(u, b), b).value == doctest::Approx(lnv).epsilon(1e-15));

        Batch none = b;
        for (auto& t : none.targets) std::fill(t.begin(), t.end(), -1);
        CHECK_THROWS_AS(self_loss(m, forward(m, none), none), DataError);
    }
}

TEST_CASE("one-hot logits with a large margin drive the loss to zero") {
    auto a = small_arch(Variant::Encoder);
    auto m = init_params<double>(a);
    const auto b = mlm_batch(30, 8);
    auto* bias = m.params.ptr("lm_bias");
    std::fill_n(m.params.ptr("tok_emb"), 30 * 16, 0.0);
    // A single target id everywhere with a huge bias for it.
    Batch one = b;
    for (auto& t : one.targets)
        for (auto& x : t)
            if (x >= 0) x = 12;
    std::fill_n(bias, 30, 0.0);
    bias[12] = 60.0;
    CHECK(self_loss(m, forward(m, one), one).value < 1e-20);
}

TEST_CASE("analytic gradients match central differences (f64)") {
    for (auto v : {Variant::Encoder, Variant::Decoder})
        for (bool nsp : {false, true}) {
            if (nsp && v == Variant::Decoder) continue;
            auto a = small_arch(v);
            a.nsp = nsp;
            auto m = gradcheck_model(a);
            Batch b = v == Variant::Encoder ? mlm_batch(30, 11) : lm_batch(30, 11);
            if (nsp) b.nsp_labels = {1, 0, 1};
            Rng rng(5);
            std::vector<double> dp(b.size() * 16);
            for (auto& x : dp) x = rng.normal();

            auto objective = [&]() {
                const auto f = forward(m, b);
                double val = self_loss(m, f, b).value;
                for (std::size_t i = 0; i < dp.size(); ++i) val += dp[i] * f.pooled[i];
                return val;
            };
            auto g = m.params.zeros_like();
            const auto f = forward(m, b);
            const auto sl = self_loss(m, f, b);
            backward<double>(m, f, b, &sl, std::span<const double>(dp), g);

            const auto r = testing::grad_check(m.params, g, objective, 1e-4, 40, 3);
            INFO("variant " << to_string(v) << " nsp " << nsp << " worst " << r.worst_tensor << "[" << r.worst_index
                            << "] analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
            CHECK(r.max_rel_err <= 1e-5);
        }
}

TEST_CASE("zero-weighted objective gives all-zero gradients") {
    const auto a = small_arch(Variant::Encoder);
    const auto m = init_params<double>(a);
    const auto b = mlm_batch(30, 12);
    auto g = m.params.zeros_like();
    const std::vector<double> dp(b.size() * 16, 0.0);
    backward<double>(m, forward(m, b), b, nullptr, std::span<const double>(dp), g);
    for (double x : g.data) CHECK(x == 0.0);
}

TEST_CASE("tied output projection gradient equals the sum of both roles") {
    auto a = small_arch(Variant::Encoder);
    const auto tied = gradcheck_model(a);
    a.tie_embeddings = false;
    auto untied = init_params<double>(a);
    for (const auto& s : tied.params.specs)
        std::copy_n(tied.params.ptr(s.name), s.size, untied.params.ptr(s.name));
    std::copy_n(tied.params.ptr("tok_emb"), 30 * 16, untied.params.ptr("lm_out"));

    const auto b = mlm_batch(30, 13);
    auto gt = tied.params.zeros_like();
    auto gu = untied.params.zeros_like();
    const auto ft = forward(tied, b);
    const auto st = self_loss(tied, ft, b);
    backward<double>(tied, ft, b, &st, {}, gt);
    const auto fu = forward(untied, b);
    const auto su = self_loss(untied, fu, b);
    backward<double>(untied, fu, b, &su, {}, gu);
    CHECK(st.value == su.value);
    const double* e_t = gt.ptr("tok_emb");
    const double* e_u = gu.ptr("tok_emb");
    const double* o_u = gu.ptr("lm_out");
    for (std::size_t i = 0; i < 30 * 16; ++i) CHECK(e_t[i] == doctest::Approx(e_u[i] + o_u[i]).epsilon(1e-12));
}

TEST_CASE("a small SGD step decreases the batch loss") {
    for (auto v : {Variant::Encoder, Variant::Decoder}) {
        auto m = init_params<double>(small_arch(v));
        const Batch b = v == Variant::Encoder ? mlm_batch(30, 14) : lm_batch(30, 14);
        const auto f = forward(m, b);
        const auto l = self_loss(m, f, b);
        auto g = m.params.zeros_like();
        backward<double>(m, f, b, &l, {}, g);
        double step = 1.0;
        bool decreased = false;
        for (int i = 0; i < 30 && !decreased; ++i, step *= 0.5) {
            auto trial = m;
            for (std::size_t k = 0; k < trial.params.data.size(); ++k) trial.params.data[k] -= step * g.data[k];
            decreased = self_loss(trial, forward(trial, b), b).value < l.value;
        }
        CHECK(decreased);
    }
}

TEST_CASE("dropout is active only in training mode and reproducible per seed") {
    auto a = small_arch(Variant::Encoder);
    a.dropout = 0.1;
    const auto m = init_params<float>(a);
    const auto b = mlm_batch(30, 15);
    const auto e1 = forward(m, b);
    const auto e2 = forward(m, b);
    CHECK(e1.hidden == e2.hidden);
    const auto t1 = forward(m, b, {true, 4});
    const auto t2 = forward(m, b, {true, 4});
    const auto t3 = forward(m, b, {true, 5});
    CHECK(t1.hidden == t2.hidden);
    CHECK(t1.hidden != t3.hidden);
    CHECK(t1.hidden != e1.hidden);
}

TEST_CASE("embedding extraction") {
    const auto a = small_arch(Variant::Decoder);
    const auto m = init_params<float>(a);
    text::Vocabulary vocab;
    const auto e1 = extract_embedding(m, vocab, "left knee");
    CHECK(e1.size() == 16);
    CHECK(e1 == extract_embedding(m, vocab, "left knee"));
    CHECK(extract_embedding(m, vocab, "").size() == 16);
    const auto many = extract_embeddings(m, vocab, {"left knee", "", "left knee"}, 2);
    CHECK(std::vector<float>(many.begin(), many.begin() + 16) == e1);
    CHECK(std::vector<float>(many.begin() + 32, many.end()) == e1);
}
