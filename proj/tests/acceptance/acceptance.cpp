// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   acceptance [--cli <path to periloom>] [--only 1,5,...] [--seeds N] [--report <file>]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "periloom/baselines.hpp"
#include "periloom/corpus.hpp"
#include "periloom/eval.hpp"
#include "periloom/finetune.hpp"
#include "periloom/hash.hpp"
#include "periloom/io.hpp"
#include "periloom/predict.hpp"
#include "periloom/probe.hpp"
#include "periloom/random.hpp"
#include "periloom/tensor_io.hpp"
#include "support/gradcheck.hpp"
#include "support/metric_oracle.hpp"

namespace fs = std::filesystem;
using namespace periloom;
using transformer::Variant;
using clock_type = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> lines;  // evidence, printed under the verdict

    void check(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            lines.push_back("FAILED: " + what);
        }
    }
    void note(const std::string& s) { lines.push_back(s); }
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

corpus::Dataset small_corpus(std::size_t n, std::uint64_t seed, int vocab = 120) {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = n;
    spec.vocab_size = vocab;
    spec.length_mean = 6.0;
    spec.length_sd = 2.0;
    spec.tasks = {{"death30", {0.3, 1.0, 0.8}}, {"dvt", {0.3, 0.6, 0.8}}};
    spec.seed = seed;
    return corpus::generate_corpus(spec);
}

transformer::ArchConfig small_arch(Variant v, int vocab, double dropout) {
    transformer::ArchConfig a;
    a.variant = v;
    a.layers = 2;
    a.d_model = 16;
    a.heads = 2;
    a.d_ff = 32;
    a.max_len = 12;
    a.vocab_size = vocab;
    a.dropout = dropout;
    a.seed = 5;
    return a;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradients() {
    Outcome o;
    const auto t0 = clock_type::now();
    const auto ds = small_corpus(10, 3, 60);
    for (auto v : {Variant::Encoder, Variant::Decoder}) {
        const auto vocab = text::build_vocab(ds, 1);
        finetune::FineTunedModel<double> m;
        m.body = transformer::init_params<double>(small_arch(v, static_cast<int>(vocab.size()), 0.0));
        testing::randomize_for_gradcheck(m.body.params, 99);
        m.vocab = vocab;
        m.heads.push_back(finetune::make_head<double>(ds.tasks[0], 16, {16}, 3));  // one hidden layer
        m.heads.push_back(finetune::make_head<double>(ds.tasks[1], 16, {}, 4));    // linear
        for (auto& h : m.heads) testing::randomize_for_gradcheck(h.params, 17);

        const auto data = finetune::encode_corpus(ds, m.vocab, m.body.arch, {"death30", "dvt"});
        std::vector<std::size_t> rows(ds.size());
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        finetune::StepSpec spec;
        spec.include_self = true;
        spec.lambdas = {0.7, 1.3};
        spec.mlm_rate = 0.4;
        spec.train = false;
        spec.seed = 21;

        const auto step = finetune::compute_step(m, data, rows, spec);
        auto loss = [&] { return finetune::compute_step(m, data, rows, spec).loss; };
        auto report = [&](const char* part, const testing::GradCheckResult& r) {
            o.note(std::string(transformer::to_string(v)) + " " + part + ": " + std::to_string(r.coords_checked) +
                   " coords over " + std::to_string(r.tensors_checked) + " tensors, max rel err " +
                   fmt("%.2e", r.max_rel_err) + " (worst " + r.worst_tensor + ")");
            o.check(r.max_rel_err <= 1e-5, std::string(part) + " relative error above 1e-5");
        };
        // Every tensor gets min(200, size) coordinates, i.e. all of the small ones.
        const auto rb = testing::grad_check(m.body.params, step.body_grads, loss, 1e-4, 200, 1);
        report("body", rb);
        for (std::size_t h = 0; h < m.heads.size(); ++h)
            report(h == 0 ? "head death30" : "head dvt",
                   testing::grad_check(m.heads[h].params, step.head_grads[h], loss, 1e-4, 200, 2 + h));
        o.check(step.self_loss > 0 && step.task_losses.size() == 2, "combined objective has all three terms");
    }
    const double secs = seconds_since(t0);
    o.note("runtime " + fmt("%.1f s", secs));
    o.check(secs < 120, "runtime under 2 min");
    return o;
}

// ---------------------------------------------------------------------------
// 2. Metric oracle equivalence

Outcome metric_oracle() {
    Outcome o;
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<int> y{0, 0, 1, 1};
    o.check(eval::auroc(s, y) == 0.75, "worked AUROC example is 0.75");
    o.check(std::abs(eval::auprc(s, y) - 5.0 / 6.0) <= 1e-12, "worked AUPRC example is 5/6");
    o.note("worked example: AUROC " + fmt("%.17g", eval::auroc(s, y)) + ", AUPRC " + fmt("%.17g", eval::auprc(s, y)));

    std::size_t auroc_cases = 0, auprc_cases = 0, auroc_bad = 0, auprc_bad = 0;
    double worst = 0;
    const auto visited = testing::for_each_multiset(
        {0.0, 0.25, 0.5, 0.75, 1.0}, 8, [&](std::vector<double> sc, std::vector<int> lab) {
            const int pos = std::accumulate(lab.begin(), lab.end(), 0);
            for (int pass = 0; pass < 2; ++pass) {
                if (pass == 1) {
                    std::reverse(sc.begin(), sc.end());
                    std::reverse(lab.begin(), lab.end());
                }
                if (pos > 0 && pos < static_cast<int>(sc.size())) {
                    ++auroc_cases;
                    const double d = std::abs(eval::auroc(sc, lab) - testing::pairwise_auroc(sc, lab));
                    worst = std::max(worst, d);
                    if (d > 1e-12) ++auroc_bad;
                }
                if (pos > 0) {
                    ++auprc_cases;
                    const double d = std::abs(eval::auprc(sc, lab) - testing::enumerated_ap(sc, lab));
                    worst = std::max(worst, d);
                    if (d > 1e-12) ++auprc_bad;
                }
            }
        });
    o.note(std::to_string(visited) + " multisets (n <= 8, 5-value grid), " + std::to_string(auroc_cases) +
           " AUROC and " + std::to_string(auprc_cases) + " AUPRC comparisons, max |diff| " + fmt("%.1e", worst));
    o.check(visited == 43757, "enumerated every multiset");
    o.check(auroc_bad == 0, std::to_string(auroc_bad) + " AUROC mismatches");
    o.check(auprc_bad == 0, std::to_string(auprc_bad) + " AUPRC mismatches");
    return o;
}

// ---------------------------------------------------------------------------
// 3. Reduction lattice

template <class T>
struct Trajectory {
    std::vector<std::vector<T>> body;
    finetune::TrainHooks<T> hooks() {
        return {[this](long, const finetune::FineTunedModel<T>& m) { body.push_back(m.body.params.data); }};
    }
};

finetune::FineTuneConfig quick_cfg(int epochs) {
    finetune::FineTuneConfig c;
    c.epochs = epochs;
    c.batch_size = 8;
    c.adam.learning_rate = 1e-3;
    c.seed = 13;
    return c;
}

Outcome reduction_lattice() {
    Outcome o;
    const auto ds = small_corpus(48, 9);
    for (auto v : {Variant::Encoder, Variant::Decoder}) {
        const std::string name = transformer::to_string(v);
        const auto vocab = text::build_vocab(ds, 1);
        auto arch = small_arch(v, static_cast<int>(vocab.size()), 0.1);
        arch.layers = 1;
        arch.max_len = 16;
        const auto base = finetune::pretrain<double>(arch, ds, vocab, quick_cfg(1));
        const auto cfg = quick_cfg(3);

        Trajectory<double> self_t, semi0_t, semi_t, found1_t;
        finetune::finetune_self_supervised(base, ds, cfg, nullptr, self_t.hooks());

        auto c0 = cfg;
        c0.lambda = 0.0;
        finetune::finetune_semi_supervised(base, ds, "dvt", c0, nullptr, semi0_t.hooks());
        o.check(!self_t.body.empty() && semi0_t.body == self_t.body,
                name + ": semi-supervised(lambda=0) trajectory differs from self-supervised");

        auto cl = cfg;
        cl.lambda = 0.7;
        const auto semi = finetune::finetune_semi_supervised(base, ds, "dvt", cl, nullptr, semi_t.hooks());
        auto c1 = cfg;
        c1.lambdas = {0.7};
        const auto found = finetune::finetune_foundation(base, ds, {"dvt"}, c1, nullptr, found1_t.hooks());
        o.check(found1_t.body == semi_t.body, name + ": foundation(m=1) body trajectory differs from semi-supervised");
        o.check(found.heads.size() == 1 && found.heads[0].params.data == semi.heads[0].params.data,
                name + ": foundation(m=1) head differs from semi-supervised");
        o.check(semi_t.body != self_t.body, name + ": supervised term has no effect (vacuous comparison)");
        o.note(name + ": " + std::to_string(self_t.body.size()) + " steps over 3 epochs compared bitwise (f64)");
    }
    return o;
}

// ---------------------------------------------------------------------------
// 4. Missing-label neutrality

Outcome missing_neutrality() {
    Outcome o;
    const auto ds = small_corpus(32, 11);
    for (auto v : {Variant::Encoder, Variant::Decoder}) {
        const std::string name = transformer::to_string(v);
        const auto vocab = text::build_vocab(ds, 1);
        auto arch = small_arch(v, static_cast<int>(vocab.size()), 0.1);
        arch.max_len = 16;
        finetune::FineTunedModel<double> m{transformer::init_params<double>(arch), vocab, {}, {}};
        m.heads.push_back(finetune::make_head<double>(ds.tasks[0], 16, {16}, 3));
        m.heads.push_back(finetune::make_head<double>(ds.tasks[1], 16, {16}, 4));
        const std::vector<std::string> tasks = {"death30", "dvt"};

        // 16 labeled rows plus 16 rows Missing for task j = dvt: 50% of the extended batch.
        auto ext = ds;
        for (std::size_t i = 16; i < 32; ++i) ext.notes[i].labels[1] = std::nullopt;
        const auto data = finetune::encode_corpus(ext, m.vocab, m.body.arch, tasks);
        std::vector<std::size_t> rows(16), rows_ext(32);
        std::iota(rows.begin(), rows.end(), std::size_t{0});
        std::iota(rows_ext.begin(), rows_ext.end(), std::size_t{0});

        finetune::StepSpec spec;
        spec.include_self = false;
        spec.lambdas = {0.0, 1.0};
        spec.train = true;
        spec.seed = 21;
        const auto a = finetune::compute_step(m, data, rows, spec);
        const auto b = finetune::compute_step(m, data, rows_ext, spec);
        std::size_t nonzero = 0;
        for (double g : a.body_grads.data) nonzero += g != 0.0;
        o.check(a.body_grads.data == b.body_grads.data, name + ": body gradient changed");
        o.check(a.head_grads[1].data == b.head_grads[1].data, name + ": dvt head gradient changed");
        o.check(a.task_losses[1] == b.task_losses[1], name + ": dvt loss changed");
        o.check(nonzero > 0, name + ": task gradient is identically zero (vacuous comparison)");
        o.note(name + ": " + std::to_string(a.body_grads.data.size() + a.head_grads[1].data.size()) +
               " gradient entries bitwise equal with 16 of 32 rows Missing (" + std::to_string(nonzero) +
               " nonzero body entries)");
    }
    return o;
}

// ---------------------------------------------------------------------------
// 5. Strategy ordering

const std::vector<std::string> kSixTasks{"death30", "dvt", "pe", "pneumonia", "aki", "delirium"};

corpus::CorpusSpec ordering_target(std::uint64_t seed) {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = 2000;
    spec.seed = mix_seed(seed, {1});
    spec.tasks.clear();
    for (const auto& t : kSixTasks) spec.tasks[t] = {0.1, 1.0, 0.8};
    return spec;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

Outcome strategy_ordering(int n_seeds) {
    Outcome o;
    const auto t0 = clock_type::now();
    const std::vector<std::string> order{"foundation", "self_supervised", "pretrained_only", "cbow"};
    std::map<std::string, std::vector<double>> per_seed;
    std::vector<double> permuted;

    for (int s = 1; s <= n_seeds; ++s) {
        const auto seed = static_cast<std::uint64_t>(s);
        const auto tspec = ordering_target(seed);
        // Pretraining corpus: disjoint seed, no label signal, same lexicon.
        auto pspec = tspec;
        pspec.n_docs = 4000;
        pspec.seed = mix_seed(seed, {2});
        pspec.signal_background = 0.05;
        for (auto& [_, t] : pspec.tasks) t.signal_strength = 0.0;

        const auto pre = corpus::generate_corpus(pspec);
        const auto target = corpus::generate_corpus(tspec);
        const auto vocab = text::build_vocab(pre, 1);
        transformer::ArchConfig arch;  // d = 64
        arch.vocab_size = static_cast<int>(vocab.size());
        arch.seed = mix_seed(seed, {3});
        finetune::FineTuneConfig ft;
        ft.epochs = 2;
        ft.adam.learning_rate = 1e-3;
        ft.seed = mix_seed(seed, {4});
        const auto base = finetune::pretrain<float>(arch, pre, vocab, ft);

        std::vector<eval::PipelineConfig> pipelines;
        for (auto st : {finetune::Strategy::PretrainedOnly, finetune::Strategy::SelfSupervised,
                        finetune::Strategy::Foundation}) {
            eval::PipelineConfig p;
            p.finetune = ft;
            p.finetune.strategy = st;
            pipelines.push_back(p);
        }
        eval::PipelineConfig cbow;
        cbow.representation = eval::Representation::Baseline;
        cbow.method = baselines::Method::CBOW;
        cbow.baseline.seed = mix_seed(seed, {5});
        pipelines.push_back(cbow);

        eval::EvalConfig ec;
        ec.seed = mix_seed(seed, {6});
        const auto report = eval::nested_cv(target, pipelines, ec, &base);
        std::ostringstream line;
        line << "seed " << s << ":";
        for (const auto& name : order) {
            std::vector<double> task_means;
            for (const auto& e : report.entries)
                if (e.strategy == name) task_means.push_back(*e.summary("auroc").mean);
            o.check(task_means.size() == kSixTasks.size(), name + " missing tasks in seed " + std::to_string(s));
            per_seed[name].push_back(mean_of(task_means));
            line << " " << name << " " << fmt("%.4f", per_seed[name].back());
        }

        // Control: the same foundation pipeline with every label column shuffled.
        auto shuffled = target;
        Rng rng(mix_seed(seed, {7}));
        for (std::size_t t = 0; t < shuffled.tasks.size(); ++t) {
            std::vector<corpus::Label> col;
            for (const auto& n : shuffled.notes) col.push_back(n.labels[t]);
            rng.shuffle(col);
            for (std::size_t i = 0; i < col.size(); ++i) shuffled.notes[i].labels[t] = col[i];
        }
        const auto control = eval::nested_cv(shuffled, {pipelines[2]}, ec, &base);
        std::vector<double> task_means;
        for (const auto& e : control.entries) task_means.push_back(*e.summary("auroc").mean);
        permuted.push_back(mean_of(task_means));
        line << " | permuted " << fmt("%.4f", permuted.back()) << "  (" << fmt("%.0f s", seconds_since(t0)) << ")";
        o.note(line.str());
        std::cout << "    " << line.str() << std::endl;  // progress for a long criterion
    }

    std::ostringstream means;
    means << "mean AUROC over " << n_seeds << " seeds x 6 tasks:";
    for (const auto& name : order) means << " " << name << " " << fmt("%.4f", mean_of(per_seed[name]));
    o.note(means.str());
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
        const double gap = mean_of(per_seed[order[i]]) - mean_of(per_seed[order[i + 1]]);
        o.note(order[i] + " - " + order[i + 1] + " = " + fmt("%+.4f", gap));
        o.check(gap >= 0, order[i] + " below " + order[i + 1]);
    }
    const double headline = mean_of(per_seed["foundation"]) - mean_of(per_seed["cbow"]);
    o.note("foundation - cbow = " + fmt("%+.4f", headline) + " (needs >= 0.05)");
    o.check(headline >= 0.05, "foundation-vs-baseline gap below 0.05");
    const double control = mean_of(permuted);
    o.note("permuted-label control " + fmt("%.4f", control) + " (needs 0.5 +- 0.06)");
    o.check(std::abs(control - 0.5) <= 0.06, "permuted-label control outside 0.5 +- 0.06");
    const double secs = seconds_since(t0);
    o.note("runtime " + fmt("%.0f s", secs));
    o.check(secs < 1800, "runtime under 30 min");
    return o;
}

// ---------------------------------------------------------------------------
// 6. GBT correctness

Outcome gbt() {
    Outcome o;
    // Worked example: x = 0..3, y = 0,0,1,1, lambda = 1, from p = 1/2 (g = p - y, h = 1/4).
    std::vector<double> flat{0, 1, 2, 3};
    const auto x = predict::FeatureMatrix::from_flat(flat, 1);
    const std::vector<int> y{0, 0, 1, 1};
    predict::GBTParams hp;
    hp.rounds = 1;
    hp.max_depth = 1;
    hp.min_child_weight = 0.0;
    const auto m = predict::train_gbt(x, y, hp);
    double best_gain = -1, best_thr = 0;
    for (int cut = 1; cut < 4; ++cut) {
        double gl = 0, hl = 0, gr = 0, hr = 0;
        for (int i = 0; i < 4; ++i) {
            const double g = 0.5 - y[static_cast<std::size_t>(i)];
            (i < cut ? gl : gr) += g;
            (i < cut ? hl : hr) += 0.25;
        }
        const double gain =
            0.5 * (gl * gl / (hl + 1.0) + gr * gr / (hr + 1.0) - (gl + gr) * (gl + gr) / (hl + hr + 1.0));
        if (gain > best_gain) best_gain = gain, best_thr = cut - 0.5;
    }
    const auto& root = m.trees.at(0).nodes.at(0);
    o.note("enumeration: best threshold " + fmt("%.1f", best_thr) + ", gain " + fmt("%.17g", best_gain) +
           "; trained root: threshold " + fmt("%.1f", root.threshold) + ", gain " + fmt("%.17g", root.gain));
    o.check(root.feature == 0 && root.threshold == best_thr, "root split differs from the enumeration");
    o.check(std::abs(root.gain - best_gain) <= 1e-12 * std::max(1.0, best_gain), "root gain differs");

    // Monotone training loss on planted-corpus embeddings.
    const auto ds = corpus::generate_corpus(ordering_target(1));
    baselines::BaselineHyperparams bhp;
    bhp.seed = 5;
    const auto emb = baselines::train(baselines::Method::CBOW, ds, bhp);
    std::vector<float> feats;
    for (const auto& n : ds.notes) {
        const auto v = baselines::embed_document(emb, n.text);
        feats.insert(feats.end(), v.begin(), v.end());
    }
    const auto fx = predict::FeatureMatrix::from_flat(feats, static_cast<std::size_t>(emb.dim));
    predict::GBTParams full;
    full.rounds = 100;
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        std::vector<corpus::Label> labels;
        for (const auto& n : ds.notes) labels.push_back(n.labels[t]);
        const auto rows = predict::select_labeled(fx, labels);
        const auto model = predict::train_gbt(rows.x, rows.y, full);
        std::size_t rises = 0;
        for (std::size_t r = 1; r < model.train_loss.size(); ++r) rises += model.train_loss[r] > model.train_loss[r - 1];
        o.check(model.train_loss.size() == 101, ds.tasks[t].name + ": loss trace length");
        o.check(rises == 0, ds.tasks[t].name + ": training loss rose " + std::to_string(rises) + " times");
        o.note(ds.tasks[t].name + ": loss " + fmt("%.4f", model.train_loss.front()) + " -> " +
               fmt("%.4f", model.train_loss.back()) + " over 100 rounds, " + std::to_string(rises) + " increases");
    }
    return o;
}

// ---------------------------------------------------------------------------
// 7. Nested-CV hygiene

corpus::Dataset hygiene_corpus(std::size_t n, std::uint64_t seed, double signal) {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = n;
    spec.vocab_size = 150;
    spec.length_mean = 8.0;
    spec.length_sd = 2.0;
    spec.length_min = 3;
    spec.tasks = {{"death30", {0.3, 1.0, signal}}, {"dvt", {0.3, 0.7, signal}}};
    spec.seed = seed;
    return corpus::generate_corpus(spec);
}

Outcome hygiene() {
    Outcome o;
    const auto ds = hygiene_corpus(150, 23, 1.0);
    const auto pre = hygiene_corpus(120, 40, 0.0);
    eval::EvalConfig cfg;
    cfg.k_outer = 3;
    cfg.k_inner = 2;
    cfg.seed = 17;
    cfg.tasks = {"death30", "dvt"};
    const auto folds = corpus::stratified_split(ds, cfg.k_outer, "death30", 5);

    transformer::ArchConfig a;
    a.layers = 1;
    a.d_model = 8;
    a.heads = 2;
    a.d_ff = 16;
    a.max_len = 16;
    a.seed = 3;
    const auto vocab = text::build_vocab(pre, 1);
    a.vocab_size = static_cast<int>(vocab.size());
    finetune::FineTuneConfig pc;
    pc.epochs = 1;
    pc.batch_size = 16;
    pc.seed = 9;
    const auto base = finetune::pretrain<float>(a, pre, vocab, pc);

    // Predictor-only scope: the fine-tuned representation is fitted once per
    // outer fold; the inner search covers predictor settings.
    eval::PipelineConfig pred_only;
    pred_only.name = "self_predictor_tuned";
    pred_only.finetune.strategy = finetune::Strategy::SelfSupervised;
    pred_only.finetune.epochs = 1;
    pred_only.finetune.batch_size = 16;
    pred_only.finetune.seed = 4;
    pred_only.predictor.gbt.rounds = 20;
    pred_only.grid = {nlohmann::json{{"predictor", {{"gbt", {{"max_depth", 1}}}}}},
                      nlohmann::json{{"predictor", {{"gbt", {{"max_depth", 2}}}}}}};

    // Full-pipeline scope: every inner fold refits the fine-tuning too.
    eval::PipelineConfig full = pred_only;
    full.name = "foundation_full_tuned";
    full.finetune.strategy = finetune::Strategy::Foundation;
    full.predictor.kind = predict::PredictorKind::LogReg;
    full.tune = eval::TuneScope::FullPipeline;
    full.grid = {nlohmann::json{{"finetune", {{"epochs", 0}}}}, nlohmann::json{{"finetune", {{"epochs", 1}}}}};

    const std::vector<eval::PipelineConfig> pipelines{pred_only, full};
    const auto report = eval::nested_cv(ds, pipelines, cfg, &base, &folds);

    // Corrupt every held-out label and every held-out text, fold by fold.
    for (int f = 0; f < cfg.k_outer; ++f) {
        const auto test_rows = folds.test_rows(f);
        auto corrupted = ds;
        for (auto r : test_rows) {
            for (auto& l : corrupted.notes[r].labels)
                if (l) l = 1.0 - *l;
        }
        const auto report_c = eval::nested_cv(corrupted, pipelines, cfg, &base, &folds);
        const auto train_only = ds.subset(folds.train_rows(f));
        const auto test_only = ds.subset(test_rows);
        for (const auto& p : pipelines) {
            const auto direct = eval::fit_and_score(p, train_only, test_only, cfg.tasks, cfg, &base,
                                                    mix_seed(cfg.seed, {0xf01d, static_cast<std::uint64_t>(f)}));
            for (const auto& task : cfg.tasks) {
                const auto* e = report.find(task, p.label(), p.predictor_label());
                const auto* ec = report_c.find(task, p.label(), p.predictor_label());
                const auto where = p.name + "/" + task + " fold " + std::to_string(f);
                if (!e || !ec) {
                    o.check(false, where + " missing from report");
                    continue;
                }
                const auto& got = e->folds[static_cast<std::size_t>(f)].scores.scores;
                o.check(!got.empty(), where + ": no held-out scores");
                o.check(got == ec->folds[static_cast<std::size_t>(f)].scores.scores,
                        where + ": held-out labels changed held-out scores");
                o.check(got == direct.at(task).scores, where + ": scores differ from a fit without the held-out rows");
                o.check(e->folds[static_cast<std::size_t>(f)].selected == direct.at(task).selected,
                        where + ": selected grid point differs");
            }
        }
    }
    o.note("scopes predictor_only and full_pipeline, 3 outer folds x 2 tasks: held-out scores bit-identical "
           "with held-out labels flipped and with held-out rows physically removed from fitting");
    return o;
}

// ---------------------------------------------------------------------------
// 8. End-to-end smoke through the CLI binary

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

Outcome cli_smoke(const std::string& cli) {
    Outcome o;
    if (cli.empty() || !fs::exists(cli)) {
        o.check(false, "periloom binary not found (pass --cli)");
        return o;
    }
    const auto dir = fs::temp_directory_path() / "periloom_acceptance_smoke";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const nlohmann::json config = {
        {"seed", 7},
        {"output_dir", dir.string()},
        {"corpus", {{"spec", {{"n_docs", 500}}}}},
        {"pretrain_corpus", {{"spec", {{"n_docs", 1000}}}}},
        {"pretrain", {{"epochs", 2}}},
        {"finetune", {{"strategy", "foundation"}, {"epochs", 1}}},
        {"eval", {{"k_outer", 3}, {"k_inner", 2}}},
    };
    io::write_file_atomic(dir / "config.json", config.dump(2));

    const std::vector<std::string> steps{
        "generate-corpus",
        "pretrain",
        "finetune",
        "embed --checkpoint " + shell_quote((dir / "finetuned_foundation.ckpt").string()),
        "embed --method cbow",
        "train-predictor --embeddings " + shell_quote((dir / "embeddings_finetuned_foundation.bin").string()),
        "evaluate",
        "probe",
        "report",
    };
    const auto t0 = clock_type::now();
    for (const auto& step : steps) {
        const auto cmd = shell_quote(cli) + " --config " + shell_quote((dir / "config.json").string()) + " " + step +
                         " >> " + shell_quote((dir / "console.log").string()) + " 2>&1";
        const int rc = std::system(cmd.c_str());
        o.check(rc == 0, "`periloom " + step + "` exited with status " + std::to_string(rc));
        if (rc != 0) return o;
    }
    const double secs = seconds_since(t0);
    o.note("generate(n=500) -> pretrain(2 epochs) -> finetune foundation -> embed x2 -> train-predictor -> "
           "evaluate(k=3, 8 strategies x 6 tasks) -> probe -> report: " + fmt("%.1f s", secs));
    o.check(secs < 600, "pipeline took longer than 10 min");

    std::size_t artifacts = 0;
    auto round_trip = [&](const std::string& rel, const std::function<std::string(const std::string&)>& reparse) {
        const auto path = dir / rel;
        if (!fs::exists(path)) {
            o.check(false, rel + " not written");
            return;
        }
        const auto bytes = io::read_file(path);
        try {
            o.check(reparse(bytes) == bytes, rel + " does not re-serialize to the same bytes");
        } catch (const std::exception& e) {
            o.check(false, rel + " failed to parse: " + e.what());
        }
        const auto meta = nlohmann::json::parse(io::read_file(fs::path(path.string() + ".meta.json")));
        o.check(meta.at("fnv1a64") == hex64(fnv1a64(bytes)), rel + " sidecar hash mismatch");
        o.check(meta.at("version") == PERILOOM_VERSION && meta.at("config_hash").is_string(),
                rel + " sidecar lacks provenance");
        ++artifacts;
    };
    const auto registry = corpus::CorpusSpec::paper_defaults().registry();
    for (const char* f : {"corpus.jsonl", "pretrain_corpus.jsonl"})
        round_trip(f, [&](const std::string& b) {
            const auto ds = corpus::parse_jsonl(b, registry);
            return corpus::to_jsonl(ds);
        });
    for (const char* f : {"pretrained.ckpt", "finetuned_foundation.ckpt"})
        round_trip(f, [&](const std::string& b) {
            const auto c = tensor_io::Container::deserialize(b);
            const auto m = finetune::from_container<float>(c);
            auto again = finetune::to_container(m);
            again.provenance = c.provenance;
            return again.serialize();
        });
    for (const char* f : {"embeddings_finetuned_foundation.bin", "embeddings_cbow.bin"})
        round_trip(f, [&](const std::string& b) {
            const auto c = tensor_io::Container::deserialize(b);
            const auto rows = static_cast<std::int64_t>(c.meta.at("ids").size());
            const auto v = c.get<float>("embeddings");
            if (rows == 0 || v.size() % static_cast<std::size_t>(rows) != 0) return std::string("bad shape");
            return c.serialize();
        });
    round_trip("predictor_death30.bin", [&](const std::string& b) {
        const auto c = tensor_io::Container::deserialize(b);
        auto again = predict::to_container(predict::from_container(c));
        again.meta = c.meta;
        again.provenance = c.provenance;
        return again.serialize();
    });
    for (const char* f : {"eval/folds.csv", "eval/report.csv"})
        round_trip(f, [](const std::string& b) { return eval::EvalReport::from_csv(b).to_csv(); });
    round_trip("eval/predictions.csv", [&](const std::string& b) {
        auto r = eval::EvalReport::from_csv(io::read_file(dir / "eval/folds.csv"));
        r.attach_predictions(b);
        return r.predictions_csv();
    });
    for (const char* f : {"eval/summary.json", "eval/report_summary.json", "probe.json"})
        round_trip(f, [&](const std::string& b) {
            const auto j = nlohmann::ordered_json::parse(b);
            if (std::string(f) == "probe.json") return probe::ProbeResult::from_json(j).to_json().dump(2) + "\n";
            return j.dump(2) + "\n";
        });
    for (const char* f : {"eval/auroc.svg", "eval/report.svg"})
        round_trip(f, [](const std::string& b) {
            // No SVG parser: require a single balanced <svg> root.
            const bool ok = b.rfind("<svg", 0) == 0 && b.find("</svg>") == b.size() - 7;
            return ok ? b : std::string();
        });
    o.note(std::to_string(artifacts) + " artifacts re-parsed to identical bytes, sidecar hashes verified");
    const auto summary = nlohmann::json::parse(io::read_file(dir / "eval/summary.json"));
    o.note("summary entries: " + std::to_string(summary.at("results").size()));
    return o;
}

// ---------------------------------------------------------------------------
// 9. Report convention

Outcome report_convention() {
    Outcome o;
    // Hand computation: mean 0.75; squared deviations 0.0025 + 0.0025 + 0.0225
    // + 0.0225 + 0 = 0.05; sample variance 0.0125; SE = sqrt(0.0125 / 5) = 0.05;
    // CI = 0.75 -+ 1.96 * 0.05 = [0.652, 0.848].
    const std::vector<double> values{0.7, 0.8, 0.9, 0.6, 0.75};
    eval::EvalReport r;
    r.k = 5;
    eval::ReportEntry e{"aki", "foundation", "gbt", {}};
    for (int f = 0; f < 5; ++f) {
        eval::FoldResult fr;
        fr.fold = f;
        fr.metrics.n = 10;
        fr.metrics.positives = 3;
        fr.metrics.auroc = values[static_cast<std::size_t>(f)];
        e.folds.push_back(fr);
    }
    r.entries.push_back(e);

    // Through the emitted JSON, and again after a CSV round trip (the `report` path).
    for (const auto& [label, rep] : {std::pair<std::string, eval::EvalReport>{"direct", r},
                                     {"via CSV", eval::EvalReport::from_csv(r.to_csv())}}) {
        const auto js = nlohmann::json::parse(rep.summary_json().dump());
        const nlohmann::json* au = nullptr;
        for (const auto& ent : js.at("results"))
            if (ent.at("task") == "aki") au = &ent.at("metrics").at("auroc");
        if (!au) {
            o.check(false, label + ": no AUROC summary emitted");
            continue;
        }
        const double mean = au->at("mean"), se = au->at("se"), lo = au->at("ci_low"), hi = au->at("ci_high");
        o.note(label + ": mean " + fmt("%.12f", mean) + ", SE " + fmt("%.12f", se) + ", CI [" + fmt("%.12f", lo) +
               ", " + fmt("%.12f", hi) + "]");
        o.check(std::abs(mean - 0.75) <= 1e-9, label + ": mean");
        o.check(std::abs(se - 0.05) <= 1e-9, label + ": SE");
        o.check(std::abs(lo - 0.652) <= 1e-9, label + ": CI low");
        o.check(std::abs(hi - 0.848) <= 1e-9, label + ": CI high");
    }
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"periloom acceptance suite"};
    std::string cli_path;
    std::vector<int> only;
    int seeds = 5;
    std::string report_path;
    app.add_option("--cli", cli_path, "path to the periloom binary (criterion 8)");
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    app.add_option("--seeds", seeds, "seeds for criterion 5")->check(CLI::PositiveNumber);
    app.add_option("--report", report_path, "also write the verdicts and evidence to this file");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradients},
        {"metric oracle equivalence", metric_oracle},
        {"reduction lattice", reduction_lattice},
        {"missing-label neutrality", missing_neutrality},
        {"strategy ordering", [&] { return strategy_ordering(seeds); }},
        {"GBT correctness", gbt},
        {"nested-CV hygiene", hygiene},
        {"end-to-end smoke", [&] { return cli_smoke(cli_path); }},
        {"report convention", report_convention},
    };

    int failed = 0;
    std::ostringstream report;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = clock_type::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        failed += !o.pass;
        std::ostringstream block;
        block << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << criteria[i].first << "  ("
              << fmt("%.1f s", seconds_since(t0)) << ")\n";
        for (const auto& l : o.lines) block << "    " << l << "\n";
        std::cout << block.str() << std::flush;
        report << block.str();
    }
    const auto verdict =
        failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : std::string("acceptance: all passed");
    std::cout << verdict << std::endl;
    report << verdict << "\n";
    if (!report_path.empty()) io::write_file_atomic(report_path, report.str());
    return failed ? 1 : 0;
}
