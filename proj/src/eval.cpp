#include "periloom/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "periloom/error.hpp"
#include "periloom/hash.hpp"
#include "periloom/random.hpp"
#include "periloom/transformer.hpp"

namespace periloom::eval {

namespace {

void check_binary(const std::vector<double>& scores, const std::vector<int>& labels, const char* what) {
    if (scores.size() != labels.size())
        throw DataError(std::string(what) + ": " + std::to_string(scores.size()) + " scores but " +
                        std::to_string(labels.size()) + " labels");
    for (double s : scores)
        if (!std::isfinite(s)) throw DataError(std::string(what) + ": non-finite score");
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError(std::string(what) + ": labels must be 0/1");
}

// Indices sorted by score; equal scores keep input order so grouping is
// deterministic.
std::vector<std::size_t> order_by_score(const std::vector<double>& scores, bool descending) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return descending ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    return idx;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auroc");
    double pos = 0, neg = 0;
    for (int y : labels) (y ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw DataError("auroc: both classes must be present");

    const auto idx = order_by_score(scores, false);
    // Average 1-based ranks over tie groups; the sum stays a multiple of 1/2.
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        double group_pos = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) group_pos += labels[idx[j++]];
        const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        rank_sum += avg_rank * group_pos;
        i = j;
    }
    const double u = rank_sum - pos * (pos + 1) / 2.0;
    return u / (pos * neg);
}

double auprc(const std::vector<double>& scores, const std::vector<int>& labels) {
    check_binary(scores, labels, "auprc");
    double total_pos = 0;
    for (int y : labels) total_pos += y;
    if (total_pos == 0) throw DataError("auprc: no positive labels");

    const auto idx = order_by_score(scores, true);
    double tp = 0, fp = 0, prev_recall = 0, ap = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        const double recall = tp / total_pos;
        const double precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

double mse(const std::vector<double>& preds, const std::vector<double>& targets) {
    if (preds.size() != targets.size())
        throw DataError("mse: " + std::to_string(preds.size()) + " predictions but " +
                        std::to_string(targets.size()) + " targets");
    if (preds.empty()) throw DataError("mse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double r = preds[i] - targets[i];
        s += r * r;
    }
    return s / static_cast<double>(preds.size());
}

const std::vector<std::string>& metric_names() {
    static const std::vector<std::string> names{"auroc",       "auprc",     "accuracy", "sensitivity",
                                                "specificity", "precision", "f1",       "mse"};
    return names;
}

namespace {

std::optional<double> MetricSet::*metric_member(const std::string& name) {
    if (name == "auroc") return &MetricSet::auroc;
    if (name == "auprc") return &MetricSet::auprc;
    if (name == "accuracy") return &MetricSet::accuracy;
    if (name == "sensitivity") return &MetricSet::sensitivity;
    if (name == "specificity") return &MetricSet::specificity;
    if (name == "precision") return &MetricSet::precision;
    if (name == "f1") return &MetricSet::f1;
    if (name == "mse") return &MetricSet::mse;
    throw ValidationError("metric", "unknown metric '" + name + "'");
}

}  // namespace

std::optional<double> metric_value(const MetricSet& m, const std::string& name) { return m.*metric_member(name); }

void set_metric(MetricSet& m, const std::string& name, std::optional<double> v) { m.*metric_member(name) = v; }

MetricSet threshold_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("threshold", "must be in [0,1]");
    check_binary(scores, labels, "threshold_metrics");
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool predicted = scores[i] >= tau;
        if (labels[i])
            (predicted ? tp : fn) += 1;
        else
            (predicted ? fp : tn) += 1;
    }
    MetricSet m;
    m.n = scores.size();
    m.positives = static_cast<std::size_t>(tp + fn);
    m.threshold = tau;
    auto ratio = [](double num, double den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return num / den;
    };
    m.accuracy = ratio(tp + tn, tp + tn + fp + fn);
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    m.precision = ratio(tp, tp + fp);
    // 2TP/(2TP+FP+FN) is the harmonic mean of precision and sensitivity and
    // stays well defined when both are 0.
    if (m.precision && m.sensitivity) m.f1 = ratio(2 * tp, 2 * tp + fp + fn);
    return m;
}

MetricSet compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double tau) {
    MetricSet m = threshold_metrics(scores, labels, tau);
    if (m.positives > 0 && m.positives < m.n) m.auroc = auroc(scores, labels);
    if (m.positives > 0) m.auprc = auprc(scores, labels);
    return m;
}

// ---------------------------------------------------------------------------
// Configuration

const char* to_string(TuneScope s) { return s == TuneScope::PredictorOnly ? "predictor_only" : "full_pipeline"; }

TuneScope tune_scope_from_string(const std::string& s) {
    if (s == "predictor_only") return TuneScope::PredictorOnly;
    if (s == "full_pipeline") return TuneScope::FullPipeline;
    throw ValidationError("tune", "expected predictor_only or full_pipeline, got '" + s + "'");
}

namespace {

void check_label(const std::string& field, const std::string& s) {
    if (s.empty()) throw ValidationError(field, "must not be empty");
    if (s.find_first_of(",\"\n\r") != std::string::npos)
        throw ValidationError(field, "must not contain commas, quotes or newlines: '" + s + "'");
}

bool strategy_has_heads(finetune::Strategy s) {
    return s == finetune::Strategy::SemiSupervised || s == finetune::Strategy::Foundation;
}

}  // namespace

void PipelineConfig::validate() const {
    check_label("name", label());
    if (representation == Representation::Transformer) {
        // Task lists may be filled in per evaluated task, so only check the rest.
        auto probe = finetune;
        if (probe.strategy == finetune::Strategy::SemiSupervised && probe.task.empty()) probe.task = "-";
        if (probe.strategy == finetune::Strategy::Foundation && probe.tasks.empty()) {
            probe.tasks.assign(std::max<std::size_t>(1, probe.lambdas.size()), "-");
        }
        probe.validate();
        if (use_head && !strategy_has_heads(finetune.strategy))
            throw ValidationError("use_head", std::string("strategy ") + finetune::to_string(finetune.strategy) +
                                                  " trains no task heads");
    } else {
        baseline.validate();
        if (use_head) throw ValidationError("use_head", "baseline representations have no task heads");
    }
    if (!use_head) {
        predictor.gbt.validate();
        predictor.logreg.validate();
        predictor.rf.validate();
    }
    for (const auto& point : grid) {
        if (!point.is_object()) throw ValidationError("grid", "every grid point must be a JSON object");
        for (const auto& [key, _] : point.items()) {
            if (key != "predictor" && key != "finetune" && key != "baseline")
                throw ValidationError("grid", "unknown grid member '" + key + "'");
            if (tune == TuneScope::PredictorOnly && key != "predictor")
                throw ValidationError("grid", "predictor_only tuning may only vary 'predictor', found '" + key + "'");
        }
        if (use_head && point.contains("predictor"))
            throw ValidationError("grid", "head scoring has no predictor hyperparameters to tune");
    }
    if (tune == TuneScope::PredictorOnly && use_head && grid.size() > 1)
        throw ValidationError("grid", "head scoring under predictor_only tuning admits a single grid point");
    for (const auto& point : grid) apply(point);  // surfaces bad values now
}

std::string PipelineConfig::label() const {
    if (!name.empty()) return name;
    if (representation == Representation::Baseline) return baselines::to_string(method);
    return finetune::to_string(finetune.strategy);
}

std::string PipelineConfig::predictor_label() const {
    return use_head ? "head" : predict::to_string(predictor.kind);
}

PipelineConfig PipelineConfig::apply(const nlohmann::json& point) const {
    PipelineConfig out = *this;
    out.grid.clear();
    if (point.is_null() || point.empty()) return out;
    if (!point.is_object()) throw ValidationError("grid", "every grid point must be a JSON object");
    if (point.contains("predictor")) {
        nlohmann::json j = predictor.to_json();
        j.merge_patch(point.at("predictor"));
        out.predictor = predict::PredictorParams::from_json(j);
    }
    if (point.contains("finetune")) {
        nlohmann::json j = finetune.to_json();
        j.merge_patch(point.at("finetune"));
        out.finetune = finetune::FineTuneConfig::from_json(j);
    }
    if (point.contains("baseline")) {
        nlohmann::json j = baseline.to_json();
        j.merge_patch(point.at("baseline"));
        out.baseline = baselines::BaselineHyperparams::from_json(j);
    }
    return out;
}

nlohmann::ordered_json PipelineConfig::to_json() const {
    nlohmann::ordered_json j;
    j["name"] = label();
    if (representation == Representation::Transformer) {
        j["representation"] = "transformer";
        j["finetune"] = finetune.to_json();
    } else {
        j["representation"] = baselines::to_string(method);
        j["baseline"] = baseline.to_json();
    }
    j["predictor"] = use_head ? nlohmann::ordered_json("head") : predictor.to_json();
    j["grid"] = nlohmann::ordered_json::array();
    for (const auto& g : grid) j["grid"].push_back(nlohmann::ordered_json::parse(g.dump()));
    j["tune"] = to_string(tune);
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("pipeline", "expected a JSON object");
    PipelineConfig p;
    try {
        p.name = j.value("name", std::string{});
        const std::string rep = j.value("representation", std::string("transformer"));
        if (rep == "transformer") {
            p.representation = Representation::Transformer;
        } else {
            p.representation = Representation::Baseline;
            try {
                p.method = baselines::method_from_string(rep);
            } catch (const Error&) {
                throw ValidationError("representation", "expected transformer, cbow, glove, fasttext or doc2vec, got '" +
                                                            rep + "'");
            }
        }
        if (j.contains("finetune")) p.finetune = finetune::FineTuneConfig::from_json(j.at("finetune"));
        if (j.contains("baseline")) p.baseline = baselines::BaselineHyperparams::from_json(j.at("baseline"));
        if (j.contains("predictor")) {
            const auto& pj = j.at("predictor");
            if (pj.is_string() && pj.get<std::string>() == "head") {
                p.use_head = true;
            } else if (pj.is_string()) {
                p.predictor.kind = predict::predictor_from_string(pj.get<std::string>());
            } else {
                p.predictor = predict::PredictorParams::from_json(pj);
            }
        }
        if (j.contains("grid")) {
            if (!j.at("grid").is_array()) throw ValidationError("grid", "expected an array of objects");
            for (const auto& g : j.at("grid")) p.grid.push_back(g);
        }
        if (j.contains("tune")) p.tune = tune_scope_from_string(j.at("tune").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("pipeline", e.what());
    }
    return p;
}

void EvalConfig::validate() const {
    if (k_outer < 2) throw ValidationError("k_outer", "must be >= 2");
    if (k_inner < 2) throw ValidationError("k_inner", "must be >= 2");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("threshold", "must be in [0,1]");
    if (jobs < 1) throw ValidationError("jobs", "must be >= 1");
}

nlohmann::ordered_json EvalConfig::to_json() const {
    return {{"k_outer", k_outer}, {"k_inner", k_inner},           {"seed", seed}, {"threshold", threshold},
            {"tasks", tasks},     {"stratify_task", stratify_task}, {"jobs", jobs}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    try {
        c.k_outer = j.value("k_outer", c.k_outer);
        c.k_inner = j.value("k_inner", c.k_inner);
        c.seed = j.value("seed", c.seed);
        c.threshold = j.value("threshold", c.threshold);
        c.tasks = j.value("tasks", c.tasks);
        c.stratify_task = j.value("stratify_task", c.stratify_task);
        c.jobs = j.value("jobs", c.jobs);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("eval", e.what());
    }
    return c;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

std::vector<std::string> texts_of(const corpus::Dataset& ds) {
    std::vector<std::string> out;
    out.reserve(ds.size());
    for (const auto& n : ds.notes) out.push_back(n.text);
    return out;
}

std::vector<std::string> ids_of(const corpus::Dataset& ds) {
    std::vector<std::string> out;
    out.reserve(ds.size());
    for (const auto& n : ds.notes) out.push_back(n.id);
    return out;
}

// Resolves per-task details left open in the config: the semi-supervised
// head task and the foundation task list.
PipelineConfig resolve_for(const PipelineConfig& p, const std::string& task, const std::vector<std::string>& tasks) {
    PipelineConfig out = p;
    if (p.representation != Representation::Transformer) return out;
    if (p.finetune.strategy == finetune::Strategy::SemiSupervised && p.finetune.task.empty()) out.finetune.task = task;
    if (p.finetune.strategy == finetune::Strategy::Foundation && p.finetune.tasks.empty()) out.finetune.tasks = tasks;
    return out;
}

// Key of everything that shapes the fitted representation.
std::string representation_key(const PipelineConfig& p) {
    if (p.representation == Representation::Baseline)
        return std::string(baselines::to_string(p.method)) + p.baseline.to_json().dump();
    return "transformer" + p.finetune.to_json().dump();
}

struct LabeledView {
    std::vector<std::size_t> rows;
    std::vector<int> y;
};

LabeledView labeled_rows(const corpus::Dataset& ds, const std::string& task) {
    LabeledView v;
    const auto t = ds.tasks.index_of(task);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& l = ds.notes[i].labels[t];
        if (!l) continue;
        if (*l != 0.0 && *l != 1.0) throw DataError("task '" + task + "' has a non-binary label");
        v.rows.push_back(i);
        v.y.push_back(*l == 1.0 ? 1 : 0);
    }
    return v;
}

bool both_classes(const std::vector<int>& y) {
    bool pos = false, neg = false;
    for (int v : y) (v ? pos : neg) = true;
    return pos && neg;
}

template <class V>
V pick(const V& v, const std::vector<std::size_t>& rows) {
    V out;
    out.reserve(rows.size());
    for (auto r : rows) out.push_back(v[r]);
    return out;
}

// Fits the scorer (representation already given) on `train` and returns
// scores for the labeled rows of `test`.
struct Scored {
    std::vector<std::size_t> rows;  // labeled rows of test
    std::vector<int> y;
    std::vector<double> scores;
};

Scored fit_scorer_and_score(const PipelineConfig& p, const FittedRepresentation& rep,
                            const predict::FeatureMatrix* x_train, const corpus::Dataset& train,
                            const predict::FeatureMatrix* x_test, const corpus::Dataset& test,
                            const std::string& task) {
    Scored s;
    const auto te = labeled_rows(test, task);
    s.rows = te.rows;
    s.y = te.y;
    if (te.rows.empty()) return s;
    if (p.use_head) {
        const auto all = predict::head_proba(*rep.model, task, texts_of(test));
        s.scores = pick(all, te.rows);
        return s;
    }
    const auto tr = labeled_rows(train, task);
    if (!both_classes(tr.y))
        throw DataError("task '" + task + "': training rows must contain both classes");
    const auto predictor = predict::fit(p.predictor, x_train->subset(tr.rows), tr.y);
    s.scores = predictor.predict_proba(x_test->subset(te.rows));
    return s;
}

class RepresentationCache {
public:
    RepresentationCache(const corpus::Dataset& train, const finetune::FineTunedModel<float>* base)
        : train_(train), base_(base) {}

    struct Entry {
        FittedRepresentation rep;
        std::optional<predict::FeatureMatrix> x_train;
    };

    Entry& get(const PipelineConfig& p) {
        const auto key = representation_key(p);
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            Entry e;
            e.rep = fit_representation(p, train_, base_);
            it = cache_.emplace(key, std::move(e)).first;
        }
        if (!p.use_head && !it->second.x_train) it->second.x_train = it->second.rep.features(train_);
        return it->second;
    }

private:
    const corpus::Dataset& train_;
    const finetune::FineTunedModel<float>* base_;
    std::map<std::string, Entry> cache_;
};

// Mean inner AUROC of one grid point. Folds where the metric is undefined
// are skipped; nullopt when no fold is usable.
std::optional<double> inner_score(const PipelineConfig& point, const PipelineConfig& resolved_base,
                                  const corpus::Dataset& train, const corpus::FoldAssignment& inner,
                                  RepresentationCache& outer_cache, const std::string& task,
                                  const finetune::FineTunedModel<float>* base) {
    double sum = 0.0;
    int used = 0;
    for (int f = 0; f < inner.k; ++f) {
        const auto inner_train = train.subset(inner.train_rows(f));
        const auto inner_val = train.subset(inner.test_rows(f));
        const auto tr = labeled_rows(inner_train, task);
        const auto va = labeled_rows(inner_val, task);
        if (!both_classes(va.y)) continue;
        if (!point.use_head && !both_classes(tr.y)) continue;

        Scored s;
        if (point.tune == TuneScope::PredictorOnly) {
            // The representation is fitted once on the whole outer-training
            // part; only the predictor sees the inner split.
            auto& e = outer_cache.get(resolved_base);
            if (point.use_head) {
                s = fit_scorer_and_score(point, e.rep, nullptr, inner_train, nullptr, inner_val, task);
            } else {
                const auto xi = e.x_train->subset(inner.train_rows(f));
                const auto xv = e.x_train->subset(inner.test_rows(f));
                s = fit_scorer_and_score(point, e.rep, &xi, inner_train, &xv, inner_val, task);
            }
        } else {
            const auto rep = fit_representation(point, inner_train, base);
            std::optional<predict::FeatureMatrix> xi, xv;
            if (!point.use_head) {
                xi = rep.features(inner_train);
                xv = rep.features(inner_val);
            }
            s = fit_scorer_and_score(point, rep, xi ? &*xi : nullptr, inner_train, xv ? &*xv : nullptr, inner_val,
                                     task);
        }
        sum += auroc(s.scores, s.y);
        ++used;
    }
    if (used == 0) return std::nullopt;
    return sum / used;
}

}  // namespace

predict::FeatureMatrix FittedRepresentation::features(const corpus::Dataset& ds) const {
    if (model) {
        const auto d = static_cast<std::size_t>(model->body.arch.d_model);
        const auto flat = transformer::extract_embeddings(model->body, model->vocab, texts_of(ds));
        return predict::FeatureMatrix::from_flat(flat, d, ids_of(ds));
    }
    if (embeddings) {
        const auto d = static_cast<std::size_t>(embeddings->dim);
        std::vector<float> flat;
        flat.reserve(ds.size() * d);
        for (const auto& n : ds.notes) {
            const auto v = baselines::embed_document(*embeddings, n.text);
            flat.insert(flat.end(), v.begin(), v.end());
        }
        return predict::FeatureMatrix::from_flat(flat, d, ids_of(ds));
    }
    throw InvariantError("features: representation was never fitted");
}

FittedRepresentation fit_representation(const PipelineConfig& p, const corpus::Dataset& train,
                                        const finetune::FineTunedModel<float>* base) {
    FittedRepresentation rep;
    if (p.representation == Representation::Baseline) {
        rep.embeddings = baselines::train(p.method, train, p.baseline);
        return rep;
    }
    if (!base) throw ValidationError("pretrained", "transformer pipelines need a pretrained base model");
    rep.model = finetune::run_strategy(*base, train, p.finetune);
    return rep;
}

std::map<std::string, TaskScores> fit_and_score(const PipelineConfig& p, const corpus::Dataset& train,
                                                const corpus::Dataset& test, const std::vector<std::string>& tasks,
                                                const EvalConfig& cfg, const finetune::FineTunedModel<float>* base,
                                                std::uint64_t fold_seed) {
    p.validate();
    if (train.tasks != test.tasks) throw DataError("fit_and_score: train and test use different task registries");
    RepresentationCache cache(train, base);
    std::map<std::string, predict::FeatureMatrix> test_features;  // by representation key
    std::map<std::string, TaskScores> out;

    const std::vector<nlohmann::json> grid = p.grid.empty() ? std::vector<nlohmann::json>{nlohmann::json::object()}
                                                            : p.grid;
    for (const auto& task : tasks) {
        const auto resolved = resolve_for(p, task, tasks);
        // Rare tasks can leave a training fold with one class; its metrics
        // stay undefined instead of aborting the whole run.
        auto skip = [&](const char* why) {
            TaskScores ts;
            ts.selected = {{"skipped", why}};
            out.emplace(task, std::move(ts));
        };
        if (!resolved.use_head && !both_classes(labeled_rows(train, task).y)) {
            skip("training rows lack a class");
            continue;
        }

        // Inner search; a single point needs none.
        std::size_t best = 0;
        if (grid.size() > 1) {
            const auto inner =
                corpus::stratified_split(train, cfg.k_inner, task, mix_seed(fold_seed, {0x1a, fnv1a64(task)}));
            std::optional<double> best_score;
            for (std::size_t g = 0; g < grid.size(); ++g) {
                const auto point = resolve_for(p.apply(grid[g]), task, tasks);
                const auto s = inner_score(point, resolved, train, inner, cache, task, base);
                if (s && (!best_score || *s > *best_score)) {
                    best_score = s;
                    best = g;
                }
            }
            if (!best_score) {
                skip("no inner fold has both classes");
                continue;
            }
        }

        const auto chosen = resolve_for(p.apply(grid[best]), task, tasks);
        auto& entry = cache.get(chosen);
        const auto key = representation_key(chosen);
        const predict::FeatureMatrix* x_test = nullptr;
        if (!chosen.use_head) {
            auto it = test_features.find(key);
            if (it == test_features.end()) it = test_features.emplace(key, entry.rep.features(test)).first;
            x_test = &it->second;
        }
        const auto s = fit_scorer_and_score(chosen, entry.rep, entry.x_train ? &*entry.x_train : nullptr, train,
                                            x_test, test, task);
        TaskScores ts;
        for (auto r : s.rows) ts.ids.push_back(test.notes[r].id);
        ts.labels = s.y;
        ts.scores = s.scores;
        ts.selected = grid[best];
        out.emplace(task, std::move(ts));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reports

Summary summarize(const std::vector<std::optional<double>>& values) {
    Summary s;
    double sum = 0.0;
    for (const auto& v : values)
        if (v) {
            sum += *v;
            ++s.n;
        }
    if (s.n == 0) return s;
    const double n = static_cast<double>(s.n);
    s.mean = sum / n;
    if (s.n >= 2) {
        double ss = 0.0;
        for (const auto& v : values)
            if (v) ss += (*v - *s.mean) * (*v - *s.mean);
        s.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
        s.ci_low = *s.mean - 1.96 * *s.se;
        s.ci_high = *s.mean + 1.96 * *s.se;
    }
    return s;
}

Summary ReportEntry::summary(const std::string& metric) const {
    std::vector<std::optional<double>> values;
    for (const auto& f : folds) values.push_back(metric_value(f.metrics, metric));
    return summarize(values);
}

const ReportEntry* EvalReport::find(const std::string& task, const std::string& strategy,
                                    const std::string& predictor) const {
    for (const auto& e : entries)
        if (e.task == task && e.strategy == strategy && e.predictor == predictor) return &e;
    return nullptr;
}

namespace {

const std::vector<std::string> kFixedColumns{"task", "strategy", "predictor", "fold", "n", "positives", "threshold"};

std::vector<std::string> csv_header() {
    auto h = kFixedColumns;
    for (const auto& m : metric_names()) h.push_back(m);
    return h;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw ParseError(line_no, "unterminated quoted field");
    out.push_back(std::move(cur));
    return out;
}

std::vector<std::string> csv_lines(const std::string& csv) {
    std::vector<std::string> lines;
    std::istringstream in(csv);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    return lines;
}

double parse_double(const std::string& s, std::size_t line_no, const std::string& col) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end || s.empty())
        throw ParseError(line_no, "column '" + col + "': not a number: '" + s + "'");
    return v;
}

long long parse_int(const std::string& s, std::size_t line_no, const std::string& col) {
    long long v = 0;
    const auto* end = s.data() + s.size();
    const auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end || s.empty())
        throw ParseError(line_no, "column '" + col + "': not an integer: '" + s + "'");
    return v;
}

}  // namespace

std::string EvalReport::to_csv() const {
    std::string out;
    const auto header = csv_header();
    for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += "\n";
    for (const auto& e : entries) {
        for (const auto& f : e.folds) {
            out += csv_field(e.task) + "," + csv_field(e.strategy) + "," + csv_field(e.predictor) + "," +
                   std::to_string(f.fold) + "," + std::to_string(f.metrics.n) + "," +
                   std::to_string(f.metrics.positives) + "," + fmt_double(f.metrics.threshold);
            for (const auto& m : metric_names()) {
                const auto v = metric_value(f.metrics, m);
                out += ",";
                if (v) out += fmt_double(*v);
            }
            out += "\n";
        }
    }
    return out;
}

EvalReport EvalReport::from_csv(const std::string& csv) {
    const auto lines = csv_lines(csv);
    if (lines.empty()) throw ParseError(1, "empty report CSV");
    const auto header = csv_header();
    if (split_csv_line(lines[0], 1) != header) throw ParseError(1, "unexpected report CSV header");

    EvalReport r;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const std::size_t line_no = li + 1;
        const auto cells = split_csv_line(lines[li], line_no);
        if (cells.size() != header.size())
            throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, got " +
                                          std::to_string(cells.size()));
        FoldResult f;
        f.fold = static_cast<int>(parse_int(cells[3], line_no, "fold"));
        const auto n = parse_int(cells[4], line_no, "n");
        const auto pos = parse_int(cells[5], line_no, "positives");
        if (n < 0 || pos < 0 || pos > n) throw ParseError(line_no, "inconsistent n/positives");
        f.metrics.n = static_cast<std::size_t>(n);
        f.metrics.positives = static_cast<std::size_t>(pos);
        f.metrics.threshold = parse_double(cells[6], line_no, "threshold");
        for (std::size_t m = 0; m < metric_names().size(); ++m) {
            const auto& cell = cells[kFixedColumns.size() + m];
            if (!cell.empty()) set_metric(f.metrics, metric_names()[m], parse_double(cell, line_no, metric_names()[m]));
        }
        ReportEntry* entry = nullptr;
        for (auto& e : r.entries)
            if (e.task == cells[0] && e.strategy == cells[1] && e.predictor == cells[2]) entry = &e;
        if (!entry) {
            r.entries.push_back({cells[0], cells[1], cells[2], {}});
            entry = &r.entries.back();
        }
        entry->folds.push_back(std::move(f));
    }
    if (r.entries.empty()) throw ParseError(1, "report CSV has no rows");

    // Every entry must carry folds 0..k-1 exactly once, with a common k.
    r.k = static_cast<int>(r.entries.front().folds.size());
    for (auto& e : r.entries) {
        if (static_cast<int>(e.folds.size()) != r.k)
            throw DataError("report: " + e.task + "/" + e.strategy + "/" + e.predictor + " has " +
                            std::to_string(e.folds.size()) + " folds, expected " + std::to_string(r.k));
        std::sort(e.folds.begin(), e.folds.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });
        for (int i = 0; i < r.k; ++i)
            if (e.folds[static_cast<std::size_t>(i)].fold != i)
                throw DataError("report: " + e.task + "/" + e.strategy + "/" + e.predictor +
                                " does not carry folds 0.." + std::to_string(r.k - 1));
    }
    return r;
}

nlohmann::ordered_json EvalReport::summary_json() const {
    nlohmann::ordered_json j;
    j["format"] = "periloom.eval_summary";
    j["k"] = k;
    j["ci"] = "mean +- 1.96 * SE, SE = sample SD / sqrt(folds)";
    j["meta"] = meta;
    j["results"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json row;
        row["task"] = e.task;
        row["strategy"] = e.strategy;
        row["predictor"] = e.predictor;
        row["folds"] = e.folds.size();
        nlohmann::ordered_json metrics;
        for (const auto& m : metric_names()) {
            const auto s = e.summary(m);
            metrics[m] = {{"mean", opt_json(s.mean)},
                          {"se", opt_json(s.se)},
                          {"ci_low", opt_json(s.ci_low)},
                          {"ci_high", opt_json(s.ci_high)},
                          {"n_folds", s.n}};
        }
        row["metrics"] = std::move(metrics);
        j["results"].push_back(std::move(row));
    }
    return j;
}

std::string EvalReport::predictions_csv() const {
    std::string out = "task,strategy,predictor,fold,id,label,score\n";
    for (const auto& e : entries)
        for (const auto& f : e.folds)
            for (std::size_t i = 0; i < f.scores.scores.size(); ++i)
                out += csv_field(e.task) + "," + csv_field(e.strategy) + "," + csv_field(e.predictor) + "," +
                       std::to_string(f.fold) + "," + csv_field(f.scores.ids[i]) + "," +
                       std::to_string(f.scores.labels[i]) + "," + fmt_double(f.scores.scores[i]) + "\n";
    return out;
}

void EvalReport::attach_predictions(const std::string& csv) {
    const auto lines = csv_lines(csv);
    const std::vector<std::string> header{"task", "strategy", "predictor", "fold", "id", "label", "score"};
    if (lines.empty() || split_csv_line(lines[0], 1) != header)
        throw ParseError(1, "unexpected predictions CSV header");
    for (auto& e : entries)
        for (auto& f : e.folds) f.scores = TaskScores{};
    for (std::size_t li = 1; li < lines.size(); ++li) {
        const std::size_t line_no = li + 1;
        const auto cells = split_csv_line(lines[li], line_no);
        if (cells.size() != header.size()) throw ParseError(line_no, "expected 7 fields");
        auto* e = const_cast<ReportEntry*>(find(cells[0], cells[1], cells[2]));
        if (!e) throw DataError("predictions: no report entry " + cells[0] + "/" + cells[1] + "/" + cells[2]);
        const auto fold = parse_int(cells[3], line_no, "fold");
        FoldResult* f = nullptr;
        for (auto& fr : e->folds)
            if (fr.fold == fold) f = &fr;
        if (!f) throw DataError("predictions: unknown fold " + cells[3]);
        const auto label = parse_int(cells[5], line_no, "label");
        if (label != 0 && label != 1) throw ParseError(line_no, "label must be 0 or 1");
        f->scores.ids.push_back(cells[4]);
        f->scores.labels.push_back(static_cast<int>(label));
        f->scores.scores.push_back(parse_double(cells[6], line_no, "score"));
    }
}

std::string EvalReport::to_svg() const {
    std::vector<std::string> tasks;
    for (const auto& e : entries)
        if (std::find(tasks.begin(), tasks.end(), e.task) == tasks.end()) tasks.push_back(e.task);
    std::size_t per_task = 1;
    for (const auto& t : tasks) {
        std::size_t c = 0;
        for (const auto& e : entries) c += e.task == t;
        per_task = std::max(per_task, c);
    }
    const double bar_w = 28, gap = 6, panel_h = 180, left = 150, top = 30;
    const double width = left + static_cast<double>(per_task) * (bar_w + gap) + 40;
    const double height = top + static_cast<double>(tasks.size()) * (panel_h + 40) + 20;
    std::ostringstream s;
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" font-family=\"sans-serif\" "
                  "font-size=\"11\">\n",
                  width, height);
    s << buf << "<text x=\"10\" y=\"18\">Mean held-out AUROC, bars show one standard error</text>\n";
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
        const double y0 = top + static_cast<double>(ti) * (panel_h + 40);
        const double base_y = y0 + panel_h;
        auto ypos = [&](double v) { return base_y - std::clamp(v, 0.0, 1.0) * panel_h; };
        std::snprintf(buf, sizeof buf, "<text x=\"10\" y=\"%.1f\">%s</text>\n", y0 + panel_h / 2, tasks[ti].c_str());
        s << buf;
        std::snprintf(buf, sizeof buf,
                      "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#999\" stroke-dasharray=\"4\"/>\n",
                      left, ypos(0.5), width - 20, ypos(0.5));
        s << buf;
        std::size_t bi = 0;
        for (const auto& e : entries) {
            if (e.task != tasks[ti]) continue;
            const auto sm = e.summary("auroc");
            const double x = left + static_cast<double>(bi++) * (bar_w + gap);
            const double mean = sm.mean.value_or(0.0);
            std::snprintf(buf, sizeof buf,
                          "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"#4a7ab5\"><title>%s/%s "
                          "%.4f</title></rect>\n",
                          x, ypos(mean), bar_w, base_y - ypos(mean), e.strategy.c_str(), e.predictor.c_str(), mean);
            s << buf;
            if (sm.se) {
                std::snprintf(buf, sizeof buf,
                              "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                              x + bar_w / 2, ypos(mean - *sm.se), x + bar_w / 2, ypos(mean + *sm.se));
                s << buf;
            }
            std::snprintf(buf, sizeof buf,
                          "<text x=\"%.1f\" y=\"%.1f\" transform=\"rotate(45 %.1f %.1f)\">%s</text>\n", x,
                          base_y + 12, x, base_y + 12, e.strategy.c_str());
            s << buf;
        }
    }
    s << "</svg>\n";
    return s.str();
}

// ---------------------------------------------------------------------------
// Nested cross-validation

namespace {

std::vector<std::string> default_tasks(const corpus::Dataset& ds) {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        if (ds.tasks[t].kind != corpus::TaskKind::BinaryClassification) continue;
        if (both_classes(labeled_rows(ds, ds.tasks[t].name).y)) out.push_back(ds.tasks[t].name);
    }
    if (out.empty()) throw DataError("nested_cv: no binary task has both classes present");
    return out;
}

std::string rarest_of(const corpus::Dataset& ds, const std::vector<std::string>& tasks) {
    std::string best;
    std::size_t best_pos = 0;
    for (const auto& t : tasks) {
        const auto v = labeled_rows(ds, t);
        const auto pos = static_cast<std::size_t>(std::count(v.y.begin(), v.y.end(), 1));
        if (best.empty() || pos < best_pos) {
            best = t;
            best_pos = pos;
        }
    }
    return best;
}

}  // namespace

EvalReport nested_cv(const corpus::Dataset& ds, const std::vector<PipelineConfig>& pipelines, const EvalConfig& cfg,
                     const finetune::FineTunedModel<float>* base, const corpus::FoldAssignment* folds) {
    cfg.validate();
    if (pipelines.empty()) throw ValidationError("pipelines", "at least one pipeline is required");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& p : pipelines) {
        p.validate();
        if (!seen.emplace(p.label(), p.predictor_label()).second)
            throw ValidationError("pipelines", "duplicate strategy/predictor pair " + p.label() + "/" +
                                                   p.predictor_label());
        if (p.representation == Representation::Transformer && !base)
            throw ValidationError("pretrained", "pipeline '" + p.label() + "' needs a pretrained base model");
    }

    const auto tasks = cfg.tasks.empty() ? default_tasks(ds) : cfg.tasks;
    for (const auto& t : tasks) {
        const auto idx = ds.tasks.index_of(t);
        if (ds.tasks[idx].kind != corpus::TaskKind::BinaryClassification)
            throw ValidationError("tasks", "task '" + t + "' is not binary; nested_cv scores binary tasks");
    }
    const auto strat = cfg.stratify_task.empty() ? rarest_of(ds, tasks) : cfg.stratify_task;

    corpus::FoldAssignment fa;
    if (folds) {
        fa = *folds;
        if (fa.k != cfg.k_outer || fa.fold_of.size() != ds.size())
            throw ValidationError("folds", "assignment does not match the dataset size or k_outer");
        for (int f : fa.fold_of)
            if (f < 0 || f >= fa.k) throw ValidationError("folds", "fold index out of range");
    } else {
        fa = corpus::stratified_split(ds, cfg.k_outer, strat, mix_seed(cfg.seed, {0x0f}));
    }

    // Work items: pipeline x fold, each writing its own slot.
    const std::size_t n_items = pipelines.size() * static_cast<std::size_t>(cfg.k_outer);
    std::vector<std::map<std::string, TaskScores>> results(n_items);
    std::vector<std::exception_ptr> errors(n_items);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n_items; i = next++) {
            const auto pi = i / static_cast<std::size_t>(cfg.k_outer);
            const int fold = static_cast<int>(i % static_cast<std::size_t>(cfg.k_outer));
            try {
                results[i] = fit_and_score(pipelines[pi], ds.subset(fa.train_rows(fold)),
                                           ds.subset(fa.test_rows(fold)), tasks, cfg, base,
                                           mix_seed(cfg.seed, {0xf01d, static_cast<std::uint64_t>(fold)}));
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto n_threads = std::min<std::size_t>(static_cast<std::size_t>(cfg.jobs), n_items);
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    EvalReport report;
    report.k = cfg.k_outer;
    for (const auto& task : tasks) {
        for (std::size_t pi = 0; pi < pipelines.size(); ++pi) {
            ReportEntry entry{task, pipelines[pi].label(), pipelines[pi].predictor_label(), {}};
            for (int f = 0; f < cfg.k_outer; ++f) {
                auto& ts = results[pi * static_cast<std::size_t>(cfg.k_outer) + static_cast<std::size_t>(f)].at(task);
                FoldResult fr;
                fr.fold = f;
                fr.selected = ts.selected;
                if (!ts.scores.empty()) {
                    fr.metrics = compute_metrics(ts.scores, ts.labels, cfg.threshold);
                } else {
                    fr.metrics.threshold = cfg.threshold;
                }
                fr.scores = std::move(ts);
                entry.folds.push_back(std::move(fr));
            }
            report.entries.push_back(std::move(entry));
        }
    }

    // Thread count does not change results, so it stays out of the hash.
    auto hashed_cfg = cfg.to_json();
    hashed_cfg.erase("jobs");
    nlohmann::ordered_json pj = nlohmann::ordered_json::array();
    for (const auto& p : pipelines) pj.push_back(p.to_json());
    std::uint64_t fold_hash = fnv1a64("folds");
    for (int f : fa.fold_of) fold_hash = fnv1a64(std::to_string(f) + ",", fold_hash);
    report.meta = {{"version", PERILOOM_VERSION},
                   {"seed", cfg.seed},
                   {"k_outer", cfg.k_outer},
                   {"k_inner", cfg.k_inner},
                   {"threshold", cfg.threshold},
                   {"stratify_task", strat},
                   {"tasks", tasks},
                   {"dataset_hash", hex64(ds.content_hash())},
                   {"config_hash", hex64(fnv1a64(pj.dump() + hashed_cfg.dump()))},
                   {"fold_hash", hex64(fold_hash)},
                   {"pipelines", pj}};
    if (base) report.meta["base_model"] = finetune::model_id(*base);
    return report;
}

}  // namespace periloom::eval
