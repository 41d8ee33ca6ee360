#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "periloom/baselines.hpp"
#include "periloom/corpus.hpp"
#include "periloom/finetune.hpp"
#include "periloom/predict.hpp"

namespace periloom::eval {

// ---------------------------------------------------------------------------
// Metrics

/// Mann-Whitney AUROC via average ranks; ties count one half.
/// Throws DataError unless both classes are present.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Average precision over descending unique score thresholds (equal scores
/// form one PR point). Throws DataError when there are no positives.
double auprc(const std::vector<double>& scores, const std::vector<int>& labels);

double mse(const std::vector<double>& preds, const std::vector<double>& targets);

struct MetricSet {
    std::size_t n = 0;
    std::size_t positives = 0;
    double threshold = 0.5;
    std::optional<double> auroc;
    std::optional<double> auprc;
    std::optional<double> accuracy;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> precision;
    std::optional<double> f1;
    std::optional<double> mse;

    bool operator==(const MetricSet&) const = default;
};

/// Names of the optional metric fields, in report column order.
const std::vector<std::string>& metric_names();
std::optional<double> metric_value(const MetricSet& m, const std::string& name);
void set_metric(MetricSet& m, const std::string& name, std::optional<double> v);

/// Confusion-matrix metrics; positive iff score >= tau. 0/0 ratios stay empty.
MetricSet threshold_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double tau = 0.5);

/// Threshold metrics plus AUROC/AUPRC where defined.
MetricSet compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double tau = 0.5);

// ---------------------------------------------------------------------------
// Pipelines

enum class TuneScope { PredictorOnly, FullPipeline };
const char* to_string(TuneScope s);
TuneScope tune_scope_from_string(const std::string& s);

enum class Representation { Transformer, Baseline };

/// One evaluated strategy: how documents become features, and what scores them.
struct PipelineConfig {
    std::string name;  // strategy label in reports; derived when empty
    Representation representation = Representation::Transformer;
    finetune::FineTuneConfig finetune;  // Transformer
    baselines::Method method = baselines::Method::CBOW;  // Baseline
    baselines::BaselineHyperparams baseline;
    /// When set, the fine-tuned task head scores documents instead of a
    /// separate predictor (SemiSupervised and Foundation only).
    bool use_head = false;
    predict::PredictorParams predictor;
    /// Each point is a JSON merge patch with optional "predictor",
    /// "finetune" and "baseline" members. Empty = one point, no patch.
    std::vector<nlohmann::json> grid;
    TuneScope tune = TuneScope::PredictorOnly;

    void validate() const;
    std::string label() const;
    std::string predictor_label() const;
    /// This config with one grid point applied (grid cleared).
    PipelineConfig apply(const nlohmann::json& point) const;

    nlohmann::ordered_json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
};

struct EvalConfig {
    int k_outer = 5;
    int k_inner = 3;
    std::uint64_t seed = 0;
    double threshold = 0.5;
    std::vector<std::string> tasks;  // empty = every binary task with both classes
    std::string stratify_task;       // empty = rarest task
    int jobs = 1;                    // outer folds evaluated concurrently

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static EvalConfig from_json(const nlohmann::json& j);
};

/// Representation fitted on one training set.
struct FittedRepresentation {
    std::optional<finetune::FineTunedModel<float>> model;
    std::optional<baselines::EmbeddingMatrix> embeddings;

    predict::FeatureMatrix features(const corpus::Dataset& ds) const;
};

FittedRepresentation fit_representation(const PipelineConfig& p, const corpus::Dataset& train,
                                        const finetune::FineTunedModel<float>* base);

/// Held-out scores of one task in one fold.
struct TaskScores {
    std::vector<std::string> ids;
    std::vector<int> labels;
    std::vector<double> scores;
    nlohmann::json selected = nlohmann::json::object();  // chosen grid point
};

/// Fits everything on `train` only (inner search included) and scores the
/// labeled rows of `test`, per task.
std::map<std::string, TaskScores> fit_and_score(const PipelineConfig& p, const corpus::Dataset& train,
                                                const corpus::Dataset& test, const std::vector<std::string>& tasks,
                                                const EvalConfig& cfg, const finetune::FineTunedModel<float>* base,
                                                std::uint64_t fold_seed);

// ---------------------------------------------------------------------------
// Reports

struct Summary {
    std::size_t n = 0;  // folds where the metric is defined
    std::optional<double> mean;
    std::optional<double> se;  // sample SD / sqrt(n)
    std::optional<double> ci_low;
    std::optional<double> ci_high;
};

/// Mean, standard error and mean +- 1.96 SE over the defined values.
Summary summarize(const std::vector<std::optional<double>>& values);

struct FoldResult {
    int fold = 0;
    MetricSet metrics;
    nlohmann::json selected = nlohmann::json::object();
    TaskScores scores;
};

struct ReportEntry {
    std::string task;
    std::string strategy;
    std::string predictor;
    std::vector<FoldResult> folds;

    Summary summary(const std::string& metric) const;
};

struct EvalReport {
    int k = 0;
    std::vector<ReportEntry> entries;
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    const ReportEntry* find(const std::string& task, const std::string& strategy,
                            const std::string& predictor) const;

    /// One row per task x strategy x predictor x fold; undefined metrics are empty cells.
    std::string to_csv() const;
    /// Parses to_csv output (held-out scores are not part of it).
    static EvalReport from_csv(const std::string& csv);
    /// Means, SE and CI per entry and metric.
    nlohmann::ordered_json summary_json() const;
    /// One row per held-out document score.
    std::string predictions_csv() const;
    /// Fills fold scores from predictions_csv output; DataError on unknown rows.
    void attach_predictions(const std::string& csv);
    /// Mean AUROC per strategy with standard-error bars, one panel row per task.
    std::string to_svg() const;
};

/// Outer stratified k-fold; inner grid search by mean AUROC on the outer
/// training part; refit and score on the held-out fold. `folds` overrides the
/// derived assignment.
EvalReport nested_cv(const corpus::Dataset& ds, const std::vector<PipelineConfig>& pipelines, const EvalConfig& cfg,
                     const finetune::FineTunedModel<float>* base = nullptr,
                     const corpus::FoldAssignment* folds = nullptr);

}  // namespace periloom::eval
