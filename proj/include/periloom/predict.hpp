#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "periloom/corpus.hpp"
#include "periloom/finetune.hpp"
#include "periloom/tensor_io.hpp"

namespace periloom::predict {

/// Dense row-major feature table.
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;
    std::vector<std::string> ids;  // optional, aligned to rows

    const double* row(std::size_t i) const { return data.data() + i * cols; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    /// Throws DataError on a size mismatch or a non-finite entry.
    void validate() const;
    FeatureMatrix subset(const std::vector<std::size_t>& rows) const;

    template <class T>
    static FeatureMatrix from_flat(const std::vector<T>& flat, std::size_t cols, std::vector<std::string> ids = {});
};

/// Rows of X whose label is present, with 0/1 targets. Missing rows are
/// dropped; a binary label other than 0/1 is a DataError.
struct LabeledRows {
    std::vector<std::size_t> rows;  // indices into the input
    FeatureMatrix x;
    std::vector<int> y;
};
LabeledRows select_labeled(const FeatureMatrix& x, const std::vector<corpus::Label>& labels);

double sigmoid(double z);
/// Mean logistic loss of margins against 0/1 targets.
double logistic_loss(const std::vector<double>& margin, const std::vector<int>& y);

// ---------------------------------------------------------------------------
// Trees

/// Binary tree node; a node with feature < 0 is a leaf. Rows with
/// x[feature] < threshold go left.
struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double value = 0.0;  // leaf weight (GBT) or positive-class frequency (forest)
    double gain = 0.0;
    double cover = 0.0;  // hessian sum (GBT) or row count (forest)
};

struct Tree {
    std::vector<TreeNode> nodes;  // nodes[0] is the root

    double predict(const double* x) const;
    int depth() const;
    std::size_t leaves() const;
    nlohmann::ordered_json to_json() const;
    static Tree from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Gradient-boosted trees (logistic objective, second order, exact greedy)

struct GBTParams {
    int rounds = 100;
    int max_depth = 3;
    double eta = 0.1;
    double lambda = 1.0;  // L2 on leaf weights
    double gamma = 0.0;   // minimum split gain
    double min_child_weight = 1.0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static GBTParams from_json(const nlohmann::json& j);
};

struct GBTModel {
    GBTParams hp;
    std::size_t n_features = 0;
    double base_score = 0.0;  // margin before the first tree
    std::vector<Tree> trees;  // leaf values are unscaled; eta is applied at prediction
    std::vector<double> train_loss;  // mean logistic loss after 0..rounds trees

    double margin(const double* x) const;
};

/// Split gain 1/2 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)] - gamma.
double split_gain(double gl, double hl, double gr, double hr, double lambda, double gamma);
/// Leaf weight -G/(H+lambda).
double leaf_weight(double g, double h, double lambda);

GBTModel train_gbt(const FeatureMatrix& x, const std::vector<int>& y, const GBTParams& hp);

// ---------------------------------------------------------------------------
// L2-regularized logistic regression

struct LogRegParams {
    double l2 = 1.0;            // penalty (l2/2)|w|^2 on the summed log-likelihood; bias unpenalized
    bool standardize = true;    // z-score columns with training statistics first
    double tolerance = 1e-8;    // gradient-norm stopping rule
    int max_iter = 200;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static LogRegParams from_json(const nlohmann::json& j);
};

struct LinearModel {
    LogRegParams hp;
    std::vector<double> weights;  // in standardized coordinates when hp.standardize
    double bias = 0.0;
    std::vector<double> mean;     // column centering (zeros when not standardizing)
    std::vector<double> scale;    // column scaling (ones when not standardizing)
    int iterations = 0;
    double grad_norm = 0.0;

    double margin(const double* x) const;
};

LinearModel train_logreg(const FeatureMatrix& x, const std::vector<int>& y, const LogRegParams& hp);

// ---------------------------------------------------------------------------
// Random forest (bagged Gini CART)

struct ForestParams {
    int trees = 100;
    int max_depth = 0;          // 0 = unlimited
    int min_samples_leaf = 1;
    int max_features = 0;       // per node; 0 = round(sqrt(d)), >= d disables subsampling
    bool bootstrap = true;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static ForestParams from_json(const nlohmann::json& j);
};

struct ForestModel {
    ForestParams hp;
    std::size_t n_features = 0;
    std::vector<Tree> trees;

    double probability(const double* x) const;
};

ForestModel train_rf(const FeatureMatrix& x, const std::vector<int>& y, const ForestParams& hp);

// ---------------------------------------------------------------------------
// Uniform predictor interface

enum class PredictorKind { GBT, LogReg, RandomForest };

const char* to_string(PredictorKind k);
PredictorKind predictor_from_string(const std::string& s);

struct PredictorParams {
    PredictorKind kind = PredictorKind::GBT;
    GBTParams gbt;
    LogRegParams logreg;
    ForestParams rf;

    nlohmann::ordered_json to_json() const;
    static PredictorParams from_json(const nlohmann::json& j);
};

class Predictor {
public:
    Predictor() = default;
    explicit Predictor(GBTModel m) : model_(std::move(m)) {}
    explicit Predictor(LinearModel m) : model_(std::move(m)) {}
    explicit Predictor(ForestModel m) : model_(std::move(m)) {}

    PredictorKind kind() const;
    std::size_t n_features() const;
    /// Positive-class probabilities; CompatibilityError on a column-count mismatch.
    std::vector<double> predict_proba(const FeatureMatrix& x) const;

    const GBTModel* gbt() const { return std::get_if<GBTModel>(&model_); }
    const LinearModel* linear() const { return std::get_if<LinearModel>(&model_); }
    const ForestModel* forest() const { return std::get_if<ForestModel>(&model_); }

private:
    std::variant<GBTModel, LinearModel, ForestModel> model_;
};

/// Validates inputs (finite, both classes present) and fits the chosen model.
Predictor fit(const PredictorParams& params, const FeatureMatrix& x, const std::vector<int>& y);

tensor_io::Container to_container(const Predictor& p);
Predictor from_container(const tensor_io::Container& c);
void save_predictor(const Predictor& p, const std::filesystem::path& path);
Predictor load_predictor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Fine-tuned head path

/// Pooled embedding -> task head -> positive-class probability, per text.
template <class T>
std::vector<double> head_proba(const finetune::FineTunedModel<T>& model, const std::string& task,
                               const std::vector<std::string>& texts, std::size_t batch_size = 64);

}  // namespace periloom::predict
