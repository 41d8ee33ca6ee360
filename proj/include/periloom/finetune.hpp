#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "periloom/corpus.hpp"
#include "periloom/nn.hpp"
#include "periloom/tensor_io.hpp"
#include "periloom/text.hpp"
#include "periloom/transformer.hpp"

namespace periloom::finetune {

enum class Strategy { PretrainedOnly, SelfSupervised, SemiSupervised, Foundation };

const char* to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

/// Which self-supervised objective to run. Auto follows the variant.
enum class Objective { Auto, MaskedLM, CausalLM };

const char* to_string(Objective o);
Objective objective_from_string(const std::string& s);

// ---------------------------------------------------------------------------
// Task heads

/// Feed-forward head on pooled states: ReLU hidden layers, identity output.
/// Tensors: l{i}.w [in,out], l{i}.b [out], the last layer being the output.
template <class T>
struct TaskHead {
    std::string task;
    corpus::TaskKind kind = corpus::TaskKind::BinaryClassification;
    int num_classes = 2;
    std::vector<int> dims;  // in, hidden..., out
    nn::ParamSet<T> params;

    int in_dim() const { return dims.front(); }
    int out_dim() const { return dims.back(); }
    std::size_t num_layers() const { return dims.size() - 1; }

    template <class U>
    TaskHead<U> cast() const {
        return TaskHead<U>{task, kind, num_classes, dims, params.template cast<U>()};
    }
};

/// Output width for a task kind: 1 for binary/regression, C for multi-class.
int head_output_dim(const corpus::TaskSpec& spec);

template <class T>
TaskHead<T> make_head(const corpus::TaskSpec& spec, int in_dim, const std::vector<int>& hidden, std::uint64_t seed);

template <class T>
struct HeadCache {
    std::vector<std::vector<T>> inputs;  // input to each layer (post-ReLU for hidden layers)
    std::vector<std::vector<T>> pre;     // pre-activation of each hidden layer
};

/// x is n x in_dim; returns n x out_dim.
template <class T>
std::vector<T> head_forward(const TaskHead<T>& head, const T* x, std::size_t n, HeadCache<T>* cache = nullptr);

/// Accumulates parameter gradients into `grads` and input gradients into `dx`
/// (n x in_dim, may be null).
template <class T>
void head_backward(const TaskHead<T>& head, const HeadCache<T>& cache, std::size_t n, const T* dout,
                   nn::ParamSet<T>& grads, T* dx);

template <class T>
struct TaskLoss {
    T value = 0;            // mean over non-Missing rows (0 when there are none)
    std::size_t count = 0;  // non-Missing rows
    std::vector<T> dout;    // n x out_dim gradient of `value`; zero rows for Missing
};

/// BCE-with-logits (binary), softmax CE (multi-class) or MSE (regression),
/// averaged over non-Missing rows only.
template <class T>
TaskLoss<T> task_loss(const TaskHead<T>& head, const std::vector<T>& out, const std::vector<corpus::Label>& labels);

/// Probability of the positive class (binary), argmax-free class scores
/// (multi-class softmax) or the raw value (regression), n x out_dim.
template <class T>
std::vector<T> head_predict(const TaskHead<T>& head, const std::vector<T>& out);

/// [L_self] * include_self + sum_i lambda_i * L_i.
double combined_loss(double l_self, const std::vector<double>& losses, const std::vector<double>& lambdas,
                     bool include_self);

// ---------------------------------------------------------------------------
// Configuration

struct FineTuneConfig {
    Strategy strategy = Strategy::SelfSupervised;
    Objective objective = Objective::Auto;
    std::string task;                // SemiSupervised
    std::vector<std::string> tasks;  // Foundation
    double lambda = 1.0;
    std::vector<double> lambdas;     // Foundation; empty = 1/m each
    bool include_self_loss = true;   // Foundation
    int epochs = 3;
    int batch_size = 32;
    double mlm_rate = 0.15;
    nn::AdamConfig adam;
    double warmup_frac = 0.05;
    /// Hidden widths of every head; nullopt = one hidden layer of width d.
    std::optional<std::vector<int>> head_hidden;
    std::uint64_t seed = 0;

    void validate() const;
    /// Lambda per configured task (1/m default for Foundation).
    std::vector<double> resolved_lambdas() const;
    /// Tasks the strategy trains heads for.
    std::vector<std::string> head_tasks() const;

    nlohmann::ordered_json to_json() const;
    static FineTuneConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------------------
// Models

template <class T>
struct FineTunedModel {
    transformer::Model<T> body;
    text::Vocabulary vocab;
    std::vector<TaskHead<T>> heads;
    nlohmann::ordered_json provenance = nlohmann::ordered_json::object();

    const TaskHead<T>* head(const std::string& task) const;

    template <class U>
    FineTunedModel<U> cast() const {
        FineTunedModel<U> out{body.template cast<U>(), vocab, {}, provenance};
        for (const auto& h : heads) out.heads.push_back(h.template cast<U>());
        return out;
    }
};

/// FNV-1a over the raw parameter bytes; used as a checkpoint id in provenance.
template <class T>
std::string model_id(const FineTunedModel<T>& m);

struct EpochLog {
    int epoch = 0;
    double loss = 0.0;        // mean combined loss over steps
    double self_loss = 0.0;   // mean self term (0 when off)
    std::vector<double> task_losses;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    long steps = 0;
};

template <class T>
struct TrainHooks {
    /// Called after every optimizer step with the global step index.
    std::function<void(long, const FineTunedModel<T>&)> on_step;
};

/// Documents encoded once for training: token sequences and label rows.
struct EncodedCorpus {
    std::vector<text::TokenSeq> seqs;
    std::vector<std::vector<corpus::Label>> labels;  // per doc, aligned to `tasks`
    std::vector<std::string> tasks;
};

EncodedCorpus encode_corpus(const corpus::Dataset& ds, const text::Vocabulary& vocab,
                            const transformer::ArchConfig& arch, const std::vector<std::string>& tasks);

/// What one optimization step computes.
struct StepSpec {
    bool include_self = true;
    std::vector<double> lambdas;  // per head, aligned to model.heads
    Objective objective = Objective::Auto;
    double mlm_rate = 0.15;
    bool train = true;            // dropout on
    std::uint64_t seed = 0;       // base seed for masks and dropout
    int epoch = 0;
    long step = 0;
};

template <class T>
struct StepResult {
    double loss = 0.0;
    double self_loss = 0.0;
    std::vector<double> task_losses;
    std::vector<std::size_t> task_counts;
    nn::ParamSet<T> body_grads;
    std::vector<nn::ParamSet<T>> head_grads;
};

/// Loss and gradients of the combined objective on the given rows. MLM masks
/// are seeded per (epoch, row) and dropout per sequence, so appending rows
/// never changes how existing rows are processed.
template <class T>
StepResult<T> compute_step(const FineTunedModel<T>& model, const EncodedCorpus& data,
                           const std::vector<std::size_t>& rows, const StepSpec& spec);

// ---------------------------------------------------------------------------
// Strategies

/// Trains only the self-supervised objective from a fresh init. The
/// vocabulary is fixed from here on.
template <class T>
FineTunedModel<T> pretrain(const transformer::ArchConfig& arch, const corpus::Dataset& ds,
                           const text::Vocabulary& vocab, const FineTuneConfig& cfg, TrainLog* log = nullptr,
                           const TrainHooks<T>& hooks = {});

template <class T>
FineTunedModel<T> finetune_self_supervised(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                           const FineTuneConfig& cfg, TrainLog* log = nullptr,
                                           const TrainHooks<T>& hooks = {});

template <class T>
FineTunedModel<T> finetune_semi_supervised(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                           const std::string& task, const FineTuneConfig& cfg,
                                           TrainLog* log = nullptr, const TrainHooks<T>& hooks = {});

template <class T>
FineTunedModel<T> finetune_foundation(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                      const std::vector<std::string>& tasks, const FineTuneConfig& cfg,
                                      TrainLog* log = nullptr, const TrainHooks<T>& hooks = {});

/// Dispatches on cfg.strategy (PretrainedOnly returns the base unchanged).
template <class T>
FineTunedModel<T> run_strategy(const FineTunedModel<T>& base, const corpus::Dataset& ds, const FineTuneConfig& cfg,
                               TrainLog* log = nullptr, const TrainHooks<T>& hooks = {});

/// Mean self-supervised loss over a dataset, dropout off, masks seeded by `seed`.
template <class T>
double evaluate_self_loss(const FineTunedModel<T>& model, const corpus::Dataset& ds, double mlm_rate,
                          std::uint64_t seed, int batch_size = 64);

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
tensor_io::Container to_container(const FineTunedModel<T>& m);

template <class T>
FineTunedModel<T> from_container(const tensor_io::Container& c);

template <class T>
void save_model(const FineTunedModel<T>& m, const std::filesystem::path& path);

template <class T>
FineTunedModel<T> load_model(const std::filesystem::path& path);

}  // namespace periloom::finetune
