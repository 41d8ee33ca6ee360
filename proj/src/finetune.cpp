#include "periloom/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "kernels.hpp"
#include "periloom/error.hpp"
#include "periloom/hash.hpp"
#include "periloom/random.hpp"

namespace periloom::finetune {

using corpus::TaskKind;
using kernels::add_colsum;
using kernels::fill_bias;
using kernels::gemm_nn;
using kernels::gemm_tn;
using kernels::transpose;

const char* to_string(Strategy s) {
    switch (s) {
        case Strategy::PretrainedOnly: return "pretrained_only";
        case Strategy::SelfSupervised: return "self_supervised";
        case Strategy::SemiSupervised: return "semi_supervised";
        case Strategy::Foundation: return "foundation";
    }
    return "self_supervised";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "pretrained_only") return Strategy::PretrainedOnly;
    if (s == "self_supervised") return Strategy::SelfSupervised;
    if (s == "semi_supervised") return Strategy::SemiSupervised;
    if (s == "foundation") return Strategy::Foundation;
    throw ValidationError("strategy", "unknown strategy '" + s +
                                          "' (expected pretrained_only, self_supervised, semi_supervised, foundation)");
}

const char* to_string(Objective o) {
    switch (o) {
        case Objective::Auto: return "auto";
        case Objective::MaskedLM: return "mlm";
        case Objective::CausalLM: return "causal_lm";
    }
    return "auto";
}

Objective objective_from_string(const std::string& s) {
    if (s == "auto") return Objective::Auto;
    if (s == "mlm") return Objective::MaskedLM;
    if (s == "causal_lm") return Objective::CausalLM;
    throw ValidationError("objective", "unknown objective '" + s + "' (expected auto, mlm, causal_lm)");
}

namespace {

void check_objective(Objective o, transformer::Variant v) {
    if (o == Objective::MaskedLM && v == transformer::Variant::Decoder)
        throw CompatibilityError("objective mlm requested for decoder parameters");
    if (o == Objective::CausalLM && v == transformer::Variant::Encoder)
        throw CompatibilityError("objective causal_lm requested for encoder parameters");
}

}  // namespace

// ---------------------------------------------------------------------------
// Heads

int head_output_dim(const corpus::TaskSpec& spec) {
    return spec.kind == TaskKind::MultiClass ? spec.num_classes : 1;
}

template <class T>
TaskHead<T> make_head(const corpus::TaskSpec& spec, int in_dim, const std::vector<int>& hidden, std::uint64_t seed) {
    if (in_dim < 1) throw ValidationError("head", "input dim must be >= 1");
    TaskHead<T> h;
    h.task = spec.name;
    h.kind = spec.kind;
    h.num_classes = spec.num_classes;
    h.dims.push_back(in_dim);
    for (int w : hidden) {
        if (w < 1) throw ValidationError("head_hidden", "widths must be >= 1");
        h.dims.push_back(w);
    }
    h.dims.push_back(head_output_dim(spec));
    for (std::size_t l = 0; l + 1 < h.dims.size(); ++l) {
        h.params.add("l" + std::to_string(l) + ".w", {h.dims[l], h.dims[l + 1]}, true);
        h.params.add("l" + std::to_string(l) + ".b", {h.dims[l + 1]}, false);
    }
    Rng rng(mix_seed(seed, {0x4ead, fnv1a64(spec.name)}));
    for (std::size_t l = 0; l + 1 < h.dims.size(); ++l) {
        const double sd = std::sqrt(2.0 / static_cast<double>(h.dims[l] + h.dims[l + 1]));
        for (auto& x : h.params.view(2 * l)) x = static_cast<T>(rng.normal(0.0, sd));
    }
    return h;
}

template <class T>
std::vector<T> head_forward(const TaskHead<T>& head, const T* x, std::size_t n, HeadCache<T>* cache) {
    std::vector<T> cur(x, x + n * static_cast<std::size_t>(head.in_dim()));
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    for (std::size_t l = 0; l < head.num_layers(); ++l) {
        const auto din = static_cast<std::size_t>(head.dims[l]);
        const auto dout = static_cast<std::size_t>(head.dims[l + 1]);
        std::vector<T> y(n * dout);
        fill_bias(n, dout, head.params.view(2 * l + 1).data(), y.data());
        gemm_nn(n, din, dout, cur.data(), head.params.view(2 * l).data(), y.data());
        if (cache) cache->inputs.push_back(cur);
        if (l + 1 < head.num_layers()) {
            if (cache) cache->pre.push_back(y);
            for (auto& v : y) v = v > T(0) ? v : T(0);
        }
        cur = std::move(y);
    }
    return cur;
}

template <class T>
void head_backward(const TaskHead<T>& head, const HeadCache<T>& cache, std::size_t n, const T* dout,
                   nn::ParamSet<T>& grads, T* dx) {
    std::vector<T> dy(dout, dout + n * static_cast<std::size_t>(head.out_dim()));
    for (std::size_t l = head.num_layers(); l-- > 0;) {
        const auto din = static_cast<std::size_t>(head.dims[l]);
        const auto dcur = static_cast<std::size_t>(head.dims[l + 1]);
        gemm_tn(n, din, dcur, cache.inputs[l].data(), dy.data(), grads.view(2 * l).data());
        add_colsum(n, dcur, dy.data(), grads.view(2 * l + 1).data());
        if (l == 0 && !dx) break;
        const auto WT = transpose(head.params.view(2 * l).data(), din, dcur);
        std::vector<T> dprev(n * din, T(0));
        gemm_nn(n, dcur, din, dy.data(), WT.data(), dprev.data());
        if (l == 0) {
            for (std::size_t i = 0; i < dprev.size(); ++i) dx[i] += dprev[i];
        } else {
            const auto& pre = cache.pre[l - 1];
            for (std::size_t i = 0; i < dprev.size(); ++i)
                if (!(pre[i] > T(0))) dprev[i] = T(0);
            dy = std::move(dprev);
        }
    }
}

template <class T>
TaskLoss<T> task_loss(const TaskHead<T>& head, const std::vector<T>& out, const std::vector<corpus::Label>& labels) {
    const auto k = static_cast<std::size_t>(head.out_dim());
    const std::size_t n = labels.size();
    if (out.size() != n * k) throw InvariantError("task_loss: output/label size mismatch");
    TaskLoss<T> r;
    r.dout.assign(n * k, T(0));
    for (const auto& l : labels) r.count += l.has_value();
    if (r.count == 0) return r;
    const T inv = T(1) / static_cast<T>(r.count);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!labels[i]) continue;
        const T y = static_cast<T>(*labels[i]);
        const T* z = out.data() + i * k;
        T* g = r.dout.data() + i * k;
        switch (head.kind) {
            case TaskKind::BinaryClassification: {
                // softplus(z) - y z, computed without overflow
                total += std::max(z[0], T(0)) - y * z[0] + std::log1p(std::exp(-std::abs(z[0])));
                const T p = T(1) / (T(1) + std::exp(-z[0]));
                g[0] = (p - y) * inv;
                break;
            }
            case TaskKind::MultiClass: {
                const auto c = static_cast<std::size_t>(*labels[i]);
                const T mx = *std::max_element(z, z + k);
                T sum = 0;
                for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
                const T lse = mx + std::log(sum);
                total += lse - z[c];
                for (std::size_t j = 0; j < k; ++j) g[j] = std::exp(z[j] - lse) * inv;
                g[c] -= inv;
                break;
            }
            case TaskKind::Regression: {
                const T e = z[0] - y;
                total += e * e;
                g[0] = T(2) * e * inv;
                break;
            }
        }
    }
    r.value = total * inv;
    return r;
}

template <class T>
std::vector<T> head_predict(const TaskHead<T>& head, const std::vector<T>& out) {
    const auto k = static_cast<std::size_t>(head.out_dim());
    std::vector<T> p = out;
    if (head.kind == TaskKind::BinaryClassification) {
        for (auto& z : p) z = T(1) / (T(1) + std::exp(-z));
    } else if (head.kind == TaskKind::MultiClass) {
        for (std::size_t i = 0; i < p.size() / k; ++i) {
            T* z = p.data() + i * k;
            const T mx = *std::max_element(z, z + k);
            T sum = 0;
            for (std::size_t j = 0; j < k; ++j) sum += (z[j] = std::exp(z[j] - mx));
            for (std::size_t j = 0; j < k; ++j) z[j] /= sum;
        }
    }
    return p;
}

double combined_loss(double l_self, const std::vector<double>& losses, const std::vector<double>& lambdas,
                     bool include_self) {
    if (losses.size() != lambdas.size())
        throw ValidationError("lambdas", "expected " + std::to_string(losses.size()) + " weights, got " +
                                             std::to_string(lambdas.size()));
    if (!std::isfinite(l_self)) throw ValidationError("l_self", "must be finite");
    double total = include_self ? l_self : 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        if (!std::isfinite(losses[i]) || !std::isfinite(lambdas[i]))
            throw ValidationError("losses", "all inputs must be finite");
        total += lambdas[i] * losses[i];
    }
    return total;
}

// ---------------------------------------------------------------------------
// Config

void FineTuneConfig::validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda", "must be >= 0");
    for (double l : lambdas)
        if (!(l >= 0.0) || !std::isfinite(l)) throw ValidationError("lambdas", "every weight must be >= 0");
    if (epochs < 0) throw ValidationError("epochs", "must be >= 0");
    if (batch_size < 1) throw ValidationError("batch_size", "must be >= 1");
    if (!(mlm_rate > 0.0 && mlm_rate <= 1.0)) throw ValidationError("mlm_rate", "must be in (0,1]");
    if (!(adam.learning_rate > 0.0)) throw ValidationError("learning_rate", "must be > 0");
    if (!(adam.weight_decay >= 0.0)) throw ValidationError("weight_decay", "must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ValidationError("beta1", "must be in [0,1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ValidationError("beta2", "must be in [0,1)");
    if (!(adam.eps > 0.0)) throw ValidationError("eps", "must be > 0");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw ValidationError("warmup_frac", "must be in [0,1]");
    if (head_hidden)
        for (int w : *head_hidden)
            if (w < 1) throw ValidationError("head_hidden", "widths must be >= 1");
    if (strategy == Strategy::SemiSupervised && task.empty())
        throw ValidationError("task", "semi_supervised needs a task");
    if (strategy == Strategy::Foundation) {
        if (tasks.empty()) throw ValidationError("tasks", "foundation needs m >= 1 tasks");
        if (!lambdas.empty() && lambdas.size() != tasks.size())
            throw ValidationError("lambdas", "expected " + std::to_string(tasks.size()) + " weights, got " +
                                                 std::to_string(lambdas.size()));
    }
}

std::vector<double> FineTuneConfig::resolved_lambdas() const {
    switch (strategy) {
        case Strategy::SemiSupervised: return {lambda};
        case Strategy::Foundation:
            if (!lambdas.empty()) return lambdas;
            return std::vector<double>(tasks.size(), 1.0 / static_cast<double>(tasks.size()));
        default: return {};
    }
}

std::vector<std::string> FineTuneConfig::head_tasks() const {
    switch (strategy) {
        case Strategy::SemiSupervised: return {task};
        case Strategy::Foundation: return tasks;
        default: return {};
    }
}

nlohmann::ordered_json FineTuneConfig::to_json() const {
    nlohmann::ordered_json j;
    j["strategy"] = to_string(strategy);
    j["objective"] = to_string(objective);
    j["task"] = task;
    j["tasks"] = tasks;
    j["lambda"] = lambda;
    j["lambdas"] = lambdas;
    j["include_self_loss"] = include_self_loss;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["mlm_rate"] = mlm_rate;
    j["learning_rate"] = adam.learning_rate;
    j["weight_decay"] = adam.weight_decay;
    j["beta1"] = adam.beta1;
    j["beta2"] = adam.beta2;
    j["eps"] = adam.eps;
    j["warmup_frac"] = warmup_frac;
    j["head_hidden"] = head_hidden ? nlohmann::ordered_json(*head_hidden) : nlohmann::ordered_json(nullptr);
    j["seed"] = seed;
    return j;
}

FineTuneConfig FineTuneConfig::from_json(const nlohmann::json& j) {
    FineTuneConfig c;
    auto get = [&](const char* key, auto& out) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(out);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(key, e.what());
        }
    };
    std::string s;
    if (j.contains("strategy")) {
        get("strategy", s);
        c.strategy = strategy_from_string(s);
    }
    if (j.contains("objective")) {
        get("objective", s);
        c.objective = objective_from_string(s);
    }
    get("task", c.task);
    get("tasks", c.tasks);
    get("lambda", c.lambda);
    get("lambdas", c.lambdas);
    get("include_self_loss", c.include_self_loss);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("mlm_rate", c.mlm_rate);
    get("learning_rate", c.adam.learning_rate);
    get("weight_decay", c.adam.weight_decay);
    get("beta1", c.adam.beta1);
    get("beta2", c.adam.beta2);
    get("eps", c.adam.eps);
    get("warmup_frac", c.warmup_frac);
    if (j.contains("head_hidden") && !j["head_hidden"].is_null()) {
        std::vector<int> h;
        get("head_hidden", h);
        c.head_hidden = h;
    }
    get("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------------------
// Models

template <class T>
const TaskHead<T>* FineTunedModel<T>::head(const std::string& task) const {
    for (const auto& h : heads)
        if (h.task == task) return &h;
    return nullptr;
}

template <class T>
std::string model_id(const FineTunedModel<T>& m) {
    std::uint64_t h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.body.params.data.data()),
                                               m.body.params.data.size() * sizeof(T)));
    for (const auto& head : m.heads)
        h = fnv1a64(std::string_view(reinterpret_cast<const char*>(head.params.data.data()),
                                     head.params.data.size() * sizeof(T)),
                    h);
    return hex64(h);
}

EncodedCorpus encode_corpus(const corpus::Dataset& ds, const text::Vocabulary& vocab,
                            const transformer::ArchConfig& arch, const std::vector<std::string>& tasks) {
    EncodedCorpus e;
    e.tasks = tasks;
    std::vector<std::size_t> idx;
    for (const auto& t : tasks) idx.push_back(ds.tasks.index_of(t));
    e.seqs.reserve(ds.size());
    e.labels.reserve(ds.size());
    for (const auto& n : ds.notes) {
        e.seqs.push_back(text::encode(n.text, vocab, arch.max_len, arch.style()));
        std::vector<corpus::Label> row;
        for (auto t : idx) row.push_back(n.labels[t]);
        e.labels.push_back(std::move(row));
    }
    return e;
}

// ---------------------------------------------------------------------------
// One step

template <class T>
StepResult<T> compute_step(const FineTunedModel<T>& model, const EncodedCorpus& data,
                           const std::vector<std::size_t>& rows, const StepSpec& spec) {
    const auto& body = model.body;
    const auto& arch = body.arch;
    const auto d = static_cast<std::size_t>(arch.d_model);
    if (spec.lambdas.size() != model.heads.size())
        throw InvariantError("compute_step: one lambda per head required");
    if (rows.empty()) throw DataError("compute_step: empty batch");
    check_objective(spec.objective, arch.variant);

    transformer::Batch batch;
    if (spec.include_self && arch.variant == transformer::Variant::Encoder) {
        std::vector<text::MaskedSeq> masked;
        masked.reserve(rows.size());
        for (auto r : rows)
            masked.push_back(text::apply_mlm_mask(data.seqs[r], spec.mlm_rate,
                                                  mix_seed(spec.seed, {0x6d6c6d, static_cast<std::uint64_t>(spec.epoch), r}),
                                                  model.vocab));
        batch = transformer::make_mlm_batch(masked);
    } else {
        std::vector<text::TokenSeq> seqs;
        seqs.reserve(rows.size());
        for (auto r : rows) seqs.push_back(data.seqs[r]);
        batch = spec.include_self ? transformer::make_lm_batch(seqs) : transformer::make_batch(seqs);
    }

    const transformer::RunMode mode{spec.train, mix_seed(spec.seed, {0xd0, static_cast<std::uint64_t>(spec.step)})};
    const auto fwd = transformer::forward(body, batch, mode);

    StepResult<T> res;
    res.body_grads = body.params.zeros_like();
    std::optional<transformer::SelfLoss<T>> sl;
    if (spec.include_self) {
        sl = transformer::self_loss(body, fwd, batch);
        res.self_loss = static_cast<double>(sl->value);
    }

    std::vector<T> dpooled(rows.size() * d, T(0));
    bool any_task_grad = false;
    for (std::size_t h = 0; h < model.heads.size(); ++h) {
        const auto& head = model.heads[h];
        res.head_grads.push_back(head.params.zeros_like());
        const auto col = static_cast<std::size_t>(
            std::find(data.tasks.begin(), data.tasks.end(), head.task) - data.tasks.begin());
        if (col == data.tasks.size()) throw InvariantError("compute_step: no labels for head '" + head.task + "'");
        std::vector<corpus::Label> labels;
        labels.reserve(rows.size());
        for (auto r : rows) labels.push_back(data.labels[r][col]);

        HeadCache<T> cache;
        const auto out = head_forward(head, fwd.pooled.data(), rows.size(), &cache);
        auto tl = task_loss(head, out, labels);
        res.task_losses.push_back(static_cast<double>(tl.value));
        res.task_counts.push_back(tl.count);
        // A zero weight removes the term from the objective entirely.
        if (spec.lambdas[h] == 0.0 || tl.count == 0) continue;
        const T lam = static_cast<T>(spec.lambdas[h]);
        for (auto& g : tl.dout) g *= lam;
        head_backward(head, cache, rows.size(), tl.dout.data(), res.head_grads[h], dpooled.data());
        any_task_grad = true;
    }

    transformer::backward(body, fwd, batch, sl ? &*sl : nullptr,
                          any_task_grad ? std::span<const T>(dpooled) : std::span<const T>(), res.body_grads);
    res.loss = combined_loss(res.self_loss, res.task_losses, spec.lambdas, spec.include_self);
    return res;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

template <class T>
FineTunedModel<T> train(FineTunedModel<T> model, const corpus::Dataset& ds, const FineTuneConfig& cfg,
                        bool include_self, const std::vector<double>& lambdas, TrainLog* log,
                        const TrainHooks<T>& hooks) {
    if (ds.empty()) throw DataError("training corpus is empty");
    std::vector<std::string> tasks;
    for (const auto& h : model.heads) tasks.push_back(h.task);
    const auto data = encode_corpus(ds, model.vocab, model.body.arch, tasks);
    const std::size_t n = ds.size();
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    const long steps_per_epoch = static_cast<long>((n + bs - 1) / bs);
    const long total = steps_per_epoch * cfg.epochs;
    const long warmup = cfg.warmup_frac > 0.0
                            ? std::max<long>(1, static_cast<long>(std::ceil(cfg.warmup_frac * static_cast<double>(total))))
                            : 0;

    nn::Adam<T> body_opt(model.body.params, cfg.adam);
    std::vector<nn::Adam<T>> head_opts;
    for (const auto& h : model.heads) head_opts.emplace_back(h.params, cfg.adam);

    TrainLog local;
    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(mix_seed(cfg.seed, {0x0e, static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);

        EpochLog el;
        el.epoch = epoch;
        el.task_losses.assign(model.heads.size(), 0.0);
        std::vector<std::size_t> task_steps(model.heads.size(), 0);
        for (std::size_t start = 0; start < n; start += bs) {
            const std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                                order.begin() + static_cast<std::ptrdiff_t>(std::min(n, start + bs)));
            StepSpec spec;
            spec.include_self = include_self;
            spec.lambdas = lambdas;
            spec.objective = cfg.objective;
            spec.mlm_rate = cfg.mlm_rate;
            spec.seed = cfg.seed;
            spec.epoch = epoch;
            spec.step = step;
            auto res = compute_step(model, data, rows, spec);

            const double scale = step < warmup ? static_cast<double>(step + 1) / static_cast<double>(warmup) : 1.0;
            const double lr = cfg.adam.learning_rate * scale;
            body_opt.step(model.body.params, res.body_grads, lr);
            for (std::size_t h = 0; h < model.heads.size(); ++h)
                head_opts[h].step(model.heads[h].params, res.head_grads[h], lr);
            if (!model.body.params.all_finite())
                throw InvariantError("training diverged: non-finite parameters at step " + std::to_string(step));

            el.loss += res.loss;
            el.self_loss += res.self_loss;
            for (std::size_t h = 0; h < model.heads.size(); ++h)
                if (res.task_counts[h] > 0) {
                    el.task_losses[h] += res.task_losses[h];
                    ++task_steps[h];
                }
            ++step;
            if (hooks.on_step) hooks.on_step(step, model);
        }
        el.loss /= static_cast<double>(steps_per_epoch);
        el.self_loss /= static_cast<double>(steps_per_epoch);
        for (std::size_t h = 0; h < model.heads.size(); ++h)
            if (task_steps[h]) el.task_losses[h] /= static_cast<double>(task_steps[h]);
        local.epochs.push_back(el);
    }
    local.steps = step;
    if (log) *log = std::move(local);
    return model;
}

nlohmann::ordered_json provenance_for(const std::string& stage, const std::string& base_id,
                                      const FineTuneConfig& cfg, const corpus::Dataset& ds) {
    nlohmann::ordered_json p;
    p["stage"] = stage;
    p["base_checkpoint"] = base_id.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(base_id);
    p["config"] = cfg.to_json();
    p["corpus_hash"] = hex64(ds.content_hash());
    p["tool_version"] = PERILOOM_VERSION;
    return p;
}

template <class T>
std::vector<TaskHead<T>> fresh_heads(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                     const std::vector<std::string>& tasks, const FineTuneConfig& cfg) {
    const int d = base.body.arch.d_model;
    const std::vector<int> hidden = cfg.head_hidden ? *cfg.head_hidden : std::vector<int>{d};
    std::vector<TaskHead<T>> heads;
    for (const auto& t : tasks) {
        const auto& spec = ds.tasks[ds.tasks.index_of(t)];
        heads.push_back(make_head<T>(spec, d, hidden, cfg.seed));
    }
    return heads;
}

void require_labels(const corpus::Dataset& ds, const std::string& task) {
    const auto t = ds.tasks.index_of(task);
    for (const auto& n : ds.notes)
        if (n.labels[t]) return;
    throw DataError("task '" + task + "' has no non-Missing labels");
}

}  // namespace

template <class T>
FineTunedModel<T> pretrain(const transformer::ArchConfig& arch, const corpus::Dataset& ds,
                           const text::Vocabulary& vocab, const FineTuneConfig& cfg, TrainLog* log,
                           const TrainHooks<T>& hooks) {
    cfg.validate();
    if (arch.vocab_size != vocab.size())
        throw ValidationError("arch.vocab_size", "is " + std::to_string(arch.vocab_size) + " but the vocabulary has " +
                                                     std::to_string(vocab.size()) + " entries");
    check_objective(cfg.objective, arch.variant);
    if (ds.empty()) throw DataError("pretraining corpus is empty");
    FineTunedModel<T> m{transformer::init_params<T>(arch), vocab, {}, {}};
    m = train(std::move(m), ds, cfg, true, {}, log, hooks);
    m.provenance = provenance_for("pretrain", "", cfg, ds);
    m.provenance["arch"] = arch.to_json();
    return m;
}

template <class T>
FineTunedModel<T> finetune_self_supervised(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                           const FineTuneConfig& cfg, TrainLog* log, const TrainHooks<T>& hooks) {
    cfg.validate();
    check_objective(cfg.objective, base.body.arch.variant);
    FineTunedModel<T> m{base.body, base.vocab, {}, {}};
    m = train(std::move(m), ds, cfg, true, {}, log, hooks);
    m.provenance = provenance_for("self_supervised", model_id(base), cfg, ds);
    return m;
}

template <class T>
FineTunedModel<T> finetune_foundation(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                      const std::vector<std::string>& tasks, const FineTuneConfig& cfg,
                                      TrainLog* log, const TrainHooks<T>& hooks) {
    FineTuneConfig c = cfg;
    c.strategy = Strategy::Foundation;
    c.tasks = tasks;
    c.validate();
    check_objective(c.objective, base.body.arch.variant);
    if (ds.empty()) throw DataError("fine-tuning corpus is empty");
    for (const auto& t : tasks) require_labels(ds, t);
    FineTunedModel<T> m{base.body, base.vocab, fresh_heads(base, ds, tasks, c), {}};
    m = train(std::move(m), ds, c, c.include_self_loss, c.resolved_lambdas(), log, hooks);
    m.provenance = provenance_for("foundation", model_id(base), c, ds);
    return m;
}

template <class T>
FineTunedModel<T> finetune_semi_supervised(const FineTunedModel<T>& base, const corpus::Dataset& ds,
                                           const std::string& task, const FineTuneConfig& cfg, TrainLog* log,
                                           const TrainHooks<T>& hooks) {
    // The semi-supervised objective is the single-task, self-term-on case of
    // the pooled objective; sharing the code path keeps the two bit-identical.
    FineTuneConfig c = cfg;
    c.strategy = Strategy::Foundation;
    c.tasks = {task};
    c.lambdas = {cfg.lambda};
    c.include_self_loss = true;
    auto m = finetune_foundation(base, ds, {task}, c, log, hooks);
    c.strategy = Strategy::SemiSupervised;
    c.task = task;
    c.tasks.clear();
    c.lambdas.clear();
    m.provenance["stage"] = "semi_supervised";
    m.provenance["config"] = c.to_json();
    return m;
}

template <class T>
FineTunedModel<T> run_strategy(const FineTunedModel<T>& base, const corpus::Dataset& ds, const FineTuneConfig& cfg,
                               TrainLog* log, const TrainHooks<T>& hooks) {
    cfg.validate();
    switch (cfg.strategy) {
        case Strategy::PretrainedOnly: {
            FineTunedModel<T> m{base.body, base.vocab, {}, base.provenance};
            if (log) *log = {};
            return m;
        }
        case Strategy::SelfSupervised: return finetune_self_supervised(base, ds, cfg, log, hooks);
        case Strategy::SemiSupervised: return finetune_semi_supervised(base, ds, cfg.task, cfg, log, hooks);
        case Strategy::Foundation: return finetune_foundation(base, ds, cfg.tasks, cfg, log, hooks);
    }
    throw InvariantError("unhandled strategy");
}

template <class T>
double evaluate_self_loss(const FineTunedModel<T>& model, const corpus::Dataset& ds, double mlm_rate,
                          std::uint64_t seed, int batch_size) {
    if (ds.empty()) throw DataError("evaluate_self_loss: empty corpus");
    const auto data = encode_corpus(ds, model.vocab, model.body.arch, {});
    const auto bs = static_cast<std::size_t>(std::max(1, batch_size));
    double total = 0.0;
    std::size_t count = 0;
    const bool encoder = model.body.arch.variant == transformer::Variant::Encoder;
    for (std::size_t start = 0; start < data.seqs.size(); start += bs) {
        const std::size_t end = std::min(data.seqs.size(), start + bs);
        transformer::Batch batch;
        if (encoder) {
            std::vector<text::MaskedSeq> masked;
            for (std::size_t r = start; r < end; ++r)
                masked.push_back(text::apply_mlm_mask(data.seqs[r], mlm_rate, mix_seed(seed, {0x6d6c6d, 0, r}), model.vocab));
            batch = transformer::make_mlm_batch(masked);
        } else {
            batch = transformer::make_lm_batch(std::span(data.seqs).subspan(start, end - start));
        }
        const auto fwd = transformer::forward(model.body, batch);
        const auto sl = transformer::self_loss(model.body, fwd, batch);
        total += static_cast<double>(sl.lm_value) * static_cast<double>(sl.rows.size());
        count += sl.rows.size();
    }
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class T>
tensor_io::Container to_container(const FineTunedModel<T>& m) {
    tensor_io::Container c;
    c.meta["format"] = "periloom.model";
    c.meta["dtype"] = tensor_io::to_string(tensor_io::dtype_of<T>());
    c.meta["arch"] = m.body.arch.to_json();
    c.meta["vocab"] = m.vocab.to_json();
    auto heads = nlohmann::ordered_json::array();
    for (const auto& h : m.heads)
        heads.push_back({{"task", h.task}, {"kind", corpus::to_string(h.kind)}, {"num_classes", h.num_classes},
                         {"dims", h.dims}});
    c.meta["heads"] = heads;
    m.body.params.write(c, "body.");
    for (const auto& h : m.heads) h.params.write(c, "head." + h.task + ".");
    c.provenance = m.provenance;
    return c;
}

template <class T>
FineTunedModel<T> from_container(const tensor_io::Container& c) {
    if (c.meta.value("format", std::string()) != "periloom.model")
        throw tensor_io::FormatError("container does not hold a model checkpoint");
    FineTunedModel<T> m;
    try {
        const auto arch = transformer::ArchConfig::from_json(c.meta.at("arch"));
        arch.validate();
        m.vocab = text::Vocabulary::from_json(c.meta.at("vocab"));
        if (m.vocab.size() != arch.vocab_size)
            throw tensor_io::ShapeError("checkpoint vocabulary size disagrees with arch.vocab_size");
        m.body.arch = arch;
        m.body.params = transformer::make_layout(arch).template cast<T>();
        m.body.params.read(c, "body.");
        std::size_t expected = m.body.params.specs.size();
        for (const auto& jh : c.meta.at("heads")) {
            TaskHead<T> h;
            h.task = jh.at("task").get<std::string>();
            h.kind = corpus::task_kind_from_string(jh.at("kind").get<std::string>());
            h.num_classes = jh.at("num_classes").get<int>();
            h.dims = jh.at("dims").get<std::vector<int>>();
            if (h.dims.size() < 2 || h.dims.front() != arch.d_model)
                throw tensor_io::ShapeError("head '" + h.task + "' input width disagrees with d_model");
            for (std::size_t l = 0; l + 1 < h.dims.size(); ++l) {
                h.params.add("l" + std::to_string(l) + ".w", {h.dims[l], h.dims[l + 1]}, true);
                h.params.add("l" + std::to_string(l) + ".b", {h.dims[l + 1]}, false);
            }
            h.params.read(c, "head." + h.task + ".");
            expected += h.params.specs.size();
            m.heads.push_back(std::move(h));
        }
        if (expected != c.tensors().size())
            throw tensor_io::ShapeError("checkpoint holds tensors not described by its header");
    } catch (const nlohmann::json::exception& e) {
        throw tensor_io::FormatError(std::string("checkpoint header: ") + e.what());
    }
    m.provenance = c.provenance;
    if (!m.body.params.all_finite()) throw InvariantError("checkpoint contains non-finite parameters");
    return m;
}

template <class T>
void save_model(const FineTunedModel<T>& m, const std::filesystem::path& path) {
    to_container(m).save(path);
}

template <class T>
FineTunedModel<T> load_model(const std::filesystem::path& path) {
    return from_container<T>(tensor_io::Container::load(path));
}

#define PERILOOM_INSTANTIATE(T)                                                                                      \
    template struct FineTunedModel<T>;                                                                               \
    template TaskHead<T> make_head<T>(const corpus::TaskSpec&, int, const std::vector<int>&, std::uint64_t);         \
    template std::vector<T> head_forward<T>(const TaskHead<T>&, const T*, std::size_t, HeadCache<T>*);               \
    template void head_backward<T>(const TaskHead<T>&, const HeadCache<T>&, std::size_t, const T*, nn::ParamSet<T>&, \
                                   T*);                                                                              \
    template TaskLoss<T> task_loss<T>(const TaskHead<T>&, const std::vector<T>&, const std::vector<corpus::Label>&);  \
    template std::vector<T> head_predict<T>(const TaskHead<T>&, const std::vector<T>&);                              \
    template std::string model_id<T>(const FineTunedModel<T>&);                                                      \
    template StepResult<T> compute_step<T>(const FineTunedModel<T>&, const EncodedCorpus&,                           \
                                           const std::vector<std::size_t>&, const StepSpec&);                        \
    template FineTunedModel<T> pretrain<T>(const transformer::ArchConfig&, const corpus::Dataset&,                   \
                                           const text::Vocabulary&, const FineTuneConfig&, TrainLog*,                \
                                           const TrainHooks<T>&);                                                    \
    template FineTunedModel<T> finetune_self_supervised<T>(const FineTunedModel<T>&, const corpus::Dataset&,         \
                                                           const FineTuneConfig&, TrainLog*, const TrainHooks<T>&);  \
    template FineTunedModel<T> finetune_semi_supervised<T>(const FineTunedModel<T>&, const corpus::Dataset&,         \
                                                           const std::string&, const FineTuneConfig&, TrainLog*,     \
                                                           const TrainHooks<T>&);                                    \
    template FineTunedModel<T> finetune_foundation<T>(const FineTunedModel<T>&, const corpus::Dataset&,              \
                                                      const std::vector<std::string>&, const FineTuneConfig&,        \
                                                      TrainLog*, const TrainHooks<T>&);                              \
    template FineTunedModel<T> run_strategy<T>(const FineTunedModel<T>&, const corpus::Dataset&,                     \
                                               const FineTuneConfig&, TrainLog*, const TrainHooks<T>&);              \
    template double evaluate_self_loss<T>(const FineTunedModel<T>&, const corpus::Dataset&, double, std::uint64_t,   \
                                          int);                                                                      \
    template tensor_io::Container to_container<T>(const FineTunedModel<T>&);                                         \
    template FineTunedModel<T> from_container<T>(const tensor_io::Container&);                                       \
    template void save_model<T>(const FineTunedModel<T>&, const std::filesystem::path&);                             \
    template FineTunedModel<T> load_model<T>(const std::filesystem::path&);

PERILOOM_INSTANTIATE(float)
PERILOOM_INSTANTIATE(double)

#undef PERILOOM_INSTANTIATE

}  // namespace periloom::finetune
