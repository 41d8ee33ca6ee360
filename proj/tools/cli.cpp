#include "cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "periloom/baselines.hpp"
#include "periloom/corpus.hpp"
#include "periloom/error.hpp"
#include "periloom/eval.hpp"
#include "periloom/finetune.hpp"
#include "periloom/hash.hpp"
#include "periloom/io.hpp"
#include "periloom/predict.hpp"
#include "periloom/probe.hpp"
#include "periloom/random.hpp"
#include "periloom/tensor_io.hpp"

namespace periloom::cli {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

namespace {

// Section seeds that follow the global seed unless set explicitly.
const std::vector<std::string> kDerivedSeeds{"/corpus/spec/seed", "/pretrain_corpus/spec/seed", "/arch/seed",
                                             "/pretrain/seed",    "/finetune/seed",             "/baseline/seed",
                                             "/predictor/rf/seed", "/eval/seed"};

// Maps whose keys are user-chosen (task names).
const std::vector<std::string> kOpenObjects{"/corpus/spec/tasks/", "/pretrain_corpus/spec/tasks/"};

std::string escape_pointer(const std::string& key) {
    std::string out;
    for (char c : key) {
        if (c == '~') out += "~0";
        else if (c == '/') out += "~1";
        else out += c;
    }
    return out;
}

// Leaves in document order; arrays and empty objects count as leaves.
template <class J>
void flatten(const J& j, const std::string& prefix, std::vector<std::pair<std::string, J>>& out) {
    if (j.is_object() && !j.empty()) {
        for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix + "/" + escape_pointer(it.key()), out);
    } else {
        out.emplace_back(prefix.empty() ? "/" : prefix, j);
    }
}

template <class J>
std::set<std::string> leaf_set(const J& j) {
    std::vector<std::pair<std::string, J>> leaves;
    if (j.is_object() && !j.empty()) flatten(j, "", leaves);
    std::set<std::string> out;
    for (auto& [p, _] : leaves) out.insert(p);
    return out;
}

ojson corpus_section(std::size_t n, bool pretraining) {
    auto spec = corpus::CorpusSpec::paper_defaults();
    spec.n_docs = n;
    for (auto& [_, t] : spec.tasks) t.signal_strength = pretraining ? 0.0 : 0.8;
    // The pretraining corpus shares the lexicon but carries no label signal;
    // background signal tokens keep those words in its vocabulary.
    if (pretraining) spec.signal_background = 0.05;
    return {{"path", ""}, {"spec", spec.to_json()}};
}

// Rewraps a section parser's field-named error with the full config pointer.
[[noreturn]] void rethrow_in(const std::string& section, const ValidationError& e) {
    std::string msg = e.what();
    const auto prefix = e.field() + ": ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    // Section parsers name fields "arch.heads" or "gbt.rounds"; map to pointers.
    auto field = e.field();
    std::replace(field.begin(), field.end(), '.', '/');
    const auto last = section.substr(section.rfind('/') + 1);
    if (field.rfind(last + "/", 0) == 0) field = field.substr(last.size() + 1);
    throw ValidationError(section + "/" + field, msg);
}

template <class F>
auto parse_section(const std::string& section, F&& f) {
    try {
        return f();
    } catch (const ValidationError& e) {
        rethrow_in(section, e);
    } catch (const json::exception& e) {
        throw ValidationError(section, e.what());
    }
}

json strip(json j, std::initializer_list<const char*> keys) {
    for (auto k : keys) j.erase(k);
    return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ojson default_config() {
    ojson c;
    c["seed"] = 20240601;
    c["output_dir"] = "periloom-run";
    c["corpus"] = corpus_section(5000, false);
    c["pretrain_corpus"] = corpus_section(10000, true);
    c["vocab"] = {{"min_count", 1}};
    c["arch"] = transformer::ArchConfig{}.to_json();
    c["arch"].erase("vocab_size");  // fixed by the pretraining vocabulary

    finetune::FineTuneConfig pre;
    pre.strategy = finetune::Strategy::SelfSupervised;
    pre.epochs = 2;
    pre.adam.learning_rate = 1e-3;
    c["pretrain"] = pre.to_json();

    finetune::FineTuneConfig ft = pre;
    ft.strategy = finetune::Strategy::Foundation;
    c["finetune"] = ft.to_json();

    ojson baseline = {{"method", "cbow"}};
    const auto hp = baselines::BaselineHyperparams{}.to_json();
    for (auto& [k, v] : hp.items()) baseline[k] = v;
    c["baseline"] = baseline;

    ojson predictor = {{"task", "death30"}};
    const auto params = predict::PredictorParams{}.to_json();
    for (auto& [k, v] : params.items()) predictor[k] = v;
    c["predictor"] = predictor;

    auto ev = eval::EvalConfig{}.to_json();
    ev.erase("jobs");  // a flag: it never changes results
    ev["tune"] = "predictor_only";
    ev["pipelines"] = ojson::array();
    c["eval"] = ev;

    c["probe"] = {{"mode", "fill_mask"},
                  {"prompt", "[MASK] underwent surgery to remove tumor."},
                  {"k", 5},
                  {"max_new_tokens", 12}};
    return c;
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("PERILOOM_SEED");
    if (!v || !*v) return std::nullopt;
    const std::string s(v);
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc() || p != s.data() + s.size())
        throw ValidationError("PERILOOM_SEED", "expected an unsigned integer, got '" + s + "'");
    return out;
}

ResolvedConfig resolve_config(const json& file, const json& flags, std::optional<std::uint64_t> env) {
    if (!file.is_null() && !file.is_object()) throw ValidationError("config", "top level must be a JSON object");
    const ojson defaults = default_config();
    const auto known = leaf_set(defaults);

    // Unknown fields are almost always typos; reject them by name.
    for (const auto& p : leaf_set(file)) {
        bool ok = known.count(p) > 0;
        for (const auto& open : kOpenObjects) ok = ok || p.rfind(open, 0) == 0;
        // Also catches an object where the default has a scalar.
        if (!ok) throw ValidationError(p, "unknown config field");
    }

    json env_layer = json::object();
    if (env) env_layer["seed"] = *env;

    ojson merged = defaults;
    merged.merge_patch(ojson::parse(env_layer.dump()));
    if (file.is_object()) merged.merge_patch(ojson::parse(file.dump()));
    if (flags.is_object()) merged.merge_patch(ojson::parse(flags.dump()));

    const auto in_env = leaf_set(env_layer), in_file = leaf_set(file), in_flags = leaf_set(flags);
    ResolvedConfig r;
    std::vector<std::pair<std::string, ojson>> leaves;
    flatten(merged, "", leaves);
    for (const auto& [p, _] : leaves) {
        const char* src = in_flags.count(p) ? "flag" : in_file.count(p) ? "file" : in_env.count(p) ? "env" : "default";
        r.sources.emplace_back(p, src);
    }

    if (!merged["seed"].is_number_unsigned() && !merged["seed"].is_number_integer())
        throw ValidationError("/seed", "must be an unsigned integer");
    const auto global = merged["seed"].get<std::uint64_t>();
    for (const auto& p : kDerivedSeeds) {
        auto it = std::find_if(r.sources.begin(), r.sources.end(), [&](const auto& s) { return s.first == p; });
        if (it == r.sources.end() || it->second != "default") continue;
        merged[ojson::json_pointer(p)] = mix_seed(global, {fnv1a64(p)});
        it->second = "derived";
    }
    r.value = std::move(merged);
    return r;
}

std::string ResolvedConfig::hash() const {
    auto v = value;
    v.erase("output_dir");
    return hex64(fnv1a64(v.dump()));
}

const std::string& ResolvedConfig::source_of(const std::string& pointer) const {
    for (const auto& [p, s] : sources)
        if (p == pointer) return s;
    throw ValidationError(pointer, "not a config field");
}

std::string ResolvedConfig::explain() const {
    std::string out = "# precedence: flag > file > env (PERILOOM_SEED) > default; derived = from /seed\n";
    for (const auto& [p, s] : sources) out += p + " = " + value[ojson::json_pointer(p)].dump() + "  (" + s + ")\n";
    return out;
}

// ---------------------------------------------------------------------------
// Typed views of the resolved config

namespace {

struct Context {
    ResolvedConfig cfg;
    fs::path out_dir;
    std::string command;
    int jobs = 1;
    bool json_output = false;
    std::ostream* out = nullptr;
    ojson written = ojson::array();

    const ojson& at(const std::string& pointer) const { return cfg.value.at(ojson::json_pointer(pointer)); }

    corpus::CorpusSpec corpus_spec(const std::string& section) const {
        return parse_section(section + "/spec", [&] {
            auto s = corpus::CorpusSpec::from_json(json::parse(at(section + "/spec").dump()));
            s.validate();
            return s;
        });
    }
    transformer::ArchConfig arch() const {
        return parse_section("/arch", [&] { return transformer::ArchConfig::from_json(json::parse(at("/arch").dump())); });
    }
    finetune::FineTuneConfig finetune_cfg(const std::string& section) const {
        return parse_section(section, [&] {
            auto c = finetune::FineTuneConfig::from_json(json::parse(at(section).dump()));
            return c;
        });
    }
    baselines::BaselineHyperparams baseline_hp() const {
        return parse_section("/baseline", [&] {
            auto h = baselines::BaselineHyperparams::from_json(strip(json::parse(at("/baseline").dump()), {"method"}));
            h.validate();
            return h;
        });
    }
    baselines::Method baseline_method() const {
        return parse_section("/baseline", [&] { return baselines::method_from_string(at("/baseline/method").get<std::string>()); });
    }
    predict::PredictorParams predictor() const {
        return parse_section("/predictor", [&] {
            auto p = predict::PredictorParams::from_json(strip(json::parse(at("/predictor").dump()), {"task"}));
            p.gbt.validate();
            p.logreg.validate();
            p.rf.validate();
            return p;
        });
    }
    eval::EvalConfig eval_cfg() const {
        return parse_section("/eval", [&] {
            auto e = eval::EvalConfig::from_json(strip(json::parse(at("/eval").dump()), {"tune", "pipelines"}));
            e.jobs = jobs;
            e.validate();
            return e;
        });
    }

    fs::path default_path(const std::string& name) const { return out_dir / name; }

    // Input file: explicit path > artifact in the output directory.
    fs::path input(const std::string& explicit_path, const std::string& artifact, const std::string& hint) const {
        if (!explicit_path.empty()) {
            if (!fs::exists(explicit_path)) throw DataError("input not found: " + explicit_path);
            return explicit_path;
        }
        const auto p = default_path(artifact);
        if (!fs::exists(p)) throw DataError("missing " + p.string() + "; " + hint);
        return p;
    }

    ojson provenance(const ojson& inputs = ojson::object()) const {
        return {{"tool", "periloom"},
                {"version", PERILOOM_VERSION},
                {"command", command},
                {"config_hash", cfg.hash()},
                {"inputs", inputs}};
    }

    // Writes an artifact and its .meta.json sidecar atomically.
    void emit(const fs::path& path, const std::string& bytes, const ojson& inputs = ojson::object()) {
        io::write_file_atomic(path, bytes);
        auto meta = provenance(inputs);
        meta["artifact"] = path.filename().string();
        meta["bytes"] = bytes.size();
        meta["fnv1a64"] = hex64(fnv1a64(bytes));
        auto side = path;
        side += ".meta.json";
        io::write_file_atomic(side, meta.dump(2) + "\n");
        written.push_back(path.string());
        if (!json_output) *out << "wrote " << path.string() << "\n";
    }

    void emit_container(const fs::path& path, tensor_io::Container c, const ojson& inputs = ojson::object()) {
        c.provenance["cli"] = provenance(inputs);
        emit(path, c.serialize(), inputs);
    }
};

std::string file_id(const fs::path& p) { return hex64(fnv1a64(io::read_file(p))); }

corpus::Dataset load_corpus(const Context& ctx, const std::string& section, const std::string& artifact,
                            fs::path* used = nullptr) {
    const auto p = ctx.input(ctx.at(section + "/path").get<std::string>(), artifact, "run generate-corpus first");
    if (used) *used = p;
    return corpus::load_dataset(p, ctx.corpus_spec(section).registry());
}

std::vector<std::string> tasks_with_both_classes(const corpus::Dataset& ds) {
    std::vector<std::string> out;
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        if (ds.tasks[t].kind != corpus::TaskKind::BinaryClassification) continue;
        bool pos = false, neg = false;
        for (const auto& n : ds.notes)
            if (n.labels[t]) (*n.labels[t] == 1.0 ? pos : neg) = true;
        if (pos && neg) out.push_back(ds.tasks[t].name);
    }
    return out;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

std::string strategy_alias(const std::string& s) {
    if (s == "self") return "self_supervised";
    if (s == "semi") return "semi_supervised";
    if (s == "pretrained") return "pretrained_only";
    return s;
}

// ---------------------------------------------------------------------------
// Commands

struct Inputs {
    std::string checkpoint;
    std::string embeddings;
    std::string output;
    std::string dir;
};

void cmd_generate(Context& ctx) {
    for (const auto& [section, name] : {std::pair<std::string, std::string>{"/corpus", "corpus.jsonl"},
                                        {"/pretrain_corpus", "pretrain_corpus.jsonl"}}) {
        const auto spec = ctx.corpus_spec(section);
        const auto ds = corpus::generate_corpus(spec);
        ctx.emit(ctx.default_path(name), corpus::to_jsonl(ds), {{"spec", spec.to_json()}});
    }
}

void cmd_pretrain(Context& ctx, const Inputs& in) {
    fs::path src;
    const auto ds = load_corpus(ctx, "/pretrain_corpus", "pretrain_corpus.jsonl", &src);
    const auto vocab = text::build_vocab(ds, ctx.at("/vocab/min_count").get<int>());
    auto arch = ctx.arch();
    arch.vocab_size = vocab.size();
    parse_section("/arch", [&] {
        arch.validate();
        return 0;
    });
    auto cfg = ctx.finetune_cfg("/pretrain");
    finetune::TrainLog log;
    const auto model = finetune::pretrain<float>(arch, ds, vocab, cfg, &log);
    const auto path = in.output.empty() ? ctx.default_path("pretrained.ckpt") : fs::path(in.output);
    ctx.emit_container(path, finetune::to_container(model), {{"corpus", file_id(src)}});
    if (!ctx.json_output && !log.epochs.empty())
        *ctx.out << "final self-supervised loss " << log.epochs.back().loss << "\n";
}

void cmd_finetune(Context& ctx, const Inputs& in) {
    const auto base_path = ctx.input(in.checkpoint, "pretrained.ckpt", "run pretrain first or pass --checkpoint");
    const auto base = finetune::load_model<float>(base_path);
    fs::path src;
    const auto ds = load_corpus(ctx, "/corpus", "corpus.jsonl", &src);
    auto cfg = ctx.finetune_cfg("/finetune");
    if (cfg.strategy == finetune::Strategy::Foundation && cfg.tasks.empty()) cfg.tasks = tasks_with_both_classes(ds);
    parse_section("/finetune", [&] {
        cfg.validate();
        return 0;
    });
    finetune::TrainLog log;
    const auto model = finetune::run_strategy(base, ds, cfg, &log);
    const auto path = in.output.empty()
                          ? ctx.default_path(std::string("finetuned_") + finetune::to_string(cfg.strategy) + ".ckpt")
                          : fs::path(in.output);
    ctx.emit_container(path, finetune::to_container(model), {{"base", file_id(base_path)}, {"corpus", file_id(src)}});
}

void cmd_embed(Context& ctx, const Inputs& in, bool method_given) {
    fs::path src;
    const auto ds = load_corpus(ctx, "/corpus", "corpus.jsonl", &src);
    std::vector<float> flat;
    std::size_t dim = 0;
    ojson source;
    ojson inputs = {{"corpus", file_id(src)}};
    std::string stem;
    if (!in.checkpoint.empty() && method_given)
        throw ValidationError("--checkpoint", "pass either --checkpoint or --method, not both");
    if (!in.checkpoint.empty()) {
        const auto model = finetune::load_model<float>(ctx.input(in.checkpoint, "", ""));
        std::vector<std::string> texts;
        for (const auto& n : ds.notes) texts.push_back(n.text);
        flat = transformer::extract_embeddings(model.body, model.vocab, texts);
        dim = static_cast<std::size_t>(model.body.arch.d_model);
        source = {{"kind", "transformer"},
                  {"model_id", finetune::model_id(model)},
                  {"vocab_hash", hex64(model.vocab.hash())}};
        inputs["checkpoint"] = file_id(in.checkpoint);
        stem = fs::path(in.checkpoint).stem().string();
    } else if (method_given) {
        const auto method = ctx.baseline_method();
        const auto emb = baselines::train(method, ds, ctx.baseline_hp());
        for (const auto& n : ds.notes) {
            const auto v = baselines::embed_document(emb, n.text);
            flat.insert(flat.end(), v.begin(), v.end());
        }
        dim = static_cast<std::size_t>(emb.dim);
        source = {{"kind", "baseline"}, {"method", baselines::to_string(method)}, {"hp", emb.hp.to_json()},
                  {"vocab_hash", hex64(emb.vocab.hash())}};
        stem = baselines::to_string(method);
    } else {
        throw ValidationError("--checkpoint", "embed needs --checkpoint <model> or --method <baseline>");
    }
    tensor_io::Container c;
    std::vector<std::string> ids;
    for (const auto& n : ds.notes) ids.push_back(n.id);
    c.meta["format"] = "periloom.doc_embeddings";
    c.meta["source"] = source;
    c.meta["corpus_hash"] = hex64(ds.content_hash());
    c.meta["ids"] = ids;
    c.add<float>("embeddings", {static_cast<std::int64_t>(ds.size()), static_cast<std::int64_t>(dim)}, flat);
    const auto path = in.output.empty() ? ctx.default_path("embeddings_" + stem + ".bin") : fs::path(in.output);
    ctx.emit_container(path, std::move(c), inputs);
}

void cmd_train_predictor(Context& ctx, const Inputs& in) {
    if (in.embeddings.empty()) throw ValidationError("--embeddings", "train-predictor needs --embeddings <file>");
    const auto emb_path = ctx.input(in.embeddings, "", "");
    const auto c = tensor_io::Container::load(emb_path);
    if (c.meta.value("format", std::string()) != "periloom.doc_embeddings")
        throw tensor_io::FormatError(emb_path.string() + " does not hold document embeddings");
    fs::path src;
    const auto ds = load_corpus(ctx, "/corpus", "corpus.jsonl", &src);
    if (c.meta.at("corpus_hash").get<std::string>() != hex64(ds.content_hash()))
        throw CompatibilityError("embeddings in " + emb_path.string() + " were computed on a different corpus");
    const auto ids = c.meta.at("ids").get<std::vector<std::string>>();
    if (ids.size() != ds.size()) throw CompatibilityError("embedding rows do not match the corpus");
    const auto& shape = c.tensor("embeddings").shape;
    if (shape.size() != 2) throw tensor_io::ShapeError("embeddings must be a matrix");
    const auto flat = c.get<float>("embeddings", std::vector<std::int64_t>{static_cast<std::int64_t>(ds.size()), shape[1]});
    const auto x = predict::FeatureMatrix::from_flat(flat, static_cast<std::size_t>(shape[1]), ids);

    const auto task = ctx.at("/predictor/task").get<std::string>();
    const auto t = parse_section("/predictor/task", [&] { return ds.tasks.index_of(task); });
    std::vector<corpus::Label> labels;
    for (const auto& n : ds.notes) labels.push_back(n.labels[t]);
    const auto rows = predict::select_labeled(x, labels);
    const auto params = ctx.predictor();
    const auto model = predict::fit(params, rows.x, rows.y);
    const auto path = in.output.empty() ? ctx.default_path("predictor_" + task + ".bin") : fs::path(in.output);
    auto container = predict::to_container(model);
    container.meta["task"] = task;
    container.meta["embedding_source"] = c.meta.at("source");
    ctx.emit_container(path, std::move(container), {{"embeddings", file_id(emb_path)}, {"corpus", file_id(src)}});
    if (!ctx.json_output) {
        const auto p = model.predict_proba(rows.x);
        *ctx.out << "training AUROC (" << task << ", " << rows.y.size() << " labeled rows): " << eval::auroc(p, rows.y)
                 << "\n";
    }
}

std::vector<eval::PipelineConfig> pipelines(const Context& ctx) {
    json base;
    base["finetune"] = json::parse(ctx.at("/finetune").dump());
    base["baseline"] = strip(json::parse(ctx.at("/baseline").dump()), {"method"});
    base["predictor"] = strip(json::parse(ctx.at("/predictor").dump()), {"task"});
    base["tune"] = ctx.at("/eval/tune");
    // Strategy-specific task lists are filled per evaluated task.
    base["finetune"]["task"] = "";
    base["finetune"]["tasks"] = json::array();
    base["finetune"]["lambdas"] = json::array();

    json list = json::parse(ctx.at("/eval/pipelines").dump());
    if (list.empty()) {
        for (const char* s : {"pretrained_only", "self_supervised", "semi_supervised", "foundation"})
            list.push_back({{"finetune", {{"strategy", s}}}});
        for (const char* m : {"cbow", "glove", "fasttext", "doc2vec"}) list.push_back({{"representation", m}});
    }
    std::vector<eval::PipelineConfig> out;
    for (std::size_t i = 0; i < list.size(); ++i) {
        const auto field = "/eval/pipelines/" + std::to_string(i);
        if (!list[i].is_object()) throw ValidationError(field, "must be an object");
        json j = base;
        j.merge_patch(list[i]);
        out.push_back(parse_section(field, [&] {
            auto p = eval::PipelineConfig::from_json(j);
            p.validate();
            return p;
        }));
    }
    return out;
}

void cmd_evaluate(Context& ctx, const Inputs& in) {
    fs::path src;
    const auto ds = load_corpus(ctx, "/corpus", "corpus.jsonl", &src);
    const auto ps = pipelines(ctx);
    auto ecfg = ctx.eval_cfg();
    ojson inputs = {{"corpus", file_id(src)}};
    std::optional<finetune::FineTunedModel<float>> base;
    const bool needs_base = std::any_of(ps.begin(), ps.end(), [](const auto& p) {
        return p.representation == eval::Representation::Transformer;
    });
    if (needs_base) {
        const auto p = ctx.input(in.checkpoint, "pretrained.ckpt", "run pretrain first or pass --checkpoint");
        base = finetune::load_model<float>(p);
        inputs["checkpoint"] = file_id(p);
    }
    auto report = eval::nested_cv(ds, ps, ecfg, base ? &*base : nullptr);
    report.meta["config_hash"] = ctx.cfg.hash();
    const auto dir = in.output.empty() ? ctx.default_path("eval") : fs::path(in.output);
    ctx.emit(dir / "folds.csv", report.to_csv(), inputs);
    ctx.emit(dir / "predictions.csv", report.predictions_csv(), inputs);
    ctx.emit(dir / "summary.json", report.summary_json().dump(2) + "\n", inputs);
    ctx.emit(dir / "auroc.svg", report.to_svg(), inputs);
    if (!ctx.json_output) {
        for (const auto& e : report.entries) {
            const auto s = e.summary("auroc");
            *ctx.out << e.task << "  " << e.strategy << "/" << e.predictor << "  AUROC ";
            if (s.mean) *ctx.out << *s.mean;
            else *ctx.out << "n/a";
            if (s.ci_low) *ctx.out << "  [" << *s.ci_low << ", " << *s.ci_high << "]";
            *ctx.out << "\n";
        }
    }
}

void cmd_probe(Context& ctx, const Inputs& in) {
    const auto path = ctx.input(in.checkpoint, "pretrained.ckpt", "run pretrain first or pass --checkpoint");
    const auto model = finetune::load_model<float>(path);
    const auto mode = ctx.at("/probe/mode").get<std::string>();
    const auto prompt = ctx.at("/probe/prompt").get<std::string>();
    probe::ProbeResult r;
    if (mode == "fill_mask")
        r = probe::fill_mask(model, prompt, ctx.at("/probe/k").get<int>());
    else if (mode == "complete")
        r = probe::complete(model, prompt, ctx.at("/probe/max_new_tokens").get<int>());
    else
        throw ValidationError("/probe/mode", "expected fill_mask or complete, got '" + mode + "'");
    const auto dest = in.output.empty() ? ctx.default_path("probe.json") : fs::path(in.output);
    const bool quiet = ctx.json_output;
    ctx.json_output = true;  // the result itself is the console output
    ctx.emit(dest, r.to_json().dump(2) + "\n", {{"checkpoint", file_id(path)}});
    ctx.json_output = quiet;
    if (quiet)
        *ctx.out << r.to_json().dump() << "\n";
    else
        *ctx.out << r.to_text();
}

void cmd_report(Context& ctx, const Inputs& in) {
    const fs::path dir = in.dir.empty() ? ctx.default_path("eval") : fs::path(in.dir);
    const auto folds = dir / "folds.csv";
    if (!fs::exists(folds)) throw DataError("no folds.csv in " + dir.string() + "; run evaluate first");
    auto report = eval::EvalReport::from_csv(io::read_file(folds));
    ojson inputs = {{"folds", file_id(folds)}};
    const auto preds = dir / "predictions.csv";
    if (fs::exists(preds)) {
        report.attach_predictions(io::read_file(preds));
        inputs["predictions"] = file_id(preds);
        // Recompute each fold from the stored scores as a consistency check.
        for (const auto& e : report.entries)
            for (const auto& f : e.folds) {
                if (f.scores.scores.empty()) continue;
                const auto m = eval::compute_metrics(f.scores.scores, f.scores.labels, f.metrics.threshold);
                for (const auto& name : eval::metric_names()) {
                    const auto a = eval::metric_value(m, name), b = eval::metric_value(f.metrics, name);
                    if (a.has_value() != b.has_value() || (a && std::abs(*a - *b) > 1e-9))
                        throw DataError("report: " + name + " of " + e.task + "/" + e.strategy + "/" + e.predictor +
                                        " fold " + std::to_string(f.fold) + " disagrees with predictions.csv");
                }
            }
    }
    const auto summary_path = dir / "summary.json";
    if (fs::exists(summary_path)) {
        const auto prior = json::parse(io::read_file(summary_path));
        if (prior.contains("meta")) report.meta = ojson::parse(prior["meta"].dump());
    }
    ctx.emit(dir / "report.csv", report.to_csv(), inputs);
    ctx.emit(dir / "report_summary.json", report.summary_json().dump(2) + "\n", inputs);
    ctx.emit(dir / "report.svg", report.to_svg(), inputs);
}

int fail(std::ostream& err, const char* category, const std::string& message, const std::string& field = {}) {
    json line = {{"error", category}, {"message", message}};
    if (!field.empty()) line["field"] = field;
    err << line.dump() << "\n";
    const std::string c = category;
    if (c == "usage") return kUsage;
    if (c == "internal") return kInternal;
    return kConfigOrData;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"periloom: clinical-note language model experiments", "periloom"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir;
    std::optional<std::uint64_t> seed;
    bool explain = false, json_output = false;
    int jobs = 1;
    app.add_option("--config", config_path, "JSON run config");
    app.add_option("--out", out_dir, "output directory (overrides output_dir)");
    app.add_option("--seed", seed, "global seed (overrides seed and PERILOOM_SEED)");
    app.add_flag("--explain", explain, "print the resolved config with the source of each field, then exit");
    app.add_flag("--json", json_output, "machine-readable console output");
    app.add_option("--jobs", jobs, "outer folds evaluated concurrently")->check(CLI::PositiveNumber);

    json flags = json::object();
    Inputs in;
    bool method_given = false;
    auto set = [&](const std::string& pointer) {
        return [&flags, pointer](const auto& v) { flags[json::json_pointer(pointer)] = v; };
    };

    auto* gen = app.add_subcommand("generate-corpus", "generate the target and pretraining corpora");
    gen->add_option_function<std::size_t>("--n", set("/corpus/spec/n_docs"), "target corpus size");
    gen->add_option_function<std::size_t>("--pretrain-n", set("/pretrain_corpus/spec/n_docs"),
                                          "pretraining corpus size");

    auto* pre = app.add_subcommand("pretrain", "pretrain a transformer on the pretraining corpus");
    pre->add_option_function<int>("--epochs", set("/pretrain/epochs"), "training epochs");
    pre->add_option_function<std::string>("--variant", set("/arch/variant"), "encoder or decoder");
    pre->add_option_function<double>("--lr", set("/pretrain/learning_rate"), "peak learning rate");
    pre->add_option("--output", in.output, "checkpoint path");

    auto* ft = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint on the target corpus");
    ft->add_option_function<std::string>(
        "--strategy",
        [&](const std::string& s) { flags[json::json_pointer("/finetune/strategy")] = strategy_alias(s); },
        "pretrained | self | semi | foundation");
    ft->add_option_function<double>("--lambda", set("/finetune/lambda"), "supervised loss weight (semi)");
    ft->add_option_function<std::string>("--task", set("/finetune/task"), "task of the semi-supervised head");
    ft->add_option_function<std::string>(
        "--tasks", [&](const std::string& s) { flags[json::json_pointer("/finetune/tasks")] = split_list(s); },
        "comma-separated foundation tasks");
    ft->add_option_function<int>("--epochs", set("/finetune/epochs"), "training epochs");
    ft->add_option("--checkpoint", in.checkpoint, "base checkpoint (default: <out>/pretrained.ckpt)");
    ft->add_option("--output", in.output, "checkpoint path");

    auto* emb = app.add_subcommand("embed", "document embeddings from a checkpoint or a baseline");
    emb->add_option("--checkpoint", in.checkpoint, "transformer checkpoint");
    emb->add_option_function<std::string>(
        "--method",
        [&](const std::string& m) {
            flags[json::json_pointer("/baseline/method")] = m;
            method_given = true;
        },
        "baseline: cbow | glove | fasttext | doc2vec");
    emb->add_option("--output", in.output, "embedding file path");

    auto* tp = app.add_subcommand("train-predictor", "fit a predictor on stored embeddings");
    tp->add_option("--embeddings", in.embeddings, "embedding file from `embed`");
    tp->add_option_function<std::string>("--task", set("/predictor/task"), "target task");
    tp->add_option_function<std::string>("--kind", set("/predictor/kind"), "gbt | logreg | rf");
    tp->add_option("--output", in.output, "predictor path");

    auto* ev = app.add_subcommand("evaluate", "nested cross-validation over the configured strategies");
    ev->add_option_function<int>("--k-outer", set("/eval/k_outer"), "outer folds");
    ev->add_option_function<int>("--k-inner", set("/eval/k_inner"), "inner folds");
    ev->add_option_function<std::string>("--tune", set("/eval/tune"), "predictor_only | full_pipeline");
    ev->add_option_function<std::string>(
        "--tasks", [&](const std::string& s) { flags[json::json_pointer("/eval/tasks")] = split_list(s); },
        "comma-separated tasks");
    ev->add_option("--checkpoint", in.checkpoint, "pretrained checkpoint (default: <out>/pretrained.ckpt)");
    ev->add_option("--output", in.output, "report directory (default: <out>/eval)");

    auto* pr = app.add_subcommand("probe", "fill-mask or greedy completion probe");
    pr->add_option("--checkpoint", in.checkpoint, "model checkpoint (default: <out>/pretrained.ckpt)");
    pr->add_option_function<std::string>("--mode", set("/probe/mode"), "fill_mask | complete");
    pr->add_option_function<std::string>("--prompt", set("/probe/prompt"), "prompt text");
    pr->add_option_function<int>("--k", set("/probe/k"), "candidates to list (fill_mask)");
    pr->add_option_function<int>("--max-new-tokens", set("/probe/max_new_tokens"), "generation budget (complete)");
    pr->add_option("--output", in.output, "result path (default: <out>/probe.json)");

    auto* rep = app.add_subcommand("report", "re-aggregate a completed evaluate directory");
    rep->add_option("--dir", in.dir, "evaluate output directory (default: <out>/eval)");

    std::vector<std::string> argv(args.rbegin(), args.rend());  // CLI11 consumes from the back
    try {
        app.parse(argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << app.help();
        if (!args.empty() && args.front().rfind("-", 0) != 0 && !app.get_subcommand_no_throw(args.front()))
            return fail(err, "usage", "unknown command '" + args.front() + "'");
        return fail(err, "usage", e.what());
    }

    try {
        Context ctx;
        ctx.command = app.get_subcommands().front()->get_name();
        ctx.jobs = jobs;
        ctx.json_output = json_output;
        ctx.out = &out;

        json file = json::object();
        if (!config_path.empty()) {
            if (!fs::exists(config_path)) throw ValidationError("--config", "file not found: " + config_path);
            try {
                file = json::parse(io::read_file(config_path));
            } catch (const json::parse_error& e) {
                throw ValidationError("--config", std::string("invalid JSON: ") + e.what());
            }
        }
        if (!out_dir.empty()) flags["output_dir"] = out_dir;
        if (seed) flags["seed"] = *seed;
        ctx.cfg = resolve_config(file, flags, env_seed());
        if (explain) {
            out << ctx.cfg.explain();
            return kOk;
        }
        for (const char* section : {"/corpus", "/pretrain_corpus"}) {
            const auto p = ctx.at(std::string(section) + "/path").get<std::string>();
            if (!p.empty() && !fs::exists(p)) throw ValidationError(std::string(section) + "/path", "file not found: " + p);
        }
        ctx.out_dir = ctx.at("/output_dir").get<std::string>();

        const auto& cmd = ctx.command;
        if (cmd == "generate-corpus") cmd_generate(ctx);
        else if (cmd == "pretrain") cmd_pretrain(ctx, in);
        else if (cmd == "finetune") cmd_finetune(ctx, in);
        else if (cmd == "embed") cmd_embed(ctx, in, method_given);
        else if (cmd == "train-predictor") cmd_train_predictor(ctx, in);
        else if (cmd == "evaluate") cmd_evaluate(ctx, in);
        else if (cmd == "probe") cmd_probe(ctx, in);
        else if (cmd == "report") cmd_report(ctx, in);

        if (json_output && cmd != "probe")
            out << ojson{{"command", cmd}, {"config_hash", ctx.cfg.hash()}, {"artifacts", ctx.written}}.dump() << "\n";
        return kOk;
    } catch (const ValidationError& e) {
        return fail(err, e.category(), e.what(), e.field());
    } catch (const Error& e) {
        return fail(err, e.category(), e.what());
    } catch (const json::exception& e) {
        return fail(err, "config", e.what());
    } catch (const fs::filesystem_error& e) {
        return fail(err, "data", e.what());
    } catch (const std::exception& e) {
        return fail(err, "internal", e.what());
    }
}

}  // namespace periloom::cli
