#include "periloom/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

#include "periloom/error.hpp"
#include "periloom/hash.hpp"
#include "periloom/io.hpp"
#include "periloom/random.hpp"

namespace periloom::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

const char* to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::BinaryClassification: return "binary";
        case TaskKind::MultiClass: return "multiclass";
        case TaskKind::Regression: return "regression";
    }
    return "binary";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "binary") return TaskKind::BinaryClassification;
    if (s == "multiclass") return TaskKind::MultiClass;
    if (s == "regression") return TaskKind::Regression;
    throw ValidationError("kind", "unknown task kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// TaskRegistry

TaskRegistry::TaskRegistry(std::vector<TaskSpec> tasks) : tasks_(std::move(tasks)) {
    std::set<std::string> seen;
    for (const auto& t : tasks_) {
        if (t.name.empty()) throw ValidationError("tasks", "empty task name");
        if (!seen.insert(t.name).second) throw ValidationError("tasks", "duplicate task '" + t.name + "'");
    }
}

TaskRegistry TaskRegistry::defaults() {
    std::vector<TaskSpec> t;
    for (const char* name : {"death30", "dvt", "pe", "pneumonia", "aki", "delirium"})
        t.push_back({name, TaskKind::BinaryClassification, 2});
    return TaskRegistry(std::move(t));
}

std::optional<std::size_t> TaskRegistry::find(const std::string& name) const {
    for (std::size_t i = 0; i < tasks_.size(); ++i)
        if (tasks_[i].name == name) return i;
    return std::nullopt;
}

std::size_t TaskRegistry::index_of(const std::string& name) const {
    if (auto i = find(name)) return *i;
    throw DataError("unknown task '" + name + "' (registry: " + names_joined() + ")");
}

std::string TaskRegistry::names_joined() const {
    std::string out;
    for (const auto& t : tasks_) {
        if (!out.empty()) out += ", ";
        out += t.name;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.tasks = tasks;
    out.notes.reserve(rows.size());
    for (auto r : rows) out.notes.push_back(notes.at(r));
    return out;
}

std::uint64_t Dataset::content_hash() const { return fnv1a64(to_jsonl(*this)); }

// ---------------------------------------------------------------------------
// CorpusSpec

CorpusSpec CorpusSpec::paper_defaults() {
    CorpusSpec s;
    s.n_docs = 84875;
    s.vocab_size = 3203;
    s.length_mean = 8.9;
    s.length_sd = 6.9;
    // Positive counts over 84,875 cases; delirium is 47% of the screened subset
    // (5,695 / 0.47 ~= 12,117 screened).
    s.tasks["death30"] = {1694.0 / 84875.0, 1.0, 0.5};
    s.tasks["dvt"] = {498.0 / 84875.0, 1.0, 0.5};
    s.tasks["pe"] = {287.0 / 84875.0, 1.0, 0.5};
    s.tasks["pneumonia"] = {475.0 / 84875.0, 1.0, 0.5};
    s.tasks["aki"] = {11418.0 / 84875.0, 1.0, 0.5};
    s.tasks["delirium"] = {0.47, (5695.0 / 0.47) / 84875.0, 0.5};
    return s;
}

namespace {

constexpr std::size_t kFixedWords = 3 + 12;
constexpr std::size_t kMinPerCategory = 10;

void check_unit(const std::string& field, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(field, "must be in [0,1], got " + std::to_string(v));
}

}  // namespace

TaskRegistry CorpusSpec::registry() const {
    std::vector<TaskSpec> out;
    const auto defaults = TaskRegistry::defaults();
    for (const auto& t : defaults.tasks())
        if (tasks.count(t.name)) out.push_back(t);
    for (const auto& [name, _] : tasks)
        if (!defaults.find(name)) out.push_back({name, TaskKind::BinaryClassification, 2});
    return TaskRegistry(std::move(out));
}

void CorpusSpec::validate() const {
    if (n_docs == 0) throw ValidationError("n_docs", "must be >= 1");
    if (length_min < 1) throw ValidationError("length_min", "must be >= 1");
    if (!(length_mean >= static_cast<double>(length_min)))
        throw ValidationError("length_mean", "must be >= length_min");
    if (!(length_sd >= 0.0)) throw ValidationError("length_sd", "must be >= 0");
    check_unit("signal_background", signal_background);
    if (signal_tokens_per_task < 1) throw ValidationError("signal_tokens_per_task", "must be >= 1");
    for (const auto& [name, t] : tasks) {
        check_unit("tasks." + name + ".event_rate", t.event_rate);
        check_unit("tasks." + name + ".screening_rate", t.screening_rate);
        check_unit("tasks." + name + ".signal_strength", t.signal_strength);
    }
    const std::size_t min_vocab = kFixedWords + tasks.size() * signal_tokens_per_task + 3 * kMinPerCategory;
    if (vocab_size < min_vocab)
        throw ValidationError("vocab_size", "too small for the template grammar (need >= " +
                                                std::to_string(min_vocab) + ")");
}

ordered_json CorpusSpec::to_json() const {
    ordered_json j;
    j["n_docs"] = n_docs;
    j["vocab_size"] = vocab_size;
    j["length_mean"] = length_mean;
    j["length_sd"] = length_sd;
    j["length_min"] = length_min;
    ordered_json jt = ordered_json::object();
    for (const auto& [name, t] : tasks)
        jt[name] = {{"event_rate", t.event_rate},
                    {"screening_rate", t.screening_rate},
                    {"signal_strength", t.signal_strength}};
    j["tasks"] = jt;
    j["signal_background"] = signal_background;
    j["signal_tokens_per_task"] = signal_tokens_per_task;
    j["lexicon_seed"] = lexicon_seed;
    j["seed"] = seed;
    return j;
}

CorpusSpec CorpusSpec::from_json(const json& j) {
    CorpusSpec s = paper_defaults();
    auto get = [&](const char* key, auto& out) {
        if (!j.contains(key)) return;
        try {
            j.at(key).get_to(out);
        } catch (const json::exception& e) {
            throw ValidationError(key, e.what());
        }
    };
    get("n_docs", s.n_docs);
    get("vocab_size", s.vocab_size);
    get("length_mean", s.length_mean);
    get("length_sd", s.length_sd);
    get("length_min", s.length_min);
    get("signal_background", s.signal_background);
    get("signal_tokens_per_task", s.signal_tokens_per_task);
    get("lexicon_seed", s.lexicon_seed);
    get("seed", s.seed);
    if (j.contains("tasks")) {
        if (!j["tasks"].is_object()) throw ValidationError("tasks", "must be an object");
        s.tasks.clear();
        for (const auto& [name, jt] : j["tasks"].items()) {
            TaskTargets t;
            try {
                t.event_rate = jt.value("event_rate", t.event_rate);
                t.screening_rate = jt.value("screening_rate", t.screening_rate);
                t.signal_strength = jt.value("signal_strength", t.signal_strength);
            } catch (const json::exception& e) {
                throw ValidationError("tasks." + name, e.what());
            }
            s.tasks[name] = t;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------
// Lexicon

namespace {

const std::vector<std::string> kStems = {
    "arthr", "chol", "cyst", "gastr", "hepat", "nephr", "neur", "oste", "proct", "rhin",
    "splen", "thorac", "ureter", "col", "laryng", "pharyng", "hyster", "oophor", "salping", "mamm",
    "angi", "cardi", "pneum", "my", "ten", "chondr", "derm", "encephal", "gloss", "lapar",
    "lob", "mast", "orchi", "pyel", "sigmoid", "trache", "vas", "ven", "cholangi", "duoden",
    "jejun", "ile", "pancreat", "esophag", "crani", "lamin", "spondyl", "disc", "vertebr", "fasci"};

const std::vector<std::string> kProcSuffixes = {"ectomy", "otomy", "ostomy", "oplasty", "oscopy", "opexy",
                                                "orrhaphy", "olysis", "odesis", "otripsy", "ography", "ocentesis"};
const std::vector<std::string> kSiteSuffixes = {"um", "ia", "eum", "ium", "us", "a", "on", "is"};
const std::vector<std::string> kAdjSuffixes = {"al", "ic", "eal", "ar", "oid", "ous", "ive", "ial", "ine", "ary"};

const std::vector<std::string> kBaseSites = {
    "knee", "hip", "shoulder", "ankle", "wrist", "elbow", "spine", "colon", "rectum", "liver",
    "gallbladder", "kidney", "bladder", "prostate", "uterus", "ovary", "breast", "thyroid", "lung", "heart",
    "aorta", "carotid", "femur", "tibia", "humerus", "cataract", "retina", "cornea", "sinus", "tonsil",
    "hernia", "appendix", "pancreas", "stomach", "esophagus", "bowel", "skin", "tendon", "ligament", "meniscus"};

const std::vector<std::string> kBaseProcedures = {
    "arthroplasty", "cholecystectomy", "appendectomy", "colectomy", "hysterectomy", "prostatectomy",
    "nephrectomy", "mastectomy", "thyroidectomy", "craniotomy", "laminectomy", "discectomy", "fusion",
    "replacement", "excision", "biopsy", "resection", "reconstruction", "amputation", "debridement",
    "fixation", "herniorrhaphy", "cystoscopy", "colonoscopy", "bronchoscopy", "phacoemulsification",
    "vitrectomy", "tonsillectomy", "septoplasty", "lumpectomy"};

const std::vector<std::string> kBaseModifiers = {
    "with", "and", "of", "revision", "removal", "insertion", "exploration", "total", "partial", "possible",
    "diagnostic", "under", "anesthesia", "general", "local", "washout", "drainage", "catheter", "stent", "graft",
    "mesh", "implant", "hardware", "closed", "reduction", "internal", "external", "extended", "radical", "simple",
    "complex", "primary", "secondary", "staged", "adhesions", "lymph", "node", "dissection", "sentinel", "frozen",
    "section", "tube", "placement", "port", "injection", "block", "nerve", "repair", "lesion", "mass"};

const std::vector<std::string> kLaterality = {"left", "right", "bilateral"};
const std::vector<std::string> kApproaches = {"laparoscopic", "robotic", "open", "endoscopic",
                                              "percutaneous", "arthroscopic", "minimally", "invasive",
                                              "transurethral", "transvaginal", "anterior", "posterior"};

const std::map<std::string, std::vector<std::string>> kSignalWords = {
    {"death30", {"palliative", "moribund", "metastatic", "septic", "cachectic", "unresectable"}},
    {"dvt", {"immobilized", "varicose", "thrombophilia", "hypercoagulable", "stasis", "factorv"}},
    {"pe", {"embolic", "hypoxic", "tachycardic", "ivcfilter", "dyspneic", "desaturating"}},
    {"pneumonia", {"aspiration", "intubated", "copd", "tracheostomy", "dysphagia", "ventilated"}},
    {"aki", {"nephrotoxic", "creatinine", "dialysis", "contrast", "oliguric", "ckd"}},
    {"delirium", {"dementia", "confused", "elderly", "sedated", "agitated", "disoriented"}}};

std::string join_stem(const std::string& stem, const std::string& suffix) {
    // "o"-led suffixes attach directly; vowel clashes drop the suffix vowel.
    if (!stem.empty() && !suffix.empty() && std::string("aeiou").find(stem.back()) != std::string::npos &&
        std::string("aeiou").find(suffix.front()) != std::string::npos)
        return stem + suffix.substr(1);
    return stem + suffix;
}

/// Base words first, then single-stem forms, then lexicon-shuffled two-stem forms.
std::vector<std::string> build_pool(const std::vector<std::string>& base, const std::vector<std::string>& suffixes,
                                    std::size_t count, Rng& rng, std::unordered_set<std::string>& taken) {
    std::vector<std::string> out;
    auto take = [&](const std::string& w) {
        if (out.size() < count && taken.insert(w).second) out.push_back(w);
    };
    for (const auto& w : base) take(w);
    if (out.size() >= count) return out;
    std::vector<std::string> single;
    for (const auto& s : kStems)
        for (const auto& suf : suffixes) single.push_back(join_stem(s, suf));
    rng.shuffle(single);
    for (const auto& w : single) take(w);
    std::size_t attempts = 0;
    while (out.size() < count && attempts < count * 200) {
        ++attempts;
        const auto& a = kStems[rng.below(kStems.size())];
        const auto& b = kStems[rng.below(kStems.size())];
        const auto& suf = suffixes[rng.below(suffixes.size())];
        take(a + "o" + join_stem(b, suf));
    }
    if (out.size() < count) throw InvariantError("lexicon: could not generate enough distinct words");
    return out;
}

}  // namespace

Lexicon Lexicon::build(const CorpusSpec& spec) {
    Lexicon lex;
    Rng rng(mix_seed(spec.lexicon_seed, {0x1e}));
    std::unordered_set<std::string> taken;
    lex.laterality = kLaterality;
    lex.approaches = kApproaches;
    for (const auto& w : lex.laterality) taken.insert(w);
    for (const auto& w : lex.approaches) taken.insert(w);

    const auto registry = spec.registry();
    for (const auto& t : registry.tasks()) {
        std::vector<std::string> words;
        auto it = kSignalWords.find(t.name);
        for (std::size_t i = 0; i < spec.signal_tokens_per_task; ++i) {
            std::string w = (it != kSignalWords.end() && i < it->second.size())
                                ? it->second[i]
                                : t.name + "marker" + std::to_string(i);
            if (!taken.insert(w).second) throw ValidationError("tasks", "signal token collision on '" + w + "'");
            words.push_back(std::move(w));
        }
        lex.signal_tokens[t.name] = std::move(words);
    }

    const std::size_t used = kFixedWords + registry.size() * spec.signal_tokens_per_task;
    const std::size_t rest = spec.vocab_size - used;
    const std::size_t n_proc = std::max(kMinPerCategory, rest * 45 / 100);
    const std::size_t n_site = std::max(kMinPerCategory, rest * 25 / 100);
    const std::size_t n_mod = rest - n_proc - n_site;

    lex.procedures = build_pool(kBaseProcedures, kProcSuffixes, n_proc, rng, taken);
    lex.sites = build_pool(kBaseSites, kSiteSuffixes, n_site, rng, taken);
    lex.modifiers = build_pool(kBaseModifiers, kAdjSuffixes, n_mod, rng, taken);
    return lex;
}

std::size_t Lexicon::size() const {
    std::size_t n = laterality.size() + approaches.size() + sites.size() + procedures.size() + modifiers.size();
    for (const auto& [_, v] : signal_tokens) n += v.size();
    return n;
}

// ---------------------------------------------------------------------------
// Generator

namespace {

class ZipfSampler {
public:
    ZipfSampler(std::size_t n, double exponent) : cdf_(n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += 1.0 / std::pow(static_cast<double>(i + 1), exponent);
            cdf_[i] = acc;
        }
        for (auto& c : cdf_) c /= acc;
    }
    std::size_t operator()(Rng& rng) const {
        const double u = rng.uniform();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
    }

private:
    std::vector<double> cdf_;
};

struct Grammar {
    const Lexicon& lex;
    ZipfSampler lat, app, site, proc, mod;

    explicit Grammar(const Lexicon& l)
        : lex(l),
          lat(l.laterality.size(), 1.0),
          app(l.approaches.size(), 1.0),
          site(l.sites.size(), 1.0),
          proc(l.procedures.size(), 1.0),
          mod(l.modifiers.size(), 1.0) {}

    std::vector<std::string> clause(Rng& rng) const {
        std::vector<std::string> c;
        if (rng.bernoulli(0.35)) c.push_back(lex.laterality[lat(rng)]);
        if (rng.bernoulli(0.25)) c.push_back(lex.approaches[app(rng)]);
        if (rng.bernoulli(0.6)) c.push_back(lex.sites[site(rng)]);
        c.push_back(lex.procedures[proc(rng)]);
        for (int i = 0; i < 4 && rng.bernoulli(0.5); ++i) c.push_back(lex.modifiers[mod(rng)]);
        return c;
    }
};

std::size_t sample_length(const CorpusSpec& spec, Rng& rng) {
    const double m = spec.length_mean - static_cast<double>(spec.length_min);
    const double v = spec.length_sd * spec.length_sd;
    double lambda = m;
    // Overdispersed lengths: gamma-Poisson mixture (negative binomial) with the
    // requested mean and variance; plain Poisson when the variance is too small.
    if (m > 0.0 && v > m) {
        const double shape = m * m / (v - m);
        const double scale = (v - m) / m;
        lambda = rng.gamma(shape, scale);
    }
    return spec.length_min + static_cast<std::size_t>(rng.poisson(lambda));
}

std::string join_tokens(const std::vector<std::string>& toks) {
    std::string out;
    for (const auto& t : toks) {
        if (!out.empty()) out += ' ';
        out += t;
    }
    return out;
}

}  // namespace

Dataset generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    const Lexicon lex = Lexicon::build(spec);
    const Grammar grammar(lex);

    Dataset ds;
    ds.tasks = spec.registry();
    const std::size_t n = spec.n_docs;
    const std::size_t m = ds.tasks.size();

    // Labels: exact screened / positive counts, random membership.
    std::vector<std::vector<Label>> labels(n, std::vector<Label>(m));
    for (std::size_t t = 0; t < m; ++t) {
        const auto& targets = spec.tasks.at(ds.tasks[t].name);
        Rng rng(mix_seed(spec.seed, {1, t}));
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng.shuffle(order);
        const auto n_screened = static_cast<std::size_t>(std::llround(targets.screening_rate * static_cast<double>(n)));
        const auto n_pos = static_cast<std::size_t>(std::llround(targets.event_rate * static_cast<double>(n_screened)));
        for (std::size_t i = 0; i < n_screened; ++i) labels[order[i]][t] = i < n_pos ? 1.0 : 0.0;
    }

    std::vector<std::string> all_signal;
    for (const auto& t : ds.tasks.tasks())
        for (const auto& w : lex.signal_tokens.at(t.name)) all_signal.push_back(w);

    ds.notes.reserve(n);
    const int id_width = std::max<int>(6, static_cast<int>(std::to_string(n).size()));
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(spec.seed, {2, i}));
        const std::size_t len = sample_length(spec, rng);
        std::vector<std::vector<std::string>> clauses;
        std::size_t total = 0;
        while (total < len) {
            clauses.push_back(grammar.clause(rng));
            total += clauses.back().size();
        }
        rng.shuffle(clauses);
        std::vector<std::string> toks;
        for (const auto& c : clauses)
            for (const auto& w : c) toks.push_back(w);
        toks.resize(len);

        for (std::size_t t = 0; t < m; ++t) {
            if (labels[i][t] != 1.0) continue;
            const auto& targets = spec.tasks.at(ds.tasks[t].name);
            if (!rng.bernoulli(targets.signal_strength)) continue;
            const auto& words = lex.signal_tokens.at(ds.tasks[t].name);
            const auto pos = rng.below(toks.size() + 1);
            toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(pos), words[rng.below(words.size())]);
        }
        if (spec.signal_background > 0.0 && !all_signal.empty() && rng.bernoulli(spec.signal_background)) {
            const auto pos = rng.below(toks.size() + 1);
            toks.insert(toks.begin() + static_cast<std::ptrdiff_t>(pos), all_signal[rng.below(all_signal.size())]);
        }

        std::string id = std::to_string(i);
        id = "note-" + std::string(static_cast<std::size_t>(id_width) - std::min<std::size_t>(id.size(), id_width), '0') + id;
        ds.notes.push_back({std::move(id), join_tokens(toks), std::move(labels[i])});
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Stats

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace {

MeanSd mean_sd(const std::vector<double>& xs) {
    MeanSd r;
    if (xs.empty()) return r;
    r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size()));
    return r;
}

}  // namespace

CorpusStats corpus_stats(const Dataset& ds) {
    if (ds.empty()) throw DataError("corpus_stats: empty dataset");
    CorpusStats st;
    st.n_docs = ds.size();
    std::unordered_set<std::string> vocab;
    std::vector<double> wl, vl;
    wl.reserve(ds.size());
    vl.reserve(ds.size());
    for (const auto& note : ds.notes) {
        const auto toks = tokenize(note.text);
        std::unordered_set<std::string> distinct(toks.begin(), toks.end());
        vocab.insert(toks.begin(), toks.end());
        wl.push_back(static_cast<double>(toks.size()));
        vl.push_back(static_cast<double>(distinct.size()));
    }
    st.vocab_size = vocab.size();
    st.word_len = mean_sd(wl);
    st.vocab_len = mean_sd(vl);
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        TaskRates r;
        std::size_t missing = 0;
        for (const auto& note : ds.notes) {
            if (!note.labels[t]) {
                ++missing;
                continue;
            }
            ++r.labeled;
            if (*note.labels[t] == 1.0) ++r.positives;
        }
        r.event_rate = r.labeled ? static_cast<double>(r.positives) / static_cast<double>(r.labeled) : 0.0;
        r.missing_rate = static_cast<double>(missing) / static_cast<double>(ds.size());
        st.tasks[ds.tasks[t].name] = r;
    }
    return st;
}

// ---------------------------------------------------------------------------
// Splitting

std::vector<std::size_t> FoldAssignment::test_rows(int fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if (fold_of[i] == fold) out.push_back(i);
    return out;
}

std::vector<std::size_t> FoldAssignment::train_rows(int fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i)
        if (fold_of[i] != fold) out.push_back(i);
    return out;
}

FoldAssignment stratified_split(const Dataset& ds, int k, const std::string& task, std::uint64_t seed) {
    if (k < 2) throw ValidationError("k", "must be >= 2");
    if (static_cast<std::size_t>(k) > ds.size())
        throw DataError("stratified_split: k=" + std::to_string(k) + " exceeds dataset size " +
                        std::to_string(ds.size()));
    const std::size_t t = ds.tasks.index_of(task);
    const auto& spec = ds.tasks[t];

    // Strata: one per class value (regression collapses to a single stratum),
    // Missing last.
    std::map<double, std::vector<std::size_t>> classes;
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& l = ds.notes[i].labels[t];
        if (!l)
            missing.push_back(i);
        else
            classes[spec.kind == TaskKind::Regression ? 0.0 : *l].push_back(i);
    }
    if (spec.kind == TaskKind::BinaryClassification) {
        for (double c : {0.0, 1.0})
            if (classes[c].empty())
                throw DataError("stratified_split: class " + std::string(c == 1.0 ? "positive" : "negative") +
                                " of task '" + task + "' has no examples; cannot stratify");
    }

    FoldAssignment fa;
    fa.k = k;
    fa.task = task;
    fa.fold_of.assign(ds.size(), -1);
    Rng rng(mix_seed(seed, {0x5f11}));
    std::size_t cursor = 0;
    auto deal = [&](std::vector<std::size_t> rows) {
        rng.shuffle(rows);
        for (auto r : rows) fa.fold_of[r] = static_cast<int>(cursor++ % static_cast<std::size_t>(k));
    };
    for (auto& [_, rows] : classes) deal(rows);
    deal(missing);
    return fa;
}

std::string rarest_task(const Dataset& ds) {
    std::optional<std::size_t> best;
    std::size_t best_pos = 0;
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        if (ds.tasks[t].kind != TaskKind::BinaryClassification) continue;
        std::size_t pos = 0, neg = 0;
        for (const auto& n : ds.notes) {
            if (!n.labels[t]) continue;
            (*n.labels[t] == 1.0 ? pos : neg)++;
        }
        if (pos == 0 || neg == 0) continue;
        if (!best || pos < best_pos) {
            best = t;
            best_pos = pos;
        }
    }
    if (!best) throw DataError("rarest_task: no binary task has both classes present");
    return ds.tasks[*best].name;
}

// ---------------------------------------------------------------------------
// JSONL

std::string to_jsonl_line(const Dataset& ds, const ClinicalNote& note) {
    ordered_json j;
    j["id"] = note.id;
    j["text"] = note.text;
    ordered_json labels = ordered_json::object();
    for (std::size_t t = 0; t < ds.tasks.size(); ++t) {
        const auto& l = note.labels.at(t);
        if (!l)
            labels[ds.tasks[t].name] = nullptr;
        else if (ds.tasks[t].kind == TaskKind::Regression)
            labels[ds.tasks[t].name] = *l;
        else
            labels[ds.tasks[t].name] = static_cast<long long>(*l);
    }
    j["labels"] = std::move(labels);
    return j.dump();
}

std::string to_jsonl(const Dataset& ds) {
    std::string out;
    for (const auto& n : ds.notes) {
        out += to_jsonl_line(ds, n);
        out += '\n';
    }
    return out;
}

Dataset parse_jsonl(const std::string& content, const TaskRegistry& registry) {
    Dataset ds;
    ds.tasks = registry;
    std::istringstream in(content);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
        }
        if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
        for (const char* key : {"id", "text", "labels"})
            if (!j.contains(key)) throw ParseError(lineno, std::string("missing key '") + key + "'");
        if (!j["id"].is_string()) throw ParseError(lineno, "'id' must be a string");
        if (!j["text"].is_string()) throw ParseError(lineno, "'text' must be a string");
        if (!j["labels"].is_object()) throw ParseError(lineno, "'labels' must be an object");

        ClinicalNote note;
        note.id = j["id"].get<std::string>();
        note.text = j["text"].get<std::string>();
        note.labels.assign(registry.size(), std::nullopt);
        for (const auto& [key, val] : j["labels"].items()) {
            auto t = registry.find(key);
            if (!t) throw ParseError(lineno, "unknown task '" + key + "' (registry: " + registry.names_joined() + ")");
            if (val.is_null()) continue;
            if (!val.is_number()) throw ParseError(lineno, "label '" + key + "' must be a number or null");
            const double v = val.get<double>();
            const auto kind = registry[*t].kind;
            if (kind == TaskKind::BinaryClassification && v != 0.0 && v != 1.0)
                throw ParseError(lineno, "binary label '" + key + "' must be 0, 1 or null");
            if (kind == TaskKind::MultiClass &&
                (v != std::floor(v) || v < 0 || v >= registry[*t].num_classes))
                throw ParseError(lineno, "class label '" + key + "' out of range");
            note.labels[*t] = v;
        }
        ds.notes.push_back(std::move(note));
    }
    return ds;
}

Dataset load_dataset(const std::filesystem::path& path, const TaskRegistry& registry) {
    return parse_jsonl(io::read_file(path), registry);
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    io::write_file_atomic(path, to_jsonl(ds));
}

}  // namespace periloom::corpus
