#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace periloom::corpus {

enum class TaskKind { BinaryClassification, MultiClass, Regression };

const char* to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
    std::string name;
    TaskKind kind = TaskKind::BinaryClassification;
    int num_classes = 2;  // meaningful for MultiClass only

    bool operator==(const TaskSpec&) const = default;
};

/// Ordered set of tasks. Label vectors in a Dataset are aligned to it.
class TaskRegistry {
public:
    TaskRegistry() = default;
    explicit TaskRegistry(std::vector<TaskSpec> tasks);

    /// death30, dvt, pe, pneumonia, aki, delirium; all binary.
    static TaskRegistry defaults();

    std::size_t size() const { return tasks_.size(); }
    const TaskSpec& operator[](std::size_t i) const { return tasks_[i]; }
    const std::vector<TaskSpec>& tasks() const { return tasks_; }

    std::optional<std::size_t> find(const std::string& name) const;
    /// Throws DataError listing the registry when the name is unknown.
    std::size_t index_of(const std::string& name) const;
    std::string names_joined() const;

    bool operator==(const TaskRegistry&) const = default;

private:
    std::vector<TaskSpec> tasks_;
};

/// nullopt = Missing. Binary labels are 0/1.
using Label = std::optional<double>;

struct ClinicalNote {
    std::string id;
    std::string text;
    std::vector<Label> labels;  // aligned to the owning dataset's registry

    bool operator==(const ClinicalNote&) const = default;
};

struct Dataset {
    TaskRegistry tasks = TaskRegistry::defaults();
    std::vector<ClinicalNote> notes;

    std::size_t size() const { return notes.size(); }
    bool empty() const { return notes.empty(); }

    /// Rows at the given indices, in the given order.
    Dataset subset(const std::vector<std::size_t>& rows) const;
    /// FNV-1a over the canonical JSONL serialization.
    std::uint64_t content_hash() const;

    bool operator==(const Dataset&) const = default;
};

struct TaskTargets {
    double event_rate = 0.1;      // among screened (non-Missing) docs
    double screening_rate = 1.0;  // fraction of docs with a non-Missing label
    double signal_strength = 0.0; // P(positive doc carries a signal token)
};

struct CorpusSpec {
    std::size_t n_docs = 84875;
    std::size_t vocab_size = 3203;
    double length_mean = 8.9;
    double length_sd = 6.9;
    std::size_t length_min = 1;
    /// Keyed by task name; tasks absent here are not generated.
    std::map<std::string, TaskTargets> tasks;
    /// Per-doc probability of inserting a random signal token regardless of labels.
    double signal_background = 0.0;
    std::size_t signal_tokens_per_task = 4;
    /// Seeds the lexicon (word lists); specs sharing it share a vocabulary.
    std::uint64_t lexicon_seed = 20180101;
    std::uint64_t seed = 1;

    /// Published cohort targets: six outcomes, rates and screening from the cohort summary.
    static CorpusSpec paper_defaults();

    /// Throws ValidationError naming the offending field.
    void validate() const;
    TaskRegistry registry() const;

    nlohmann::ordered_json to_json() const;
    static CorpusSpec from_json(const nlohmann::json& j);
};

/// Word lists behind the generator grammar.
struct Lexicon {
    std::vector<std::string> laterality;
    std::vector<std::string> approaches;
    std::vector<std::string> sites;
    std::vector<std::string> procedures;
    std::vector<std::string> modifiers;
    std::map<std::string, std::vector<std::string>> signal_tokens;  // task -> tokens

    static Lexicon build(const CorpusSpec& spec);
    std::size_t size() const;
};

Dataset generate_corpus(const CorpusSpec& spec);

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};

struct TaskRates {
    double event_rate = 0.0;    // positives / non-Missing; 0 when nothing is screened
    double missing_rate = 0.0;  // Missing / n_docs
    std::size_t positives = 0;
    std::size_t labeled = 0;
};

struct CorpusStats {
    std::size_t n_docs = 0;
    std::size_t vocab_size = 0;
    MeanSd word_len;
    MeanSd vocab_len;
    std::map<std::string, TaskRates> tasks;
};

/// Whitespace tokenization, lowercased. Shared by every component.
std::vector<std::string> tokenize(const std::string& text);

CorpusStats corpus_stats(const Dataset& ds);

struct FoldAssignment {
    int k = 0;
    std::string task;
    std::vector<int> fold_of;  // aligned to dataset rows

    std::vector<std::size_t> test_rows(int fold) const;
    std::vector<std::size_t> train_rows(int fold) const;
};

FoldAssignment stratified_split(const Dataset& ds, int k, const std::string& task, std::uint64_t seed);

/// Name of the task with the fewest positives (ties: registry order).
std::string rarest_task(const Dataset& ds);

std::string to_jsonl_line(const Dataset& ds, const ClinicalNote& note);
std::string to_jsonl(const Dataset& ds);
Dataset parse_jsonl(const std::string& content, const TaskRegistry& registry = TaskRegistry::defaults());

Dataset load_dataset(const std::filesystem::path& path,
                     const TaskRegistry& registry = TaskRegistry::defaults());
void save_dataset(const Dataset& ds, const std::filesystem::path& path);

}  // namespace periloom::corpus
