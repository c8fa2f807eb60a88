#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "intentgate/attack.hpp"
#include "intentgate/backend.hpp"
#include "intentgate/core.hpp"
#include "intentgate/datasets.hpp"
#include "intentgate/defense.hpp"
#include "intentgate/judge.hpp"

namespace intentgate {

// ---------------------------------------------------------------------------
// Backend wiring
// ---------------------------------------------------------------------------

/// Named backend factories. Scripted factories mint a fresh instance per
/// call so per-trial sequence state never leaks; HTTP factories hand out one
/// shared connection profile.
class BackendRegistry {
public:
    using Factory = std::function<std::shared_ptr<ChatBackend>()>;

    void add(const std::string& role, Factory factory);
    bool has(const std::string& role) const;
    std::shared_ptr<ChatBackend> make(const std::string& role) const;

    /// {"target": {"kind":"scripted","script":path,"model_name"?},
    ///  "judge":  {"kind":"http","profile":{...}}, ...}
    static BackendRegistry from_json(const json& backends, const std::string& base_dir);

private:
    std::map<std::string, Factory> factories_;
};

/// One trial's view of the registry: each role is instantiated once, wrapped
/// in a meter, and reused; missing roles fall back to another role's factory
/// while still counting separately.
class TrialBackends {
public:
    explicit TrialBackends(const BackendRegistry& registry) : registry_(registry) {}

    std::shared_ptr<MeteredBackend> role(const std::string& name,
                                         const std::string& fallback = "");
    TokenUsage total_usage() const;

private:
    const BackendRegistry& registry_;
    std::map<std::string, std::shared_ptr<MeteredBackend>> made_;
};

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

struct AttackSpec {
    std::string name;
    std::string kind;  // direct | template | ica | tense | pair | crescendo | actor
    json options;
};

struct DefenseSpec {
    std::string name;
    std::string kind;  // none | biid | self_reminder | icd | paraphrase | self_defense | smoothllm | static_suffix
    json options;
};

struct ExperimentPlan {
    std::string dataset_path;
    GoalFormat dataset_format = GoalFormat::CsvGoalCategory;
    std::string templates_dir = "templates";
    json backends = json::object();
    std::vector<AttackSpec> attacks;
    std::vector<DefenseSpec> defenses;
    json judge_options = json::object();
    std::size_t concurrency_cap = 8;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    std::string base_dir;  // relative paths in the plan resolve against this
    json raw = json::object();

    static ExperimentPlan from_file(const std::string& path);
    static ExperimentPlan from_json(const json& j, const std::string& base_dir);
    void validate() const;
};

struct RunOptions {
    bool resume = false;
    bool test_mode = false;  // zeroes wall times and report timestamps
    std::size_t abort_after_trials = 0;  // > 0 simulates a crash after that many writes
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> output_override;
};

/// `path` joined against `base` unless already absolute.
std::string resolve_path(const std::string& base, const std::string& path);

std::shared_ptr<Defense> make_defense(const DefenseSpec& spec, TrialBackends& backends,
                                      const std::string& templates_dir, std::uint64_t seed);
JudgeConfig make_judge_config(const json& judge_options, TrialBackends& backends,
                              const std::string& templates_dir);

// ---------------------------------------------------------------------------
// Ordered JSONL output
// ---------------------------------------------------------------------------

/// Serializes concurrent per-index submissions into strictly index-ordered
/// lines, flushing each, so concurrent runs are byte-deterministic and an
/// interrupt loses at most unfinished suffixes.
class OrderedJsonlWriter {
public:
    explicit OrderedJsonlWriter(std::ostream& out, std::size_t abort_after = 0);

    bool submit(std::size_t index, std::string line);
    bool submit_skip(std::size_t index);
    std::size_t written() const;
    bool aborted() const;

private:
    void drain_locked();

    std::ostream& out_;
    std::size_t abort_after_;
    mutable std::mutex mutex_;
    std::map<std::size_t, std::optional<std::string>> pending_;
    std::size_t next_ = 0;
    std::size_t written_ = 0;
    bool aborted_ = false;
};

// ---------------------------------------------------------------------------
// Aggregation and reporting
// ---------------------------------------------------------------------------

enum class DetectionPhase { ForwardRefused, BackwardRefused, AcceptedSafe, AcceptedJailbroken };

std::string to_string(DetectionPhase p);

/// Disposition of a whole trial: the last turn's decision path, with
/// Accepted split by the judge verdict.
DetectionPhase classify_detection_phase(const TrialRecord& trial);

struct CellStats {
    std::size_t n = 0;
    std::size_t jailbroken = 0;
    std::size_t errored = 0;

    double asr() const;
};

struct PhaseStats {
    std::size_t forward_refused = 0;
    std::size_t backward_refused = 0;
    std::size_t accepted_safe = 0;
    std::size_t accepted_jailbroken = 0;
};

struct RunReport {
    std::vector<std::string> attack_order;
    std::vector<std::string> defense_order;
    std::map<std::string, std::map<std::string, CellStats>> cells;  // attack -> defense
    std::map<std::string, PhaseStats> phases;                       // defense
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string started_at;
    std::string finished_at;
};

/// Orders may be empty, in which case they follow first appearance.
RunReport aggregate_trials(const std::vector<TrialRecord>& trials,
                           std::vector<std::string> attack_order = {},
                           std::vector<std::string> defense_order = {});

enum class ReportFormat { Markdown, Csv };

std::string render_report(const RunReport& report, ReportFormat format, int asr_decimals = 1);
std::string render_phases_csv(const RunReport& report);

std::vector<TrialRecord> read_trials_jsonl(const std::string& path);

/// Executes the full goal x attack x defense grid, streaming TrialRecords to
/// output_dir/trials.jsonl (resumable by trial key), then aggregates and
/// writes report.md, report.csv, and phases.csv.
RunReport run_eval(const ExperimentPlan& plan, const RunOptions& opts = {});

// ---------------------------------------------------------------------------
// Template goldens
// ---------------------------------------------------------------------------

enum class TemplateCheckStatus { Pass, Mismatch, MissingGolden, MissingTemplate };

std::string to_string(TemplateCheckStatus s);

struct TemplateCheck {
    std::string name;
    TemplateCheckStatus status = TemplateCheckStatus::Pass;
};

/// Renders every shipped template against fixed fixture inputs and
/// byte-compares with golden_dir/<name>.golden.txt.
std::vector<TemplateCheck> check_templates(const std::string& templates_dir,
                                           const std::string& golden_dir);

/// Writes the current renders as the goldens.
void freeze_templates(const std::string& templates_dir, const std::string& golden_dir);

bool all_passed(const std::vector<TemplateCheck>& checks);

}  // namespace intentgate
