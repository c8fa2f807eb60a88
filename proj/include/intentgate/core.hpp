#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "intentgate/errors.hpp"

namespace intentgate {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Messages and dialogue history
// ---------------------------------------------------------------------------

enum class Role { System, User, Assistant };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct ChatMessage {
    Role role = Role::User;
    std::string content;
};

bool operator==(const ChatMessage& a, const ChatMessage& b);

/// One completed user/assistant exchange. The assistant side may be empty
/// (placeholder for a model that produced no text); the user side may not.
struct Exchange {
    std::string user;
    std::string assistant;
};

bool operator==(const Exchange& a, const Exchange& b);

/// Immutable conversation state: optional system prompt plus strictly
/// alternating user/assistant pairs. Appending returns a new value.
class DialogueHistory {
public:
    DialogueHistory() = default;
    explicit DialogueHistory(std::optional<std::string> system_prompt,
                             std::vector<Exchange> exchanges = {});

    /// New history with one more exchange. Both texts must be non-empty.
    DialogueHistory append_turn(const std::string& user, const std::string& assistant) const;

    /// Same, but permits an empty assistant placeholder.
    DialogueHistory append_exchange(Exchange exchange) const;

    /// [system?, u_1, a_1, ..., u_n, a_n]
    std::vector<ChatMessage> flatten() const;

    const std::optional<std::string>& system_prompt() const { return system_prompt_; }
    const std::vector<Exchange>& exchanges() const { return exchanges_; }
    std::size_t turns() const { return exchanges_.size(); }
    bool empty() const { return !system_prompt_ && exchanges_.empty(); }

private:
    std::optional<std::string> system_prompt_;
    std::vector<Exchange> exchanges_;
};

bool operator==(const DialogueHistory& a, const DialogueHistory& b);

// ---------------------------------------------------------------------------
// Goals, guard reports, outcomes
// ---------------------------------------------------------------------------

struct AttackGoal {
    std::string id;
    std::string text;
    std::optional<std::string> category;
    std::string source_dataset;

    void validate() const;
};

bool operator==(const AttackGoal& a, const AttackGoal& b);

enum class ParseStatus { StructuredParse, FallbackMatch, ParseFailure };

std::string to_string(ParseStatus s);
ParseStatus parse_status_from_string(const std::string& s);

/// The (intent, refuse) pair extracted from a guard model reply, plus parse
/// telemetry. `refuse` is always populated; on ParseFailure it carries the
/// configured failure-policy default.
struct IntentionReport {
    std::string intent_summary;
    bool refuse = false;
    std::string raw_guard_output;
    ParseStatus parse_status = ParseStatus::ParseFailure;
};

bool operator==(const IntentionReport& a, const IntentionReport& b);

enum class DecisionPath { ForwardRefused, BackwardRefused, Accepted };

std::string to_string(DecisionPath p);
DecisionPath decision_path_from_string(const std::string& s);

/// Final disposition of one defended generation. Construct through the
/// factories; they enforce the per-path field constraints.
struct DefenseOutcome {
    std::string final_response;
    DecisionPath decision_path = DecisionPath::Accepted;
    std::optional<IntentionReport> forward_report;
    std::optional<IntentionReport> backward_report;
    std::optional<std::string> candidate_response;
    std::map<std::string, std::string> trace;

    static DefenseOutcome accepted(std::string response,
                                   std::optional<IntentionReport> forward = std::nullopt,
                                   std::optional<IntentionReport> backward = std::nullopt);
    static DefenseOutcome forward_refused(std::string refusal_text, IntentionReport forward);
    static DefenseOutcome backward_refused(std::string refusal_text, std::string candidate,
                                           std::optional<IntentionReport> forward,
                                           IntentionReport backward);

    void validate() const;
};

bool operator==(const DefenseOutcome& a, const DefenseOutcome& b);

// ---------------------------------------------------------------------------
// Judgement and trial records
// ---------------------------------------------------------------------------

struct JudgeVerdict {
    int score = 1;              // 1..10
    bool jailbroken = false;
    std::string rationale;
    std::string judge_raw;

    void validate() const;
};

bool operator==(const JudgeVerdict& a, const JudgeVerdict& b);

struct TokenUsage {
    std::int64_t prompt = 0;
    std::int64_t completion = 0;
};

bool operator==(const TokenUsage& a, const TokenUsage& b);

/// One attack x defense x goal trial.
struct TrialRecord {
    AttackGoal goal;
    std::string attack_name;
    std::string defense_name;
    std::string model_name;
    DialogueHistory transcript;
    std::vector<DefenseOutcome> per_turn_outcomes;
    JudgeVerdict verdict;
    std::int64_t wall_time_ms = 0;
    TokenUsage token_usage;
    std::optional<std::string> error;

    void validate() const;
};

bool operator==(const TrialRecord& a, const TrialRecord& b);

// ---------------------------------------------------------------------------
// JSON serialization (JSONL record format)
// ---------------------------------------------------------------------------

void to_json(json& j, const ChatMessage& m);
void from_json(const json& j, ChatMessage& m);
void to_json(json& j, const Exchange& e);
void from_json(const json& j, Exchange& e);
void to_json(json& j, const DialogueHistory& h);
void from_json(const json& j, DialogueHistory& h);
void to_json(json& j, const AttackGoal& g);
void from_json(const json& j, AttackGoal& g);
void to_json(json& j, const IntentionReport& r);
void from_json(const json& j, IntentionReport& r);
void to_json(json& j, const DefenseOutcome& o);
void from_json(const json& j, DefenseOutcome& o);
void to_json(json& j, const JudgeVerdict& v);
void from_json(const json& j, JudgeVerdict& v);
void to_json(json& j, const TokenUsage& u);
void from_json(const json& j, TokenUsage& u);
void to_json(json& j, const TrialRecord& t);
void from_json(const json& j, TrialRecord& t);

/// A demo exchange used by in-context attack/defense constructions.
struct DemoExchange {
    std::string request;
    std::string response;
};

/// First parseable balanced JSON object embedded in free text, scanning every
/// '{' as a candidate start so nested objects are found when outer spans fail
/// to parse. Returns nullopt when no candidate parses.
std::optional<json> first_json_object(const std::string& text);

/// Same scan, but skips parseable objects failing `pred`.
std::optional<json> first_json_object_where(const std::string& text,
                                            const std::function<bool(const json&)>& pred);

}  // namespace intentgate
