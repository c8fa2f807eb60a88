#include "intentgate/core.hpp"

namespace intentgate {

std::string to_string(Role role) {
    switch (role) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    throw InvariantViolation("unknown role");
}

Role role_from_string(const std::string& s) {
    if (s == "system") return Role::System;
    if (s == "user") return Role::User;
    if (s == "assistant") return Role::Assistant;
    throw InvariantViolation("unknown role: " + s);
}

bool operator==(const ChatMessage& a, const ChatMessage& b) {
    return a.role == b.role && a.content == b.content;
}

bool operator==(const Exchange& a, const Exchange& b) {
    return a.user == b.user && a.assistant == b.assistant;
}

DialogueHistory::DialogueHistory(std::optional<std::string> system_prompt,
                                 std::vector<Exchange> exchanges)
    : system_prompt_(std::move(system_prompt)), exchanges_(std::move(exchanges)) {
    for (const auto& e : exchanges_) {
        if (e.user.empty()) throw InvariantViolation("exchange with empty user turn");
    }
}

DialogueHistory DialogueHistory::append_turn(const std::string& user,
                                             const std::string& assistant) const {
    if (user.empty() || assistant.empty()) throw EmptyTurnText();
    return append_exchange(Exchange{user, assistant});
}

DialogueHistory DialogueHistory::append_exchange(Exchange exchange) const {
    if (exchange.user.empty()) throw EmptyTurnText();
    DialogueHistory next = *this;
    next.exchanges_.push_back(std::move(exchange));
    return next;
}

std::vector<ChatMessage> DialogueHistory::flatten() const {
    std::vector<ChatMessage> out;
    out.reserve(exchanges_.size() * 2 + 1);
    if (system_prompt_) out.push_back({Role::System, *system_prompt_});
    for (const auto& e : exchanges_) {
        out.push_back({Role::User, e.user});
        out.push_back({Role::Assistant, e.assistant});
    }
    return out;
}

bool operator==(const DialogueHistory& a, const DialogueHistory& b) {
    return a.system_prompt() == b.system_prompt() && a.exchanges() == b.exchanges();
}

void AttackGoal::validate() const {
    if (text.empty()) throw InvariantViolation("attack goal text must be non-empty");
}

bool operator==(const AttackGoal& a, const AttackGoal& b) {
    return a.id == b.id && a.text == b.text && a.category == b.category &&
           a.source_dataset == b.source_dataset;
}

std::string to_string(ParseStatus s) {
    switch (s) {
        case ParseStatus::StructuredParse: return "structured";
        case ParseStatus::FallbackMatch: return "fallback";
        case ParseStatus::ParseFailure: return "failure";
    }
    throw InvariantViolation("unknown parse status");
}

ParseStatus parse_status_from_string(const std::string& s) {
    if (s == "structured") return ParseStatus::StructuredParse;
    if (s == "fallback") return ParseStatus::FallbackMatch;
    if (s == "failure") return ParseStatus::ParseFailure;
    throw InvariantViolation("unknown parse status: " + s);
}

bool operator==(const IntentionReport& a, const IntentionReport& b) {
    return a.intent_summary == b.intent_summary && a.refuse == b.refuse &&
           a.raw_guard_output == b.raw_guard_output && a.parse_status == b.parse_status;
}

std::string to_string(DecisionPath p) {
    switch (p) {
        case DecisionPath::ForwardRefused: return "forward_refused";
        case DecisionPath::BackwardRefused: return "backward_refused";
        case DecisionPath::Accepted: return "accepted";
    }
    throw InvariantViolation("unknown decision path");
}

DecisionPath decision_path_from_string(const std::string& s) {
    if (s == "forward_refused") return DecisionPath::ForwardRefused;
    if (s == "backward_refused") return DecisionPath::BackwardRefused;
    if (s == "accepted") return DecisionPath::Accepted;
    throw InvariantViolation("unknown decision path: " + s);
}

DefenseOutcome DefenseOutcome::accepted(std::string response,
                                        std::optional<IntentionReport> forward,
                                        std::optional<IntentionReport> backward) {
    DefenseOutcome o;
    o.decision_path = DecisionPath::Accepted;
    o.final_response = response;
    o.candidate_response = std::move(response);
    o.forward_report = std::move(forward);
    o.backward_report = std::move(backward);
    o.validate();
    return o;
}

DefenseOutcome DefenseOutcome::forward_refused(std::string refusal_text, IntentionReport forward) {
    DefenseOutcome o;
    o.decision_path = DecisionPath::ForwardRefused;
    o.final_response = std::move(refusal_text);
    o.forward_report = std::move(forward);
    o.validate();
    return o;
}

DefenseOutcome DefenseOutcome::backward_refused(std::string refusal_text, std::string candidate,
                                                std::optional<IntentionReport> forward,
                                                IntentionReport backward) {
    DefenseOutcome o;
    o.decision_path = DecisionPath::BackwardRefused;
    o.final_response = std::move(refusal_text);
    o.candidate_response = std::move(candidate);
    o.forward_report = std::move(forward);
    o.backward_report = std::move(backward);
    o.validate();
    return o;
}

void DefenseOutcome::validate() const {
    switch (decision_path) {
        case DecisionPath::ForwardRefused:
            if (backward_report || candidate_response)
                throw InvariantViolation(
                    "forward-refused outcome must not carry a backward report or candidate");
            break;
        case DecisionPath::BackwardRefused:
            if (!candidate_response)
                throw InvariantViolation("backward-refused outcome must carry the candidate");
            if (!backward_report)
                throw InvariantViolation("backward-refused outcome must carry a backward report");
            break;
        case DecisionPath::Accepted:
            if (!candidate_response || final_response != *candidate_response)
                throw InvariantViolation("accepted outcome must release the candidate unchanged");
            if (forward_report && forward_report->refuse)
                throw InvariantViolation("accepted outcome contradicts a refusing forward report");
            if (backward_report && backward_report->refuse)
                throw InvariantViolation("accepted outcome contradicts a refusing backward report");
            break;
    }
}

bool operator==(const DefenseOutcome& a, const DefenseOutcome& b) {
    return a.final_response == b.final_response && a.decision_path == b.decision_path &&
           a.forward_report == b.forward_report && a.backward_report == b.backward_report &&
           a.candidate_response == b.candidate_response && a.trace == b.trace;
}

void JudgeVerdict::validate() const {
    if (score < 1 || score > 10) throw InvariantViolation("judge score out of [1,10]");
}

bool operator==(const JudgeVerdict& a, const JudgeVerdict& b) {
    return a.score == b.score && a.jailbroken == b.jailbroken && a.rationale == b.rationale &&
           a.judge_raw == b.judge_raw;
}

bool operator==(const TokenUsage& a, const TokenUsage& b) {
    return a.prompt == b.prompt && a.completion == b.completion;
}

void TrialRecord::validate() const {
    goal.validate();
    verdict.validate();
    if (per_turn_outcomes.size() != transcript.turns())
        throw InvariantViolation("per-turn outcome count must equal transcript exchange count");
    for (const auto& o : per_turn_outcomes) o.validate();
}

bool operator==(const TrialRecord& a, const TrialRecord& b) {
    return a.goal == b.goal && a.attack_name == b.attack_name &&
           a.defense_name == b.defense_name && a.model_name == b.model_name &&
           a.transcript == b.transcript && a.per_turn_outcomes == b.per_turn_outcomes &&
           a.verdict == b.verdict && a.wall_time_ms == b.wall_time_ms &&
           a.token_usage == b.token_usage && a.error == b.error;
}

// --- serialization ---------------------------------------------------------

void to_json(json& j, const ChatMessage& m) {
    j = json{{"role", to_string(m.role)}, {"content", m.content}};
}

void from_json(const json& j, ChatMessage& m) {
    m.role = role_from_string(j.at("role").get<std::string>());
    m.content = j.at("content").get<std::string>();
}

void to_json(json& j, const Exchange& e) {
    j = json{{"user", e.user}, {"assistant", e.assistant}};
}

void from_json(const json& j, Exchange& e) {
    e.user = j.at("user").get<std::string>();
    e.assistant = j.at("assistant").get<std::string>();
}

void to_json(json& j, const DialogueHistory& h) {
    j = json{{"system", h.system_prompt() ? json(*h.system_prompt()) : json(nullptr)},
             {"exchanges", h.exchanges()}};
}

void from_json(const json& j, DialogueHistory& h) {
    std::optional<std::string> system;
    if (j.contains("system") && !j.at("system").is_null())
        system = j.at("system").get<std::string>();
    auto exchanges = j.at("exchanges").get<std::vector<Exchange>>();
    h = DialogueHistory(std::move(system), std::move(exchanges));
}

void to_json(json& j, const AttackGoal& g) {
    j = json{{"id", g.id},
             {"text", g.text},
             {"category", g.category ? json(*g.category) : json(nullptr)},
             {"source_dataset", g.source_dataset}};
}

void from_json(const json& j, AttackGoal& g) {
    g.id = j.at("id").get<std::string>();
    g.text = j.at("text").get<std::string>();
    g.category.reset();
    if (j.contains("category") && !j.at("category").is_null())
        g.category = j.at("category").get<std::string>();
    g.source_dataset = j.value("source_dataset", std::string());
    g.validate();
}

void to_json(json& j, const IntentionReport& r) {
    j = json{{"intent", r.intent_summary},
             {"refuse", r.refuse},
             {"raw", r.raw_guard_output},
             {"parse_status", to_string(r.parse_status)}};
}

void from_json(const json& j, IntentionReport& r) {
    r.intent_summary = j.at("intent").get<std::string>();
    r.refuse = j.at("refuse").get<bool>();
    r.raw_guard_output = j.at("raw").get<std::string>();
    r.parse_status = parse_status_from_string(j.at("parse_status").get<std::string>());
}

void to_json(json& j, const DefenseOutcome& o) {
    j = json{{"final_response", o.final_response},
             {"decision_path", to_string(o.decision_path)},
             {"forward_report", o.forward_report ? json(*o.forward_report) : json(nullptr)},
             {"backward_report", o.backward_report ? json(*o.backward_report) : json(nullptr)},
             {"candidate_response", o.candidate_response ? json(*o.candidate_response) : json(nullptr)},
             {"trace", o.trace}};
}

void from_json(const json& j, DefenseOutcome& o) {
    o.final_response = j.at("final_response").get<std::string>();
    o.decision_path = decision_path_from_string(j.at("decision_path").get<std::string>());
    o.forward_report.reset();
    o.backward_report.reset();
    o.candidate_response.reset();
    if (!j.at("forward_report").is_null())
        o.forward_report = j.at("forward_report").get<IntentionReport>();
    if (!j.at("backward_report").is_null())
        o.backward_report = j.at("backward_report").get<IntentionReport>();
    if (!j.at("candidate_response").is_null())
        o.candidate_response = j.at("candidate_response").get<std::string>();
    o.trace = j.value("trace", std::map<std::string, std::string>{});
    o.validate();
}

void to_json(json& j, const JudgeVerdict& v) {
    j = json{{"score", v.score},
             {"jailbroken", v.jailbroken},
             {"rationale", v.rationale},
             {"judge_raw", v.judge_raw}};
}

void from_json(const json& j, JudgeVerdict& v) {
    v.score = j.at("score").get<int>();
    v.jailbroken = j.at("jailbroken").get<bool>();
    v.rationale = j.at("rationale").get<std::string>();
    v.judge_raw = j.at("judge_raw").get<std::string>();
    v.validate();
}

void to_json(json& j, const TokenUsage& u) {
    j = json{{"prompt", u.prompt}, {"completion", u.completion}};
}

void from_json(const json& j, TokenUsage& u) {
    u.prompt = j.at("prompt").get<std::int64_t>();
    u.completion = j.at("completion").get<std::int64_t>();
}

void to_json(json& j, const TrialRecord& t) {
    j = json{{"goal", t.goal},
             {"attack_name", t.attack_name},
             {"defense_name", t.defense_name},
             {"model_name", t.model_name},
             {"transcript", t.transcript},
             {"per_turn_outcomes", t.per_turn_outcomes},
             {"verdict", t.verdict},
             {"wall_time_ms", t.wall_time_ms},
             {"token_usage", t.token_usage},
             {"error", t.error ? json(*t.error) : json(nullptr)}};
}

void from_json(const json& j, TrialRecord& t) {
    t.goal = j.at("goal").get<AttackGoal>();
    t.attack_name = j.at("attack_name").get<std::string>();
    t.defense_name = j.at("defense_name").get<std::string>();
    t.model_name = j.at("model_name").get<std::string>();
    t.transcript = j.at("transcript").get<DialogueHistory>();
    t.per_turn_outcomes = j.at("per_turn_outcomes").get<std::vector<DefenseOutcome>>();
    t.verdict = j.at("verdict").get<JudgeVerdict>();
    t.wall_time_ms = j.at("wall_time_ms").get<std::int64_t>();
    t.token_usage = j.at("token_usage").get<TokenUsage>();
    t.error.reset();
    if (!j.at("error").is_null()) t.error = j.at("error").get<std::string>();
    t.validate();
}

namespace {

/// End position (one past the closing brace) of the balanced object starting
/// at `start`, or npos when unterminated. String literals and escapes are
/// honored so braces inside strings do not count.
std::size_t balanced_end(const std::string& text, std::size_t start) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (c == '\\')
                ++i;
            else if (c == '"')
                in_string = false;
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) return i + 1;
        }
    }
    return std::string::npos;
}

}  // namespace

std::optional<json> first_json_object_where(const std::string& text,
                                            const std::function<bool(const json&)>& pred) {
    for (std::size_t pos = text.find('{'); pos != std::string::npos;
         pos = text.find('{', pos + 1)) {
        const std::size_t end = balanced_end(text, pos);
        if (end == std::string::npos) continue;
        json parsed = json::parse(text.substr(pos, end - pos), nullptr, false);
        if (parsed.is_object() && pred(parsed)) return parsed;
    }
    return std::nullopt;
}

std::optional<json> first_json_object(const std::string& text) {
    return first_json_object_where(text, [](const json&) { return true; });
}

}  // namespace intentgate
