#include "intentgate/defense.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <regex>
#include <sstream>

#include "intentgate/judge.hpp"
#include "intentgate/rng.hpp"
#include "intentgate/templates.hpp"

namespace intentgate {

std::string to_string(FailurePolicy p) {
    return p == FailurePolicy::FailOpen ? "fail_open" : "fail_closed";
}

FailurePolicy failure_policy_from_string(const std::string& s) {
    if (s == "fail_open") return FailurePolicy::FailOpen;
    if (s == "fail_closed") return FailurePolicy::FailClosed;
    throw ConfigError("unknown failure policy: " + s);
}

DefenseTemplates DefenseTemplates::load(const std::string& templates_dir) {
    DefenseTemplates t;
    t.forward = load_text_asset(templates_dir + "/defense/forward_intent.txt");
    t.backward = load_text_asset(templates_dir + "/defense/backward_intent.txt");
    require_placeholder(t.forward, "{REQUEST}");
    require_placeholder(t.backward, "{RESPONSE}");
    return t;
}

void DefenseConfig::validate() const {
    if (!guard) throw ConfigError("guard backend is not set");
    if (!target) throw ConfigError("target backend is not set");
    if (refusal_text.empty()) throw ConfigError("refusal_text must be non-empty");
    if (history_window_turns && *history_window_turns < 1)
        throw ConfigError("history_window_turns must be >= 1 when set");
    require_placeholder(templates.forward, "{REQUEST}");
    require_placeholder(templates.backward, "{RESPONSE}");
}

std::string render_history(const DialogueHistory& history, bool include,
                           std::optional<std::size_t> window) {
    if (!include || history.exchanges().empty()) return "(none)";
    const auto& all = history.exchanges();
    const std::size_t take = window ? std::min(*window, all.size()) : all.size();
    std::string out;
    for (std::size_t i = all.size() - take; i < all.size(); ++i) {
        if (!out.empty()) out += '\n';
        out += "User: " + all[i].user + "\nAssistant: " + all[i].assistant;
    }
    return out;
}

std::string render_forward_prompt(const std::string& user_prompt, const DialogueHistory& history,
                                  const DefenseConfig& cfg) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    require_placeholder(cfg.templates.forward, "{REQUEST}");
    const Fence fence = make_fence("REQUEST", user_prompt);
    return render_template(
        cfg.templates.forward,
        {{"HISTORY", render_history(history, cfg.include_history_in_guard,
                                    cfg.history_window_turns)},
         {"REQUEST", user_prompt},
         {"FENCE_OPEN", fence.open},
         {"FENCE_CLOSE", fence.close}});
}

std::string render_backward_prompt(const std::string& candidate_response,
                                   const DefenseConfig& cfg) {
    if (candidate_response.empty())
        throw InvariantViolation("candidate_response must be non-empty");
    require_placeholder(cfg.templates.backward, "{RESPONSE}");
    const Fence fence = make_fence("RESPONSE", candidate_response);
    return render_template(cfg.templates.backward, {{"RESPONSE", candidate_response},
                                                    {"FENCE_OPEN", fence.open},
                                                    {"FENCE_CLOSE", fence.close}});
}

IntentionReport parse_intention(const std::string& raw, FailurePolicy policy) {
    IntentionReport report;
    report.raw_guard_output = raw;

    auto obj = first_json_object_where(
        raw, [](const json& j) { return j.contains("refuse") && j["refuse"].is_boolean(); });
    if (obj) {
        report.refuse = (*obj)["refuse"].get<bool>();
        if (obj->contains("intent") && (*obj)["intent"].is_string())
            report.intent_summary = (*obj)["intent"].get<std::string>();
        report.parse_status = ParseStatus::StructuredParse;
        return report;
    }

    static const std::regex refusal_marker(
        R"((refus(e|ed|al)|reject(ed|ion)?)\s*["']?\s*[:=]?\s*["']?\s*(yes|true)\b)",
        std::regex::icase);
    if (std::regex_search(raw, refusal_marker)) {
        report.refuse = true;
        report.parse_status = ParseStatus::FallbackMatch;
        return report;
    }

    report.refuse = (policy == FailurePolicy::FailClosed);
    report.parse_status = ParseStatus::ParseFailure;
    return report;
}

// ---------------------------------------------------------------------------
// BIID pipeline
// ---------------------------------------------------------------------------

namespace {

ChatResult run_stage(const char* stage, ChatBackend& backend,
                     const std::vector<ChatMessage>& messages, const GenerationParams& params) {
    try {
        return backend.complete_chat(messages, params);
    } catch (const std::exception& e) {
        throw PipelineStageError(stage, e.what());
    }
}

std::vector<ChatMessage> with_live_prompt(const DialogueHistory& history,
                                          const std::string& user_prompt) {
    auto messages = history.flatten();
    messages.push_back({Role::User, user_prompt});
    return messages;
}

}  // namespace

DefenseOutcome biid_respond(const std::string& user_prompt, const DialogueHistory& history,
                            const DefenseConfig& cfg) {
    cfg.validate();

    const std::string forward_prompt = render_forward_prompt(user_prompt, history, cfg);
    const ChatResult forward_raw =
        run_stage("forward_gate", *cfg.guard, {{Role::User, forward_prompt}}, cfg.guard_params);
    const IntentionReport forward = parse_intention(forward_raw.text, cfg.forward_failure_policy);
    if (forward.refuse) return DefenseOutcome::forward_refused(cfg.refusal_text, forward);

    const ChatResult generated = run_stage("generation", *cfg.target,
                                           with_live_prompt(history, user_prompt),
                                           cfg.target_params);
    const std::string& candidate = generated.text;
    // An empty candidate leaves nothing to retrospect; released as-is.
    if (candidate.empty()) return DefenseOutcome::accepted("", forward, std::nullopt);

    const std::string backward_prompt = render_backward_prompt(candidate, cfg);
    const ChatResult backward_raw =
        run_stage("backward_gate", *cfg.guard, {{Role::User, backward_prompt}}, cfg.guard_params);
    const IntentionReport backward =
        parse_intention(backward_raw.text, cfg.backward_failure_policy);
    if (backward.refuse)
        return DefenseOutcome::backward_refused(cfg.refusal_text, candidate, forward, backward);
    return DefenseOutcome::accepted(candidate, forward, backward);
}

BiidDefense::BiidDefense(DefenseConfig cfg, std::string name)
    : cfg_(std::move(cfg)), name_(std::move(name)) {
    cfg_.validate();
}

DefenseOutcome BiidDefense::respond(const std::string& user_prompt,
                                    const DialogueHistory& history) {
    return biid_respond(user_prompt, history, cfg_);
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

DefenseOutcome none_respond(const std::string& user_prompt, const DialogueHistory& history,
                            ChatBackend& target, const GenerationParams& params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    const ChatResult result = target.complete_chat(with_live_prompt(history, user_prompt), params);
    return DefenseOutcome::accepted(result.text);
}

std::vector<ChatMessage> self_reminder_messages(const std::string& user_prompt,
                                                const DialogueHistory& history,
                                                const ReminderText& reminder) {
    std::optional<std::string> system = history.system_prompt();
    if (!reminder.preamble.empty())
        system = system ? *system + "\n\n" + reminder.preamble : reminder.preamble;

    std::vector<ChatMessage> messages;
    if (system) messages.push_back({Role::System, *system});
    for (const auto& e : history.exchanges()) {
        messages.push_back({Role::User, e.user});
        messages.push_back({Role::Assistant, e.assistant});
    }
    std::string live = user_prompt;
    if (!reminder.suffix.empty()) live += "\n" + reminder.suffix;
    messages.push_back({Role::User, live});
    return messages;
}

DefenseOutcome self_reminder_respond(const std::string& user_prompt,
                                     const DialogueHistory& history, ChatBackend& target,
                                     const ReminderText& reminder,
                                     const GenerationParams& params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    const ChatResult result =
        target.complete_chat(self_reminder_messages(user_prompt, history, reminder), params);
    return DefenseOutcome::accepted(result.text);
}

DefenseOutcome icd_respond(const std::string& user_prompt, const DialogueHistory& history,
                           ChatBackend& target, const std::vector<DemoExchange>& demos,
                           std::size_t k, const GenerationParams& params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    if (k > demos.size())
        throw ConfigError("icd demo count " + std::to_string(k) + " exceeds available " +
                          std::to_string(demos.size()));
    std::vector<ChatMessage> messages;
    if (history.system_prompt()) messages.push_back({Role::System, *history.system_prompt()});
    for (std::size_t i = 0; i < k; ++i) {
        messages.push_back({Role::User, demos[i].request});
        messages.push_back({Role::Assistant, demos[i].response});
    }
    for (const auto& e : history.exchanges()) {
        messages.push_back({Role::User, e.user});
        messages.push_back({Role::Assistant, e.assistant});
    }
    messages.push_back({Role::User, user_prompt});
    const ChatResult result = target.complete_chat(messages, params);
    return DefenseOutcome::accepted(result.text);
}

namespace {

std::string trimmed(const std::string& s) {
    std::size_t begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string::npos) return "";
    std::size_t end = s.find_last_not_of(" \t\r\n");
    return s.substr(begin, end - begin + 1);
}

}  // namespace

DefenseOutcome paraphrase_respond(const std::string& user_prompt, const DialogueHistory& history,
                                  ChatBackend& target, ChatBackend& paraphraser,
                                  const std::string& instruction_template,
                                  const GenerationParams& params,
                                  const GenerationParams& paraphraser_params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    require_placeholder(instruction_template, "{REQUEST}");
    const Fence fence = make_fence("REQUEST", user_prompt);
    const std::string instruction = render_template(instruction_template,
                                                    {{"REQUEST", user_prompt},
                                                     {"FENCE_OPEN", fence.open},
                                                     {"FENCE_CLOSE", fence.close}});
    const std::string paraphrased =
        trimmed(paraphraser.complete_chat({{Role::User, instruction}}, paraphraser_params).text);
    if (paraphrased.empty()) throw EmptyParaphrase();

    const ChatResult result = target.complete_chat(with_live_prompt(history, paraphrased), params);
    DefenseOutcome outcome = DefenseOutcome::accepted(result.text);
    outcome.trace["original_prompt"] = user_prompt;
    outcome.trace["paraphrased_prompt"] = paraphrased;
    return outcome;
}

DefenseOutcome self_defense_respond(const std::string& user_prompt,
                                    const DialogueHistory& history, ChatBackend& target,
                                    ChatBackend& checker, const std::string& check_template,
                                    const std::string& refusal_text,
                                    const GenerationParams& params,
                                    const GenerationParams& checker_params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    require_placeholder(check_template, "{RESPONSE}");
    const std::string candidate =
        target.complete_chat(with_live_prompt(history, user_prompt), params).text;

    const Fence fence = make_fence("RESPONSE", candidate);
    const std::string check_prompt = render_template(check_template, {{"RESPONSE", candidate},
                                                                      {"FENCE_OPEN", fence.open},
                                                                      {"FENCE_CLOSE", fence.close}});
    const std::string checker_raw =
        checker.complete_chat({{Role::User, check_prompt}}, checker_params).text;

    std::size_t begin = 0;
    while (begin < checker_raw.size() &&
           !std::isalpha(static_cast<unsigned char>(checker_raw[begin])))
        ++begin;
    std::size_t end = begin;
    while (end < checker_raw.size() && std::isalpha(static_cast<unsigned char>(checker_raw[end])))
        ++end;
    std::string token = checker_raw.substr(begin, end - begin);
    std::transform(token.begin(), token.end(), token.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });

    IntentionReport report;
    report.raw_guard_output = checker_raw;
    if (token == "yes" || token == "no") {
        report.refuse = (token == "yes");
        report.parse_status = ParseStatus::StructuredParse;
    } else {
        report.refuse = false;  // unparseable checker verdicts fail open
        report.parse_status = ParseStatus::ParseFailure;
    }

    if (report.refuse)
        return DefenseOutcome::backward_refused(refusal_text, candidate, std::nullopt, report);
    return DefenseOutcome::accepted(candidate, std::nullopt, report);
}

// ---------------------------------------------------------------------------
// SmoothLLM
// ---------------------------------------------------------------------------

std::string to_string(PerturbKind k) {
    switch (k) {
        case PerturbKind::Swap: return "swap";
        case PerturbKind::Insert: return "insert";
        case PerturbKind::Patch: return "patch";
    }
    throw InvariantViolation("unknown perturbation kind");
}

PerturbKind perturb_kind_from_string(const std::string& s) {
    if (s == "swap") return PerturbKind::Swap;
    if (s == "insert") return PerturbKind::Insert;
    if (s == "patch") return PerturbKind::Patch;
    throw ConfigError("unknown perturbation kind: " + s);
}

std::string perturb_prompt(const std::string& text, double q, PerturbKind kind,
                           std::uint64_t rng_seed) {
    if (q < 0.0 || q > 1.0) throw ConfigError("perturbation rate must be in [0,1]");
    const std::size_t len = text.size();
    std::size_t count = static_cast<std::size_t>(std::ceil(q * static_cast<double>(len)));
    if (count == 0 || len == 0) return text;
    if (count > len) count = len;

    SeededRng rng(rng_seed);
    std::string out = text;
    switch (kind) {
        case PerturbKind::Swap: {
            std::vector<std::size_t> positions(len);
            for (std::size_t i = 0; i < len; ++i) positions[i] = i;
            rng.shuffle(positions);
            for (std::size_t i = 0; i < count; ++i)
                out[positions[i]] = rng.printable_excluding(out[positions[i]]);
            break;
        }
        case PerturbKind::Insert: {
            for (std::size_t i = 0; i < count; ++i) {
                const std::size_t pos = static_cast<std::size_t>(rng.bounded(out.size() + 1));
                out.insert(out.begin() + static_cast<std::ptrdiff_t>(pos), rng.printable());
            }
            break;
        }
        case PerturbKind::Patch: {
            const std::size_t span = count;
            const std::size_t start = static_cast<std::size_t>(rng.bounded(len - span + 1));
            for (std::size_t i = start; i < start + span; ++i) out[i] = rng.printable();
            break;
        }
    }
    return out;
}

DefenseOutcome smoothllm_respond(const std::string& user_prompt, const DialogueHistory& history,
                                 ChatBackend& target, std::size_t n_copies, double q,
                                 PerturbKind kind, std::uint64_t rng_seed,
                                 const std::string& refusal_text,
                                 const std::vector<std::string>& refusal_prefixes,
                                 const GenerationParams& params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    if (n_copies < 1) throw ConfigError("n_copies must be >= 1");
    if (n_copies % 2 == 0) throw ConfigError("n_copies must be odd for an unambiguous vote");
    const std::vector<std::string>& prefixes =
        refusal_prefixes.empty() ? kDefaultRefusalPrefixes : refusal_prefixes;

    const std::uint64_t base_seed = fnv1a64(user_prompt, rng_seed);
    std::vector<std::string> responses;
    std::vector<bool> refused;
    responses.reserve(n_copies);
    std::size_t refused_count = 0;
    for (std::size_t i = 0; i < n_copies; ++i) {
        const std::string perturbed =
            perturb_prompt(user_prompt, q, kind, base_seed + static_cast<std::uint64_t>(i));
        const std::string response =
            target.complete_chat(with_live_prompt(history, perturbed), params).text;
        const bool is_refusal = refusal_prefix_judge(response, prefixes);
        responses.push_back(response);
        refused.push_back(is_refusal);
        if (is_refusal) ++refused_count;
    }

    const bool majority_refused = refused_count * 2 > n_copies;
    std::string representative;
    for (std::size_t i = 0; i < n_copies; ++i) {
        if (refused[i] == majority_refused) {
            representative = responses[i];
            break;
        }
    }

    IntentionReport vote;
    vote.refuse = majority_refused;
    vote.parse_status = ParseStatus::StructuredParse;
    vote.raw_guard_output = std::to_string(refused_count) + " of " + std::to_string(n_copies) +
                            " perturbed copies drew a refusal";

    DefenseOutcome outcome =
        majority_refused
            ? DefenseOutcome::backward_refused(refusal_text, representative, std::nullopt, vote)
            : DefenseOutcome::accepted(representative, std::nullopt, vote);
    outcome.trace["votes_refused"] = std::to_string(refused_count);
    outcome.trace["votes_total"] = std::to_string(n_copies);
    return outcome;
}

DefenseOutcome static_suffix_respond(const std::string& user_prompt,
                                     const DialogueHistory& history, ChatBackend& target,
                                     const std::string& suffix, const GenerationParams& params) {
    if (user_prompt.empty()) throw InvariantViolation("user_prompt must be non-empty");
    const ChatResult result =
        target.complete_chat(with_live_prompt(history, user_prompt + suffix), params);
    return DefenseOutcome::accepted(result.text);
}

}  // namespace intentgate
