#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "intentgate/backend.hpp"
#include "intentgate/core.hpp"

namespace intentgate {

inline constexpr const char* kDefaultRefusalText =
    "I can't help with that request. The inferred intent conflicts with safety policy.";

inline GenerationParams guard_params_default() { return {0.0, 512, 1.0, {}, std::nullopt}; }
inline GenerationParams target_params_default() { return {0.7, 1024, 1.0, {}, std::nullopt}; }

/// How an unparseable guard verdict is treated: allow (open) or refuse (closed).
enum class FailurePolicy { FailOpen, FailClosed };

std::string to_string(FailurePolicy p);
FailurePolicy failure_policy_from_string(const std::string& s);

/// Guard instruction texts for the two gates.
struct DefenseTemplates {
    std::string forward;   // needs {REQUEST}; may use {HISTORY}, {FENCE_OPEN}, {FENCE_CLOSE}
    std::string backward;  // needs {RESPONSE}; may use {FENCE_OPEN}, {FENCE_CLOSE}

    static DefenseTemplates load(const std::string& templates_dir);
};

struct DefenseConfig {
    std::shared_ptr<ChatBackend> guard;
    std::shared_ptr<ChatBackend> target;
    bool include_history_in_guard = true;
    std::optional<std::size_t> history_window_turns;
    std::string refusal_text = kDefaultRefusalText;
    FailurePolicy forward_failure_policy = FailurePolicy::FailOpen;
    FailurePolicy backward_failure_policy = FailurePolicy::FailOpen;
    GenerationParams guard_params = guard_params_default();
    GenerationParams target_params = target_params_default();
    DefenseTemplates templates;

    void validate() const;
};

/// "User: ...\nAssistant: ..." lines for the last `window` exchanges, or
/// "(none)" when empty or history is excluded.
std::string render_history(const DialogueHistory& history, bool include,
                           std::optional<std::size_t> window);

std::string render_forward_prompt(const std::string& user_prompt, const DialogueHistory& history,
                                  const DefenseConfig& cfg);
std::string render_backward_prompt(const std::string& candidate_response,
                                   const DefenseConfig& cfg);

/// Two-tier extraction of the guard verdict: first balanced JSON object with
/// a boolean "refuse", then a refusal-marker regex, then the policy default.
IntentionReport parse_intention(const std::string& raw, FailurePolicy policy);

// ---------------------------------------------------------------------------
// Defense contract
// ---------------------------------------------------------------------------

class Defense {
public:
    virtual ~Defense() = default;
    virtual DefenseOutcome respond(const std::string& user_prompt,
                                   const DialogueHistory& history) = 0;
    virtual std::string name() const = 0;
    virtual std::string model_name() const = 0;
};

/// Adapter turning a respond function into a Defense.
class FunctionDefense : public Defense {
public:
    using RespondFn = std::function<DefenseOutcome(const std::string&, const DialogueHistory&)>;

    FunctionDefense(std::string name, std::string model_name, RespondFn fn)
        : name_(std::move(name)), model_name_(std::move(model_name)), fn_(std::move(fn)) {}

    DefenseOutcome respond(const std::string& user_prompt,
                           const DialogueHistory& history) override {
        return fn_(user_prompt, history);
    }
    std::string name() const override { return name_; }
    std::string model_name() const override { return model_name_; }

private:
    std::string name_;
    std::string model_name_;
    RespondFn fn_;
};

// ---------------------------------------------------------------------------
// The bidirectional gate pipeline
// ---------------------------------------------------------------------------

/// Forward gate on the request, target generation, backward gate on the
/// candidate. Backend failures carry the stage name (forward_gate,
/// generation, backward_gate).
DefenseOutcome biid_respond(const std::string& user_prompt, const DialogueHistory& history,
                            const DefenseConfig& cfg);

class BiidDefense : public Defense {
public:
    explicit BiidDefense(DefenseConfig cfg, std::string name = "biid");

    DefenseOutcome respond(const std::string& user_prompt,
                           const DialogueHistory& history) override;
    std::string name() const override { return name_; }
    std::string model_name() const override { return cfg_.target->model_name(); }

    const DefenseConfig& config() const { return cfg_; }

private:
    DefenseConfig cfg_;
    std::string name_;
};

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

DefenseOutcome none_respond(const std::string& user_prompt, const DialogueHistory& history,
                            ChatBackend& target,
                            const GenerationParams& params = target_params_default());

struct ReminderText {
    std::string preamble;  // becomes (or extends) the system prompt
    std::string suffix;    // appended after the user prompt
};

DefenseOutcome self_reminder_respond(const std::string& user_prompt,
                                     const DialogueHistory& history, ChatBackend& target,
                                     const ReminderText& reminder,
                                     const GenerationParams& params = target_params_default());

/// Builds the exact message list self_reminder_respond sends; exposed for
/// golden checks.
std::vector<ChatMessage> self_reminder_messages(const std::string& user_prompt,
                                                const DialogueHistory& history,
                                                const ReminderText& reminder);

DefenseOutcome icd_respond(const std::string& user_prompt, const DialogueHistory& history,
                           ChatBackend& target, const std::vector<DemoExchange>& demos,
                           std::size_t k,
                           const GenerationParams& params = target_params_default());

DefenseOutcome paraphrase_respond(const std::string& user_prompt, const DialogueHistory& history,
                                  ChatBackend& target, ChatBackend& paraphraser,
                                  const std::string& instruction_template,
                                  const GenerationParams& params = target_params_default(),
                                  const GenerationParams& paraphraser_params = guard_params_default());

DefenseOutcome self_defense_respond(const std::string& user_prompt,
                                    const DialogueHistory& history, ChatBackend& target,
                                    ChatBackend& checker, const std::string& check_template,
                                    const std::string& refusal_text = kDefaultRefusalText,
                                    const GenerationParams& params = target_params_default(),
                                    const GenerationParams& checker_params = guard_params_default());

enum class PerturbKind { Swap, Insert, Patch };

std::string to_string(PerturbKind k);
PerturbKind perturb_kind_from_string(const std::string& s);

/// Seeded random edit of ceil(q * len) characters. Swap changes exactly that
/// many positions, Insert grows by that many, Patch rewrites one span.
std::string perturb_prompt(const std::string& text, double q, PerturbKind kind,
                           std::uint64_t rng_seed);

DefenseOutcome smoothllm_respond(const std::string& user_prompt, const DialogueHistory& history,
                                 ChatBackend& target, std::size_t n_copies, double q,
                                 PerturbKind kind, std::uint64_t rng_seed,
                                 const std::string& refusal_text = kDefaultRefusalText,
                                 const std::vector<std::string>& refusal_prefixes = {},
                                 const GenerationParams& params = target_params_default());

DefenseOutcome static_suffix_respond(const std::string& user_prompt,
                                     const DialogueHistory& history, ChatBackend& target,
                                     const std::string& suffix,
                                     const GenerationParams& params = target_params_default());

}  // namespace intentgate
