#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "intentgate/backend.hpp"
#include "intentgate/core.hpp"
#include "intentgate/defense.hpp"
#include "intentgate/judge.hpp"

namespace intentgate {

inline constexpr const char* kDefaultAttackPlaceholder = "[INSERT PROMPT HERE]";
inline constexpr const char* kCrescendoStopMarker = "<<DONE>>";
inline constexpr std::size_t kDefaultMaxTurns = 5;

struct AttackPrompt {
    std::string text;
    std::string attack_name;
    std::string goal_id;
    std::map<std::string, std::string> metadata;

    void validate() const;
};

struct QuestionChain {
    std::string goal_id;
    std::vector<std::string> prompts;
    bool planned = false;
    std::string attack_name;

    void validate(std::size_t t_max) const;
};

/// Substitutes every placeholder occurrence with goal.text; all other
/// template bytes survive verbatim.
AttackPrompt apply_template(const AttackGoal& goal, const std::string& template_text,
                            const std::string& attack_name = "template",
                            const std::string& placeholder = kDefaultAttackPlaceholder);

/// k demo exchanges as alternating user/assistant messages, then the goal as
/// the final user message.
std::vector<ChatMessage> build_ica_prompt(const AttackGoal& goal,
                                          const std::vector<DemoExchange>& demos, std::size_t k);

enum class TenseDirection { Past, Future };

std::string to_string(TenseDirection d);
TenseDirection tense_direction_from_string(const std::string& s);

AttackPrompt rewrite_tense(const AttackGoal& goal, TenseDirection direction, ChatBackend& rewriter,
                           const std::string& instruction_template,
                           const GenerationParams& params = guard_params_default());

// ---------------------------------------------------------------------------
// Iterative refinement (PAIR-style)
// ---------------------------------------------------------------------------

struct PairConfig {
    std::shared_ptr<ChatBackend> attacker;
    std::string system_template;  // needs {GOAL}
    int max_iters = 3;
    int streams = 3;
    GenerationParams attacker_params = target_params_default();
};

struct PairResult {
    AttackPrompt best;
    std::vector<TrialRecord> trials;  // one per completed iteration, stream-major order
};

/// Per stream: propose, defend, judge, feed (prompt, response, score) back.
/// A perfect score of 10 ends the search. Backend or judge errors abort only
/// their stream; AllStreamsFailed when no iteration completed anywhere.
PairResult pair_attack(const AttackGoal& goal, const PairConfig& cfg, Defense& defended_target,
                       const JudgeConfig& judge);

// ---------------------------------------------------------------------------
// Multi-turn chains
// ---------------------------------------------------------------------------

struct ChainResult {
    QuestionChain chain;
    DialogueHistory history;
    std::vector<DefenseOutcome> outcomes;  // one per executed turn
    std::map<std::string, std::string> metadata;
};

struct CrescendoConfig {
    std::shared_ptr<ChatBackend> attacker;
    std::string instruction_template;  // needs {GOAL}; may use {TRANSCRIPT}, {STOP_MARKER}, {MAX_TURNS}
    std::size_t max_turns = kDefaultMaxTurns;
    std::string stop_marker = kCrescendoStopMarker;
    GenerationParams attacker_params = target_params_default();
};

/// Adaptive escalation: each next user turn is generated from the goal and
/// the transcript so far; stops at max_turns or on the stop marker (exact
/// match of the trimmed attacker reply).
ChainResult crescendo_chain(const AttackGoal& goal, const CrescendoConfig& cfg,
                            Defense& defended_target);

struct ActorConfig {
    std::shared_ptr<ChatBackend> attacker;
    std::string plan_template;  // needs {GOAL}; may use {MAX_TURNS}
    std::size_t max_turns = kDefaultMaxTurns;
    GenerationParams attacker_params = guard_params_default();
};

/// Pre-planned chain: one planning call yields {"actor", "questions"}; the
/// questions (clamped to max_turns) then run verbatim.
ChainResult actor_chain(const AttackGoal& goal, const ActorConfig& cfg, Defense& defended_target);

}  // namespace intentgate
