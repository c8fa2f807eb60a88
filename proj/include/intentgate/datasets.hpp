#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "intentgate/core.hpp"
#include "intentgate/defense.hpp"
#include "intentgate/judge.hpp"

namespace intentgate {

enum class GoalFormat { CsvGoalCategory, JsonBehaviors };

GoalFormat goal_format_from_string(const std::string& s);

/// One human-authored multi-turn jailbreak attempt.
struct TranscriptCase {
    std::string id;
    AttackGoal goal;
    std::vector<std::string> user_turns;
    std::string source;

    void validate() const;
};

/// CsvGoalCategory: header exactly "id,goal,category", quoted fields allowed.
/// JsonBehaviors: array of {"goal"|"behavior", "id"?, "category"?}.
std::vector<AttackGoal> load_goals(const std::string& path, GoalFormat format);

/// JSONL, one {"id","goal","category","turns":[...]} per line.
std::vector<TranscriptCase> load_transcripts(const std::string& path);

/// Balanced per-category draw: quota counts differ by at most one, with the
/// remainder assigned by a seeded category shuffle. Deterministic in (seed,
/// category multiset) and invariant to input permutation. A category smaller
/// than its quota raises InsufficientItems.
std::vector<AttackGoal> stratified_sample(const std::vector<AttackGoal>& items, std::size_t n,
                                          std::uint64_t seed);

/// Feeds the recorded user turns in order through the defense, judging every
/// assistant turn; the conversation verdict is the any-turn rule. A backend
/// failure truncates the case and sets the record's error field.
TrialRecord replay_transcript(const TranscriptCase& transcript, Defense& defense,
                              const JudgeConfig& judge,
                              const std::string& attack_name = "replay");

}  // namespace intentgate
