#include "intentgate/datasets.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "intentgate/rng.hpp"

namespace intentgate {

GoalFormat goal_format_from_string(const std::string& s) {
    if (s == "csv" || s == "csv_goal_category") return GoalFormat::CsvGoalCategory;
    if (s == "json" || s == "json_behaviors") return GoalFormat::JsonBehaviors;
    throw ConfigError("unknown goal format: " + s);
}

void TranscriptCase::validate() const {
    if (id.empty()) throw InvariantViolation("transcript case id must be non-empty");
    goal.validate();
    if (user_turns.empty()) throw InvariantViolation("transcript case has no user turns");
    for (const auto& t : user_turns)
        if (t.empty()) throw InvariantViolation("transcript user turns must be non-empty");
}

namespace {

std::string basename_of(const std::string& path) {
    const std::size_t slash = path.find_last_of("/\\");
    return slash == std::string::npos ? path : path.substr(slash + 1);
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct CsvRecord {
    std::vector<std::string> fields;
    std::size_t line = 0;  // line the record starts on
};

/// Quoted fields may contain commas, doubled quotes, and newlines.
std::vector<CsvRecord> parse_csv(const std::string& content) {
    std::vector<CsvRecord> records;
    std::vector<std::string> fields;
    std::string field;
    bool in_quotes = false;
    bool field_quoted = false;
    bool record_open = false;
    std::size_t line = 1;
    std::size_t record_line = 1;

    auto end_field = [&] {
        fields.push_back(std::move(field));
        field.clear();
        field_quoted = false;
    };
    auto end_record = [&] {
        end_field();
        records.push_back({std::move(fields), record_line});
        fields.clear();
        record_open = false;
    };

    for (std::size_t i = 0; i < content.size(); ++i) {
        const char c = content[i];
        if (!record_open) {
            record_open = true;
            record_line = line;
        }
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < content.size() && content[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        switch (c) {
            case '"':
                if (field.empty() && !field_quoted) {
                    in_quotes = true;
                    field_quoted = true;
                } else {
                    field += c;
                }
                break;
            case ',':
                end_field();
                break;
            case '\r':
                break;
            case '\n':
                end_record();
                ++line;
                break;
            default:
                field += c;
        }
    }
    if (record_open || !field.empty() || !fields.empty()) end_record();
    return records;
}

std::vector<AttackGoal> load_goals_csv(const std::string& path) {
    const auto records = parse_csv(read_file(path));
    if (records.empty()) throw SchemaError(1, "goal file is empty");
    const auto& header = records.front().fields;
    if (header != std::vector<std::string>{"id", "goal", "category"})
        throw SchemaError(records.front().line, "header must be exactly id,goal,category");

    std::vector<AttackGoal> goals;
    std::set<std::string> seen;
    const std::string source = basename_of(path);
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.fields.size() != 3)
            throw SchemaError(rec.line, "expected 3 fields, got " +
                                            std::to_string(rec.fields.size()));
        AttackGoal goal;
        goal.id = rec.fields[0];
        goal.text = rec.fields[1];
        if (!rec.fields[2].empty()) goal.category = rec.fields[2];
        goal.source_dataset = source;
        if (goal.id.empty()) throw SchemaError(rec.line, "empty id");
        if (goal.text.empty()) throw SchemaError(rec.line, "empty goal");
        if (!seen.insert(goal.id).second) throw SchemaError(rec.line, "duplicate id " + goal.id);
        goals.push_back(std::move(goal));
    }
    return goals;
}

std::vector<AttackGoal> load_goals_json(const std::string& path) {
    json parsed;
    try {
        parsed = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw SchemaError(1, std::string("invalid JSON: ") + e.what());
    }
    if (!parsed.is_array()) throw SchemaError(1, "behavior file must hold a JSON array");

    std::vector<AttackGoal> goals;
    std::set<std::string> seen;
    const std::string source = basename_of(path);
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        const auto& entry = parsed[i];
        const std::size_t record = i + 1;
        if (!entry.is_object()) throw SchemaError(record, "behavior entry must be an object");
        AttackGoal goal;
        if (entry.contains("goal") && entry["goal"].is_string())
            goal.text = entry["goal"].get<std::string>();
        else if (entry.contains("behavior") && entry["behavior"].is_string())
            goal.text = entry["behavior"].get<std::string>();
        else
            throw SchemaError(record, "entry has no goal/behavior string");
        if (goal.text.empty()) throw SchemaError(record, "empty goal text");
        if (entry.contains("id") && entry["id"].is_string() &&
            !entry["id"].get<std::string>().empty()) {
            goal.id = entry["id"].get<std::string>();
        } else {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "b%04zu", i);
            goal.id = buf;
        }
        if (entry.contains("category") && entry["category"].is_string() &&
            !entry["category"].get<std::string>().empty())
            goal.category = entry["category"].get<std::string>();
        goal.source_dataset = source;
        if (!seen.insert(goal.id).second) throw SchemaError(record, "duplicate id " + goal.id);
        goals.push_back(std::move(goal));
    }
    return goals;
}

}  // namespace

std::vector<AttackGoal> load_goals(const std::string& path, GoalFormat format) {
    return format == GoalFormat::CsvGoalCategory ? load_goals_csv(path) : load_goals_json(path);
}

std::vector<TranscriptCase> load_transcripts(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open transcript file: " + path);

    std::vector<TranscriptCase> cases;
    std::set<std::string> seen;
    const std::string source = basename_of(path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json entry;
        try {
            entry = json::parse(line);
        } catch (const json::exception& e) {
            throw SchemaError(line_no, std::string("invalid JSON: ") + e.what());
        }
        if (!entry.is_object()) throw SchemaError(line_no, "transcript line must be an object");
        if (!entry.contains("id") || !entry["id"].is_string())
            throw SchemaError(line_no, "missing string id");
        if (!entry.contains("goal") || !entry["goal"].is_string())
            throw SchemaError(line_no, "missing string goal");
        if (!entry.contains("turns") || !entry["turns"].is_array() || entry["turns"].empty())
            throw SchemaError(line_no, "missing non-empty turns array");

        TranscriptCase c;
        c.id = entry["id"].get<std::string>();
        c.goal.id = c.id;
        c.goal.text = entry["goal"].get<std::string>();
        if (entry.contains("category") && entry["category"].is_string() &&
            !entry["category"].get<std::string>().empty())
            c.goal.category = entry["category"].get<std::string>();
        c.goal.source_dataset = source;
        c.source = source;
        for (const auto& t : entry["turns"]) {
            if (!t.is_string() || t.get<std::string>().empty())
                throw SchemaError(line_no, "turns must be non-empty strings");
            c.user_turns.push_back(t.get<std::string>());
        }
        if (!seen.insert(c.id).second) throw SchemaError(line_no, "duplicate id " + c.id);
        c.validate();
        cases.push_back(std::move(c));
    }
    return cases;
}

std::vector<AttackGoal> stratified_sample(const std::vector<AttackGoal>& items, std::size_t n,
                                          std::uint64_t seed) {
    if (n > items.size())
        throw InsufficientItems("requested " + std::to_string(n) + " of " +
                                std::to_string(items.size()) + " items");
    if (n == 0) return {};

    std::map<std::string, std::vector<AttackGoal>> groups;
    for (const auto& item : items) groups[item.category.value_or("")].push_back(item);
    for (auto& [_, members] : groups)
        std::sort(members.begin(), members.end(),
                  [](const AttackGoal& a, const AttackGoal& b) { return a.id < b.id; });

    std::vector<std::string> categories;
    categories.reserve(groups.size());
    for (const auto& [name, _] : groups) categories.push_back(name);

    // Base quota plus a seeded remainder assignment.
    std::map<std::string, std::size_t> quota;
    const std::size_t base = n / categories.size();
    std::size_t remainder = n % categories.size();
    for (const auto& c : categories) quota[c] = base;
    std::vector<std::string> shuffled = categories;
    SeededRng remainder_rng(seed);
    remainder_rng.shuffle(shuffled);
    for (std::size_t i = 0; i < remainder; ++i) ++quota[shuffled[i]];

    // Cap quotas at group capacity; surplus flows to the category with the
    // most headroom (name-ordered on ties), so n = total degrades to identity.
    std::size_t overflow = 0;
    for (const auto& c : categories) {
        const std::size_t size = groups[c].size();
        if (quota[c] > size) {
            overflow += quota[c] - size;
            quota[c] = size;
        }
    }
    while (overflow > 0) {
        std::string best;
        std::size_t best_headroom = 0;
        for (const auto& c : categories) {
            const std::size_t headroom = groups[c].size() - quota[c];
            if (headroom > best_headroom) {
                best = c;
                best_headroom = headroom;
            }
        }
        if (best_headroom == 0)
            throw InsufficientItems("cannot satisfy stratified quotas");
        ++quota[best];
        --overflow;
    }

    std::vector<AttackGoal> sample;
    sample.reserve(n);
    for (const auto& c : categories) {
        std::vector<AttackGoal> pool = groups[c];
        SeededRng category_rng(fnv1a64(c, seed));
        category_rng.shuffle(pool);
        for (std::size_t i = 0; i < quota[c]; ++i) sample.push_back(std::move(pool[i]));
    }
    return sample;
}

TrialRecord replay_transcript(const TranscriptCase& transcript, Defense& defense,
                              const JudgeConfig& judge, const std::string& attack_name) {
    transcript.validate();

    TrialRecord record;
    record.goal = transcript.goal;
    record.attack_name = attack_name;
    record.defense_name = defense.name();
    record.model_name = defense.model_name();

    std::vector<JudgeVerdict> verdicts;
    for (const auto& turn : transcript.user_turns) {
        try {
            const DefenseOutcome outcome = defense.respond(turn, record.transcript);
            const JudgeVerdict verdict = judge_response(transcript.goal, outcome.final_response,
                                                        judge);
            record.transcript =
                record.transcript.append_exchange({turn, outcome.final_response});
            record.per_turn_outcomes.push_back(outcome);
            verdicts.push_back(verdict);
        } catch (const std::exception& e) {
            record.error = e.what();
            break;
        }
    }

    if (verdicts.empty()) {
        record.verdict = JudgeVerdict{1, false, "no completed turns", ""};
        if (!record.error) record.error = "no turns completed";
    } else {
        record.verdict = conversation_verdict(verdicts);
    }
    record.validate();
    return record;
}

}  // namespace intentgate
