#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "intentgate/clock.hpp"
#include "intentgate/core.hpp"

namespace intentgate {

struct GenerationParams {
    double temperature = 0.7;
    int max_tokens = 1024;
    double top_p = 1.0;
    std::vector<std::string> stop;
    std::optional<std::uint64_t> seed;
};

bool operator==(const GenerationParams& a, const GenerationParams& b);

struct ChatResult {
    std::string text;
    TokenUsage usage;
    bool warning_unclosed_reasoning = false;
};

/// Throws InvariantViolation unless messages are non-empty and end with a
/// user turn.
void validate_chat_request(const std::vector<ChatMessage>& messages);

/// A chat-completion provider. Implementations must be safe to call from
/// multiple threads.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual ChatResult complete_chat(const std::vector<ChatMessage>& messages,
                                     const GenerationParams& params) = 0;
    virtual std::string model_name() const = 0;
};

// ---------------------------------------------------------------------------
// Scripted backend (tests, replay, offline runs)
// ---------------------------------------------------------------------------

/// One reply rule. Rules are tried in declaration order; the first match
/// wins. Sequence rules fire in positional order regardless of content.
struct ScriptRule {
    enum class Kind { Exact, Substring, Sequence };

    Kind kind = Kind::Substring;
    std::string pattern;     // Exact: last message content; Substring: all contents joined by \n
    std::size_t index = 0;   // Sequence: fires when it equals the backend's sequence counter
    std::string reply;
    TokenUsage usage;
};

class ScriptedBackend : public ChatBackend {
public:
    struct CallRecord {
        std::vector<ChatMessage> messages;
        GenerationParams params;
    };

    explicit ScriptedBackend(std::vector<ScriptRule> rules, std::string model_name = "scripted");

    /// Parses [{"match": {"exact"|"substring": str} | {"sequence": int},
    ///           "reply": str, "usage": {"prompt_tokens", "completion_tokens"}?}, ...]
    static ScriptedBackend from_json(const json& rules, std::string model_name = "scripted");
    static std::vector<ScriptRule> rules_from_json(const json& rules);
    static std::vector<ScriptRule> rules_from_file(const std::string& path);

    ChatResult complete_chat(const std::vector<ChatMessage>& messages,
                             const GenerationParams& params) override;
    std::string model_name() const override { return model_name_; }

    std::vector<CallRecord> calls() const;
    std::size_t call_count() const;

private:
    std::vector<ScriptRule> rules_;
    std::string model_name_;
    mutable std::mutex mutex_;
    std::size_t sequence_counter_ = 0;
    std::vector<CallRecord> calls_;
};

// ---------------------------------------------------------------------------
// HTTP backend (OpenAI-compatible chat completions)
// ---------------------------------------------------------------------------

/// Connection profile for one OpenAI-compatible endpoint. `auth_token_ref`
/// names an environment variable; tokens are never stored inline.
struct BackendProfile {
    std::string endpoint_url;     // e.g. "http://localhost:8000/v1"
    std::string model_name;
    std::string auth_token_ref;   // empty: no Authorization header
    int max_retries = 3;
    std::uint64_t retry_backoff_ms = 250;
    std::optional<double> rate_limit_rps;
    std::string think_open = "<think>";
    std::string think_close = "</think>";
};

void to_json(json& j, const BackendProfile& p);
void from_json(const json& j, BackendProfile& p);

struct StripResult {
    std::string text;
    bool unclosed = false;
};

/// Drops one leading reasoning block (`open`...`close`, nesting-aware) plus
/// surrounding whitespace. An unclosed block yields empty text and a flag.
StripResult strip_reasoning(const std::string& text, const std::string& open,
                            const std::string& close);

/// Sliding-log limiter: at most ceil(rps) calls may start in any one-second
/// window. A disengaged rps never blocks.
class RateLimiter {
public:
    RateLimiter(std::optional<double> rps, Clock& clock);
    void acquire();

private:
    std::optional<std::size_t> max_per_window_;
    Clock& clock_;
    std::mutex mutex_;
    std::deque<std::uint64_t> starts_;
};

class HttpBackend : public ChatBackend {
public:
    explicit HttpBackend(BackendProfile profile, Clock& clock = SystemClock::instance());

    ChatResult complete_chat(const std::vector<ChatMessage>& messages,
                             const GenerationParams& params) override;
    std::string model_name() const override { return profile_.model_name; }

    const BackendProfile& profile() const { return profile_; }

private:
    std::string resolve_token() const;

    BackendProfile profile_;
    Clock& clock_;
    RateLimiter limiter_;
    std::string scheme_host_port_;
    std::string path_prefix_;
};

// ---------------------------------------------------------------------------
// Metering decorator
// ---------------------------------------------------------------------------

/// Accumulates token usage and call counts across every call it forwards.
class MeteredBackend : public ChatBackend {
public:
    explicit MeteredBackend(std::shared_ptr<ChatBackend> inner);

    ChatResult complete_chat(const std::vector<ChatMessage>& messages,
                             const GenerationParams& params) override;
    std::string model_name() const override { return inner_->model_name(); }

    TokenUsage usage() const;
    std::size_t call_count() const;

private:
    std::shared_ptr<ChatBackend> inner_;
    mutable std::mutex mutex_;
    TokenUsage usage_;
    std::size_t calls_ = 0;
};

}  // namespace intentgate
