#include "intentgate/backend.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <httplib.h>

namespace intentgate {

bool operator==(const GenerationParams& a, const GenerationParams& b) {
    return a.temperature == b.temperature && a.max_tokens == b.max_tokens && a.top_p == b.top_p &&
           a.stop == b.stop && a.seed == b.seed;
}

void validate_chat_request(const std::vector<ChatMessage>& messages) {
    if (messages.empty()) throw InvariantViolation("chat request must carry at least one message");
    if (messages.back().role != Role::User)
        throw InvariantViolation("chat request must end with a user message");
}

// ---------------------------------------------------------------------------
// ScriptedBackend
// ---------------------------------------------------------------------------

ScriptedBackend::ScriptedBackend(std::vector<ScriptRule> rules, std::string model_name)
    : rules_(std::move(rules)), model_name_(std::move(model_name)) {}

std::vector<ScriptRule> ScriptedBackend::rules_from_json(const json& rules) {
    if (!rules.is_array()) throw ConfigError("script rules must be a JSON array");
    std::vector<ScriptRule> out;
    out.reserve(rules.size());
    for (std::size_t i = 0; i < rules.size(); ++i) {
        const auto& entry = rules[i];
        try {
            ScriptRule rule;
            const auto& match = entry.at("match");
            if (match.contains("exact")) {
                rule.kind = ScriptRule::Kind::Exact;
                rule.pattern = match.at("exact").get<std::string>();
            } else if (match.contains("substring")) {
                rule.kind = ScriptRule::Kind::Substring;
                rule.pattern = match.at("substring").get<std::string>();
            } else if (match.contains("sequence")) {
                rule.kind = ScriptRule::Kind::Sequence;
                rule.index = match.at("sequence").get<std::size_t>();
            } else {
                throw ConfigError("script rule match must be exact, substring, or sequence");
            }
            rule.reply = entry.at("reply").get<std::string>();
            if (entry.contains("usage")) {
                rule.usage.prompt = entry.at("usage").value("prompt_tokens", std::int64_t{0});
                rule.usage.completion = entry.at("usage").value("completion_tokens", std::int64_t{0});
            }
            out.push_back(std::move(rule));
        } catch (const json::exception& e) {
            throw SchemaError(i + 1, e.what());
        }
    }
    return out;
}

std::vector<ScriptRule> ScriptedBackend::rules_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open script file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("invalid script file " + path + ": " + e.what());
    }
    return rules_from_json(j);
}

ScriptedBackend ScriptedBackend::from_json(const json& rules, std::string model_name) {
    return ScriptedBackend(rules_from_json(rules), std::move(model_name));
}

ChatResult ScriptedBackend::complete_chat(const std::vector<ChatMessage>& messages,
                                          const GenerationParams& params) {
    validate_chat_request(messages);
    std::lock_guard<std::mutex> lock(mutex_);
    calls_.push_back({messages, params});

    std::string joined;
    for (std::size_t i = 0; i < messages.size(); ++i) {
        if (i > 0) joined += '\n';
        joined += messages[i].content;
    }
    const std::string& last = messages.back().content;

    for (const auto& rule : rules_) {
        bool hit = false;
        switch (rule.kind) {
            case ScriptRule::Kind::Exact:
                hit = (last == rule.pattern);
                break;
            case ScriptRule::Kind::Substring:
                hit = (joined.find(rule.pattern) != std::string::npos);
                break;
            case ScriptRule::Kind::Sequence:
                hit = (rule.index == sequence_counter_);
                break;
        }
        if (!hit) continue;
        if (rule.kind == ScriptRule::Kind::Sequence) ++sequence_counter_;
        return ChatResult{rule.reply, rule.usage, false};
    }
    throw ScriptExhausted("no script rule matches call " + std::to_string(calls_.size()) +
                          "; last message: " + last.substr(0, 120));
}

std::vector<ScriptedBackend::CallRecord> ScriptedBackend::calls() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_;
}

std::size_t ScriptedBackend::call_count() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_.size();
}

// ---------------------------------------------------------------------------
// BackendProfile serialization
// ---------------------------------------------------------------------------

void to_json(json& j, const BackendProfile& p) {
    j = json{{"endpoint_url", p.endpoint_url},
             {"model_name", p.model_name},
             {"auth_token_ref", p.auth_token_ref},
             {"max_retries", p.max_retries},
             {"retry_backoff_ms", p.retry_backoff_ms},
             {"rate_limit_rps", p.rate_limit_rps ? json(*p.rate_limit_rps) : json(nullptr)},
             {"think_open", p.think_open},
             {"think_close", p.think_close}};
}

void from_json(const json& j, BackendProfile& p) {
    p.endpoint_url = j.at("endpoint_url").get<std::string>();
    p.model_name = j.at("model_name").get<std::string>();
    p.auth_token_ref = j.value("auth_token_ref", std::string());
    p.max_retries = j.value("max_retries", 3);
    p.retry_backoff_ms = j.value("retry_backoff_ms", std::uint64_t{250});
    p.rate_limit_rps.reset();
    if (j.contains("rate_limit_rps") && !j.at("rate_limit_rps").is_null())
        p.rate_limit_rps = j.at("rate_limit_rps").get<double>();
    p.think_open = j.value("think_open", std::string("<think>"));
    p.think_close = j.value("think_close", std::string("</think>"));
}

// ---------------------------------------------------------------------------
// Reasoning-block stripping
// ---------------------------------------------------------------------------

StripResult strip_reasoning(const std::string& text, const std::string& open,
                            const std::string& close) {
    if (open.empty() || close.empty()) return {text, false};

    std::size_t start = text.find_first_not_of(" \t\r\n");
    if (start == std::string::npos) return {text, false};
    if (text.compare(start, open.size(), open) != 0) return {text, false};

    std::size_t pos = start + open.size();
    int depth = 1;
    while (depth > 0) {
        std::size_t next_open = text.find(open, pos);
        std::size_t next_close = text.find(close, pos);
        if (next_close == std::string::npos) return {"", true};
        if (next_open != std::string::npos && next_open < next_close) {
            ++depth;
            pos = next_open + open.size();
        } else {
            --depth;
            pos = next_close + close.size();
        }
    }
    std::size_t rest = text.find_first_not_of(" \t\r\n", pos);
    if (rest == std::string::npos) return {"", false};
    return {text.substr(rest), false};
}

// ---------------------------------------------------------------------------
// RateLimiter
// ---------------------------------------------------------------------------

RateLimiter::RateLimiter(std::optional<double> rps, Clock& clock) : clock_(clock) {
    if (rps) {
        if (*rps <= 0.0) throw ConfigError("rate_limit_rps must be positive");
        max_per_window_ = static_cast<std::size_t>(std::ceil(*rps));
    }
}

void RateLimiter::acquire() {
    if (!max_per_window_) return;
    for (;;) {
        std::uint64_t wake;
        {
            std::lock_guard<std::mutex> lock(mutex_);
            const std::uint64_t now = clock_.now_ms();
            while (!starts_.empty() && now - starts_.front() >= 1000) starts_.pop_front();
            if (starts_.size() < *max_per_window_) {
                starts_.push_back(now);
                return;
            }
            wake = starts_.front() + 1000;
        }
        const std::uint64_t now = clock_.now_ms();
        clock_.sleep_ms(wake > now ? wake - now : 1);
    }
}

// ---------------------------------------------------------------------------
// HttpBackend
// ---------------------------------------------------------------------------

namespace {

struct ParsedUrl {
    std::string scheme_host_port;
    std::string path_prefix;
};

ParsedUrl parse_endpoint(const std::string& url) {
    const std::size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw ConfigError("endpoint_url must include a scheme: " + url);
    const std::size_t path_start = url.find('/', scheme_end + 3);
    ParsedUrl out;
    if (path_start == std::string::npos) {
        out.scheme_host_port = url;
    } else {
        out.scheme_host_port = url.substr(0, path_start);
        out.path_prefix = url.substr(path_start);
    }
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
    return out;
}

bool retryable_status(int status) { return status == 429 || (status >= 500 && status < 600); }

}  // namespace

HttpBackend::HttpBackend(BackendProfile profile, Clock& clock)
    : profile_(std::move(profile)), clock_(clock), limiter_(profile_.rate_limit_rps, clock) {
    if (profile_.max_retries < 0) throw ConfigError("max_retries must be >= 0");
    auto parsed = parse_endpoint(profile_.endpoint_url);
    scheme_host_port_ = parsed.scheme_host_port;
    path_prefix_ = parsed.path_prefix;
}

std::string HttpBackend::resolve_token() const {
    if (profile_.auth_token_ref.empty()) return "";
    const char* value = std::getenv(profile_.auth_token_ref.c_str());
    if (!value || !*value)
        throw ConfigError("auth token environment variable is unset: " + profile_.auth_token_ref);
    return value;
}

ChatResult HttpBackend::complete_chat(const std::vector<ChatMessage>& messages,
                                      const GenerationParams& params) {
    validate_chat_request(messages);

    json body;
    body["model"] = profile_.model_name;
    auto& msgs = body["messages"] = json::array();
    for (const auto& m : messages) msgs.push_back(json{{"role", to_string(m.role)}, {"content", m.content}});
    body["temperature"] = params.temperature;
    body["max_tokens"] = params.max_tokens;
    body["top_p"] = params.top_p;
    if (!params.stop.empty()) body["stop"] = params.stop;
    if (params.seed) body["seed"] = *params.seed;
    const std::string payload = body.dump();

    const std::string token = resolve_token();
    const std::string path = path_prefix_ + "/chat/completions";

    std::string last_failure = "no attempt made";
    for (int attempt = 0; attempt <= profile_.max_retries; ++attempt) {
        if (attempt > 0)
            clock_.sleep_ms(profile_.retry_backoff_ms << static_cast<unsigned>(attempt - 1));
        limiter_.acquire();

        httplib::Client client(scheme_host_port_);
        client.set_connection_timeout(30, 0);
        client.set_read_timeout(600, 0);
        httplib::Headers headers;
        if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);

        auto res = client.Post(path, headers, payload, "application/json");
        if (!res) {
            last_failure = "transport: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status != 200) {
            if (retryable_status(res->status)) {
                last_failure = "status " + std::to_string(res->status);
                continue;
            }
            throw ApiError(res->status, res->body);
        }

        json reply;
        try {
            reply = json::parse(res->body);
        } catch (const json::exception& e) {
            throw TransportError(std::string("malformed completion body: ") + e.what());
        }
        std::string content;
        try {
            content = reply.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw TransportError(std::string("completion missing choices[0].message.content: ") +
                                 e.what());
        }
        TokenUsage usage;
        if (reply.contains("usage") && reply["usage"].is_object()) {
            usage.prompt = reply["usage"].value("prompt_tokens", std::int64_t{0});
            usage.completion = reply["usage"].value("completion_tokens", std::int64_t{0});
        }
        auto stripped = strip_reasoning(content, profile_.think_open, profile_.think_close);
        return ChatResult{std::move(stripped.text), usage, stripped.unclosed};
    }
    throw TransportError("chat completion failed after " +
                         std::to_string(profile_.max_retries + 1) + " attempts; last: " +
                         last_failure);
}

// ---------------------------------------------------------------------------
// MeteredBackend
// ---------------------------------------------------------------------------

MeteredBackend::MeteredBackend(std::shared_ptr<ChatBackend> inner) : inner_(std::move(inner)) {
    if (!inner_) throw ConfigError("metered backend requires an inner backend");
}

ChatResult MeteredBackend::complete_chat(const std::vector<ChatMessage>& messages,
                                         const GenerationParams& params) {
    ChatResult result = inner_->complete_chat(messages, params);
    std::lock_guard<std::mutex> lock(mutex_);
    usage_.prompt += result.usage.prompt;
    usage_.completion += result.usage.completion;
    ++calls_;
    return result;
}

TokenUsage MeteredBackend::usage() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return usage_;
}

std::size_t MeteredBackend::call_count() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return calls_;
}

}  // namespace intentgate
