#include "intentgate/gateway.hpp"

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "intentgate/rng.hpp"

namespace intentgate {

void GatewayConfig::validate() const {
    if (max_request_bytes == 0) throw ConfigError("max_request_bytes must be > 0");
    if (port < 0 || port > 65535) throw ConfigError("port out of range");
    if (host.empty()) throw ConfigError("host must be non-empty");
}

void to_json(json& j, const GatewayMetrics& m) {
    j = json{{"requests_total", m.requests_total},
             {"forward_refused_total", m.forward_refused_total},
             {"backward_refused_total", m.backward_refused_total},
             {"accepted_total", m.accepted_total},
             {"parse_failures_total", m.parse_failures_total},
             {"backend_errors_total", m.backend_errors_total}};
}

std::pair<DialogueHistory, std::string> history_from_messages(const json& messages) {
    if (!messages.is_array() || messages.empty())
        throw SchemaError(0, "messages must be a non-empty array");

    std::vector<std::pair<Role, std::string>> parsed;
    for (std::size_t i = 0; i < messages.size(); ++i) {
        const auto& m = messages[i];
        if (!m.is_object() || !m.contains("role") || !m["role"].is_string() ||
            !m.contains("content") || !m["content"].is_string())
            throw SchemaError(i + 1, "each message needs string role and content");
        Role role;
        try {
            role = role_from_string(m["role"].get<std::string>());
        } catch (const InvariantViolation& e) {
            throw SchemaError(i + 1, e.what());
        }
        parsed.emplace_back(role, m["content"].get<std::string>());
    }

    std::size_t i = 0;
    std::optional<std::string> system;
    if (parsed[i].first == Role::System) {
        system = parsed[i].second;
        ++i;
    }
    if (i == parsed.size()) throw SchemaError(parsed.size(), "no user message after system");

    std::vector<Exchange> exchanges;
    while (i + 1 < parsed.size()) {
        if (parsed[i].first != Role::User)
            throw SchemaError(i + 1, "expected a user message");
        if (parsed[i + 1].first != Role::Assistant)
            throw SchemaError(i + 2, "expected an assistant message");
        if (parsed[i].second.empty()) throw SchemaError(i + 1, "empty user message");
        exchanges.push_back({parsed[i].second, parsed[i + 1].second});
        i += 2;
    }
    if (i != parsed.size() - 1 || parsed[i].first != Role::User)
        throw SchemaError(parsed.size(), "conversation must end with a user message");
    if (parsed[i].second.empty()) throw SchemaError(parsed.size(), "empty user message");

    return {DialogueHistory(std::move(system), std::move(exchanges)), parsed[i].second};
}

namespace {

std::string completion_id(bool test_mode) {
    if (test_mode) return "chatcmpl-0000000000000000";
    static std::atomic<std::uint64_t> counter{0};
    const auto now = static_cast<std::uint64_t>(
        std::chrono::system_clock::now().time_since_epoch().count());
    return "chatcmpl-" + hex64(fnv1a64(std::to_string(counter.fetch_add(1)), now));
}

std::int64_t created_stamp(bool test_mode) {
    if (test_mode) return 0;
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace

json chat_completion_body(const std::string& model, const DefenseOutcome& outcome,
                          bool expose_metadata, bool test_mode) {
    json body{{"id", completion_id(test_mode)},
              {"object", "chat.completion"},
              {"created", created_stamp(test_mode)},
              {"model", model},
              {"choices",
               json::array({json{{"index", 0},
                                 {"message", json{{"role", "assistant"},
                                                  {"content", outcome.final_response}}},
                                 {"finish_reason", "stop"}}})},
              {"usage",
               json{{"prompt_tokens", 0}, {"completion_tokens", 0}, {"total_tokens", 0}}}};
    if (expose_metadata) {
        body["biid"] = json{
            {"decision_path", to_string(outcome.decision_path)},
            {"forward_refuse",
             outcome.forward_report ? json(outcome.forward_report->refuse) : json(nullptr)},
            {"backward_refuse",
             outcome.backward_report ? json(outcome.backward_report->refuse) : json(nullptr)}};
    }
    return body;
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

struct GatewayServer::Impl {
    GatewayConfig cfg;
    std::shared_ptr<Defense> defense;
    httplib::Server server;
    std::thread listener;
    int bound_port = 0;
    std::uint64_t started_ms = 0;

    mutable std::mutex metrics_mutex;
    GatewayMetrics metrics;

    enum class Disposition { Accepted, ForwardRefused, BackwardRefused, Errored };

    void record(Disposition d, std::size_t parse_failures) {
        std::lock_guard<std::mutex> lock(metrics_mutex);
        ++metrics.requests_total;
        switch (d) {
            case Disposition::Accepted: ++metrics.accepted_total; break;
            case Disposition::ForwardRefused: ++metrics.forward_refused_total; break;
            case Disposition::BackwardRefused: ++metrics.backward_refused_total; break;
            case Disposition::Errored: ++metrics.backend_errors_total; break;
        }
        metrics.parse_failures_total += parse_failures;
    }

    static void reply_json(httplib::Response& res, int status, const json& body) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    static json error_body(const std::string& message, const std::string& type,
                           const std::string& stage = "") {
        json err{{"message", message}, {"type", type}};
        if (!stage.empty()) err["stage"] = stage;
        return json{{"error", err}};
    }

    void handle_completion(const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body, nullptr, false);
        if (body.is_discarded() || !body.is_object() || !body.contains("messages")) {
            reply_json(res, 400,
                       error_body("body must be a JSON object with a messages array",
                                  "invalid_request_error"));
            return;
        }

        DialogueHistory history;
        std::string prompt;
        try {
            std::tie(history, prompt) = history_from_messages(body["messages"]);
        } catch (const SchemaError& e) {
            reply_json(res, 400, error_body(e.what(), "invalid_request_error"));
            return;
        }

        DefenseOutcome outcome;
        try {
            outcome = defense->respond(prompt, history);
        } catch (const PipelineStageError& e) {
            record(Disposition::Errored, 0);
            reply_json(res, 502, error_body(e.what(), "backend_error", e.stage()));
            return;
        } catch (const Error& e) {
            record(Disposition::Errored, 0);
            reply_json(res, 502, error_body(e.what(), "backend_error"));
            return;
        } catch (const std::exception& e) {
            record(Disposition::Errored, 0);
            reply_json(res, 500, error_body(e.what(), "internal_error"));
            return;
        }

        std::size_t parse_failures = 0;
        if (outcome.forward_report &&
            outcome.forward_report->parse_status == ParseStatus::ParseFailure)
            ++parse_failures;
        if (outcome.backward_report &&
            outcome.backward_report->parse_status == ParseStatus::ParseFailure)
            ++parse_failures;
        switch (outcome.decision_path) {
            case DecisionPath::Accepted: record(Disposition::Accepted, parse_failures); break;
            case DecisionPath::ForwardRefused:
                record(Disposition::ForwardRefused, parse_failures);
                break;
            case DecisionPath::BackwardRefused:
                record(Disposition::BackwardRefused, parse_failures);
                break;
        }

        reply_json(res, 200,
                   chat_completion_body(defense->model_name(), outcome,
                                        cfg.expose_decision_metadata, cfg.test_mode));
    }

    void handle_health(const httplib::Request&, httplib::Response& res) {
        const std::uint64_t now = SystemClock::instance().now_ms();
        reply_json(res, 200,
                   json{{"status", "ok"},
                        {"defense_name", defense->name()},
                        {"uptime_s", (now - started_ms) / 1000}});
    }

    void handle_metrics(const httplib::Request&, httplib::Response& res) {
        json body;
        {
            std::lock_guard<std::mutex> lock(metrics_mutex);
            body = metrics;
        }
        reply_json(res, 200, body);
    }
};

GatewayServer::GatewayServer(GatewayConfig cfg, std::shared_ptr<Defense> defense)
    : impl_(std::make_unique<Impl>()) {
    cfg.validate();
    if (!defense) throw ConfigError("gateway requires a defense");
    impl_->cfg = std::move(cfg);
    impl_->defense = std::move(defense);
}

GatewayServer::~GatewayServer() { stop(); }

void GatewayServer::start() {
    Impl& impl = *impl_;
    if (impl.server.is_running()) return;

    impl.server.set_payload_max_length(impl.cfg.max_request_bytes);
    impl.server.Post("/v1/chat/completions",
                     [&impl](const httplib::Request& req, httplib::Response& res) {
                         impl.handle_completion(req, res);
                     });
    impl.server.Get("/health", [&impl](const httplib::Request& req, httplib::Response& res) {
        impl.handle_health(req, res);
    });
    impl.server.Get("/metrics", [&impl](const httplib::Request& req, httplib::Response& res) {
        impl.handle_metrics(req, res);
    });

    if (impl.cfg.port == 0) {
        impl.bound_port = impl.server.bind_to_any_port(impl.cfg.host);
        if (impl.bound_port <= 0) throw ConfigError("cannot bind " + impl.cfg.host);
    } else {
        if (!impl.server.bind_to_port(impl.cfg.host, impl.cfg.port))
            throw ConfigError("cannot bind " + impl.cfg.host + ":" +
                              std::to_string(impl.cfg.port));
        impl.bound_port = impl.cfg.port;
    }

    impl.started_ms = SystemClock::instance().now_ms();
    impl.listener = std::thread([&impl] { impl.server.listen_after_bind(); });
    for (int i = 0; i < 5000 && !impl.server.is_running(); ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
    if (!impl.server.is_running()) {
        if (impl.listener.joinable()) impl.listener.join();
        throw ConfigError("gateway failed to start listening");
    }
}

void GatewayServer::stop() {
    if (!impl_) return;
    impl_->server.stop();
    if (impl_->listener.joinable()) impl_->listener.join();
}

bool GatewayServer::running() const { return impl_->server.is_running(); }

int GatewayServer::port() const { return impl_->bound_port; }

GatewayMetrics GatewayServer::metrics() const {
    std::lock_guard<std::mutex> lock(impl_->metrics_mutex);
    return impl_->metrics;
}

}  // namespace intentgate
