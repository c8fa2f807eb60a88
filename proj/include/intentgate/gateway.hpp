#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "intentgate/core.hpp"
#include "intentgate/defense.hpp"

namespace intentgate {

struct GatewayConfig {
    std::string host = "127.0.0.1";
    int port = 0;  // 0 picks an ephemeral port
    bool expose_decision_metadata = true;
    std::size_t max_request_bytes = 1 << 20;
    bool test_mode = false;  // zeroes completion ids and timestamps

    void validate() const;
};

struct GatewayMetrics {
    std::uint64_t requests_total = 0;
    std::uint64_t forward_refused_total = 0;
    std::uint64_t backward_refused_total = 0;
    std::uint64_t accepted_total = 0;
    std::uint64_t parse_failures_total = 0;
    std::uint64_t backend_errors_total = 0;
};

void to_json(json& j, const GatewayMetrics& m);

/// (history, live prompt) reconstructed from an OpenAI message array:
/// optional leading system, strict user/assistant alternation, final user.
/// Throws SchemaError (mapped to 400) on any other shape.
std::pair<DialogueHistory, std::string> history_from_messages(const json& messages);

/// The wire body for one disposed request.
json chat_completion_body(const std::string& model, const DefenseOutcome& outcome,
                          bool expose_metadata, bool test_mode);

/// HTTP face of a defended model: POST /v1/chat/completions, GET /health,
/// GET /metrics. Refusals are successful (200) completions.
class GatewayServer {
public:
    GatewayServer(GatewayConfig cfg, std::shared_ptr<Defense> defense);
    ~GatewayServer();

    GatewayServer(const GatewayServer&) = delete;
    GatewayServer& operator=(const GatewayServer&) = delete;

    void start();
    void stop();
    bool running() const;
    int port() const;

    GatewayMetrics metrics() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace intentgate
