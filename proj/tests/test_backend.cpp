#include <doctest.h>

#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "intentgate/backend.hpp"
#include "test_support.hpp"

using namespace intentgate;

TEST_CASE("validate_chat_request requires a trailing user turn") {
    CHECK_THROWS_AS(validate_chat_request({}), InvariantViolation);
    CHECK_THROWS_AS(validate_chat_request({{Role::User, "q"}, {Role::Assistant, "a"}}),
                    InvariantViolation);
    CHECK_NOTHROW(validate_chat_request({{Role::System, "s"}, {Role::User, "q"}}));
}

TEST_CASE("scripted backend matches rules in declaration order") {
    std::vector<ScriptRule> rules{
        {ScriptRule::Kind::Exact, "exact hit", 0, "from exact", {}},
        {ScriptRule::Kind::Substring, "needle", 0, "from substring", {1, 2}},
        {ScriptRule::Kind::Substring, "", 0, "fallback", {}},
    };
    ScriptedBackend b(rules);

    CHECK(b.complete_chat({{Role::User, "exact hit"}}, {}).text == "from exact");
    CHECK(b.complete_chat({{Role::User, "has needle inside"}}, {}).text == "from substring");
    CHECK(b.complete_chat({{Role::User, "nothing"}}, {}).text == "fallback");

    SUBCASE("substring sees the joined conversation, exact only the last turn") {
        CHECK(b.complete_chat({{Role::User, "needle"}, {Role::Assistant, "x"}, {Role::User, "y"}},
                              {})
                  .text == "from substring");
        CHECK(b.complete_chat({{Role::User, "exact hit"}, {Role::Assistant, "x"},
                               {Role::User, "tail"}},
                              {})
                  .text == "fallback");
    }
    SUBCASE("usage comes from the matched rule") {
        ChatResult r = b.complete_chat({{Role::User, "needle"}}, {});
        CHECK(r.usage.prompt == 1);
        CHECK(r.usage.completion == 2);
    }
}

TEST_CASE("scripted sequence rules fire positionally and exhaust loudly") {
    auto b = testsup::sequence({"first", "second"});
    CHECK(b->complete_chat({{Role::User, "x"}}, {}).text == "first");
    CHECK(b->complete_chat({{Role::User, "y"}}, {}).text == "second");
    CHECK_THROWS_AS(b->complete_chat({{Role::User, "z"}}, {}), ScriptExhausted);
    CHECK(b->call_count() == 3);  // the failed call is still logged
}

TEST_CASE("scripted backend records calls with params") {
    auto b = testsup::echo("ok");
    GenerationParams p;
    p.temperature = 0.0;
    p.max_tokens = 7;
    b->complete_chat({{Role::User, "hello"}}, p);
    auto calls = b->calls();
    REQUIRE(calls.size() == 1);
    CHECK(calls[0].messages[0].content == "hello");
    CHECK(calls[0].params == p);
}

TEST_CASE("script rules parse from json") {
    auto rules = ScriptedBackend::rules_from_json(json::parse(R"([
        {"match": {"exact": "e"}, "reply": "r1"},
        {"match": {"substring": "s"}, "reply": "r2", "usage": {"prompt_tokens": 3, "completion_tokens": 4}},
        {"match": {"sequence": 0}, "reply": "r3"}
    ])"));
    REQUIRE(rules.size() == 3);
    CHECK(rules[0].kind == ScriptRule::Kind::Exact);
    CHECK(rules[1].usage.completion == 4);
    CHECK(rules[2].kind == ScriptRule::Kind::Sequence);
    CHECK_THROWS_AS(ScriptedBackend::rules_from_json(json::parse(R"([{"reply": "x"}])")),
                    SchemaError);
}

TEST_CASE("strip_reasoning drops one leading think block") {
    CHECK(strip_reasoning("<think>internal</think>answer", "<think>", "</think>").text == "answer");
    CHECK(strip_reasoning("  <think>a</think>\n\n  real", "<think>", "</think>").text == "real");
    CHECK(strip_reasoning("no block here", "<think>", "</think>").text == "no block here");

    SUBCASE("nested blocks are closed correctly") {
        auto r = strip_reasoning("<think>outer <think>inner</think> more</think>kept", "<think>",
                                 "</think>");
        CHECK(r.text == "kept");
        CHECK_FALSE(r.unclosed);
    }
    SUBCASE("unclosed block flags and empties") {
        auto r = strip_reasoning("<think>never ends", "<think>", "</think>");
        CHECK(r.text.empty());
        CHECK(r.unclosed);
    }
    SUBCASE("a block after real text is not stripped") {
        CHECK(strip_reasoning("text <think>x</think>", "<think>", "</think>").text ==
              "text <think>x</think>");
    }
}

TEST_CASE("rate limiter admits at most ceil(rps) starts per window") {
    VirtualClock clock;
    RateLimiter limiter(2.0, clock);
    limiter.acquire();
    limiter.acquire();
    CHECK(clock.now_ms() == 0);
    limiter.acquire();  // must wait for the window to slide
    CHECK(clock.now_ms() >= 1000);

    SUBCASE("disengaged limiter never sleeps") {
        VirtualClock c2;
        RateLimiter free_limiter(std::nullopt, c2);
        for (int i = 0; i < 100; ++i) free_limiter.acquire();
        CHECK(c2.now_ms() == 0);
    }
}

TEST_CASE("metered backend accumulates usage and call counts") {
    auto inner = testsup::echo("ok", {10, 5});
    MeteredBackend metered(inner);
    metered.complete_chat({{Role::User, "a"}}, {});
    metered.complete_chat({{Role::User, "b"}}, {});
    CHECK(metered.usage().prompt == 20);
    CHECK(metered.usage().completion == 10);
    CHECK(metered.call_count() == 2);
}

TEST_CASE("backend profile json round trip keeps the token out of line") {
    BackendProfile p;
    p.endpoint_url = "http://127.0.0.1:9999/v1";
    p.model_name = "m";
    p.auth_token_ref = "MY_TOKEN_ENV";
    p.max_retries = 2;
    p.rate_limit_rps = 4.0;
    json j = p;
    CHECK(j.dump().find("MY_TOKEN_ENV") != std::string::npos);
    BackendProfile back = j.get<BackendProfile>();
    CHECK(back.endpoint_url == p.endpoint_url);
    CHECK(back.rate_limit_rps == p.rate_limit_rps);
}

namespace {

struct LocalServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit LocalServer(const std::function<void(const httplib::Request&, httplib::Response&)>& h) {
        server.Post("/v1/chat/completions", h);
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        thread.join();
    }
};

json ok_completion(const std::string& text) {
    return json{{"id", "x"},
                {"choices", json::array({json{{"index", 0},
                                              {"message", json{{"role", "assistant"},
                                                               {"content", text}}},
                                              {"finish_reason", "stop"}}})},
                {"usage", json{{"prompt_tokens", 9}, {"completion_tokens", 4}}}};
}

}  // namespace

TEST_CASE("http backend completes against an openai-shaped server") {
    std::atomic<int> hits{0};
    json seen_body;
    std::mutex seen_mutex;
    LocalServer srv([&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        {
            std::lock_guard<std::mutex> lock(seen_mutex);
            seen_body = json::parse(req.body);
        }
        res.set_content(ok_completion("<think>plan</think>hello back").dump(), "application/json");
    });

    BackendProfile p;
    p.endpoint_url = "http://127.0.0.1:" + std::to_string(srv.port) + "/v1";
    p.model_name = "test-model";
    HttpBackend backend(p);
    GenerationParams params;
    params.temperature = 0.25;
    params.seed = 42;
    ChatResult r = backend.complete_chat({{Role::User, "hi"}}, params);

    CHECK(r.text == "hello back");  // reasoning block stripped
    CHECK(r.usage.prompt == 9);
    CHECK(hits == 1);
    std::lock_guard<std::mutex> lock(seen_mutex);
    CHECK(seen_body["model"] == "test-model");
    CHECK(seen_body["temperature"] == doctest::Approx(0.25));
    CHECK(seen_body["seed"] == 42);
    CHECK(seen_body["messages"][0]["role"] == "user");
}

TEST_CASE("http backend retries 5xx and gives up on 4xx") {
    SUBCASE("500 then success") {
        std::atomic<int> hits{0};
        LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
            if (++hits == 1) {
                res.status = 500;
                res.set_content("boom", "text/plain");
            } else {
                res.set_content(ok_completion("recovered").dump(), "application/json");
            }
        });
        BackendProfile p;
        p.endpoint_url = "http://127.0.0.1:" + std::to_string(srv.port) + "/v1";
        p.model_name = "m";
        p.retry_backoff_ms = 1;
        HttpBackend backend(p);
        CHECK(backend.complete_chat({{Role::User, "q"}}, {}).text == "recovered");
        CHECK(hits == 2);
    }
    SUBCASE("400 raises ApiError without retry") {
        std::atomic<int> hits{0};
        LocalServer srv([&](const httplib::Request&, httplib::Response& res) {
            ++hits;
            res.status = 400;
            res.set_content("{\"error\": \"bad\"}", "application/json");
        });
        BackendProfile p;
        p.endpoint_url = "http://127.0.0.1:" + std::to_string(srv.port) + "/v1";
        p.model_name = "m";
        p.retry_backoff_ms = 1;
        HttpBackend backend(p);
        CHECK_THROWS_AS(backend.complete_chat({{Role::User, "q"}}, {}), ApiError);
        CHECK(hits == 1);
    }
    SUBCASE("unreachable endpoint exhausts into TransportError") {
        BackendProfile p;
        p.endpoint_url = "http://127.0.0.1:1/v1";
        p.model_name = "m";
        p.max_retries = 1;
        p.retry_backoff_ms = 1;
        HttpBackend backend(p);
        CHECK_THROWS_AS(backend.complete_chat({{Role::User, "q"}}, {}), TransportError);
    }
}

TEST_CASE("http backend resolves auth tokens from the environment only") {
    BackendProfile p;
    p.endpoint_url = "http://127.0.0.1:9/v1";
    p.model_name = "m";
    p.auth_token_ref = "INTENTGATE_TEST_UNSET_TOKEN";
    ::unsetenv("INTENTGATE_TEST_UNSET_TOKEN");
    HttpBackend backend(p);
    CHECK_THROWS_AS(backend.complete_chat({{Role::User, "q"}}, {}), ConfigError);
}
