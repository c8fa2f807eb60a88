#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "intentgate/gateway.hpp"
#include "intentgate/runner.hpp"
#include "intentgate/templates.hpp"

namespace {

volatile std::sig_atomic_t g_stop_requested = 0;

extern "C" void handle_stop_signal(int) { g_stop_requested = 1; }

intentgate::json load_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw intentgate::IoError("cannot open " + path);
    return intentgate::json::parse(in, nullptr, true, true);
}

std::string fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    return buf;
}

struct ServiceConfig {
    intentgate::json raw;
    std::string base_dir;
    std::string templates_dir;
    intentgate::BackendRegistry registry;
    intentgate::DefenseSpec defense_spec;
    std::uint64_t seed = 0;
};

/// Shared config shape for replay and serve: backends, one defense, a judge.
ServiceConfig load_service_config(const std::string& path) {
    ServiceConfig sc;
    sc.raw = load_json_file(path);
    sc.base_dir = std::filesystem::path(path).parent_path().string();
    try {
        sc.templates_dir = intentgate::resolve_path(
            sc.base_dir, sc.raw.value("templates_dir", std::string("templates")));
        sc.registry = intentgate::BackendRegistry::from_json(sc.raw.at("backends"), sc.base_dir);
        const intentgate::json& d = sc.raw.at("defense");
        sc.defense_spec = {d.at("name").get<std::string>(), d.at("kind").get<std::string>(), d};
        sc.seed = sc.raw.value("seed", std::uint64_t{0});
    } catch (const intentgate::json::exception& e) {
        throw intentgate::ConfigError("invalid config: " + std::string(e.what()));
    }
    return sc;
}

int run_eval_cmd(const std::string& config, bool resume, bool test_mode,
                 std::size_t abort_after, const std::optional<std::uint64_t>& seed,
                 const std::optional<std::string>& output) {
    intentgate::ExperimentPlan plan = intentgate::ExperimentPlan::from_file(config);
    intentgate::RunOptions opts;
    opts.resume = resume;
    opts.test_mode = test_mode;
    opts.abort_after_trials = abort_after;
    opts.seed_override = seed;
    opts.output_override = output;
    intentgate::RunReport report = intentgate::run_eval(plan, opts);
    std::cout << intentgate::render_report(report, intentgate::ReportFormat::Markdown, 1);
    const std::string out_dir = output ? *output : plan.output_dir;
    std::cout << "\nartifacts: " << out_dir << "/trials.jsonl, report.md, report.csv, phases.csv\n";
    return 0;
}

int report_cmd(const std::string& input, const std::string& format) {
    auto trials = intentgate::read_trials_jsonl(input);
    intentgate::RunReport report = intentgate::aggregate_trials(trials);
    if (format == "csv")
        std::cout << intentgate::render_report(report, intentgate::ReportFormat::Csv, 1);
    else if (format == "phases")
        std::cout << intentgate::render_phases_csv(report);
    else
        std::cout << intentgate::render_report(report, intentgate::ReportFormat::Markdown, 1);
    return 0;
}

int replay_cmd(const std::string& config, const std::string& transcripts,
               const std::optional<std::string>& output, bool test_mode) {
    ServiceConfig sc = load_service_config(config);
    auto cases = intentgate::load_transcripts(transcripts);
    std::ofstream out;
    if (output) {
        out.open(*output, std::ios::binary | std::ios::trunc);
        if (!out) throw intentgate::IoError("cannot write " + *output);
    }
    std::vector<intentgate::JudgeVerdict> verdicts;
    std::size_t jailbroken = 0, errored = 0;
    for (const auto& c : cases) {
        // fresh backend instances per case so scripted sequence state and
        // metering stay case-local
        intentgate::TrialBackends backends(sc.registry);
        auto defense =
            intentgate::make_defense(sc.defense_spec, backends, sc.templates_dir, sc.seed);
        intentgate::JudgeConfig judge = intentgate::make_judge_config(
            sc.raw.value("judge", intentgate::json::object()), backends, sc.templates_dir);
        intentgate::TrialRecord record = intentgate::replay_transcript(c, *defense, judge);
        record.token_usage = backends.total_usage();
        if (test_mode) record.wall_time_ms = 0;
        verdicts.push_back(record.verdict);
        if (record.verdict.jailbroken) ++jailbroken;
        if (record.error) ++errored;
        if (out) out << intentgate::json(record).dump() << '\n';
    }
    const double asr = intentgate::compute_asr(verdicts);
    std::cout << "replayed " << cases.size() << " cases, " << jailbroken << " jailbroken, "
              << errored << " errored\n";
    std::cout << "ASR: " << fixed(asr, 2) << "%\n";
    return 0;
}

int serve_cmd(const std::string& config, const std::optional<int>& port_override,
              bool test_mode) {
    ServiceConfig sc = load_service_config(config);
    intentgate::TrialBackends backends(sc.registry);
    auto defense = intentgate::make_defense(sc.defense_spec, backends, sc.templates_dir, sc.seed);

    intentgate::GatewayConfig gw;
    if (sc.raw.contains("gateway")) {
        const intentgate::json& g = sc.raw["gateway"];
        gw.host = g.value("host", gw.host);
        gw.port = g.value("port", gw.port);
        gw.expose_decision_metadata =
            g.value("expose_decision_metadata", gw.expose_decision_metadata);
        gw.max_request_bytes = g.value("max_request_bytes", gw.max_request_bytes);
    }
    if (port_override) gw.port = *port_override;
    gw.test_mode = test_mode;

    intentgate::GatewayServer server(gw, defense);
    server.start();
    std::cout << "defense '" << defense->name() << "' listening on http://" << gw.host << ":"
              << server.port() << "\n"
              << "endpoints: POST /v1/chat/completions, GET /health, GET /metrics\n";
    std::signal(SIGINT, handle_stop_signal);
    std::signal(SIGTERM, handle_stop_signal);
    while (!g_stop_requested && server.running())
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    server.stop();
    std::cout << "stopped\n";
    return 0;
}

int check_templates_cmd(const std::string& templates_dir, const std::string& golden_dir,
                        bool freeze) {
    if (freeze) {
        intentgate::freeze_templates(templates_dir, golden_dir);
        std::cout << "froze goldens to " << golden_dir << "\n";
        return 0;
    }
    auto checks = intentgate::check_templates(templates_dir, golden_dir);
    for (const auto& c : checks)
        std::printf("%-24s %s\n", c.name.c_str(), intentgate::to_string(c.status).c_str());
    if (!intentgate::all_passed(checks)) {
        std::cout << "template drift detected\n";
        return 1;
    }
    std::cout << "all templates match their goldens\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"intention-gated generation: adversarial evaluation harness and gateway"};
    app.require_subcommand(1);

    std::string config, input, transcripts, output_str;
    std::string format = "md";
    std::string templates_dir = "templates", golden_dir = "tests/golden";
    std::uint64_t seed = 0;
    std::size_t abort_after = 0;
    int port = 0;
    bool resume = false, test_mode = false, freeze = false;

    auto* eval = app.add_subcommand("run-eval", "run a goal x attack x defense evaluation grid");
    eval->add_option("--config", config, "experiment plan (json)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* eval_out = eval->add_option("--output", output_str, "override the plan's output dir");
    auto* eval_seed = eval->add_option("--seed", seed, "override the plan's seed");
    eval->add_flag("--resume", resume, "skip trials already present in trials.jsonl");
    eval->add_flag("--test-mode", test_mode, "zero wall times and timestamps");
    eval->add_option("--abort-after", abort_after,
                     "stop after writing this many new trials (testing hook)");

    auto* rep = app.add_subcommand("report", "aggregate a trials.jsonl into tables");
    rep->add_option("--input", input, "trials.jsonl path")->required()->check(CLI::ExistingFile);
    rep->add_option("--format", format, "md, csv, or phases")
        ->check(CLI::IsMember({"md", "csv", "phases"}));

    auto* rpl = app.add_subcommand("replay", "drive recorded multi-turn transcripts at a defense");
    rpl->add_option("--config", config, "service config (backends, defense, judge)")
        ->required()
        ->check(CLI::ExistingFile);
    rpl->add_option("--transcripts", transcripts, "transcript cases (jsonl)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* rpl_out = rpl->add_option("--output", output_str, "write per-case trial records here");
    rpl->add_flag("--test-mode", test_mode, "zero wall times");

    auto* srv = app.add_subcommand("serve", "expose a defended model over HTTP");
    srv->add_option("--config", config, "service config (backends, defense, gateway)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* srv_port = srv->add_option("--port", port, "override the configured port");
    srv->add_flag("--test-mode", test_mode, "zero completion ids and timestamps");

    auto* chk = app.add_subcommand("check-templates", "compare template renders against goldens");
    chk->add_option("--templates", templates_dir, "templates directory");
    chk->add_option("--golden", golden_dir, "goldens directory");
    chk->add_flag("--freeze", freeze, "rewrite the goldens from current renders");

    CLI11_PARSE(app, argc, argv);

    try {
        if (eval->parsed())
            return run_eval_cmd(config, resume, test_mode, abort_after,
                                *eval_seed ? std::optional<std::uint64_t>(seed) : std::nullopt,
                                *eval_out ? std::optional<std::string>(output_str) : std::nullopt);
        if (rep->parsed()) return report_cmd(input, format);
        if (rpl->parsed())
            return replay_cmd(config, transcripts,
                              *rpl_out ? std::optional<std::string>(output_str) : std::nullopt,
                              test_mode);
        if (srv->parsed())
            return serve_cmd(config, *srv_port ? std::optional<int>(port) : std::nullopt,
                             test_mode);
        if (chk->parsed()) return check_templates_cmd(templates_dir, golden_dir, freeze);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
