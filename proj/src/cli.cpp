#include "mapagent/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "mapagent/parallel.hpp"
#include "mapagent/rl.hpp"

namespace mapagent {

namespace fs = std::filesystem;

namespace {

std::string_view mode_name(AgentMode m) { return m == AgentMode::Direct ? "direct" : "thinking-with-map"; }

AgentMode parse_mode(const std::string& s) {
    if (s == "thinking-with-map") {
        return AgentMode::ThinkingWithMap;
    }
    if (s == "direct") {
        return AgentMode::Direct;
    }
    throw std::invalid_argument("mode must be 'thinking-with-map' or 'direct'");
}

BackendMode parse_backend(const std::string& s) {
    if (s == "live") {
        return BackendMode::Live;
    }
    if (s == "simulated") {
        return BackendMode::Simulated;
    }
    throw std::invalid_argument("backend must be 'live' or 'simulated'");
}

ReportFormat parse_format(const std::string& s) {
    if (s == "markdown") {
        return ReportFormat::Markdown;
    }
    if (s == "json") {
        return ReportFormat::Json;
    }
    throw std::invalid_argument("format must be 'markdown' or 'json'");
}

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_relative() && !base.empty() ? base / path : path;
}

bool looks_secret(std::string key) {
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (key.ends_with("_env")) {
        return false;
    }
    for (std::string_view bad : {"key", "token", "secret", "password"}) {
        if (key.find(bad) != std::string::npos) {
            return true;
        }
    }
    return false;
}

void write_file(const fs::path& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("cannot write " + path.string());
    }
    f << body;
    if (!f.flush()) {
        throw std::runtime_error("failed writing " + path.string());
    }
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("cannot read " + path.string());
    }
    auto j = nlohmann::json::parse(f, nullptr, false);
    if (j.is_discarded()) {
        throw std::runtime_error(path.string() + " is not valid JSON");
    }
    return j;
}

std::string file_stem_for(const std::string& id) {
    std::string out = id;
    for (char& c : out) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.') {
            c = '_';
        }
    }
    return out;
}

std::string default_run_id() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "run-%Y%m%d-%H%M%S", &tm);
    return buf;
}

}  // namespace

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json j;
    j["dataset"] = dataset.generic_string();
    j["backend"] = map.mode == BackendMode::Live ? "live" : "simulated";
    j["fixture"] = map.fixture_path.generic_string();
    j["map"] = {{"provider_a_base_url", map.provider_a_base_url},
                {"provider_b_base_url", map.provider_b_base_url},
                {"provider_a_key_env", map.provider_a_key_env},
                {"provider_b_key_env", map.provider_b_key_env},
                {"max_requests_per_second", map.max_requests_per_second},
                {"default_region_tag", map.default_region_tag},
                {"max_search_results", map.max_search_results},
                {"max_tip_results", map.max_tip_results},
                {"map_width", map.map_width},
                {"map_height", map.map_height},
                {"default_zoom", map.default_zoom}};
    auto endpoint = [](const PolicyEndpoint& e) {
        return nlohmann::ordered_json{{"url", e.base_url},
                                      {"model", e.model},
                                      {"api_key_env", e.api_key_env},
                                      {"temperature", e.sampling.temperature},
                                      {"top_p", e.sampling.top_p},
                                      {"top_k", e.sampling.top_k},
                                      {"max_response_tokens", e.sampling.max_response_tokens},
                                      {"timeout_ms", e.timeout.count()},
                                      {"max_in_flight", e.max_in_flight}};
    };
    j["policy"] = endpoint(policy);
    j["verifier"] = endpoint(verifier);
    j["policy_script"] = policy_script.generic_string();
    j["verifier_script"] = verifier_script.generic_string();
    j["mode"] = mode_name(mode);
    j["web_search"] = web_search;
    j["budget"] = {{"max_turns", budget.max_turns},
                   {"max_tool_response_chars", budget.max_tool_response_chars},
                   {"wall_clock_ms", budget.wall_clock.count()}};
    j["n"] = n;
    j["fanout"] = fanout;
    j["out"] = out.generic_string();
    j["run_id"] = run_id;
    j["seed"] = seed;
    j["format"] = format == ReportFormat::Json ? "json" : "markdown";
    return j;
}

void apply_config_json(RunConfig& c, const nlohmann::json& j, const fs::path& base) {
    if (!j.is_object()) {
        throw std::invalid_argument("config file must hold a JSON object");
    }
    for (const auto& [key, value] : j.items()) {
        if (looks_secret(key)) {
            throw std::invalid_argument("config key '" + key +
                                        "' looks like a secret; credentials are read from environment variables only");
        }
        auto str = [&] { return value.get<std::string>(); };
        if (key == "dataset") {
            c.dataset = resolve(base, str());
        } else if (key == "backend") {
            c.map.mode = parse_backend(str());
        } else if (key == "fixture") {
            c.map.fixture_path = resolve(base, str());
        } else if (key == "policy_url") {
            c.policy.base_url = str();
        } else if (key == "policy_model") {
            c.policy.model = str();
        } else if (key == "verifier_url") {
            c.verifier.base_url = str();
        } else if (key == "verifier_model") {
            c.verifier.model = str();
        } else if (key == "policy_script") {
            c.policy_script = resolve(base, str());
        } else if (key == "verifier_script") {
            c.verifier_script = resolve(base, str());
        } else if (key == "mode") {
            c.mode = parse_mode(str());
        } else if (key == "web_search") {
            c.web_search = value.get<bool>();
        } else if (key == "max_turns") {
            c.budget.max_turns = value.get<int>();
        } else if (key == "max_tool_response_chars") {
            c.budget.max_tool_response_chars = value.get<std::size_t>();
        } else if (key == "wall_clock_seconds") {
            c.budget.wall_clock = std::chrono::milliseconds(static_cast<long long>(value.get<double>() * 1000.0));
        } else if (key == "n") {
            c.n = value.get<int>();
        } else if (key == "fanout") {
            c.fanout = value.get<int>();
        } else if (key == "out") {
            c.out = resolve(base, str());
        } else if (key == "run_id") {
            c.run_id = str();
        } else if (key == "seed") {
            c.seed = value.get<unsigned>();
        } else if (key == "format") {
            c.format = parse_format(str());
        } else if (key == "temperature") {
            c.policy.sampling.temperature = value.get<double>();
        } else if (key == "top_p") {
            c.policy.sampling.top_p = value.get<double>();
        } else if (key == "top_k") {
            c.policy.sampling.top_k = value.get<int>();
        } else if (key == "max_response_tokens") {
            c.policy.sampling.max_response_tokens = value.get<int>();
        } else if (key == "map_requests_per_second") {
            c.map.max_requests_per_second = value.get<double>();
        } else if (key == "default_region") {
            c.map.default_region_tag = str();
        } else if (key == "provider_a_base_url") {
            c.map.provider_a_base_url = str();
        } else if (key == "provider_b_base_url") {
            c.map.provider_b_base_url = str();
        } else if (key == "provider_a_key_env") {
            c.map.provider_a_key_env = str();
        } else if (key == "provider_b_key_env") {
            c.map.provider_b_key_env = str();
        } else {
            throw std::invalid_argument("unknown config key '" + key + "'");
        }
    }
}

void apply_environment(RunConfig& c) {
    auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (v == nullptr || *v == '\0') {
            return std::nullopt;
        }
        return std::string(v);
    };
    if (auto v = env("MAPAGENT_BACKEND")) {
        c.map.mode = parse_backend(*v);
    }
    if (auto v = env("MAPAGENT_FIXTURE")) {
        c.map.fixture_path = *v;
    }
    if (auto v = env("MAPAGENT_POLICY_URL")) {
        c.policy.base_url = *v;
    }
    if (auto v = env("MAPAGENT_POLICY_MODEL")) {
        c.policy.model = *v;
    }
    if (auto v = env("MAPAGENT_VERIFIER_URL")) {
        c.verifier.base_url = *v;
    }
    if (auto v = env("MAPAGENT_VERIFIER_MODEL")) {
        c.verifier.model = *v;
    }
    if (auto v = env("MAPAGENT_OUT")) {
        c.out = *v;
    }
}

namespace {

struct Flags {
    std::optional<std::string> config;
    std::optional<std::string> dataset;
    std::optional<std::string> backend;
    std::optional<std::string> fixture;
    std::optional<std::string> policy_url;
    std::optional<std::string> policy_model;
    std::optional<std::string> verifier_url;
    std::optional<std::string> verifier_model;
    std::optional<std::string> policy_script;
    std::optional<std::string> verifier_script;
    std::optional<std::string> mode;
    std::optional<int> n;
    std::optional<int> max_turns;
    std::optional<int> fanout;
    std::optional<std::string> out;
    std::optional<std::string> run_id;
    std::optional<std::string> format;
    std::optional<unsigned> seed;
    bool web_search = false;
    bool timings = false;
    std::vector<std::string> references;
    std::optional<std::string> groups;
    std::optional<std::string> from;
    double threshold_km = kTierThresholdMeters / 1000.0;
    int quorum = kTierQuorum;
};

RunConfig resolve_config(const Flags& f) {
    RunConfig c;
    c.verifier.api_key_env = "VERIFIER_API_KEY";
    apply_environment(c);
    if (f.config) {
        const fs::path path(*f.config);
        apply_config_json(c, read_json_file(path), path.parent_path());
    }
    if (f.dataset) c.dataset = *f.dataset;
    if (f.backend) c.map.mode = parse_backend(*f.backend);
    if (f.fixture) c.map.fixture_path = *f.fixture;
    if (f.policy_url) c.policy.base_url = *f.policy_url;
    if (f.policy_model) c.policy.model = *f.policy_model;
    if (f.verifier_url) c.verifier.base_url = *f.verifier_url;
    if (f.verifier_model) c.verifier.model = *f.verifier_model;
    if (f.policy_script) c.policy_script = *f.policy_script;
    if (f.verifier_script) c.verifier_script = *f.verifier_script;
    if (f.mode) c.mode = parse_mode(*f.mode);
    if (f.n) c.n = *f.n;
    if (f.max_turns) c.budget.max_turns = *f.max_turns;
    if (f.fanout) c.fanout = *f.fanout;
    if (f.out) c.out = *f.out;
    if (f.run_id) c.run_id = *f.run_id;
    if (f.format) c.format = parse_format(*f.format);
    if (f.seed) c.seed = *f.seed;
    if (f.web_search) c.web_search = true;
    if (f.timings) c.write_timings = true;
    if (c.run_id.empty()) {
        c.run_id = default_run_id();
    }
    return c;
}

/// Per-sample scripted replies: {"<sample id>" | "*": [turns] | {"slots": [[turns], ...]}}.
class ScriptBook {
public:
    explicit ScriptBook(nlohmann::json doc) : doc_(std::move(doc)) {
        if (!doc_.is_object()) {
            throw std::invalid_argument("script file must hold a JSON object keyed by sample id");
        }
    }

    [[nodiscard]] std::unique_ptr<ScriptedPolicy> policy(const std::string& id, int slot,
                                                         const std::string& name) const {
        nlohmann::json turns = nlohmann::json::array();
        const nlohmann::json* entry = nullptr;
        if (doc_.contains(id)) {
            entry = &doc_.at(id);
        } else if (doc_.contains("*")) {
            entry = &doc_.at("*");
        }
        if (entry != nullptr) {
            if (entry->is_object() && entry->contains("slots")) {
                const auto& slots = entry->at("slots");
                if (!slots.empty()) {
                    turns = slots.at(static_cast<std::size_t>(slot) % slots.size());
                }
            } else {
                turns = *entry;
            }
        }
        return std::unique_ptr<ScriptedPolicy>(new ScriptedPolicy(ScriptedPolicy::from_json(turns, name)));
    }

private:
    nlohmann::json doc_;
};

struct Session {
    RunConfig cfg;
    fs::path run_dir;
    std::vector<BenchSample> samples;
    ToolRegistry registry{std::vector<ToolSpec>{}};
    std::unique_ptr<HttplibTransport> own_transport;
    HttpTransport* transport = nullptr;
    std::unique_ptr<JsonlLog> policy_log;
    std::unique_ptr<JsonlLog> verifier_log;
    std::unique_ptr<JsonlLog> audit_log;
    std::unique_ptr<JsonlLog> timings;
    std::unique_ptr<MapBackend> env;
    std::unique_ptr<HttpChatPolicy> policy_http;
    std::unique_ptr<HttpChatPolicy> verifier_http;
    std::optional<ScriptBook> policy_script;
    std::optional<ScriptBook> verifier_script;

    [[nodiscard]] std::string policy_id() const { return policy_script ? "scripted" : cfg.policy.model; }
    [[nodiscard]] std::string verifier_id() const {
        if (cfg.n < 2) {
            return {};
        }
        return verifier_script ? "scripted" : cfg.verifier.model;
    }

    [[nodiscard]] GeoQuery query_for(const BenchSample& s) const {
        GeoQuery q;
        q.image_path = s.image;
        q.instruction = std::string(cfg.mode == AgentMode::Direct ? kDirectAnswerPrompt : kThinkingWithMapPrompt);
        q.region_hint = s.region;
        q.sample_id = s.id;
        return q;
    }

    [[nodiscard]] nlohmann::ordered_json metadata(const BenchSample& s, const std::string& label) const {
        return {{"ground_truth", {{"lat", s.truth.lat()}, {"lon", s.truth.lon()}}},
                {"tier", tier_name(s.tier)},
                {"split", split_name(s.split)},
                {"region", s.region},
                {"run",
                 {{"label", label},
                  {"model", policy_id()},
                  {"mode", cfg.n > 1 ? "parallel-x" + std::to_string(cfg.n) : std::string(mode_name(cfg.mode))},
                  {"n", cfg.n},
                  {"verifier", verifier_id()}}}};
    }
};

std::string require_env(const std::string& name, const std::string& what) {
    const char* v = std::getenv(name.c_str());
    if (v == nullptr || *v == '\0') {
        throw std::runtime_error(what + " needs environment variable " + name);
    }
    return v;
}

/// Validates the configuration, resolves credentials and creates the run directory.
std::unique_ptr<Session> open_session(RunConfig cfg, const CliHooks& hooks, bool needs_verifier) {
    auto s = std::make_unique<Session>();
    s->cfg = std::move(cfg);
    const RunConfig& c = s->cfg;
    if (c.dataset.empty()) {
        throw std::invalid_argument("--dataset is required");
    }
    if (c.n < 1) {
        throw std::invalid_argument("--n must be at least 1");
    }
    if (c.fanout < 1) {
        throw std::invalid_argument("--fanout must be at least 1");
    }
    c.budget.validate();
    c.map.validate();

    s->transport = hooks.transport;
    auto transport = [&]() -> HttpTransport& {
        if (s->transport == nullptr) {
            s->own_transport = std::make_unique<HttplibTransport>();
            s->transport = s->own_transport.get();
        }
        return *s->transport;
    };

    std::optional<ProviderCredentials> creds;
    if (c.map.mode == BackendMode::Live) {
        creds = ProviderCredentials::from_environment(c.map);
    } else if (c.map.fixture_path.empty()) {
        throw std::invalid_argument("simulated backend needs --fixture");
    }
    std::string policy_key;
    if (!c.policy_script.empty()) {
        s->policy_script.emplace(read_json_file(c.policy_script));
    } else {
        c.policy.validate();
        policy_key = require_env(c.policy.api_key_env, "the policy endpoint");
    }
    std::string verifier_key;
    if (needs_verifier && c.n > 1) {
        if (!c.verifier_script.empty()) {
            s->verifier_script.emplace(read_json_file(c.verifier_script));
        } else {
            c.verifier.validate();
            verifier_key = require_env(c.verifier.api_key_env, "the verifier endpoint");
        }
    }

    s->samples = load_dataset(c.dataset);
    if (c.mode == AgentMode::ThinkingWithMap) {
        s->registry = c.web_search ? ToolRegistry::with_web_search() : ToolRegistry::standard();
    }

    s->run_dir = c.out / c.run_id;
    if (fs::exists(s->run_dir)) {
        throw std::runtime_error("run directory " + s->run_dir.string() + " already exists; pick another --run-id");
    }
    fs::create_directories(s->run_dir / "logs");
    write_file(s->run_dir / "effective_config.json", c.to_json().dump(2) + "\n");

    if (c.map.mode == BackendMode::Live) {
        s->audit_log = std::make_unique<JsonlLog>(s->run_dir / "logs" / "map_audit.jsonl");
        s->env = std::make_unique<LiveMapBackend>(c.map, *creds, transport(), Clock::system(), s->audit_log.get());
    } else {
        auto fixture = std::make_shared<const PoiFixture>(PoiFixture::load(c.map.fixture_path));
        s->env = std::make_unique<SimulatedMapBackend>(std::move(fixture), c.map);
    }
    if (!s->policy_script) {
        s->policy_log = std::make_unique<JsonlLog>(s->run_dir / "logs" / "policy_calls.jsonl");
        s->policy_http = std::make_unique<HttpChatPolicy>(c.policy, policy_key, transport(), s->policy_log.get());
    }
    if (needs_verifier && c.n > 1 && !s->verifier_script) {
        s->verifier_log = std::make_unique<JsonlLog>(s->run_dir / "logs" / "verifier_calls.jsonl");
        s->verifier_http =
            std::make_unique<HttpChatPolicy>(c.verifier, verifier_key, transport(), s->verifier_log.get());
    }
    if (c.write_timings) {
        s->timings = std::make_unique<JsonlLog>(s->run_dir / "timings.jsonl");
    }
    return s;
}

bool stop_requested(const CliHooks& hooks) { return hooks.stop != nullptr && hooks.stop->load(); }

/// Runs `work` over every sample with at most `workers` at a time. Returns false when interrupted.
bool for_each_sample(const std::vector<BenchSample>& samples, int workers, const CliHooks& hooks,
                     const std::function<bool(const BenchSample&)>& work) {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> interrupted{false};
    std::mutex mu;
    std::exception_ptr failure;
    auto loop = [&] {
        while (true) {
            {
                std::lock_guard lock(mu);
                if (failure) {
                    return;
                }
            }
            const std::size_t i = next.fetch_add(1);
            if (i >= samples.size()) {
                return;
            }
            if (stop_requested(hooks) || interrupted.load()) {
                interrupted = true;
                return;
            }
            try {
                if (!work(samples[i])) {
                    interrupted = true;
                    return;
                }
                if (hooks.on_sample_done) {
                    hooks.on_sample_done(samples[i].id);
                }
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) {
                    failure = std::current_exception();
                }
                return;
            }
        }
    };
    {
        std::vector<std::jthread> pool;
        const int n = std::max(1, std::min<int>(workers, static_cast<int>(samples.size())));
        for (int i = 0; i < n; ++i) {
            pool.emplace_back(loop);
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return !interrupted.load();
}

void record_timing(Session& s, const std::string& id, double seconds) {
    if (s.timings) {
        s.timings->append(nlohmann::ordered_json{{"sample_id", id}, {"wall_seconds", seconds}}.dump());
    }
}

int finish_report(Session& s, const fs::path& docs_dir, bool completed, std::ostream& out, std::ostream& err) {
    std::vector<EvalReport> reports;
    try {
        reports = reports_from_logs(docs_dir);
    } catch (const std::exception& e) {
        err << "no report: " << e.what() << '\n';
        return completed ? kExitFailure : kExitInterrupted;
    }
    const std::string md = render_report(reports, ReportFormat::Markdown);
    const std::string js = render_report(reports, ReportFormat::Json);
    write_file(s.run_dir / "report.md", md);
    write_file(s.run_dir / "report.json", js);
    out << (s.cfg.format == ReportFormat::Json ? js : md);
    if (!completed) {
        err << "interrupted: partial results in " << s.run_dir.string() << '\n';
        return kExitInterrupted;
    }
    return kExitOk;
}

int cmd_run(const RunConfig& cfg, const CliHooks& hooks, std::ostream& out, std::ostream& err) {
    auto session = open_session(cfg, hooks, false);
    Session& s = *session;
    const fs::path dir = s.run_dir / "trajectories";
    fs::create_directories(dir);
    const std::string label(mode_name(s.cfg.mode));

    const bool completed = for_each_sample(s.samples, s.cfg.fanout, hooks, [&](const BenchSample& sample) {
        std::unique_ptr<ScriptedPolicy> scripted;
        ChatPolicy* policy = s.policy_http.get();
        if (s.policy_script) {
            scripted = s.policy_script->policy(sample.id, 0, "scripted");
            policy = scripted.get();
        }
        EpisodeOptions options;
        options.sampling = s.cfg.policy.sampling;
        const Trajectory t = run_episode(s.query_for(sample), *policy, *s.env, s.registry, s.cfg.budget, options);
        write_file(dir / (file_stem_for(sample.id) + ".json"),
                   trajectory_to_json(t, s.metadata(sample, label)).dump(2) + "\n");
        record_timing(s, sample.id, t.accounting.wall_seconds);
        return true;
    });
    return finish_report(s, dir, completed, out, err);
}

int cmd_parallel(const RunConfig& cfg, const CliHooks& hooks, std::ostream& out, std::ostream& err) {
    auto session = open_session(cfg, hooks, true);
    Session& s = *session;
    const fs::path dir = s.run_dir / "parallel";
    fs::create_directories(dir);
    const int n = s.cfg.n;
    const std::string label = n > 1 ? "verifier@" + std::to_string(n) : std::string(mode_name(s.cfg.mode));

    const bool completed = for_each_sample(s.samples, 1, hooks, [&](const BenchSample& sample) {
        std::vector<std::unique_ptr<ScriptedPolicy>> scripted;
        if (s.policy_script) {
            for (int slot = 0; slot < n; ++slot) {
                scripted.push_back(s.policy_script->policy(sample.id, slot, "scripted-" + std::to_string(slot)));
            }
        }
        PolicyForSlot policy_for = [&](int slot) -> ChatPolicy& {
            return s.policy_script ? static_cast<ChatPolicy&>(*scripted.at(static_cast<std::size_t>(slot)))
                                   : static_cast<ChatPolicy&>(*s.policy_http);
        };
        ParallelConfig pc;
        pc.n = n;
        pc.fanout = s.cfg.fanout;
        pc.budget = s.cfg.budget;
        pc.episode.sampling = s.cfg.policy.sampling;

        ParallelRun run;
        run.query = s.query_for(sample);
        run.trajectories = sample_parallel(run.query, policy_for, *s.env, s.registry, pc, hooks.stop);
        if (static_cast<int>(run.trajectories.size()) < n) {
            return false;
        }
        if (n > 1) {
            const bool any_answered = std::any_of(run.trajectories.begin(), run.trajectories.end(),
                                                  [](const Trajectory& t) { return t.answered(); });
            if (any_answered) {
                std::unique_ptr<ScriptedPolicy> scripted_verifier;
                ChatPolicy* verifier = s.verifier_http.get();
                if (s.verifier_script) {
                    scripted_verifier = s.verifier_script->policy(sample.id, 0, "scripted-verifier");
                    verifier = scripted_verifier.get();
                }
                run.verifier = verify(run.query, run.trajectories, *verifier, s.cfg.verifier.sampling);
            } else {
                run.verifier.fallback = true;
                run.verifier.error = "no answered candidate";
            }
        }
        write_file(dir / (file_stem_for(sample.id) + ".json"),
                   parallel_run_to_json(run, s.metadata(sample, label)).dump(2) + "\n");
        double wall = 0.0;
        for (const auto& t : run.trajectories) {
            wall = std::max(wall, t.accounting.wall_seconds);
        }
        record_timing(s, sample.id, wall);
        return true;
    });
    return finish_report(s, dir, completed, out, err);
}

std::map<std::string, GeoPoint> load_reference_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read reference predictions " + path.string());
    }
    std::map<std::string, GeoPoint> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("id")) {
            throw std::runtime_error(path.string() + " line " + std::to_string(lineno) + ": expected {id, lat, lon}");
        }
        if (!j.contains("lat") || !j.contains("lon") || j.at("lat").is_null() || j.at("lon").is_null()) {
            continue;
        }
        out.emplace(j.at("id").get<std::string>(), GeoPoint(j.at("lat").get<double>(), j.at("lon").get<double>()));
    }
    return out;
}

int cmd_tier(const RunConfig& cfg, const Flags& f, std::ostream& out) {
    if (cfg.dataset.empty()) {
        throw std::invalid_argument("--dataset is required");
    }
    ReferencePredictions refs;
    for (const auto& spec : f.references) {
        const auto eq = spec.find('=');
        const std::string name = eq == std::string::npos ? fs::path(spec).stem().string() : spec.substr(0, eq);
        const fs::path path = eq == std::string::npos ? fs::path(spec) : fs::path(spec.substr(eq + 1));
        if (!refs.emplace(name, load_reference_file(path)).second) {
            throw std::invalid_argument("reference model '" + name + "' given twice");
        }
    }
    const auto samples = load_dataset(cfg.dataset);
    const auto tiered = tier_samples(samples, refs, f.threshold_km * 1000.0, f.quorum);

    const fs::path run_dir = cfg.out / cfg.run_id;
    if (fs::exists(run_dir)) {
        throw std::runtime_error("run directory " + run_dir.string() + " already exists; pick another --run-id");
    }
    fs::create_directories(run_dir);
    auto eff = cfg.to_json();
    eff["references"] = f.references;
    eff["threshold_km"] = f.threshold_km;
    eff["quorum"] = f.quorum;
    write_file(run_dir / "effective_config.json", eff.dump(2) + "\n");
    const fs::path base = fs::absolute(run_dir);
    std::vector<BenchSample> absolute = tiered;
    for (auto& s : absolute) {
        s.image = fs::absolute(s.image).lexically_normal();
    }
    write_file(run_dir / "tiered_manifest.jsonl", dump_manifest(absolute, base));
    int easy = 0;
    for (const auto& s : tiered) {
        easy += s.tier == Tier::Easy ? 1 : 0;
    }
    out << "easy: " << easy << "\nhard: " << tiered.size() - easy << "\nmanifest: "
        << (run_dir / "tiered_manifest.jsonl").string() << '\n';
    return kExitOk;
}

std::vector<fs::path> json_documents(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw std::runtime_error(dir.string() + " is not a directory");
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".json") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    return files;
}

std::optional<GeoPoint> truth_from(const nlohmann::json& doc) {
    if (!doc.contains("metadata") || !doc.at("metadata").contains("ground_truth")) {
        return std::nullopt;
    }
    const auto& g = doc.at("metadata").at("ground_truth");
    return GeoPoint(g.at("lat").get<double>(), g.at("lon").get<double>());
}

int cmd_score(const RunConfig& cfg, const Flags& f, std::ostream& out) {
    if (!f.groups) {
        throw std::invalid_argument("--groups is required");
    }
    std::map<std::string, GeoPoint> dataset_truth;
    if (!cfg.dataset.empty()) {
        for (const auto& s : load_dataset(cfg.dataset)) {
            dataset_truth.emplace(s.id, s.truth);
        }
    }
    struct Pending {
        std::optional<GeoPoint> truth;
        std::vector<Trajectory> trajectories;
    };
    std::map<std::string, Pending> pending;
    const auto files = json_documents(*f.groups);
    if (files.empty()) {
        throw std::runtime_error("no trajectory documents in " + *f.groups);
    }
    for (const auto& path : files) {
        const auto doc = read_json_file(path);
        const std::string schema = doc.value("schema", "");
        std::string id;
        std::vector<Trajectory> trajs;
        if (schema == kTrajectorySchema) {
            trajs.push_back(trajectory_from_json(doc));
            id = trajs.back().query.sample_id;
        } else if (schema == kParallelRunSchema) {
            auto run = parallel_run_from_json(doc);
            id = doc.value("sample_id", "");
            trajs = std::move(run.trajectories);
        } else {
            throw std::runtime_error(path.string() + ": unknown document schema '" + schema + "'");
        }
        auto& p = pending[id];
        if (!p.truth) {
            p.truth = truth_from(doc);
        }
        for (auto& t : trajs) {
            p.trajectories.push_back(std::move(t));
        }
    }
    std::vector<RolloutGroup> groups;
    for (auto& [id, p] : pending) {
        if (!p.truth) {
            const auto it = dataset_truth.find(id);
            if (it == dataset_truth.end()) {
                throw std::runtime_error("no ground truth for sample '" + id + "'");
            }
            p.truth = it->second;
        }
        if (p.trajectories.size() < 2) {
            throw std::invalid_argument("group '" + id + "' has " + std::to_string(p.trajectories.size()) +
                                        " trajectory; advantages need at least 2");
        }
        groups.push_back(RolloutGroup::scored(id, *p.truth, std::move(p.trajectories)));
    }

    const fs::path run_dir = cfg.out / cfg.run_id;
    if (fs::exists(run_dir)) {
        throw std::runtime_error("run directory " + run_dir.string() + " already exists; pick another --run-id");
    }
    fs::create_directories(run_dir);
    auto eff = cfg.to_json();
    eff["groups"] = *f.groups;
    write_file(run_dir / "effective_config.json", eff.dump(2) + "\n");
    TrainerConfig tc;
    tc.max_turns = cfg.budget.max_turns;
    export_rollouts(groups, tc, run_dir / "rollouts.jsonl");
    std::size_t records = 0;
    for (const auto& g : groups) {
        records += g.trajectories.size();
    }
    out << "groups: " << groups.size() << "\nrecords: " << records << "\nrollouts: "
        << (run_dir / "rollouts.jsonl").string() << '\n';
    return kExitOk;
}

int cmd_report(const Flags& f, const RunConfig& cfg, std::ostream& out) {
    if (!f.from) {
        throw std::invalid_argument("--from is required");
    }
    const auto reports = reports_from_logs(*f.from);
    out << render_report(reports, cfg.format);
    return kExitOk;
}

RunMetadata run_meta(const nlohmann::json& doc) {
    RunMetadata m;
    if (doc.contains("metadata") && doc.at("metadata").contains("run")) {
        const auto& r = doc.at("metadata").at("run");
        m.label = r.value("label", "");
        m.model = r.value("model", "");
        m.mode = r.value("mode", "");
        m.n = r.value("n", 1);
        m.verifier = r.value("verifier", "");
    }
    return m;
}

BenchSample sample_from(const nlohmann::json& doc, const fs::path& path) {
    const auto truth = truth_from(doc);
    if (!truth) {
        throw std::runtime_error(path.string() + " carries no ground truth");
    }
    BenchSample s{doc.value("sample_id", ""), {}, *truth, Split::Test, Tier::Untiered, {}, {}};
    const auto& meta = doc.at("metadata");
    s.tier = parse_tier(meta.value("tier", "untiered"));
    s.split = meta.value("split", "test") == "train" ? Split::Train : Split::Test;
    s.region = meta.value("region", "");
    return s;
}

SamplePrediction prediction_of(const Trajectory& t) {
    return {t.prediction ? std::optional<GeoPoint>(t.prediction->point) : std::nullopt,
            std::string(termination_name(t.termination))};
}

}  // namespace

std::vector<EvalReport> reports_from_logs(const fs::path& input) {
    fs::path dir = input;
    if (fs::is_directory(input / "trajectories")) {
        dir = input / "trajectories";
    } else if (fs::is_directory(input / "parallel")) {
        dir = input / "parallel";
    }
    const auto files = json_documents(dir);
    if (files.empty()) {
        throw std::runtime_error("no trajectory documents in " + dir.string());
    }
    std::vector<BenchSample> samples;
    std::map<std::string, SamplePrediction> single;
    std::map<std::string, SamplePrediction> verified;
    std::map<std::string, SamplePrediction> best;
    std::optional<RunMetadata> meta;
    std::string kind;
    for (const auto& path : files) {
        const auto doc = read_json_file(path);
        const std::string schema = doc.value("schema", "");
        if (kind.empty()) {
            kind = schema;
        } else if (kind != schema) {
            throw std::runtime_error(dir.string() + " mixes trajectory and parallel-run documents");
        }
        if (!meta) {
            meta = run_meta(doc);
        }
        const BenchSample sample = sample_from(doc, path);
        samples.push_back(sample);
        if (schema == kTrajectorySchema) {
            single[sample.id] = prediction_of(trajectory_from_json(doc));
        } else if (schema == kParallelRunSchema) {
            const auto run = parallel_run_from_json(doc);
            if (run.trajectories.size() == 1) {
                single[sample.id] = prediction_of(run.trajectories.front());
                continue;
            }
            SamplePrediction v;
            v.point = run.verifier.prediction ? std::optional<GeoPoint>(run.verifier.prediction->point)
                                              : std::nullopt;
            v.termination = !run.verifier.prediction ? "no_answer" : run.verifier.fallback ? "fallback" : "answered";
            verified[sample.id] = v;
            SamplePrediction b{std::nullopt, "no_answer"};
            try {
                const auto choice = best_at_n(run.trajectories, sample.truth);
                b.point = run.trajectories[static_cast<std::size_t>(choice.slot)].prediction->point;
                b.termination = "answered";
            } catch (const UndefinedOracleError&) {
            }
            best[sample.id] = b;
        } else {
            throw std::runtime_error(path.string() + ": unknown document schema '" + schema + "'");
        }
    }
    std::vector<EvalReport> reports;
    if (!single.empty() && verified.empty()) {
        reports.push_back(evaluate(samples, single, *meta));
        return reports;
    }
    if (!single.empty()) {
        throw std::runtime_error(dir.string() + " mixes parallel runs of different sizes");
    }
    RunMetadata vm = *meta;
    vm.label = "verifier@" + std::to_string(vm.n);
    RunMetadata bm = *meta;
    bm.label = "best@" + std::to_string(bm.n);
    reports.push_back(evaluate(samples, verified, vm));
    reports.push_back(evaluate(samples, best, bm));
    return reports;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliHooks& hooks) {
    CLI::App app{"Image geolocalization agent with map tools: runs, parallel sampling, tiering, scoring, reports", "mapagent"};
    app.require_subcommand(1);
    Flags f;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", f.config, "JSON config file (flags override it)");
        sub->add_option("--dataset", f.dataset, "JSON-lines sample manifest");
        sub->add_option("--out", f.out, "output root directory");
        sub->add_option("--run-id", f.run_id, "run directory name under --out (must not exist)");
        sub->add_option("--format", f.format, "stdout report format")->check(CLI::IsMember({"markdown", "json"}));
        sub->add_option("--seed", f.seed, "recorded in the effective config");
    };
    auto agent = [&](CLI::App* sub) {
        common(sub);
        sub->add_option("--backend", f.backend, "map backend")->check(CLI::IsMember({"live", "simulated"}));
        sub->add_option("--fixture", f.fixture, "POI fixture for the simulated backend");
        sub->add_option("--policy-url", f.policy_url, "chat-completions base URL of the policy");
        sub->add_option("--policy-model", f.policy_model, "policy model name");
        sub->add_option("--policy-script", f.policy_script, "scripted policy replies (replaces the endpoint)");
        sub->add_option("--mode", f.mode, "agent mode")->check(CLI::IsMember({"thinking-with-map", "direct"}));
        sub->add_option("--max-turns", f.max_turns, "assistant turn budget per episode");
        sub->add_option("--fanout", f.fanout, "maximum concurrent episodes");
        sub->add_flag("--web-search", f.web_search, "also offer the web_search tool");
        sub->add_flag("--timings", f.timings, "write wall-clock timings to timings.jsonl");
    };

    auto* run = app.add_subcommand("run", "one episode per sample, then the accuracy report");
    agent(run);
    auto* par = app.add_subcommand("parallel", "N episodes per sample aggregated by a verifier");
    agent(par);
    par->add_option("--n", f.n, "parallel samples per query");
    par->add_option("--verifier-url", f.verifier_url, "chat-completions base URL of the verifier");
    par->add_option("--verifier-model", f.verifier_model, "verifier model name");
    par->add_option("--verifier-script", f.verifier_script, "scripted verifier replies");
    auto* tier = app.add_subcommand("tier", "label samples easy/hard from reference model predictions");
    common(tier);
    tier->add_option("--reference", f.references, "[name=]path to JSON-lines {id, lat, lon} predictions")
        ->required();
    tier->add_option("--threshold-km", f.threshold_km, "hit radius");
    tier->add_option("--quorum", f.quorum, "hits needed for easy");
    auto* score = app.add_subcommand("score", "rewards and group advantages for stored trajectories");
    common(score);
    score->add_option("--groups", f.groups, "directory of trajectory or parallel-run documents")->required();
    score->add_option("--max-turns", f.max_turns, "recorded in the export metadata");
    auto* report = app.add_subcommand("report", "recompute the report from persisted trajectories");
    report->add_option("--from", f.from, "run directory or its trajectories/ or parallel/ directory")->required();
    report->add_option("--format", f.format, "report format")->check(CLI::IsMember({"markdown", "json"}));

    std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
    try {
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    try {
        const RunConfig cfg = resolve_config(f);
        if (run->parsed()) {
            return cmd_run(cfg, hooks, out, err);
        }
        if (par->parsed()) {
            return cmd_parallel(cfg, hooks, out, err);
        }
        if (tier->parsed()) {
            return cmd_tier(cfg, f, out);
        }
        if (score->parsed()) {
            return cmd_score(cfg, f, out);
        }
        return cmd_report(f, cfg, out);
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

}  // namespace mapagent
