#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapagent/agent.hpp"
#include "mapagent/bench.hpp"
#include "mapagent/chat.hpp"
#include "mapagent/map_env.hpp"
#include "mapagent/net.hpp"

namespace mapagent {

enum class AgentMode { ThinkingWithMap, Direct };

struct RunConfig {
    std::filesystem::path dataset;
    MapBackendConfig map;
    PolicyEndpoint policy;
    PolicyEndpoint verifier;
    /// Scripted replies replace the HTTP policy / verifier when set.
    std::filesystem::path policy_script;
    std::filesystem::path verifier_script;
    AgentMode mode = AgentMode::ThinkingWithMap;
    bool web_search = false;
    Budget budget;
    int n = 1;
    int fanout = 4;
    std::filesystem::path out = "out";
    std::string run_id;
    unsigned seed = 0;
    ReportFormat format = ReportFormat::Markdown;
    bool write_timings = false;

    /// Effective configuration as written into the run directory. Holds no secrets.
    [[nodiscard]] nlohmann::ordered_json to_json() const;
};

/// Applies a JSON config object onto `config`. Relative paths resolve against `base_dir`.
/// Throws std::invalid_argument on unknown keys or on anything that looks like a secret.
void apply_config_json(RunConfig& config, const nlohmann::json& j, const std::filesystem::path& base_dir);

/// Applies MAPAGENT_* environment overrides (backend, fixture, policy/verifier url and model, out).
void apply_environment(RunConfig& config);

struct CliHooks {
    /// Polled before each sample starts; the SIGINT handler sets it in the binary.
    const std::atomic<bool>* stop = nullptr;
    /// Called after each sample's outputs are on disk.
    std::function<void(const std::string& sample_id)> on_sample_done;
    /// Overrides the HTTP transport for live mode (tests).
    HttpTransport* transport = nullptr;
};

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInterrupted = 130;

/// Entry point shared by the binary and the tests. args[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, const CliHooks& hooks = {});

/// Rebuilds the report(s) of a run from its persisted trajectory or parallel-run documents.
std::vector<EvalReport> reports_from_logs(const std::filesystem::path& dir);

}  // namespace mapagent
