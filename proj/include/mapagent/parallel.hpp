#pragma once

#include <atomic>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapagent/agent.hpp"

namespace mapagent {

inline constexpr std::string_view kVerifierPrompt =
    "You are a strict geo-localization solver.\n\n"
    "You will be given an image, the original task, and multiple candidate answers from other agents.\n"
    "Synthesize the best final location.\n\n"
    "If candidates disagree, pick the most evidence-consistent and geographically plausible one. \n\n"
    "After thinking, provide your final answer in the JSON format: \n\n"
    "{\"lat\": latitude, \"lon\": longitude, \"city\": city, \"country\": country}.\n\n"
    "Use signed values for latitude and longitude to indicate N/S and E/W.";

/// Returns the policy serving a given sample slot. Must be safe to call from worker threads.
using PolicyForSlot = std::function<ChatPolicy&(int slot)>;

struct ParallelConfig {
    int n = 4;
    /// Maximum number of episodes in flight.
    int fanout = 4;
    Budget budget;
    EpisodeOptions episode;

    void validate() const;
};

/// Runs n independent episodes, at most `fanout` at a time. Result i is slot i. When `stop` is
/// set, slots that have not started are skipped and the returned list is shorter than n.
std::vector<Trajectory> sample_parallel(const GeoQuery& query, const PolicyForSlot& policy, MapBackend& env,
                                        const ToolRegistry& registry, const ParallelConfig& config,
                                        const std::atomic<bool>* stop = nullptr);

/// System message with the verifier instruction, then one user message carrying the query
/// image, the original task and one "### Candidate i" transcript per trajectory.
std::vector<ChatMessage> build_verifier_prompt(const GeoQuery& query, std::span<const Trajectory> trajectories);

struct VerifierOutcome {
    std::optional<Prediction> prediction;
    /// True when the verifier reply was unusable and the first answered candidate was taken.
    bool fallback = false;
    /// Slot whose prediction was taken on fallback; -1 otherwise.
    int fallback_slot = -1;
    std::string transcript;
    std::string error;
};

/// Asks `verifier` for a final prediction. Never throws for verifier failures; those fall back.
/// Throws std::invalid_argument when no trajectory is given.
VerifierOutcome verify(const GeoQuery& query, std::span<const Trajectory> trajectories, ChatPolicy& verifier,
                       const SamplingParams& params = {});

class UndefinedOracleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct OracleChoice {
    double error_m = kUnscoredDistance;
    int slot = -1;
};

/// Closest answered trajectory to the ground truth; ties go to the lowest slot.
OracleChoice best_at_n(std::span<const Trajectory> trajectories, const GeoPoint& truth);
/// Same rule over precomputed per-slot errors (+inf for unanswered slots).
OracleChoice best_at_n(std::span<const double> slot_errors);

/// Unbiased pass@K for one sample with n draws of which c are correct.
double pass_at_k(int n, int c, int k);
/// Mean pass@K over samples; each inner list holds one sample's n errors.
double pass_at_k(const std::vector<std::vector<double>>& errors, int k, double threshold_m);

struct ParallelRun {
    GeoQuery query;
    std::vector<Trajectory> trajectories;
    VerifierOutcome verifier;
};

inline constexpr std::string_view kParallelRunSchema = "mapagent.parallel/1";

nlohmann::ordered_json parallel_run_to_json(const ParallelRun& run,
                                            const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object());
ParallelRun parallel_run_from_json(const nlohmann::json& doc);

}  // namespace mapagent
