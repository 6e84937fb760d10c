#pragma once

#include <chrono>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mapagent/chat.hpp"
#include "mapagent/geo.hpp"
#include "mapagent/map_env.hpp"
#include "mapagent/tools.hpp"

namespace mapagent {

/// Instruction for the map-augmented agent. The query image is sent as a separate image part
/// ahead of this text.
inline constexpr std::string_view kThinkingWithMapPrompt =
    "You are given an image, and your task is to use your exceptional skills to determine the precise "
    "coordinates of the location depicted. \n\n"
    "Carefully examine the image, taking note of any distinctive features, POIs, landmarks, vegetation, or other "
    "elements that could serve as clues. \n\n"
    "When extra information is needed to search for a location or confirm precise coordinates, you can use the "
    "given tools to get the information from search engine and maps. \n\n"
    "Once you have gathered sufficient evidence, provide your best inference for the coordinates in the following "
    "JSON format: \n\n"
    "{\"lat\": latitude, \"lon\": longitude, \"city\": city, \"country\": country}.\n\n"
    "Use signed values for latitude and longitude to indicate N/S and E/W.\n"
    "If you cannot narrow it down, then provide your best guess.";

/// Instruction for direct (tool-free) answering.
inline constexpr std::string_view kDirectAnswerPrompt =
    "You are given an image, and your task is to use your exceptional skills to determine the precise "
    "coordinates of the location depicted.\n\n"
    "Carefully examine the image, taking note of any distinctive features, POIs, landmarks, vegetation, or other "
    "elements that could serve as clues.\n\n"
    "After showing your thinking, provide your final answer in the JSON format:\n\n"
    "{\"lat\": latitude, \"lon\": longitude, \"city\": city, \"country\": country}\n\n"
    "Use signed values for latitude and longitude to indicate N/S and E/W.\n"
    "If you cannot narrow it down, then provide your best guess.";

inline constexpr std::string_view kForceAnswerInstruction =
    "You have reached the interaction limit and tools are no longer available. Based on the evidence so far, "
    "provide your final answer now in the JSON format: "
    "{\"lat\": latitude, \"lon\": longitude, \"city\": city, \"country\": country}.";

inline constexpr std::string_view kTruncationSuffix = "\n[truncated]";

struct GeoQuery {
    std::filesystem::path image_path;
    std::string instruction{kThinkingWithMapPrompt};
    std::string region_hint;
    std::string sample_id;

    /// Throws ImageError when the image is missing, empty or undecodable.
    [[nodiscard]] EncodedImage load_image() const;
};

struct Budget {
    int max_turns = 8;
    /// Character cap on each observation; four characters per token of the 1024-token cap.
    std::size_t max_tool_response_chars = 4096;
    std::chrono::milliseconds wall_clock{std::chrono::minutes(10)};

    void validate() const;
};

struct TrajectoryStep {
    int index = 0;
    std::optional<std::string> hypothesis;
    std::optional<ToolCall> action;
    std::optional<ToolResult> observation;
};

enum class Termination { Answered, BudgetExhausted, PolicyError, Unparseable };
std::string_view termination_name(Termination t);
Termination parse_termination(std::string_view name);

struct Accounting {
    int assistant_turns = 0;
    int tool_calls = 0;
    int skipped_tool_calls = 0;
    int truncated_observations = 0;
    int context_drops = 0;
    std::size_t assistant_chars = 0;
    std::size_t observation_chars = 0;
    /// Not persisted in trajectory documents, which stay byte-deterministic.
    double wall_seconds = 0.0;
};

struct Trajectory {
    GeoQuery query;
    std::vector<TrajectoryStep> steps;
    std::string final_text;
    std::optional<Prediction> prediction;
    Termination termination = Termination::PolicyError;
    /// True when the last turn was the tools-disabled answer-now turn.
    bool forced_final_turn = false;
    std::string error;
    Accounting accounting;
    /// Full conversation as sent to / received from the policy (images by handle).
    std::vector<ChatMessage> conversation;

    [[nodiscard]] bool answered() const { return termination == Termination::Answered; }
};

/// Cuts `result`'s observation text to at most `max_chars` characters (suffix included).
/// Returns true when something was cut.
bool truncate_observation(ToolResult& result, std::size_t max_chars);

struct EpisodeOptions {
    SamplingParams sampling;
    Clock* clock = nullptr;
};

/// Runs the hypothesize / call tools / observe loop until the policy answers or the budget ends.
/// Policy failures end the episode with termination=policy_error; the partial trajectory is kept.
Trajectory run_episode(const GeoQuery& query, ChatPolicy& policy, MapBackend& env, const ToolRegistry& registry,
                       const Budget& budget, const EpisodeOptions& options = {});

enum class CandidateStatus { Proposed, Supported, Refuted };
std::string_view candidate_status_name(CandidateStatus s);

struct Candidate {
    std::string label;
    std::optional<GeoPoint> location;
    std::optional<std::string> poi_id;
    std::vector<int> supporting_steps;
    CandidateStatus status = CandidateStatus::Proposed;
};

struct CandidatePool {
    std::vector<Candidate> entries;
};

/// Builds the candidate pool from hypotheses, tool arguments and POI observations. Entries named
/// in the final answer (or lying within 1 km of the prediction) are supported; entries named
/// next to a refutation cue ("ruling out", "not", "inconsistent", ...) are refuted.
CandidatePool extract_candidate_pool(const Trajectory& trajectory);

/// Deterministic human-readable transcript: one section per step, then the final answer.
std::string serialize_trajectory(const Trajectory& trajectory);

inline constexpr std::string_view kTrajectorySchema = "mapagent.trajectory/1";

/// Versioned trajectory document. `metadata` is embedded verbatim under "metadata".
nlohmann::ordered_json trajectory_to_json(const Trajectory& trajectory,
                                          const nlohmann::ordered_json& metadata = nlohmann::ordered_json::object());
Trajectory trajectory_from_json(const nlohmann::json& doc);

nlohmann::ordered_json tool_result_to_json(const ToolResult& result);
ToolResult tool_result_from_json(const nlohmann::json& j);

}  // namespace mapagent
