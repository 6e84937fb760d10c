#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mapagent/agent.hpp"
#include "mapagent/geo.hpp"

namespace mapagent {

/// Optimizer settings for the external trainer. Only exported as metadata.
struct TrainerConfig {
    double learning_rate = 1e-6;
    double kl_coefficient = 0.001;
    int epochs = 2;
    int batch_size = 64;
    int mini_batch_size = 16;
    int max_response_tokens = 4096;
    int max_tool_response_tokens = 1024;
    int max_turns = 8;
    int group_size = 16;
};

nlohmann::ordered_json trainer_config_to_json(const TrainerConfig& config);

inline constexpr double kAdvantageEpsilon = 1e-6;

/// Ladder reward of each trajectory's prediction; trajectories without one score the terminal reward.
std::vector<double> score_group(std::span<const Trajectory> trajectories, const GeoPoint& truth,
                                const RewardLadder& ladder = RewardLadder::standard());

/// (r - mean) / (population std + eps). Zero-variance groups give exact zeros.
/// Throws std::invalid_argument for fewer than two rewards.
std::vector<double> group_advantages(std::span<const double> rewards);

struct RolloutGroup {
    std::string query_id;
    GeoPoint ground_truth;
    std::vector<Trajectory> trajectories;
    std::vector<double> rewards;
    std::vector<double> advantages;

    static RolloutGroup scored(std::string query_id, const GeoPoint& truth, std::vector<Trajectory> trajectories,
                               const RewardLadder& ladder = RewardLadder::standard());
};

inline constexpr std::string_view kRolloutSchema = "mapagent.rollouts/1";

/// Header line followed by one record per trajectory, ordered by (query id, slot).
std::string rollouts_jsonl(std::span<const RolloutGroup> groups, const TrainerConfig& config);
/// Writes rollouts_jsonl to `path`. Throws std::runtime_error when the file cannot be written.
void export_rollouts(std::span<const RolloutGroup> groups, const TrainerConfig& config,
                     const std::filesystem::path& path);

}  // namespace mapagent
