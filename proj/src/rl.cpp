#include "mapagent/rl.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace mapagent {

nlohmann::ordered_json trainer_config_to_json(const TrainerConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"kl_coefficient", c.kl_coefficient},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"mini_batch_size", c.mini_batch_size},
            {"max_response_tokens", c.max_response_tokens},
            {"max_tool_response_tokens", c.max_tool_response_tokens},
            {"max_turns", c.max_turns},
            {"group_size", c.group_size}};
}

std::vector<double> score_group(std::span<const Trajectory> trajectories, const GeoPoint& truth,
                                const RewardLadder& ladder) {
    std::vector<double> rewards;
    rewards.reserve(trajectories.size());
    for (const auto& t : trajectories) {
        const double err = t.prediction ? geodesic_distance(t.prediction->point, truth) : kUnscoredDistance;
        rewards.push_back(reward_for_distance(ladder, err));
    }
    return rewards;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) {
        throw std::invalid_argument("advantages need a group of at least two rewards");
    }
    const double n = static_cast<double>(rewards.size());
    const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
    if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards.front(); })) {
        return std::vector<double>(rewards.size(), 0.0);
    }
    double ss = 0.0;
    for (double r : rewards) {
        ss += (r - mean) * (r - mean);
    }
    const double denom = std::sqrt(ss / n) + kAdvantageEpsilon;
    std::vector<double> out;
    out.reserve(rewards.size());
    for (double r : rewards) {
        out.push_back((r - mean) / denom);
    }
    return out;
}

RolloutGroup RolloutGroup::scored(std::string query_id, const GeoPoint& truth, std::vector<Trajectory> trajectories,
                                  const RewardLadder& ladder) {
    RolloutGroup g{std::move(query_id), truth, std::move(trajectories), {}, {}};
    g.rewards = score_group(g.trajectories, truth, ladder);
    g.advantages = group_advantages(g.rewards);
    return g;
}

namespace {

int estimated_tokens(std::size_t chars) { return static_cast<int>((chars + 3) / 4); }

}  // namespace

std::string rollouts_jsonl(std::span<const RolloutGroup> groups, const TrainerConfig& config) {
    nlohmann::ordered_json header;
    header["schema"] = kRolloutSchema;
    header["trainer"] = trainer_config_to_json(config);
    header["advantage"] = {{"estimator", "group_mean_std"},
                           {"std", "population"},
                           {"epsilon", kAdvantageEpsilon},
                           {"normalized", true}};
    header["reward_ladder"] = "standard";
    header["groups"] = groups.size();

    std::string out = header.dump() + "\n";

    std::vector<const RolloutGroup*> order;
    for (const auto& g : groups) {
        if (g.rewards.size() != g.trajectories.size() || g.advantages.size() != g.trajectories.size()) {
            throw std::invalid_argument("rollout group '" + g.query_id + "' is not scored");
        }
        order.push_back(&g);
    }
    std::stable_sort(order.begin(), order.end(),
                     [](const RolloutGroup* a, const RolloutGroup* b) { return a->query_id < b->query_id; });

    for (const auto* g : order) {
        for (std::size_t slot = 0; slot < g->trajectories.size(); ++slot) {
            const auto& t = g->trajectories[slot];
            nlohmann::ordered_json rec;
            rec["query_id"] = g->query_id;
            rec["slot"] = slot;
            rec["ground_truth"] = {{"lat", g->ground_truth.lat()}, {"lon", g->ground_truth.lon()}};
            rec["prediction"] = t.prediction
                                    ? nlohmann::ordered_json::parse(serialize_prediction(*t.prediction))
                                    : nlohmann::ordered_json();
            rec["termination"] = termination_name(t.termination);
            rec["reward"] = g->rewards[slot];
            rec["advantage"] = g->advantages[slot];
            rec["tokens"] = {{"assistant_chars", t.accounting.assistant_chars},
                             {"observation_chars", t.accounting.observation_chars},
                             {"assistant_tokens_est", estimated_tokens(t.accounting.assistant_chars)},
                             {"observation_tokens_est", estimated_tokens(t.accounting.observation_chars)},
                             {"assistant_turns", t.accounting.assistant_turns}};
            auto messages = nlohmann::ordered_json::array();
            for (const auto& m : t.conversation) {
                messages.push_back(message_to_json(m));
            }
            rec["messages"] = std::move(messages);
            out += rec.dump() + "\n";
        }
    }
    return out;
}

void export_rollouts(std::span<const RolloutGroup> groups, const TrainerConfig& config,
                     const std::filesystem::path& path) {
    const std::string body = rollouts_jsonl(groups, config);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("cannot write rollout file " + path.string());
    }
    f << body;
    if (!f.flush()) {
        throw std::runtime_error("failed writing rollout file " + path.string());
    }
}

}  // namespace mapagent
