#include <random>

#include <gtest/gtest.h>

#include "mapagent/rl.hpp"
#include "test_support.hpp"

using namespace mapagent;
using nlohmann::json;

namespace {

// Textbook form, computed in long double.
std::vector<double> oracle_advantages(const std::vector<double>& r) {
    long double mean = 0;
    for (double x : r) {
        mean += x;
    }
    mean /= static_cast<long double>(r.size());
    long double var = 0;
    for (double x : r) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<long double>(r.size());
    std::vector<double> out;
    for (double x : r) {
        out.push_back(static_cast<double>((x - mean) / (std::sqrt(var) + 1e-6L)));
    }
    return out;
}

Trajectory predicted(std::optional<GeoPoint> p) {
    Trajectory t;
    t.query = testsupport::bund_query();
    if (p) {
        t.prediction = Prediction{*p, "", ""};
        t.termination = Termination::Answered;
    } else {
        t.termination = Termination::Unparseable;
    }
    return t;
}

}  // namespace

TEST(GroupAdvantages, MatchesOracle) {
    const std::vector<double> r{1.0, 0.8, 0.0, 0.2};
    const auto a = group_advantages(r);
    const auto o = oracle_advantages(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_NEAR(a[i], o[i], 1e-12);
    }
}

TEST(GroupAdvantages, TwoElementGroup) {
    // mean 0.5, population std 0.5
    const auto a = group_advantages(std::vector<double>{1.0, 0.0});
    EXPECT_NEAR(a[0], 0.5 / (0.5 + 1e-6), 1e-15);
    EXPECT_NEAR(a[1], -0.5 / (0.5 + 1e-6), 1e-15);
}

TEST(GroupAdvantages, ZeroVarianceGivesExactZeros) {
    for (double v : {0.0, 0.1, 0.6, 1.0}) {
        const auto a = group_advantages(std::vector<double>(7, v));
        for (double x : a) {
            EXPECT_EQ(x, 0.0);
        }
    }
}

TEST(GroupAdvantages, RejectsTinyGroups) {
    EXPECT_THROW(group_advantages(std::vector<double>{1.0}), std::invalid_argument);
    EXPECT_THROW(group_advantages(std::vector<double>{}), std::invalid_argument);
}

TEST(GroupAdvantages, SumZeroAndOrderPreserved) {
    const std::vector<double> tiers{1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.0};
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> r(2 + rng() % 15);
        for (auto& x : r) {
            x = tiers[rng() % tiers.size()];
        }
        const auto a = group_advantages(r);
        EXPECT_LE(std::abs(std::accumulate(a.begin(), a.end(), 0.0)), 1e-9);
        for (std::size_t i = 0; i < r.size(); ++i) {
            for (std::size_t j = 0; j < r.size(); ++j) {
                if (r[i] > r[j]) {
                    EXPECT_GT(a[i], a[j]);
                }
            }
        }
    }
}

TEST(ScoreGroup, LadderRewardsAndTerminalForMissing) {
    const GeoPoint truth(31.242, 121.505);
    const std::vector<Trajectory> trajs{predicted(truth), predicted(GeoPoint(31.24, 121.49)),
                                        predicted(GeoPoint(48.85, 2.35)), predicted(std::nullopt)};
    // 31.24,121.49 is about 1.4 km away.
    EXPECT_EQ(score_group(trajs, truth), (std::vector<double>{1.0, 0.8, 0.0, 0.0}));
}

TEST(RolloutGroup, ScoredFillsRewardsAndAdvantages) {
    const GeoPoint truth(31.242, 121.505);
    const auto g = RolloutGroup::scored("q1", truth, {predicted(truth), predicted(std::nullopt)});
    EXPECT_EQ(g.rewards, (std::vector<double>{1.0, 0.0}));
    EXPECT_GT(g.advantages[0], 0.0);
    EXPECT_LT(g.advantages[1], 0.0);
    EXPECT_THROW(RolloutGroup::scored("q", truth, {predicted(truth)}), std::invalid_argument);
}

TEST(Rollouts, HeaderAndOrdering) {
    const GeoPoint truth(31.242, 121.505);
    const std::vector<RolloutGroup> groups{
        RolloutGroup::scored("zz", truth, {predicted(truth), predicted(std::nullopt)}),
        RolloutGroup::scored("aa", truth, {testsupport::bund_episode(), predicted(GeoPoint(31.24, 121.49))})};
    const auto text = rollouts_jsonl(groups, TrainerConfig{});
    std::istringstream in(text);
    std::string line;
    std::vector<json> lines;
    while (std::getline(in, line)) {
        lines.push_back(json::parse(line));
    }
    ASSERT_EQ(lines.size(), 5u);
    EXPECT_EQ(lines[0].at("schema"), kRolloutSchema);
    EXPECT_EQ(lines[0].at("trainer").at("learning_rate"), 1e-6);
    EXPECT_EQ(lines[0].at("trainer").at("kl_coefficient"), 0.001);
    EXPECT_EQ(lines[0].at("trainer").at("group_size"), 16);
    EXPECT_EQ(lines[0].at("advantage").at("epsilon"), 1e-6);
    EXPECT_EQ(lines[1].at("query_id"), "aa");
    EXPECT_EQ(lines[1].at("slot"), 0);
    EXPECT_EQ(lines[2].at("slot"), 1);
    EXPECT_EQ(lines[3].at("query_id"), "zz");
    EXPECT_TRUE(lines[4].at("prediction").is_null());
    EXPECT_EQ(lines[1].at("reward"), 1.0);
    EXPECT_EQ(lines[1].at("messages").size(), 9u);
    const auto chars = lines[1].at("tokens").at("assistant_chars").get<std::size_t>();
    EXPECT_EQ(lines[1].at("tokens").at("assistant_tokens_est"), (chars + 3) / 4);
    EXPECT_TRUE(testsupport::matches_golden("rollouts.jsonl", text));
}

TEST(Rollouts, UnwritablePathThrows) {
    const GeoPoint truth(0, 0);
    const std::vector<RolloutGroup> groups{RolloutGroup::scored("q", truth, {predicted(truth), predicted(truth)})};
    EXPECT_THROW(export_rollouts(groups, {}, "/nonexistent-dir/x/rollouts.jsonl"), std::runtime_error);
    testsupport::TempDir dir;
    export_rollouts(groups, {}, dir.path() / "r.jsonl");
    EXPECT_EQ(testsupport::read_text(dir.path() / "r.jsonl"), rollouts_jsonl(groups, {}));
}
