#include <gtest/gtest.h>

#include "mapagent/agent.hpp"
#include "test_support.hpp"

using namespace mapagent;
using nlohmann::json;
using testsupport::bund_episode;
using testsupport::bund_query;
using testsupport::fixture;
using testsupport::script_from;

namespace {

json answer(double lat, double lon, const std::string& lead = "Final.") {
    return {{"content", lead + " {\"lat\": " + std::to_string(lat) + ", \"lon\": " + std::to_string(lon) + "}"}};
}

json call_turn(const std::string& text, const std::string& tool, const json& args, const std::string& id = "") {
    json c{{"name", tool}, {"arguments", args}};
    if (!id.empty()) {
        c["id"] = id;
    }
    return {{"content", text}, {"tool_calls", json::array({c})}};
}

Trajectory run(ChatPolicy& policy, Budget budget = {}, GeoQuery q = bund_query()) {
    SimulatedMapBackend env(fixture());
    return run_episode(q, policy, env, ToolRegistry::standard(), budget);
}

/// Environment that returns the same huge text for any call.
class FloodBackend final : public MapBackend {
public:
    explicit FloodBackend(std::string text) : text_(std::move(text)) {}
    ToolResult execute(const ValidatedCall& call, EpisodeContext&) override {
        return ToolResult::text(call.call().call_id, text_);
    }

private:
    std::string text_;
};

class ThrowingBackend final : public MapBackend {
public:
    ToolResult execute(const ValidatedCall&, EpisodeContext&) override { throw std::runtime_error("boom"); }
};

}  // namespace

TEST(Budget, Validation) {
    EXPECT_NO_THROW(Budget{}.validate());
    EXPECT_THROW((Budget{0, 4096, std::chrono::minutes(1)}.validate()), std::invalid_argument);
    EXPECT_THROW((Budget{8, 10, std::chrono::minutes(1)}.validate()), std::invalid_argument);
}

TEST(Episode, ThreeTurnSearchDetailAnswer) {
    auto policy = script_from(json::array(
        {call_turn("Looks like a Starbucks by the river.", "poi_keyword_search", {{"keyword", "Starbucks Riverside"}}),
         call_turn("", "poi_detail_query", {{"poi_id", "SH002"}}), answer(31.242, 121.505)}));
    const auto t = run(*policy);
    EXPECT_EQ(t.termination, Termination::Answered);
    EXPECT_FALSE(t.forced_final_turn);
    ASSERT_EQ(t.steps.size(), 2u);
    EXPECT_EQ(t.steps[0].hypothesis, "Looks like a Starbucks by the river.");
    EXPECT_FALSE(t.steps[1].hypothesis.has_value());
    EXPECT_EQ(t.steps[1].action->call_id, "call_1_0");
    EXPECT_NE(t.steps[1].observation->observation_text().find("name: Starbucks Riverside Lujiazui"), std::string::npos);
    ASSERT_TRUE(t.prediction.has_value());
    EXPECT_DOUBLE_EQ(t.prediction->point.lat(), 31.242);
    EXPECT_EQ(t.accounting.assistant_turns, 3);
    EXPECT_EQ(t.accounting.tool_calls, 2);
    // user, (assistant, tool) x2, assistant
    EXPECT_EQ(t.conversation.size(), 6u);
    EXPECT_EQ(t.conversation[0].content[0], ContentPart::make_image("query"));
    EXPECT_EQ(t.conversation[0].content[1].text, kThinkingWithMapPrompt);
}

TEST(Episode, GoldenTrajectoryDocument) {
    const auto t = bund_episode();
    ASSERT_EQ(t.termination, Termination::Answered);
    EXPECT_EQ(t.steps.size(), 3u);
    EXPECT_TRUE(testsupport::matches_golden("bund_trajectory.json", trajectory_to_json(t).dump(2) + "\n"));
    EXPECT_TRUE(testsupport::matches_golden("bund_transcript.txt", serialize_trajectory(t)));
}

TEST(Episode, MapImagesAttachedInFollowUpUserMessage) {
    const auto t = bund_episode();
    // user, a, tool, a, tool, user(images), a, tool, a
    ASSERT_EQ(t.conversation.size(), 9u);
    const auto& attach = t.conversation[5];
    EXPECT_EQ(attach.role, Role::User);
    EXPECT_EQ(attach.content[0].text, "Images returned by the tools: [image img-1]");
    EXPECT_EQ(attach.content[1], ContentPart::make_image("img-1"));
}

TEST(Episode, TranscriptLayout) {
    const auto s = serialize_trajectory(bund_episode());
    EXPECT_EQ(s.rfind("[Step 0]\nHypothesis: The storefront", 0), 0u);
    EXPECT_NE(s.find("Action: static_map_query {\"center\":\"31.2400,121.4900\",\"zoom\":17}\n"), std::string::npos);
    EXPECT_NE(s.find("[Final answer]\nTermination: answered\n"), std::string::npos);
    EXPECT_NE(s.find("Prediction: {\"lat\":31.242,\"lon\":121.505,\"city\":\"Shanghai\",\"country\":\"China\"}"),
              std::string::npos);
}

TEST(Episode, DeterministicAcrossRuns) {
    const auto a = trajectory_to_json(bund_episode()).dump();
    EXPECT_EQ(a, trajectory_to_json(bund_episode()).dump());
}

TEST(Episode, NeverAnsweringPolicyIsForcedAtLastTurn) {
    json turns = json::array();
    for (int i = 0; i < 20; ++i) {
        turns.push_back(call_turn("still looking", "poi_input_tips", {{"query", "Starbucks"}}));
    }
    auto policy = script_from(turns);
    const auto t = run(*policy);
    EXPECT_TRUE(t.forced_final_turn);
    // The forced reply carries tool calls but no JSON.
    EXPECT_EQ(t.termination, Termination::Unparseable);
    EXPECT_EQ(policy->calls(), 8u);
    EXPECT_EQ(t.steps.size(), 7u);
    const auto offered = policy->tools_offered();
    EXPECT_TRUE(std::all_of(offered.begin(), offered.end() - 1, [](bool b) { return b; }));
    EXPECT_FALSE(offered.back());
    EXPECT_EQ(t.conversation[t.conversation.size() - 2].text(), kForceAnswerInstruction);
}

TEST(Episode, ForcedTurnAnswerCounts) {
    auto policy = script_from(json::array({call_turn("a", "poi_input_tips", {{"query", "x"}}),
                                           call_turn("b", "poi_input_tips", {{"query", "y"}}), answer(1, 2)}));
    const auto t = run(*policy, Budget{3, 4096, std::chrono::minutes(1)});
    EXPECT_TRUE(t.forced_final_turn);
    EXPECT_EQ(t.termination, Termination::Answered);
}

TEST(Episode, BlankForcedReplyIsBudgetExhausted) {
    auto policy = script_from(json::array({call_turn("a", "poi_input_tips", {{"query", "x"}}), {{"content", "  "}}}));
    const auto t = run(*policy, Budget{2, 4096, std::chrono::minutes(1)});
    EXPECT_EQ(t.termination, Termination::BudgetExhausted);
}

TEST(Episode, ProseAnswerIsUnparseable) {
    auto policy = script_from(json::array({{{"content", "Somewhere in Europe."}}}));
    const auto t = run(*policy);
    EXPECT_EQ(t.termination, Termination::Unparseable);
    EXPECT_EQ(t.final_text, "Somewhere in Europe.");
    EXPECT_FALSE(t.prediction.has_value());
}

TEST(Episode, WallClockForcesAnswer) {
    ManualClock clock;
    struct SlowPolicy final : ChatPolicy {
        ManualClock& clock;
        ScriptedPolicy& inner;
        SlowPolicy(ManualClock& c, ScriptedPolicy& p) : clock(c), inner(p) {}
        ChatMessage chat(std::span<const ChatMessage> m, const nlohmann::ordered_json& t, const SamplingParams& s,
                         const ImageStore* i) override {
            clock.advance(std::chrono::seconds(40));
            return inner.chat(m, t, s, i);
        }
        std::string model_id() const override { return "slow"; }
    };
    json turns = json::array();
    for (int i = 0; i < 5; ++i) {
        turns.push_back(call_turn("x", "poi_input_tips", {{"query", "a"}}));
    }
    turns.push_back(answer(1, 1));
    auto scripted = script_from(turns);
    SlowPolicy policy(clock, *scripted);
    SimulatedMapBackend env(fixture());
    const auto t = run_episode(bund_query(), policy, env, ToolRegistry::standard(),
                               Budget{8, 4096, std::chrono::seconds(60)}, EpisodeOptions{{}, &clock});
    EXPECT_TRUE(t.forced_final_turn);
    EXPECT_EQ(policy.inner.calls(), 3u);
    EXPECT_EQ(policy.inner.tools_offered().back(), false);
}

TEST(Episode, ExcessParallelCallsAreSkipped) {
    json calls = json::array();
    for (int i = 0; i < 5; ++i) {
        calls.push_back({{"name", "poi_input_tips"}, {"arguments", {{"query", "q" + std::to_string(i)}}}});
    }
    auto policy = script_from(json::array({{{"content", "many"}, {"tool_calls", calls}}, answer(1, 1)}));
    const auto t = run(*policy, Budget{3, 4096, std::chrono::minutes(1)});
    EXPECT_EQ(t.steps.size(), 3u);
    EXPECT_EQ(t.accounting.skipped_tool_calls, 2);
    EXPECT_EQ(t.conversation[5].text(), "ERROR (budget): tool-call budget exhausted; call skipped");
    EXPECT_EQ(t.termination, Termination::Answered);
}

TEST(Episode, InvalidCallBecomesErrorObservation) {
    auto policy = script_from(json::array(
        {call_turn("zoom", "static_map_query", {{"center", "95,10"}}), call_turn("", "teleport", json::object()),
         answer(1, 1)}));
    const auto t = run(*policy);
    ASSERT_EQ(t.steps.size(), 2u);
    EXPECT_EQ(t.steps[0].observation->observation_text().rfind("ERROR (constraint-violation): lat:", 0), 0u);
    EXPECT_EQ(t.steps[1].observation->observation_text().rfind("ERROR (unknown-tool)", 0), 0u);
    EXPECT_EQ(t.termination, Termination::Answered);
}

TEST(Episode, BackendExceptionBecomesInternalError) {
    auto policy = script_from(json::array({call_turn("", "poi_input_tips", {{"query", "x"}}), answer(1, 1)}));
    ThrowingBackend env;
    const auto t = run_episode(bund_query(), *policy, env, ToolRegistry::standard(), Budget{});
    EXPECT_EQ(t.steps[0].observation->observation_text(), "ERROR (internal-error): boom");
    EXPECT_TRUE(t.answered());
}

TEST(Episode, PolicyErrorKeepsPartialTrajectory) {
    auto policy = script_from(json::array({call_turn("", "poi_input_tips", {{"query", "x"}}), {{"error", "malformed"}}}));
    const auto t = run(*policy);
    EXPECT_EQ(t.termination, Termination::PolicyError);
    EXPECT_EQ(t.steps.size(), 1u);
    EXPECT_EQ(t.error.rfind("malformed-response: ", 0), 0u) << t.error;
}

TEST(Episode, ContextOverflowDropsOldestObservationsAndRetries) {
    auto policy = script_from(json::array({call_turn("", "poi_keyword_search", {{"keyword", "Starbucks"}}),
                                           call_turn("", "static_map_query", {{"center", "31.24,121.49"}}),
                                           call_turn("", "poi_detail_query", {{"poi_id", "SH001"}}),
                                           call_turn("", "poi_detail_query", {{"poi_id", "SH002"}}),
                                           {{"error", "context_length"}}, answer(31.242, 121.505)}));
    const auto t = run(*policy);
    EXPECT_EQ(t.termination, Termination::Answered);
    EXPECT_EQ(t.accounting.context_drops, 1);
    int dropped = 0;
    for (const auto& m : t.conversation) {
        if (m.text() == "[observation dropped to fit the context window]") {
            ++dropped;
        }
    }
    // Four tool observations and one image attachment; the oldest three go.
    EXPECT_EQ(dropped, 3);
    // The newest observation survives.
    EXPECT_NE(t.conversation[t.conversation.size() - 2].text().find("SH002"), std::string::npos);
    // Steps keep the full observations.
    EXPECT_NE(t.steps[0].observation->observation_text().find("SH001"), std::string::npos);
}

TEST(Truncation, CutsWithinLimitOnUtf8Boundary) {
    std::string text;
    for (int i = 0; i < 2000; ++i) {
        text += "\xE4\xB8\x8A";  // three-byte character
    }
    ToolResult r = ToolResult::text("c", text);
    ASSERT_TRUE(truncate_observation(r, 100));
    const auto obs = r.observation_text();
    EXPECT_LE(obs.size(), 100u);
    EXPECT_TRUE(obs.ends_with(kTruncationSuffix));
    const auto body = obs.substr(0, obs.size() - kTruncationSuffix.size());
    EXPECT_EQ(body.size() % 3, 0u);
    EXPECT_TRUE(r.truncated);
}

TEST(Truncation, ShortTextUntouched) {
    ToolResult r = ToolResult::text("c", "short");
    EXPECT_FALSE(truncate_observation(r, 100));
    EXPECT_EQ(r.observation_text(), "short");
}

TEST(Truncation, ErrorsAndCaptionsToo) {
    ToolResult e = ToolResult::failure("c", "provider-error", std::string(500, 'x'));
    ASSERT_TRUE(truncate_observation(e, 120));
    EXPECT_LE(e.observation_text().size(), 120u);
    ToolResult i = ToolResult::image("c", "img-1", std::string(500, 'y'));
    ASSERT_TRUE(truncate_observation(i, 120));
    EXPECT_LE(i.observation_text().size(), 120u);
    EXPECT_TRUE(i.observation_text().ends_with("[image img-1]"));
}

TEST(Truncation, FloodedObservationsCapped) {
    auto policy = script_from(json::array({call_turn("", "poi_input_tips", {{"query", "x"}}),
                                           call_turn("", "poi_input_tips", {{"query", "y"}}), answer(1, 1)}));
    FloodBackend env(std::string(1 << 20, 'z'));
    const auto t = run_episode(bund_query(), *policy, env, ToolRegistry::standard(), Budget{});
    EXPECT_EQ(t.accounting.truncated_observations, 2);
    for (const auto& s : t.steps) {
        EXPECT_LE(s.observation->observation_text().size(), 4096u);
    }
}

TEST(CandidatePool, GoldenEpisode) {
    const auto pool = extract_candidate_pool(bund_episode());
    const Candidate* bund = nullptr;
    const Candidate* lujiazui = nullptr;
    for (const auto& c : pool.entries) {
        if (c.poi_id == "SH001") {
            bund = &c;
        } else if (c.poi_id == "SH002") {
            lujiazui = &c;
        }
    }
    ASSERT_NE(bund, nullptr);
    ASSERT_NE(lujiazui, nullptr);
    EXPECT_EQ(bund->status, CandidateStatus::Refuted);
    EXPECT_EQ(lujiazui->status, CandidateStatus::Supported);
    EXPECT_FALSE(lujiazui->supporting_steps.empty());
}

TEST(CandidatePool, CoordinatesInHypothesesBecomeEntries) {
    auto policy = script_from(json::array(
        {call_turn("Maybe near 48.8584, 2.2945 or the Latin Quarter.", "poi_input_tips", {{"query", "Eiffel"}}),
         answer(40.7306, -73.9896, "Not Paris after all.")}));
    const auto pool = extract_candidate_pool(run(*policy));
    ASSERT_FALSE(pool.entries.empty());
    bool found = false;
    for (const auto& c : pool.entries) {
        if (c.location && geodesic_distance(*c.location, GeoPoint(48.8584, 2.2945)) < 1.0) {
            found = true;
            EXPECT_NE(c.status, CandidateStatus::Supported);
        }
    }
    EXPECT_TRUE(found);
}

TEST(TrajectoryJson, RoundTrip) {
    const auto t = bund_episode();
    const json meta{{"run", "x"}};
    const auto doc = trajectory_to_json(t, meta);
    EXPECT_EQ(doc.at("schema"), kTrajectorySchema);
    EXPECT_EQ(doc.at("sample_id"), "sh-river-001");
    EXPECT_FALSE(doc.at("accounting").contains("wall_seconds"));
    const auto back = trajectory_from_json(json::parse(doc.dump()));
    EXPECT_EQ(trajectory_to_json(back, meta).dump(), doc.dump());
    EXPECT_EQ(back.steps.size(), t.steps.size());
    EXPECT_EQ(back.conversation, t.conversation);
    EXPECT_EQ(back.prediction, t.prediction);
}

TEST(TrajectoryJson, ToolResultKinds) {
    ToolResult truncated = ToolResult::text("c", std::string(200, 'a'));
    truncate_observation(truncated, 80);
    for (const auto& r : {ToolResult::text("c", "t"), ToolResult::image("c", "img-2", "cap"),
                          ToolResult::failure("c", "not-found", "m"), truncated}) {
        EXPECT_EQ(tool_result_from_json(json::parse(tool_result_to_json(r).dump())), r);
    }
}

TEST(TrajectoryJson, RejectsWrongSchema) {
    auto doc = json::parse(trajectory_to_json(bund_episode()).dump());
    doc["schema"] = "other/1";
    EXPECT_THROW(trajectory_from_json(doc), std::invalid_argument);
}

TEST(Termination, NamesRoundTrip) {
    for (auto t : {Termination::Answered, Termination::BudgetExhausted, Termination::PolicyError,
                   Termination::Unparseable}) {
        EXPECT_EQ(parse_termination(termination_name(t)), t);
    }
    EXPECT_EQ(termination_name(Termination::BudgetExhausted), "budget_exhausted");
}
