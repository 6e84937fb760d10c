#include <cstdlib>

#include <gtest/gtest.h>

#include "mapagent/map_env.hpp"
#include "test_support.hpp"

using namespace mapagent;
using nlohmann::json;
using testsupport::FakeTransport;

namespace {

const ProviderCredentials kCreds{"AKEY-123", "BKEY-456"};

ToolResult call_live(LiveMapBackend& env, ImageStore& images, const std::string& tool, const json& args,
                     const std::string& region = "") {
    const auto v = validate_call(ToolRegistry::standard(), {"c1", tool, args}, &images);
    EXPECT_TRUE(std::holds_alternative<ValidatedCall>(v));
    EpisodeContext ctx{images, region};
    return env.execute(std::get<ValidatedCall>(v), ctx);
}

std::string png_bytes() { return testsupport::read_text("images/opera.png"); }

const char* kProviderAPois = R"js({"status":"1","info":"OK","pois":[
  {"id":"B0FFG","name":"Starbucks (Bund)","address":"Zhongshan East 1st Rd","type":"cafe","location":"121.490000,31.240000","tel":[]},
  {"id":"B0FFH","name":"Starbucks (Lujiazui)","address":[],"type":"cafe","location":"121.505000,31.242000"}]})js";

const char* kProviderBResults = R"js({"status":"OK","results":[
  {"place_id":"ChIJ1","name":"Cafe de Flore","formatted_address":"172 Bd Saint-Germain, Paris","types":["cafe","food"],
   "geometry":{"location":{"lat":48.854,"lng":2.3325}}}]})js";

}  // namespace

TEST(LiveMap, MainlandSearchGoesToProviderA) {
    FakeTransport transport;
    transport.push(200, kProviderAPois);
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "poi_keyword_search", {{"keyword", "Starbucks"}, {"center", "31.24,121.49"}});
    ASSERT_FALSE(r.is_error()) << r.observation_text();
    const auto reqs = transport.requests();
    ASSERT_EQ(reqs.size(), 1u);
    EXPECT_EQ(reqs[0].url.rfind("https://restapi.amap.com/v3/place/around?keywords=Starbucks&location=121.490000,31.240000", 0), 0u)
        << reqs[0].url;
    EXPECT_NE(reqs[0].url.find("key=AKEY-123"), std::string::npos);
    EXPECT_EQ(r.observation_text(),
              "2 POI result(s) for \"Starbucks\" near 31.240000,121.490000:\n"
              "1. id=B0FFG | Starbucks (Bund) | Zhongshan East 1st Rd | cafe | 31.240000,121.490000 | 0 m from center\n"
              "2. id=B0FFH | Starbucks (Lujiazui) |  | cafe | 31.242000,121.505000 | 1.4 km from center\n");
}

TEST(LiveMap, ForeignSearchGoesToProviderB) {
    FakeTransport transport;
    transport.push(200, kProviderBResults);
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "poi_keyword_search", {{"keyword", "cafe de flore"}}, "fr");
    ASSERT_FALSE(r.is_error()) << r.observation_text();
    const auto url = transport.requests().at(0).url;
    EXPECT_EQ(url.rfind("https://maps.googleapis.com/maps/api/place/textsearch/json?query=cafe%20de%20flore", 0), 0u);
    EXPECT_NE(url.find("key=BKEY-456"), std::string::npos);
    EXPECT_NE(r.observation_text().find("id=ChIJ1 | Cafe de Flore"), std::string::npos);
}

TEST(LiveMap, DetailFollowsProviderOfEarlierSearch) {
    FakeTransport transport;
    transport.push(200, kProviderAPois);
    transport.push(200, R"js({"status":"1","pois":[{"id":"B0FFG","name":"Starbucks (Bund)","address":"x","type":"cafe",
        "location":"121.49,31.24","biz_ext":{"rating":"4.5"}}]})js");
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    call_live(env, images, "poi_keyword_search", {{"keyword", "Starbucks"}}, "cn");
    // No region hint on the detail call; the id remembers provider A.
    const auto r = call_live(env, images, "poi_detail_query", {{"poi_id", "B0FFG"}});
    EXPECT_EQ(transport.requests().at(1).url.rfind("https://restapi.amap.com/v3/place/detail?id=B0FFG", 0), 0u);
    EXPECT_NE(r.observation_text().find("rating: 4.5"), std::string::npos);
}

TEST(LiveMap, SatelliteAlwaysFromProviderB) {
    FakeTransport transport;
    transport.push(200, png_bytes());
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "satellite_map_query", {{"center", "31.24,121.49"}, {"zoom", 15}});
    ASSERT_NE(r.image_payload(), nullptr) << r.observation_text();
    EXPECT_EQ(r.image_payload()->handle, "img-1");
    const auto url = transport.requests().at(0).url;
    EXPECT_NE(url.find("maps.googleapis.com/maps/api/staticmap?center=31.240000,121.490000&zoom=15"), std::string::npos);
    EXPECT_NE(url.find("maptype=satellite"), std::string::npos);
    EXPECT_TRUE(images.contains("img-1"));
}

TEST(LiveMap, StaticMainlandMapFromProviderA) {
    FakeTransport transport;
    transport.push(200, png_bytes());
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "static_map_query", {{"center", "31.24,121.49"}});
    ASSERT_NE(r.image_payload(), nullptr);
    EXPECT_EQ(transport.requests().at(0).url.rfind("https://restapi.amap.com/v3/staticmap?location=121.490000,31.240000&zoom=16", 0),
              0u);
}

TEST(LiveMap, NonImageMapBodyIsProviderError) {
    FakeTransport transport;
    transport.push(200, "{\"status\":\"0\"}");
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "static_map_query", {{"center", "48.85,2.35"}});
    ASSERT_TRUE(r.is_error());
    EXPECT_EQ(std::get<ToolFailure>(r.body).kind, "provider-error");
    EXPECT_EQ(images.size(), 0u);
}

TEST(LiveMap, RetriesTransientFailuresWithBackoff) {
    FakeTransport transport;
    transport.push_failure();
    transport.push(503, "");
    transport.push(200, kProviderBResults);
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "poi_keyword_search", {{"keyword", "flore"}}, "fr");
    EXPECT_FALSE(r.is_error()) << r.observation_text();
    EXPECT_EQ(transport.requests().size(), 3u);
    // 500 ms + 1000 ms of backoff on the manual clock.
    EXPECT_GE(clock.now(), Clock::duration(std::chrono::milliseconds(1500)));
}

TEST(LiveMap, UnreachableAfterAllAttempts) {
    FakeTransport transport;
    for (int i = 0; i < 3; ++i) {
        transport.push_failure();
    }
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "poi_input_tips", {{"query", "flore"}});
    ASSERT_TRUE(r.is_error());
    EXPECT_EQ(std::get<ToolFailure>(r.body).kind, "provider-unreachable");
}

TEST(LiveMap, Http429BecomesQuotaExceeded) {
    FakeTransport transport([](const HttpRequest&) { return HttpResponse{429, ""}; });
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "poi_keyword_search", {{"keyword", "x"}});
    EXPECT_EQ(std::get<ToolFailure>(r.body).kind, "quota-exceeded");
    EXPECT_EQ(transport.requests().size(), 3u);
}

TEST(LiveMap, InBandQuotaAndNotFound) {
    {
        FakeTransport transport;
        transport.push(200, R"js({"status":"0","info":"DAILY_QUERY_OVER_LIMIT"})js");
        ManualClock clock;
        LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
        ImageStore images;
        const auto r = call_live(env, images, "poi_keyword_search", {{"keyword", "x"}}, "cn");
        EXPECT_EQ(std::get<ToolFailure>(r.body).kind, "quota-exceeded");
    }
    {
        FakeTransport transport;
        transport.push(200, R"js({"status":"NOT_FOUND"})js");
        ManualClock clock;
        LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
        ImageStore images;
        const auto r = call_live(env, images, "poi_detail_query", {{"poi_id", "nope"}});
        EXPECT_EQ(std::get<ToolFailure>(r.body).kind, "not-found");
    }
}

TEST(LiveMap, AuditLogRedactsKeys) {
    FakeTransport transport;
    transport.push(200, kProviderAPois);
    transport.push(200, png_bytes());
    ManualClock clock;
    JsonlLog audit;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock, &audit);
    ImageStore images;
    call_live(env, images, "poi_keyword_search", {{"keyword", "Starbucks"}}, "cn");
    call_live(env, images, "satellite_map_query", {{"center", "48.85,2.35"}});
    ASSERT_EQ(audit.lines().size(), 2u);
    for (const auto& line : audit.lines()) {
        EXPECT_EQ(line.find("AKEY-123"), std::string::npos);
        EXPECT_EQ(line.find("BKEY-456"), std::string::npos);
        const auto j = json::parse(line);
        EXPECT_EQ(j.at("status"), 200);
        EXPECT_TRUE(j.contains("latency_ms"));
    }
    EXPECT_EQ(json::parse(audit.lines()[0]).at("response").get<std::string>(), kProviderAPois);
    EXPECT_NE(json::parse(audit.lines()[1]).at("response").get<std::string>().find("bytes binary"), std::string::npos);
}

TEST(LiveMap, RequestsAreRateLimited) {
    FakeTransport transport([](const HttpRequest&) { return HttpResponse{200, R"js({"status":"OK","results":[]})js"}; });
    ManualClock clock;
    MapBackendConfig cfg;
    cfg.max_requests_per_second = 2.0;
    LiveMapBackend env(cfg, kCreds, transport, clock);
    ImageStore images;
    for (int i = 0; i < 5; ++i) {
        call_live(env, images, "poi_keyword_search", {{"keyword", "x"}}, "fr");
    }
    EXPECT_GE(clock.now(), Clock::duration(std::chrono::seconds(2)));
}

TEST(LiveMap, PlaceNameCenterResolvedThroughSearch) {
    FakeTransport transport;
    transport.push(200, kProviderBResults);
    transport.push(200, png_bytes());
    ManualClock clock;
    LiveMapBackend env(MapBackendConfig{}, kCreds, transport, clock);
    ImageStore images;
    const auto r = call_live(env, images, "static_map_query", {{"center", "Cafe de Flore"}}, "fr");
    ASSERT_NE(r.image_payload(), nullptr) << r.observation_text();
    EXPECT_NE(transport.requests().at(1).url.find("center=48.854000,2.332500"), std::string::npos);
}

TEST(LiveMap, CredentialsComeFromEnvironment) {
    MapBackendConfig cfg;
    cfg.provider_a_key_env = "MAPAGENT_TEST_KEY_A";
    cfg.provider_b_key_env = "MAPAGENT_TEST_KEY_B";
    ::unsetenv("MAPAGENT_TEST_KEY_A");
    ::unsetenv("MAPAGENT_TEST_KEY_B");
    try {
        ProviderCredentials::from_environment(cfg);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("MAPAGENT_TEST_KEY_A"), std::string::npos);
    }
    ::setenv("MAPAGENT_TEST_KEY_A", "a", 1);
    EXPECT_THROW(ProviderCredentials::from_environment(cfg), std::runtime_error);
    ::setenv("MAPAGENT_TEST_KEY_B", "b", 1);
    const auto c = ProviderCredentials::from_environment(cfg);
    EXPECT_EQ(c.provider_a_key, "a");
    EXPECT_EQ(c.provider_b_key, "b");
    ::unsetenv("MAPAGENT_TEST_KEY_A");
    ::unsetenv("MAPAGENT_TEST_KEY_B");
}
