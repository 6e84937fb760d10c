#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "mapagent/geo.hpp"

using namespace mapagent;

namespace {

// Spherical law of cosines; independent of the haversine implementation under test.
double cosine_law_distance(double lat1, double lon1, double lat2, double lon2) {
    const double d = std::numbers::pi / 180.0;
    const double c = std::sin(lat1 * d) * std::sin(lat2 * d) +
                     std::cos(lat1 * d) * std::cos(lat2 * d) * std::cos((lon2 - lon1) * d);
    return kEarthRadiusMeters * std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace

TEST(GeoPoint, RejectsOutOfRangeLatitude) {
    EXPECT_THROW(GeoPoint(95.0, 0.0), std::invalid_argument);
    EXPECT_THROW(GeoPoint(-90.0001, 0.0), std::invalid_argument);
    EXPECT_NO_THROW(GeoPoint(90.0, 0.0));
    EXPECT_NO_THROW(GeoPoint(-90.0, 0.0));
}

TEST(GeoPoint, RejectsNonFinite) {
    EXPECT_THROW(GeoPoint(std::nan(""), 0.0), std::invalid_argument);
    EXPECT_THROW(GeoPoint(0.0, std::numeric_limits<double>::infinity()), std::invalid_argument);
}

TEST(GeoPoint, WrapsLongitude) {
    EXPECT_DOUBLE_EQ(GeoPoint(0.0, 190.0).lon(), -170.0);
    EXPECT_DOUBLE_EQ(GeoPoint(0.0, -190.0).lon(), 170.0);
    EXPECT_DOUBLE_EQ(GeoPoint(0.0, 180.0).lon(), 180.0);
    EXPECT_DOUBLE_EQ(GeoPoint(0.0, -180.0).lon(), -180.0);
    EXPECT_DOUBLE_EQ(GeoPoint(0.0, 725.0).lon(), 5.0);
}

TEST(GeodesicDistance, IdenticalPointsAreZero) {
    const GeoPoint p(31.24, 121.49);
    EXPECT_EQ(geodesic_distance(p, p), 0.0);
}

TEST(GeodesicDistance, AntipodesAreHalfCircumference) {
    const GeoPoint a(10.0, 20.0);
    const GeoPoint b(-10.0, -160.0);
    EXPECT_NEAR(geodesic_distance(a, b), std::numbers::pi * kEarthRadiusMeters,
                1e-6 * std::numbers::pi * kEarthRadiusMeters);
}

TEST(GeodesicDistance, OneDegreeOfLongitudeOnEquator) {
    const double expected = kEarthRadiusMeters * std::numbers::pi / 180.0;
    EXPECT_NEAR(geodesic_distance(GeoPoint(0, 0), GeoPoint(0, 1)), expected, 1e-6);
}

TEST(GeodesicDistance, CrossesAntimeridian) {
    const double expected = 2.0 * kEarthRadiusMeters * std::numbers::pi / 180.0;
    EXPECT_NEAR(geodesic_distance(GeoPoint(0, 179), GeoPoint(0, -179)), expected, 1e-6);
}

TEST(GeodesicDistance, MatchesCosineLawOracle) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> lat(-89.0, 89.0);
    std::uniform_real_distribution<double> lon(-180.0, 180.0);
    for (int i = 0; i < 500; ++i) {
        const double a1 = lat(rng), o1 = lon(rng), a2 = lat(rng), o2 = lon(rng);
        const double ours = geodesic_distance(GeoPoint(a1, o1), GeoPoint(a2, o2));
        const double oracle = cosine_law_distance(a1, o1, a2, o2);
        if (oracle > 1000.0) {
            EXPECT_NEAR(ours, oracle, oracle * 1e-6);
        }
    }
}

TEST(GeodesicDistance, SymmetricAndTriangle) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> lat(-80.0, 80.0);
    std::uniform_real_distribution<double> lon(-180.0, 180.0);
    for (int i = 0; i < 200; ++i) {
        const GeoPoint a(lat(rng), lon(rng)), b(lat(rng), lon(rng)), c(lat(rng), lon(rng));
        EXPECT_DOUBLE_EQ(geodesic_distance(a, b), geodesic_distance(b, a));
        EXPECT_LE(geodesic_distance(a, c), geodesic_distance(a, b) + geodesic_distance(b, c) + 1e-6);
    }
}

TEST(RewardLadder, StandardTierValues) {
    const auto& ladder = RewardLadder::standard();
    struct Probe {
        double d;
        double r;
    };
    const Probe probes[] = {{0.0, 1.0},          {499.9, 1.0},     {500.0, 0.8},     {1999.0, 0.8},
                            {2000.0, 0.6},       {9990.0, 0.6},    {10000.0, 0.4},   {24900.0, 0.4},
                            {25000.0, 0.2},      {199000.0, 0.2},  {200000.0, 0.1},  {749000.0, 0.1},
                            {750000.0, 0.0},     {2.0e7, 0.0},     {kUnscoredDistance, 0.0}};
    for (const auto& p : probes) {
        EXPECT_EQ(reward_for_distance(ladder, p.d), p.r) << "distance " << p.d;
    }
}

TEST(RewardLadder, RejectsNegativeAndNaN) {
    EXPECT_THROW(reward_for_distance(RewardLadder::standard(), -1.0), std::invalid_argument);
    EXPECT_THROW(reward_for_distance(RewardLadder::standard(), std::nan("")), std::invalid_argument);
}

TEST(RewardLadder, RejectsNonIncreasingBounds) {
    EXPECT_THROW(RewardLadder({{500.0, 1.0}, {500.0, 0.5}}, 0.0), std::invalid_argument);
    EXPECT_THROW(RewardLadder({{500.0, 0.5}, {1000.0, 0.8}}, 0.0), std::invalid_argument);
}

TEST(RewardLadder, MonotoneNonIncreasing) {
    const auto& ladder = RewardLadder::standard();
    double prev = 1.0;
    for (double d = 0.0; d < 1.0e6; d += 137.0) {
        const double r = reward_for_distance(ladder, d);
        EXPECT_LE(r, prev);
        prev = r;
    }
}

TEST(ParsePrediction, TakesLastValidObject) {
    const auto p = parse_prediction(
        "First guess {\"lat\": 10, \"lon\": 20} then {\"note\": 1} and finally "
        "{\"lat\": 31.2420, \"lon\": 121.5050, \"city\": \"Shanghai\", \"country\": \"China\"} done");
    EXPECT_DOUBLE_EQ(p.point.lat(), 31.2420);
    EXPECT_DOUBLE_EQ(p.point.lon(), 121.5050);
    EXPECT_EQ(p.city, "Shanghai");
    EXPECT_EQ(p.country, "China");
}

TEST(ParsePrediction, WrapsLongitude) {
    const auto p = parse_prediction(R"({"lat": 0, "lon": 190})");
    EXPECT_DOUBLE_EQ(p.point.lon(), -170.0);
}

TEST(ParsePrediction, MissingCityAndCountryDefaultEmpty) {
    const auto p = parse_prediction(R"({"lat": -33.8568, "lon": 151.2153})");
    EXPECT_EQ(p.city, "");
    EXPECT_EQ(p.country, "");
}

TEST(ParsePrediction, RejectsProse) {
    EXPECT_THROW(parse_prediction("I think this is somewhere in Europe."), PredictionParseError);
    EXPECT_THROW(parse_prediction(""), PredictionParseError);
}

TEST(ParsePrediction, RejectsStringCoordinates) {
    EXPECT_THROW(parse_prediction(R"({"lat": "31.2", "lon": "121.5"})"), PredictionParseError);
}

TEST(ParsePrediction, SkipsOutOfRangeLatitude) {
    const auto p = parse_prediction(R"({"lat": 10, "lon": 10} {"lat": 95, "lon": 0})");
    EXPECT_DOUBLE_EQ(p.point.lat(), 10.0);
    EXPECT_THROW(parse_prediction(R"({"lat": 95, "lon": 0})"), PredictionParseError);
}

TEST(ParsePrediction, RoundTripsThroughSerialize) {
    const Prediction in{GeoPoint(48.854, 2.3325), "Paris", "France"};
    const std::string s = serialize_prediction(in);
    EXPECT_EQ(s.find("\"lat\""), 1u);
    EXPECT_EQ(parse_prediction(s), in);
}

TEST(AccAtDis, StrictThreshold) {
    const std::vector<double> errors{499.9, 500.0, 1000.0, kUnscoredDistance};
    EXPECT_DOUBLE_EQ(acc_at_dis(errors, 500.0), 0.25);
    EXPECT_DOUBLE_EQ(acc_at_dis(errors, 500.1), 0.5);
}

TEST(AccAtDis, EmptyThrows) {
    EXPECT_THROW(acc_at_dis(std::vector<double>{}, 500.0), std::invalid_argument);
}

TEST(Granularity, StandardLabels) {
    const auto& g = GranularityLevels::standard();
    ASSERT_EQ(g.size(), 6u);
    EXPECT_EQ(g.label(0), "Fine 500m");
    EXPECT_EQ(g.label(1), "Local 2km");
    EXPECT_EQ(g.label(2), "District 10km");
    EXPECT_EQ(g.label(3), "City 25km");
    EXPECT_EQ(g.label(4), "Region 200km");
    EXPECT_EQ(g.label(5), "Country 750km");
}

TEST(Granularity, ProfileIsNonDecreasing) {
    std::mt19937_64 rng(3);
    std::exponential_distribution<double> dist(1.0 / 50000.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> errors(17);
        for (auto& e : errors) {
            e = dist(rng);
        }
        const auto prof = accuracy_profile(errors, GranularityLevels::standard());
        for (std::size_t i = 1; i < prof.size(); ++i) {
            EXPECT_LE(prof[i - 1], prof[i]);
        }
    }
}
