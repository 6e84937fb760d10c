#pragma once

#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mapagent {

/// Mean Earth radius used by every distance in the project.
inline constexpr double kEarthRadiusMeters = 6371008.8;

/// Error assigned to episodes whose answer could not be parsed.
inline constexpr double kUnscoredDistance = std::numeric_limits<double>::infinity();

/// Wraps a longitude into [-180, 180]. Values already in range are returned unchanged.
double wrap_longitude(double lon);

/// Signed latitude/longitude in degrees. Construction validates latitude and wraps longitude.
class GeoPoint {
public:
    GeoPoint(double lat, double lon);

    [[nodiscard]] double lat() const noexcept { return lat_; }
    [[nodiscard]] double lon() const noexcept { return lon_; }

    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;

private:
    double lat_;
    double lon_;
};

/// Haversine great-circle distance in meters on a sphere of radius kEarthRadiusMeters.
double geodesic_distance(const GeoPoint& a, const GeoPoint& b);

/// The fixed four-key answer object: {"lat", "lon", "city", "country"}.
struct Prediction {
    GeoPoint point;
    std::string city;
    std::string country;

    friend bool operator==(const Prediction&, const Prediction&) = default;
};

class PredictionParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Extracts the last JSON object in `message_text` carrying numeric "lat" and "lon".
/// Throws PredictionParseError when none exists.
Prediction parse_prediction(std::string_view message_text);

/// Compact JSON with exactly the keys lat, lon, city, country.
std::string serialize_prediction(const Prediction& prediction);

struct RewardTier {
    double upper_bound_m;
    double reward;
};

/// Piecewise reward over distance. Tier i covers [bound(i-1), bound(i)) with bound(-1) = 0;
/// distances at or past the last bound receive the terminal reward.
class RewardLadder {
public:
    RewardLadder(std::vector<RewardTier> tiers, double terminal_reward);

    /// 1 / 0.8 / 0.6 / 0.4 / 0.2 / 0.1 at 500 m, 2 km, 10 km, 25 km, 200 km, 750 km; 0 beyond.
    static const RewardLadder& standard();

    [[nodiscard]] std::span<const RewardTier> tiers() const noexcept { return tiers_; }
    [[nodiscard]] double terminal_reward() const noexcept { return terminal_; }

private:
    std::vector<RewardTier> tiers_;
    double terminal_;
};

/// Throws std::invalid_argument on negative or NaN distance. +inf maps to the terminal reward.
double reward_for_distance(const RewardLadder& ladder, double dis_m);

struct Granularity {
    std::string name;
    double threshold_m;
};

class GranularityLevels {
public:
    explicit GranularityLevels(std::vector<Granularity> levels);

    /// Fine 500m, Local 2km, District 10km, City 25km, Region 200km, Country 750km.
    static const GranularityLevels& standard();

    [[nodiscard]] std::span<const Granularity> levels() const noexcept { return levels_; }
    [[nodiscard]] std::size_t size() const noexcept { return levels_.size(); }
    /// "Fine 500m" style column label.
    [[nodiscard]] std::string label(std::size_t i) const;

private:
    std::vector<Granularity> levels_;
};

/// Fraction of errors strictly below `threshold_m`. +inf entries count as misses.
double acc_at_dis(std::span<const double> errors_m, double threshold_m);

/// acc_at_dis at every level, in level order.
std::vector<double> accuracy_profile(std::span<const double> errors_m, const GranularityLevels& levels);

}  // namespace mapagent
