#include "mapagent/geo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include <json.hpp>

namespace mapagent {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

void require_finite(double v, const char* what) {
    if (!std::isfinite(v)) {
        throw std::invalid_argument(std::string(what) + " must be finite");
    }
}

// Index one past the '}' closing the object that opens at `open`, or npos.
std::size_t match_object(std::string_view text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) {
                escaped = false;
            } else if (c == '\\') {
                escaped = true;
            } else if (c == '"') {
                in_string = false;
            }
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) {
                return i + 1;
            }
        }
    }
    return std::string_view::npos;
}

std::string optional_text(const nlohmann::json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        return {};
    }
    if (it->is_string()) {
        return it->get<std::string>();
    }
    return it->dump();
}

std::optional<Prediction> prediction_from_object(const nlohmann::json& obj) {
    if (!obj.is_object()) {
        return std::nullopt;
    }
    auto lat = obj.find("lat");
    auto lon = obj.find("lon");
    if (lat == obj.end() || lon == obj.end() || !lat->is_number() || !lon->is_number()) {
        return std::nullopt;
    }
    try {
        return Prediction{GeoPoint(lat->get<double>(), lon->get<double>()),
                          optional_text(obj, "city"), optional_text(obj, "country")};
    } catch (const std::invalid_argument&) {
        return std::nullopt;
    }
}

std::string format_threshold(double meters) {
    if (meters < 1000.0) {
        return std::to_string(static_cast<long long>(std::llround(meters))) + "m";
    }
    const double km = meters / 1000.0;
    if (km == std::floor(km)) {
        return std::to_string(static_cast<long long>(km)) + "km";
    }
    nlohmann::json j = km;
    return j.dump() + "km";
}

}  // namespace

double wrap_longitude(double lon) {
    require_finite(lon, "longitude");
    if (lon >= -180.0 && lon <= 180.0) {
        return lon;
    }
    double wrapped = std::fmod(lon + 180.0, 360.0);
    if (wrapped < 0.0) {
        wrapped += 360.0;
    }
    return wrapped - 180.0;
}

GeoPoint::GeoPoint(double lat, double lon) : lat_(lat), lon_(0.0) {
    require_finite(lat, "latitude");
    if (lat < -90.0 || lat > 90.0) {
        throw std::invalid_argument("latitude out of range [-90, 90]");
    }
    lon_ = wrap_longitude(lon);
}

double geodesic_distance(const GeoPoint& a, const GeoPoint& b) {
    const double phi1 = a.lat() * kDegToRad;
    const double phi2 = b.lat() * kDegToRad;
    const double dphi = (b.lat() - a.lat()) * kDegToRad;
    const double dlambda = (b.lon() - a.lon()) * kDegToRad;
    const double s1 = std::sin(dphi / 2.0);
    const double s2 = std::sin(dlambda / 2.0);
    double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
    h = std::clamp(h, 0.0, 1.0);
    return 2.0 * kEarthRadiusMeters * std::asin(std::sqrt(h));
}

Prediction parse_prediction(std::string_view message_text) {
    std::optional<Prediction> last;
    for (std::size_t pos = message_text.find('{'); pos != std::string_view::npos;
         pos = message_text.find('{', pos + 1)) {
        const std::size_t end = match_object(message_text, pos);
        if (end == std::string_view::npos) {
            continue;
        }
        auto parsed = nlohmann::json::parse(message_text.substr(pos, end - pos), nullptr, false);
        if (parsed.is_discarded()) {
            continue;
        }
        if (auto p = prediction_from_object(parsed)) {
            last = std::move(p);
        }
    }
    if (!last) {
        throw PredictionParseError("no JSON object with numeric lat/lon found");
    }
    return *last;
}

std::string serialize_prediction(const Prediction& prediction) {
    nlohmann::ordered_json j;
    j["lat"] = prediction.point.lat();
    j["lon"] = prediction.point.lon();
    j["city"] = prediction.city;
    j["country"] = prediction.country;
    return j.dump();
}

RewardLadder::RewardLadder(std::vector<RewardTier> tiers, double terminal_reward)
    : tiers_(std::move(tiers)), terminal_(terminal_reward) {
    if (tiers_.empty()) {
        throw std::invalid_argument("reward ladder needs at least one tier");
    }
    double prev_bound = 0.0;
    for (std::size_t i = 0; i < tiers_.size(); ++i) {
        const auto& t = tiers_[i];
        if (!(t.upper_bound_m > prev_bound)) {
            throw std::invalid_argument("reward ladder bounds must be strictly increasing and positive");
        }
        if (i > 0 && !(t.reward < tiers_[i - 1].reward)) {
            throw std::invalid_argument("reward ladder rewards must be strictly decreasing");
        }
        prev_bound = t.upper_bound_m;
    }
    if (!(terminal_ < tiers_.back().reward)) {
        throw std::invalid_argument("terminal reward must be below the last tier");
    }
}

const RewardLadder& RewardLadder::standard() {
    static const RewardLadder ladder({{500.0, 1.0},
                                      {2000.0, 0.8},
                                      {10000.0, 0.6},
                                      {25000.0, 0.4},
                                      {200000.0, 0.2},
                                      {750000.0, 0.1}},
                                     0.0);
    return ladder;
}

double reward_for_distance(const RewardLadder& ladder, double dis_m) {
    if (std::isnan(dis_m) || dis_m < 0.0) {
        throw std::invalid_argument("distance must be non-negative");
    }
    for (const auto& tier : ladder.tiers()) {
        if (dis_m < tier.upper_bound_m) {
            return tier.reward;
        }
    }
    return ladder.terminal_reward();
}

GranularityLevels::GranularityLevels(std::vector<Granularity> levels) : levels_(std::move(levels)) {
    if (levels_.empty()) {
        throw std::invalid_argument("at least one granularity level required");
    }
    for (std::size_t i = 1; i < levels_.size(); ++i) {
        if (!(levels_[i].threshold_m > levels_[i - 1].threshold_m)) {
            throw std::invalid_argument("granularity thresholds must be strictly increasing");
        }
    }
}

const GranularityLevels& GranularityLevels::standard() {
    static const GranularityLevels levels({{"Fine", 500.0},
                                           {"Local", 2000.0},
                                           {"District", 10000.0},
                                           {"City", 25000.0},
                                           {"Region", 200000.0},
                                           {"Country", 750000.0}});
    return levels;
}

std::string GranularityLevels::label(std::size_t i) const {
    const auto& level = levels_.at(i);
    return level.name + " " + format_threshold(level.threshold_m);
}

double acc_at_dis(std::span<const double> errors_m, double threshold_m) {
    if (errors_m.empty()) {
        throw std::invalid_argument("acc_at_dis needs at least one error");
    }
    std::size_t hits = 0;
    for (double e : errors_m) {
        if (std::isnan(e) || e < 0.0) {
            throw std::invalid_argument("errors must be non-negative");
        }
        if (e < threshold_m) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(errors_m.size());
}

std::vector<double> accuracy_profile(std::span<const double> errors_m, const GranularityLevels& levels) {
    std::vector<double> out;
    out.reserve(levels.size());
    for (const auto& level : levels.levels()) {
        out.push_back(acc_at_dis(errors_m, level.threshold_m));
    }
    return out;
}

}  // namespace mapagent
