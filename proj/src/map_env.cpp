#include "mapagent/map_env.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mapagent {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

constexpr std::size_t kNonNameOffset = 1'000'000;

// Coarse outline of mainland China (plus Hainan, Hong Kong, Macau) as (lon, lat) vertices.
constexpr std::pair<double, double> kChinaOutline[] = {
    {73.5, 39.5},  {76.5, 40.5},  {80.2, 42.2},  {80.0, 44.9},  {82.5, 45.5},  {85.5, 47.0},  {87.8, 49.2},
    {90.8, 47.5},  {91.0, 45.5},  {96.4, 42.8},  {100.0, 42.6}, {105.0, 41.6}, {111.0, 43.0}, {112.0, 43.6},
    {115.5, 45.0}, {119.9, 46.7}, {117.8, 49.5}, {120.0, 51.8}, {121.0, 53.3}, {125.5, 53.0}, {127.5, 49.8},
    {130.5, 48.9}, {134.7, 48.3}, {133.0, 45.0}, {131.3, 44.8}, {130.5, 42.5}, {128.3, 42.0}, {126.0, 41.5},
    {124.3, 39.8}, {121.2, 38.7}, {122.8, 37.4}, {121.0, 36.0}, {120.0, 34.5}, {121.0, 32.5}, {122.0, 31.0},
    {122.0, 29.5}, {120.5, 27.0}, {119.5, 25.5}, {117.0, 23.5}, {114.5, 22.0}, {111.5, 21.0}, {111.2, 18.0},
    {108.5, 18.0}, {108.5, 21.4}, {106.7, 22.0}, {104.0, 22.5}, {101.5, 21.2}, {99.5, 22.0},  {97.5, 23.5},
    {98.5, 24.5},  {97.0, 28.2},  {92.0, 27.8},  {88.0, 27.8},  {85.0, 28.0},  {81.0, 30.0},  {79.0, 32.5},
    {78.5, 35.5},
};

std::string format_coord(const GeoPoint& p) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", p.lat(), p.lon());
    return buf;
}

std::string format_distance(double meters) {
    char buf[32];
    if (meters < 1000.0) {
        std::snprintf(buf, sizeof(buf), "%.0f m", meters);
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f km", meters / 1000.0);
    }
    return buf;
}

std::string extra_to_text(const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
}

int zoom_argument(const ToolCall& call, int fallback) {
    auto it = call.arguments.find("zoom");
    if (it == call.arguments.end() || it->is_null()) {
        return fallback;
    }
    if (it->is_string()) {
        return std::atoi(it->get<std::string>().c_str());
    }
    return static_cast<int>(it->get<double>());
}

}  // namespace

PoiFixture::PoiFixture(std::vector<Poi> pois) : pois_(std::move(pois)) {
    for (std::size_t i = 0; i < pois_.size(); ++i) {
        if (!by_id_.emplace(pois_[i].id, i).second) {
            throw std::invalid_argument("duplicate POI id: " + pois_[i].id);
        }
    }
}

PoiFixture PoiFixture::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open POI fixture " + path.string());
    }
    std::vector<Poi> pois;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            Poi poi{j.at("id").get<std::string>(),
                    j.at("name").get<std::string>(),
                    j.value("address", ""),
                    j.value("category", ""),
                    GeoPoint(j.at("lat").get<double>(), j.at("lon").get<double>()),
                    {}};
            if (auto extra = j.find("extra"); extra != j.end() && extra->is_object()) {
                for (const auto& [k, v] : extra->items()) {
                    poi.extra.emplace(k, extra_to_text(v));
                }
            }
            pois.push_back(std::move(poi));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return PoiFixture(std::move(pois));
}

const Poi* PoiFixture::find(std::string_view id) const {
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &pois_[it->second];
}

bool poi_matches(const Poi& poi, std::string_view keyword) {
    const std::string k = lower(keyword);
    if (k.empty()) {
        return false;
    }
    return lower(poi.name).find(k) != std::string::npos || lower(poi.address).find(k) != std::string::npos ||
           lower(poi.category).find(k) != std::string::npos;
}

SearchRank search_rank(const Poi& poi, std::string_view keyword, const std::optional<GeoPoint>& center) {
    const std::string k = lower(keyword);
    const std::string name = lower(poi.name);
    SearchRank rank;
    rank.exact_name = name == k ? 0 : 1;
    if (auto pos = name.find(k); pos != std::string::npos) {
        rank.position = pos;
    } else {
        const auto a = lower(poi.address).find(k);
        const auto c = lower(poi.category).find(k);
        rank.position = kNonNameOffset + std::min(a, c);
    }
    rank.distance_m = center ? geodesic_distance(*center, poi.location) : 0.0;
    rank.id = poi.id;
    return rank;
}

std::vector<Poi> simulated_search(const PoiFixture& fixture, std::string_view keyword,
                                  const std::optional<GeoPoint>& center, std::size_t max_results) {
    std::vector<std::pair<SearchRank, const Poi*>> hits;
    for (const auto& poi : fixture.pois()) {
        if (poi_matches(poi, keyword)) {
            hits.emplace_back(search_rank(poi, keyword, center), &poi);
        }
    }
    std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<Poi> out;
    for (std::size_t i = 0; i < hits.size() && i < max_results; ++i) {
        out.push_back(*hits[i].second);
    }
    return out;
}

std::string_view map_kind_name(MapKind kind) { return kind == MapKind::Static ? "static" : "satellite"; }

std::string_view provider_name(ProviderId id) { return id == ProviderId::A ? "provider_a" : "provider_b"; }

void MapBackendConfig::validate() const {
    if (!(max_requests_per_second > 0.0)) {
        throw std::invalid_argument("map backend rate limit must be > 0");
    }
    if (retry.max_attempts < 1) {
        throw std::invalid_argument("retry policy needs at least one attempt");
    }
    if (mode == BackendMode::Live && (provider_a_key_env.empty() || provider_b_key_env.empty())) {
        throw std::invalid_argument("live map backend requires credential variable names");
    }
    if (mode == BackendMode::Simulated && fixture_path.empty()) {
        throw std::invalid_argument("simulated map backend requires a fixture path");
    }
    if (default_zoom < kMinZoom || default_zoom > kMaxZoom || map_width <= 0 || map_height <= 0) {
        throw std::invalid_argument("invalid default map geometry");
    }
}

bool in_mainland_china(const GeoPoint& point) {
    const double x = point.lon();
    const double y = point.lat();
    bool inside = false;
    for (std::size_t i = 0, j = std::size(kChinaOutline) - 1; i < std::size(kChinaOutline); j = i++) {
        const auto [xi, yi] = kChinaOutline[i];
        const auto [xj, yj] = kChinaOutline[j];
        if ((yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
    }
    return inside;
}

ProviderId route_provider(const MapBackendConfig& config, const ProviderHint& hint) {
    if (hint.center) {
        return in_mainland_china(*hint.center) ? ProviderId::A : ProviderId::B;
    }
    const std::string tag = lower(hint.region_tag.empty() ? config.default_region_tag : hint.region_tag);
    return (tag == "cn" || tag == "china") ? ProviderId::A : ProviderId::B;
}

std::string format_poi_list(std::string_view query, const std::vector<Poi>& pois,
                            const std::optional<GeoPoint>& center) {
    std::ostringstream out;
    out << pois.size() << " POI result(s) for \"" << query << "\"";
    if (center) {
        out << " near " << format_coord(*center);
    }
    out << ":\n";
    for (std::size_t i = 0; i < pois.size(); ++i) {
        const auto& p = pois[i];
        out << i + 1 << ". id=" << p.id << " | " << p.name << " | " << p.address << " | " << p.category << " | "
            << format_coord(p.location);
        if (center) {
            out << " | " << format_distance(geodesic_distance(*center, p.location)) << " from center";
        }
        out << '\n';
    }
    return out.str();
}

std::string format_tips(std::string_view query, const std::vector<Poi>& pois) {
    std::ostringstream out;
    out << pois.size() << " suggestion(s) for \"" << query << "\":\n";
    for (std::size_t i = 0; i < pois.size(); ++i) {
        const auto& p = pois[i];
        out << i + 1 << ". " << p.name << " (" << p.address << ") id=" << p.id << '\n';
    }
    return out.str();
}

std::string format_poi_details(const Poi& poi) {
    std::ostringstream out;
    out << "POI id=" << poi.id << '\n'
        << "name: " << poi.name << '\n'
        << "address: " << poi.address << '\n'
        << "category: " << poi.category << '\n'
        << "location: " << format_coord(poi.location) << '\n';
    for (const auto& [k, v] : poi.extra) {
        out << k << ": " << v << '\n';
    }
    return out.str();
}

SimulatedMapBackend::SimulatedMapBackend(std::shared_ptr<const PoiFixture> fixture, MapBackendConfig config)
    : fixture_(std::move(fixture)), config_(std::move(config)) {
    if (!fixture_) {
        throw std::invalid_argument("simulated backend needs a fixture");
    }
}

std::optional<GeoPoint> SimulatedMapBackend::resolve_center(const LocationArg& location) const {
    if (const auto* p = std::get_if<GeoPoint>(&location)) {
        return *p;
    }
    auto hits = simulated_search(*fixture_, std::get<std::string>(location), std::nullopt, 1);
    if (hits.empty()) {
        return std::nullopt;
    }
    return hits.front().location;
}

ToolResult SimulatedMapBackend::execute(const ValidatedCall& validated, EpisodeContext& context) {
    const ToolCall& call = validated.call();
    const auto& name = call.tool_name;
    std::optional<GeoPoint> center;
    if (auto it = call.arguments.find("center"); it != call.arguments.end() && !it->is_null()) {
        auto loc = parse_location(*it);
        center = loc ? resolve_center(*loc) : std::nullopt;
        if (!center) {
            return ToolResult::failure(call.call_id, "not-found", "could not resolve center '" + it->dump() + "'");
        }
    }

    if (name == tool_names::kPoiKeywordSearch) {
        const auto keyword = call.arguments.at("keyword").get<std::string>();
        return ToolResult::text(call.call_id, format_poi_list(keyword, simulated_search(*fixture_, keyword, center,
                                                                                        config_.max_search_results),
                                                              center));
    }
    if (name == tool_names::kPoiInputTips) {
        const auto query = call.arguments.at("query").get<std::string>();
        return ToolResult::text(call.call_id,
                                format_tips(query, simulated_search(*fixture_, query, center, config_.max_tip_results)));
    }
    if (name == tool_names::kPoiDetailQuery) {
        const auto id = call.arguments.at("poi_id").get<std::string>();
        const Poi* poi = fixture_->find(id);
        if (poi == nullptr) {
            return ToolResult::failure(call.call_id, "not-found", "no POI with id '" + id + "'");
        }
        return ToolResult::text(call.call_id, format_poi_details(*poi));
    }
    if (name == tool_names::kStaticMapQuery || name == tool_names::kSatelliteMapQuery) {
        const MapKind kind = name == tool_names::kStaticMapQuery ? MapKind::Static : MapKind::Satellite;
        const int zoom = zoom_argument(call, config_.default_zoom);
        std::optional<MapImage> rendered;
        try {
            rendered = render_simulated_map(*fixture_, *center, zoom, kind, config_.map_width, config_.map_height);
        } catch (const std::invalid_argument& e) {
            return ToolResult::failure(call.call_id, "constraint-violation", e.what());
        }
        MapImage& map = *rendered;
        std::ostringstream caption;
        caption << (kind == MapKind::Static ? "Static" : "Satellite") << " map centered at " << format_coord(*center)
                << ", zoom " << zoom << ", " << map.image.width << "x" << map.image.height << ", "
                << map.marker_ids.size() << " POI marker(s)";
        if (!map.marker_ids.empty()) {
            caption << ":";
            for (std::size_t i = 0; i < map.marker_ids.size(); ++i) {
                const Poi* poi = fixture_->find(map.marker_ids[i]);
                caption << (i == 0 ? " " : "; ") << (i + 1) << "=" << poi->name;
            }
        }
        const auto& stored = context.images.add(std::move(map.image), caption.str());
        return ToolResult::image(call.call_id, stored.handle, stored.label);
    }
    if (name == tool_names::kImageZoom) {
        const std::string handle = call.arguments.value("image", std::string("query"));
        const StoredImage* source = context.images.find(handle);
        if (source == nullptr) {
            return ToolResult::failure(call.call_id, "not-found", "no image with handle '" + handle + "'");
        }
        const NormalizedBox box = parse_bounding_box(call.arguments.at("bbox"));
        EncodedImage crop;
        try {
            crop = crop_normalized(source->image, box);
        } catch (const ImageError& e) {
            return ToolResult::failure(call.call_id, "constraint-violation", e.what());
        }
        char caption[160];
        std::snprintf(caption, sizeof(caption), "Zoomed region [%.3f, %.3f, %.3f, %.3f] of %s, %dx%d", box.x_min,
                      box.y_min, box.x_max, box.y_max, handle.c_str(), crop.width, crop.height);
        const auto& stored = context.images.add(std::move(crop), caption);
        return ToolResult::image(call.call_id, stored.handle, stored.label);
    }
    if (name == tool_names::kWebSearch) {
        const auto query = call.arguments.at("query").get<std::string>();
        return ToolResult::text(call.call_id, format_poi_list(query, simulated_search(*fixture_, query, std::nullopt,
                                                                                      config_.max_search_results),
                                                              std::nullopt));
    }
    return ToolResult::failure(call.call_id, "unsupported", "tool '" + name + "' has no simulated implementation");
}

}  // namespace mapagent
