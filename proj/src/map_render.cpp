#include "mapagent/map_env.hpp"

#include <cmath>
#include <numbers>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace mapagent {

namespace {

constexpr int kTileSize = 256;
constexpr int kMarkerRadius = 6;
constexpr int kHatchSpacing = 16;

const cv::Scalar kStaticBackground(233, 239, 242);  // BGR
const cv::Scalar kSatelliteBackground(50, 80, 60);
const cv::Scalar kSatelliteHatch(40, 62, 46);
const cv::Scalar kLabelColor(20, 20, 20);
const cv::Scalar kSatelliteLabelColor(255, 255, 255);

std::pair<double, double> world_pixel(const GeoPoint& p, double world) {
    const double x = (p.lon() + 180.0) / 360.0 * world;
    const double siny = std::clamp(std::sin(p.lat() * std::numbers::pi / 180.0), -0.9999, 0.9999);
    const double y = (0.5 - std::log((1.0 + siny) / (1.0 - siny)) / (4.0 * std::numbers::pi)) * world;
    return {x, y};
}

cv::Scalar to_bgr(const std::array<std::uint8_t, 3>& rgb) { return cv::Scalar(rgb[2], rgb[1], rgb[0]); }

}  // namespace

std::array<std::uint8_t, 3> marker_color(MapKind kind) {
    return kind == MapKind::Static ? std::array<std::uint8_t, 3>{220, 40, 40} : std::array<std::uint8_t, 3>{255, 210, 0};
}

std::pair<double, double> viewport_pixel(const GeoPoint& center, int zoom, int width, int height,
                                         const GeoPoint& point) {
    const double world = kTileSize * std::ldexp(1.0, zoom);
    const auto [cx, cy] = world_pixel(center, world);
    auto [px, py] = world_pixel(point, world);
    double dx = px - cx;
    if (dx > world / 2.0) {
        dx -= world;
    } else if (dx < -world / 2.0) {
        dx += world;
    }
    return {dx + width / 2.0, py - cy + height / 2.0};
}

MapImage render_simulated_map(const PoiFixture& fixture, const GeoPoint& center, int zoom, MapKind kind, int width,
                              int height) {
    if (zoom < kMinZoom || zoom > kMaxZoom) {
        throw std::invalid_argument("zoom must be within [3, 18]");
    }
    if (width <= 0 || height <= 0) {
        throw std::invalid_argument("map dimensions must be positive");
    }
    cv::Mat canvas(height, width, CV_8UC3,
                   kind == MapKind::Static ? kStaticBackground : kSatelliteBackground);
    if (kind == MapKind::Satellite) {
        for (int offset = -height; offset < width; offset += kHatchSpacing) {
            cv::line(canvas, cv::Point(offset, 0), cv::Point(offset + height, height), kSatelliteHatch, 1, cv::LINE_8);
        }
    }

    struct Marker {
        const Poi* poi;
        cv::Point at;
    };
    std::vector<Marker> markers;
    for (const auto& poi : fixture.pois()) {
        const auto [x, y] = viewport_pixel(center, zoom, width, height, poi.location);
        if (x >= 0.0 && x < width && y >= 0.0 && y < height) {
            markers.push_back({&poi, cv::Point(static_cast<int>(std::floor(x)), static_cast<int>(std::floor(y)))});
        }
    }
    std::sort(markers.begin(), markers.end(), [](const Marker& a, const Marker& b) { return a.poi->id < b.poi->id; });

    const cv::Scalar fill = to_bgr(marker_color(kind));
    const cv::Scalar label_color = kind == MapKind::Static ? kLabelColor : kSatelliteLabelColor;
    for (std::size_t i = 0; i < markers.size(); ++i) {
        const auto& m = markers[i];
        cv::putText(canvas, std::to_string(i + 1) + " " + m.poi->name, m.at + cv::Point(kMarkerRadius + 3, 4),
                    cv::FONT_HERSHEY_SIMPLEX, 0.4, label_color, 1, cv::LINE_8);
    }
    // Markers go on top of labels so every marker center keeps the marker color.
    for (const auto& m : markers) {
        cv::circle(canvas, m.at, kMarkerRadius, fill, cv::FILLED, cv::LINE_8);
    }

    MapImage out{EncodedImage{}, center, zoom, kind, {}};
    for (const auto& m : markers) {
        out.marker_ids.push_back(m.poi->id);
    }
    std::vector<std::uint8_t> png;
    cv::imencode(".png", canvas, png);
    out.image = EncodedImage{"image/png", std::move(png), width, height};
    return out;
}

}  // namespace mapagent
