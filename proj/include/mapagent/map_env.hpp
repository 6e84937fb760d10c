#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mapagent/geo.hpp"
#include "mapagent/images.hpp"
#include "mapagent/net.hpp"
#include "mapagent/tools.hpp"

namespace mapagent {

struct Poi {
    std::string id;
    std::string name;
    std::string address;
    std::string category;
    GeoPoint location;
    std::map<std::string, std::string> extra;

    friend bool operator==(const Poi&, const Poi&) = default;
};

/// Read-only POI database backing the simulated map. Loaded from JSON lines with fields
/// id, name, address, category, lat, lon, extra (object).
class PoiFixture {
public:
    explicit PoiFixture(std::vector<Poi> pois);
    static PoiFixture load(const std::filesystem::path& path);

    [[nodiscard]] const std::vector<Poi>& pois() const noexcept { return pois_; }
    [[nodiscard]] const Poi* find(std::string_view id) const;

private:
    std::vector<Poi> pois_;
    std::map<std::string, std::size_t, std::less<>> by_id_;
};

/// Case-insensitive substring test against name, address and category.
bool poi_matches(const Poi& poi, std::string_view keyword);

/// Ranking key used by simulated_search; smaller sorts first. Exact (case-insensitive) name
/// matches come first, then the position of the keyword in the name (matches found only in
/// address/category rank after every name match), then distance to `center`, then id.
struct SearchRank {
    int exact_name = 1;
    std::size_t position = 0;
    double distance_m = 0.0;
    std::string id;

    friend auto operator<=>(const SearchRank&, const SearchRank&) = default;
};
SearchRank search_rank(const Poi& poi, std::string_view keyword, const std::optional<GeoPoint>& center);

std::vector<Poi> simulated_search(const PoiFixture& fixture, std::string_view keyword,
                                  const std::optional<GeoPoint>& center, std::size_t max_results);

enum class MapKind { Static, Satellite };
std::string_view map_kind_name(MapKind kind);

struct MapImage {
    EncodedImage image;
    GeoPoint center;
    int zoom = 16;
    MapKind kind = MapKind::Static;
    /// Ids of the POIs whose markers fall inside the viewport, in drawing order.
    std::vector<std::string> marker_ids;
};

inline constexpr int kMinZoom = 3;
inline constexpr int kMaxZoom = 18;

/// Pixel position of `point` in a width x height web-mercator viewport centered on `center`.
std::pair<double, double> viewport_pixel(const GeoPoint& center, int zoom, int width, int height,
                                         const GeoPoint& point);

/// Deterministic rasterization of fixture POIs around `center`: labeled markers over a plain
/// (static) or hatched (satellite) background. Throws std::invalid_argument when zoom is
/// outside [3, 18].
MapImage render_simulated_map(const PoiFixture& fixture, const GeoPoint& center, int zoom, MapKind kind,
                              int width = 512, int height = 512);

/// RGB fill of a marker for the given map kind.
std::array<std::uint8_t, 3> marker_color(MapKind kind);

enum class BackendMode { Live, Simulated };

/// Provider A serves mainland China (AMAP-style REST API); provider B everything else
/// (Google-Maps-style REST API).
enum class ProviderId { A, B };
std::string_view provider_name(ProviderId id);

struct MapBackendConfig {
    BackendMode mode = BackendMode::Simulated;
    std::string provider_a_key_env = "MAP_PROVIDER_A_KEY";
    std::string provider_b_key_env = "MAP_PROVIDER_B_KEY";
    std::string provider_a_base_url = "https://restapi.amap.com";
    std::string provider_b_base_url = "https://maps.googleapis.com";
    double max_requests_per_second = 5.0;
    RetryPolicy retry;
    std::filesystem::path fixture_path;
    /// Region tag used when a call carries no location hint ("cn" routes to provider A).
    std::string default_region_tag = "global";
    std::size_t max_search_results = 10;
    std::size_t max_tip_results = 8;
    int map_width = 512;
    int map_height = 512;
    int default_zoom = 16;

    /// Throws std::invalid_argument on a violated invariant.
    void validate() const;
};

struct ProviderHint {
    std::optional<GeoPoint> center;
    std::string region_tag;
};

/// True when the point falls inside the coarse mainland-China polygon.
bool in_mainland_china(const GeoPoint& point);

/// Coordinates decide when present; otherwise a "cn"/"china" region tag picks A; else B.
ProviderId route_provider(const MapBackendConfig& config, const ProviderHint& hint);

/// Per-episode state the environment needs while executing a call.
struct EpisodeContext {
    ImageStore& images;
    std::string region_hint;
};

class MapBackend {
public:
    virtual ~MapBackend() = default;
    /// Never throws for tool-level problems: they come back as error ToolResults.
    virtual ToolResult execute(const ValidatedCall& call, EpisodeContext& context) = 0;
};

std::string format_poi_list(std::string_view query, const std::vector<Poi>& pois,
                            const std::optional<GeoPoint>& center);
std::string format_poi_details(const Poi& poi);
std::string format_tips(std::string_view query, const std::vector<Poi>& pois);

/// Offline map over a PoiFixture. Immutable after construction; safe for concurrent episodes.
class SimulatedMapBackend final : public MapBackend {
public:
    SimulatedMapBackend(std::shared_ptr<const PoiFixture> fixture, MapBackendConfig config = {});

    ToolResult execute(const ValidatedCall& call, EpisodeContext& context) override;

    [[nodiscard]] const PoiFixture& fixture() const noexcept { return *fixture_; }

private:
    std::optional<GeoPoint> resolve_center(const LocationArg& location) const;

    std::shared_ptr<const PoiFixture> fixture_;
    MapBackendConfig config_;
};

/// Credentials resolved from the environment variables named in MapBackendConfig.
struct ProviderCredentials {
    std::string provider_a_key;
    std::string provider_b_key;

    /// Throws std::runtime_error naming the missing variable.
    static ProviderCredentials from_environment(const MapBackendConfig& config);
};

/// HTTPS client for the two live providers. Requests from all episodes pass through one
/// rate limiter; raw responses go to the audit log.
class LiveMapBackend final : public MapBackend {
public:
    LiveMapBackend(MapBackendConfig config, ProviderCredentials credentials, HttpTransport& transport,
                   Clock& clock = Clock::system(), JsonlLog* audit_log = nullptr);

    ToolResult execute(const ValidatedCall& call, EpisodeContext& context) override;

private:
    struct Fetched {
        int status = 0;
        std::string body;
    };
    Fetched fetch(ProviderId provider, std::string_view tool, const std::string& url);

    ToolResult search(const ToolCall& call, ProviderId provider, bool tips, const std::optional<GeoPoint>& center);
    ToolResult detail(const ToolCall& call, ProviderId provider);
    ToolResult map_image(const ToolCall& call, ProviderId provider, MapKind kind, const GeoPoint& center, int zoom,
                         EpisodeContext& context);
    std::optional<GeoPoint> resolve_place(const std::string& place, ProviderId provider);

    MapBackendConfig config_;
    ProviderCredentials credentials_;
    HttpTransport& transport_;
    Clock& clock_;
    JsonlLog* audit_log_;
    RateLimiter limiter_;
    std::mutex ids_mu_;
    std::map<std::string, ProviderId> id_provider_;
};

/// Raised by LiveMapBackend internals; mapped to an error ToolResult of the same kind.
class ProviderError : public std::runtime_error {
public:
    ProviderError(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}
    [[nodiscard]] const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

}  // namespace mapagent
