#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mapagent/geo.hpp"
#include "mapagent/images.hpp"

namespace mapagent {

namespace tool_names {
inline constexpr std::string_view kImageZoom = "image_zoom_tool";
inline constexpr std::string_view kPoiInputTips = "poi_input_tips";
inline constexpr std::string_view kPoiKeywordSearch = "poi_keyword_search";
inline constexpr std::string_view kPoiDetailQuery = "poi_detail_query";
inline constexpr std::string_view kStaticMapQuery = "static_map_query";
inline constexpr std::string_view kSatelliteMapQuery = "satellite_map_query";
inline constexpr std::string_view kWebSearch = "web_search";
}  // namespace tool_names

enum class ParamType {
    Text,
    Integer,
    /// [x_min, y_min, x_max, y_max] as fractions of the image extent.
    BoundingBox,
    /// "lat,lon" text, a {"lat","lon"} object, or a free-text place name.
    Location,
};

struct ParamSpec {
    std::string name;
    ParamType type = ParamType::Text;
    bool required = false;
    std::string description;
    std::optional<long long> minimum;
    std::optional<long long> maximum;

    friend bool operator==(const ParamSpec&, const ParamSpec&) = default;
};

struct ToolSpec {
    std::string name;
    std::string description;
    std::vector<ParamSpec> params;

    [[nodiscard]] const ParamSpec* find_param(std::string_view param) const;
    friend bool operator==(const ToolSpec&, const ToolSpec&) = default;
};

/// Immutable set of tool specs with unique names, kept in insertion order.
class ToolRegistry {
public:
    explicit ToolRegistry(std::vector<ToolSpec> specs);

    /// The six map tools: image zoom, POI input tips, POI keyword search, POI detail,
    /// static map, satellite map.
    static ToolRegistry standard();
    /// standard() plus a generic web_search tool, for ablations.
    static ToolRegistry with_web_search();

    [[nodiscard]] const ToolSpec* find(std::string_view name) const;
    [[nodiscard]] const std::vector<ToolSpec>& specs() const noexcept { return specs_; }

private:
    std::vector<ToolSpec> specs_;
};

struct ToolCall {
    std::string call_id;
    std::string tool_name;
    nlohmann::json arguments = nlohmann::json::object();

    friend bool operator==(const ToolCall&, const ToolCall&) = default;
};

struct TextPayload {
    std::string text;
    friend bool operator==(const TextPayload&, const TextPayload&) = default;
};

struct ImagePayload {
    std::string handle;
    std::string caption;
    friend bool operator==(const ImagePayload&, const ImagePayload&) = default;
};

struct ToolFailure {
    /// unknown-tool, missing-argument, constraint-violation, not-found,
    /// provider-unreachable, quota-exceeded, ...
    std::string kind;
    std::string message;
    friend bool operator==(const ToolFailure&, const ToolFailure&) = default;
};

struct ToolResult {
    std::string call_id;
    std::variant<TextPayload, ImagePayload, ToolFailure> body;
    bool truncated = false;

    static ToolResult text(std::string call_id, std::string text);
    static ToolResult image(std::string call_id, std::string handle, std::string caption);
    static ToolResult failure(std::string call_id, std::string kind, std::string message);

    [[nodiscard]] bool is_error() const { return std::holds_alternative<ToolFailure>(body); }
    [[nodiscard]] const ImagePayload* image_payload() const { return std::get_if<ImagePayload>(&body); }
    /// The text the policy sees for this observation.
    [[nodiscard]] std::string observation_text() const;

    friend bool operator==(const ToolResult&, const ToolResult&) = default;
};

enum class ValidationErrorKind { UnknownTool, MissingArgument, ConstraintViolation };

struct ValidationError {
    ValidationErrorKind kind;
    std::string field;
    std::string message;

    [[nodiscard]] std::string kind_name() const;
    /// Error observation handed back to the policy.
    [[nodiscard]] ToolResult to_result(const std::string& call_id) const;
};

/// A ToolCall that passed validate_call. Only validate_call can produce one.
class ValidatedCall {
public:
    [[nodiscard]] const ToolCall& call() const noexcept { return call_; }
    [[nodiscard]] const ToolSpec& spec() const noexcept { return *spec_; }

private:
    friend std::variant<ValidatedCall, ValidationError> validate_call(const ToolRegistry&, const ToolCall&,
                                                                      const ImageStore*);
    ValidatedCall(ToolCall call, const ToolSpec* spec) : call_(std::move(call)), spec_(spec) {}

    ToolCall call_;
    const ToolSpec* spec_;
};

/// Checks tool existence, required arguments and per-type constraints. When `images` is
/// given, image handles referenced by the call must exist in it.
std::variant<ValidatedCall, ValidationError> validate_call(const ToolRegistry& registry, const ToolCall& call,
                                                           const ImageStore* images = nullptr);

using LocationArg = std::variant<GeoPoint, std::string>;

/// Parses a Location argument. On failure returns the offending field ("lat", "lon" or the
/// parameter name) through `error`.
std::optional<LocationArg> parse_location(const nlohmann::json& value, std::string* error_field = nullptr,
                                          std::string* error_message = nullptr);

NormalizedBox parse_bounding_box(const nlohmann::json& value);

/// OpenAI-style "tools" array, one function entry per spec in registry order.
nlohmann::ordered_json emit_tool_schemas(const ToolRegistry& registry);
/// Inverse of emit_tool_schemas. Throws std::invalid_argument on a malformed entry.
std::vector<ToolSpec> parse_tool_schemas(const nlohmann::ordered_json& schemas);

}  // namespace mapagent
