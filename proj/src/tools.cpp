#include "mapagent/tools.hpp"

#include <cmath>
#include <charconv>
#include <set>
#include <sstream>
#include <stdexcept>

namespace mapagent {

namespace {

ParamSpec text_param(std::string name, bool required, std::string description) {
    return ParamSpec{std::move(name), ParamType::Text, required, std::move(description), std::nullopt, std::nullopt};
}

ParamSpec location_param(std::string name, bool required, std::string description) {
    return ParamSpec{std::move(name), ParamType::Location, required, std::move(description), std::nullopt,
                     std::nullopt};
}

ParamSpec zoom_param() {
    return ParamSpec{"zoom", ParamType::Integer, false, "Map zoom level (3-18, default 16).", 3, 18};
}

std::vector<ToolSpec> standard_specs() {
    return {
        ToolSpec{std::string(tool_names::kImageZoom),
                 "Zoom into a region of an image to inspect small visual clues. Returns the zoomed region image.",
                 {ParamSpec{"bbox", ParamType::BoundingBox, true,
                            "Zoom in bounding box [x_min, y_min, x_max, y_max] as fractions of the image in [0, 1].",
                            std::nullopt, std::nullopt},
                  text_param("image", false, "Handle of the image to zoom into (default: the query image).")}},
        ToolSpec{std::string(tool_names::kPoiInputTips),
                 "Get search suggestions for a partial or fuzzy place query.",
                 {text_param("query", true, "Query text."),
                  location_param("center", false, "Optional location bias as \"lat,lon\" or a place name.")}},
        ToolSpec{std::string(tool_names::kPoiKeywordSearch),
                 "Search points of interest by keyword. Returns a ranked POI list with ids, names, addresses and "
                 "coordinates.",
                 {text_param("keyword", true, "POI keyword."),
                  location_param("center", false, "Optional search center as \"lat,lon\" or a place name.")}},
        ToolSpec{std::string(tool_names::kPoiDetailQuery),
                 "Get details (address, category, coordinates, phone, hours) of a POI returned by a search.",
                 {text_param("poi_id", true, "POI id.")}},
        ToolSpec{std::string(tool_names::kStaticMapQuery),
                 "Render a static road map around a location center to check surrounding places and roads.",
                 {location_param("center", true, "Location center as \"lat,lon\" or a place name."), zoom_param()}},
        ToolSpec{std::string(tool_names::kSatelliteMapQuery),
                 "Render a satellite map around a location center to check the surrounding scene.",
                 {location_param("center", true, "Location center as \"lat,lon\" or a place name."), zoom_param()}},
    };
}

std::string type_name(ParamType t) {
    switch (t) {
        case ParamType::Text:
            return "string";
        case ParamType::Integer:
            return "integer";
        case ParamType::BoundingBox:
            return "array";
        case ParamType::Location:
            return "string";
    }
    return "string";
}

std::optional<double> as_number(const nlohmann::json& v) {
    if (v.is_number()) {
        return v.get<double>();
    }
    if (v.is_string()) {
        const auto& s = v.get_ref<const std::string&>();
        double out = 0.0;
        const char* first = s.data();
        while (first != s.data() + s.size() && *first == ' ') {
            ++first;
        }
        auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
        if (ec == std::errc() && ptr != first) {
            return out;
        }
    }
    return std::nullopt;
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        parts.push_back(item);
    }
    return parts;
}

std::optional<std::string> check_param(const ParamSpec& spec, const nlohmann::json& value) {
    switch (spec.type) {
        case ParamType::Text: {
            if (!value.is_string()) {
                return "expected a string";
            }
            if (value.get_ref<const std::string&>().find_first_not_of(" \t\n") == std::string::npos) {
                return "must not be empty";
            }
            return std::nullopt;
        }
        case ParamType::Integer: {
            auto n = as_number(value);
            if (!n || std::floor(*n) != *n) {
                return "expected an integer";
            }
            if ((spec.minimum && *n < static_cast<double>(*spec.minimum)) ||
                (spec.maximum && *n > static_cast<double>(*spec.maximum))) {
                return "out of range";
            }
            return std::nullopt;
        }
        case ParamType::BoundingBox: {
            try {
                parse_bounding_box(value);
            } catch (const std::invalid_argument& e) {
                return std::string(e.what());
            }
            return std::nullopt;
        }
        case ParamType::Location:
            return std::nullopt;  // handled by the caller for field-specific errors
    }
    return std::nullopt;
}

}  // namespace

const ParamSpec* ToolSpec::find_param(std::string_view param) const {
    for (const auto& p : params) {
        if (p.name == param) {
            return &p;
        }
    }
    return nullptr;
}

ToolRegistry::ToolRegistry(std::vector<ToolSpec> specs) : specs_(std::move(specs)) {
    std::set<std::string, std::less<>> seen;
    for (const auto& s : specs_) {
        if (!seen.insert(s.name).second) {
            throw std::invalid_argument("duplicate tool name: " + s.name);
        }
    }
}

ToolRegistry ToolRegistry::standard() { return ToolRegistry(standard_specs()); }

ToolRegistry ToolRegistry::with_web_search() {
    auto specs = standard_specs();
    specs.push_back(ToolSpec{std::string(tool_names::kWebSearch), "Search the web and return result snippets.",
                             {text_param("query", true, "Search query.")}});
    return ToolRegistry(std::move(specs));
}

const ToolSpec* ToolRegistry::find(std::string_view name) const {
    for (const auto& s : specs_) {
        if (s.name == name) {
            return &s;
        }
    }
    return nullptr;
}

ToolResult ToolResult::text(std::string call_id, std::string text) {
    return ToolResult{std::move(call_id), TextPayload{std::move(text)}, false};
}

ToolResult ToolResult::image(std::string call_id, std::string handle, std::string caption) {
    return ToolResult{std::move(call_id), ImagePayload{std::move(handle), std::move(caption)}, false};
}

ToolResult ToolResult::failure(std::string call_id, std::string kind, std::string message) {
    return ToolResult{std::move(call_id), ToolFailure{std::move(kind), std::move(message)}, false};
}

std::string ToolResult::observation_text() const {
    if (const auto* t = std::get_if<TextPayload>(&body)) {
        return t->text;
    }
    if (const auto* img = std::get_if<ImagePayload>(&body)) {
        return img->caption + " [image " + img->handle + "]";
    }
    const auto& f = std::get<ToolFailure>(body);
    return "ERROR (" + f.kind + "): " + f.message;
}

std::string ValidationError::kind_name() const {
    switch (kind) {
        case ValidationErrorKind::UnknownTool:
            return "unknown-tool";
        case ValidationErrorKind::MissingArgument:
            return "missing-argument";
        case ValidationErrorKind::ConstraintViolation:
            return "constraint-violation";
    }
    return "invalid-call";
}

ToolResult ValidationError::to_result(const std::string& call_id) const {
    return ToolResult::failure(call_id, kind_name(), field + ": " + message);
}

NormalizedBox parse_bounding_box(const nlohmann::json& value) {
    std::vector<double> coords;
    if (value.is_array()) {
        for (const auto& v : value) {
            auto n = as_number(v);
            if (!n) {
                throw std::invalid_argument("bounding box entries must be numbers");
            }
            coords.push_back(*n);
        }
    } else if (value.is_string()) {
        std::string s = value.get<std::string>();
        std::erase_if(s, [](char c) { return c == '[' || c == ']' || c == '(' || c == ')'; });
        for (const auto& part : split_commas(s)) {
            auto n = as_number(nlohmann::json(part));
            if (!n) {
                throw std::invalid_argument("bounding box entries must be numbers");
            }
            coords.push_back(*n);
        }
    } else {
        throw std::invalid_argument("bounding box must be [x_min, y_min, x_max, y_max]");
    }
    if (coords.size() != 4) {
        throw std::invalid_argument("bounding box needs exactly 4 numbers");
    }
    for (double c : coords) {
        if (!std::isfinite(c) || c < 0.0 || c > 1.0) {
            throw std::invalid_argument("bounding box coordinates must lie within the image ([0, 1])");
        }
    }
    NormalizedBox box{coords[0], coords[1], coords[2], coords[3]};
    if (!(box.x_min < box.x_max) || !(box.y_min < box.y_max)) {
        throw std::invalid_argument("bounding box must have x_min < x_max and y_min < y_max");
    }
    return box;
}

std::optional<LocationArg> parse_location(const nlohmann::json& value, std::string* error_field,
                                          std::string* error_message) {
    auto fail = [&](std::string field, std::string message) -> std::optional<LocationArg> {
        if (error_field) {
            *error_field = std::move(field);
        }
        if (error_message) {
            *error_message = std::move(message);
        }
        return std::nullopt;
    };
    auto make_point = [&](std::optional<double> lat, std::optional<double> lon) -> std::optional<LocationArg> {
        if (!lat || !std::isfinite(*lat) || *lat < -90.0 || *lat > 90.0) {
            return fail("lat", "latitude must be a number in [-90, 90]");
        }
        if (!lon || !std::isfinite(*lon)) {
            return fail("lon", "longitude must be a finite number");
        }
        return LocationArg{GeoPoint(*lat, *lon)};
    };

    if (value.is_object()) {
        auto lat = value.find("lat");
        auto lon = value.find("lon");
        return make_point(lat == value.end() ? std::nullopt : as_number(*lat),
                          lon == value.end() ? std::nullopt : as_number(*lon));
    }
    if (value.is_array() && value.size() == 2) {
        return make_point(as_number(value[0]), as_number(value[1]));
    }
    if (!value.is_string()) {
        return fail("center", "expected \"lat,lon\" text or a place name");
    }
    const auto& s = value.get_ref<const std::string&>();
    if (s.find_first_not_of(" \t\n") == std::string::npos) {
        return fail("center", "must not be empty");
    }
    const auto parts = split_commas(s);
    if (parts.size() == 2) {
        auto lat = as_number(nlohmann::json(parts[0]));
        auto lon = as_number(nlohmann::json(parts[1]));
        if (lat || lon) {
            return make_point(lat, lon);
        }
    }
    return LocationArg{s};
}

std::variant<ValidatedCall, ValidationError> validate_call(const ToolRegistry& registry, const ToolCall& call,
                                                           const ImageStore* images) {
    const ToolSpec* spec = registry.find(call.tool_name);
    if (spec == nullptr) {
        return ValidationError{ValidationErrorKind::UnknownTool, call.tool_name, "no such tool"};
    }
    if (!call.arguments.is_object()) {
        return ValidationError{ValidationErrorKind::ConstraintViolation, "arguments",
                               "arguments must be a JSON object"};
    }
    for (const auto& param : spec->params) {
        auto it = call.arguments.find(param.name);
        const bool present = it != call.arguments.end() && !it->is_null();
        if (!present) {
            if (param.required) {
                return ValidationError{ValidationErrorKind::MissingArgument, param.name, "required argument absent"};
            }
            continue;
        }
        if (param.type == ParamType::Location) {
            std::string field;
            std::string message;
            if (!parse_location(*it, &field, &message)) {
                return ValidationError{ValidationErrorKind::ConstraintViolation,
                                       field == "center" ? param.name : field, message};
            }
            continue;
        }
        if (auto problem = check_param(param, *it)) {
            return ValidationError{ValidationErrorKind::ConstraintViolation, param.name, *problem};
        }
    }
    if (images != nullptr && spec->name == tool_names::kImageZoom) {
        const std::string handle = call.arguments.value("image", std::string("query"));
        if (!images->contains(handle)) {
            return ValidationError{ValidationErrorKind::ConstraintViolation, "image",
                                   "unknown image handle '" + handle + "'"};
        }
    }
    return ValidatedCall(call, spec);
}

nlohmann::ordered_json emit_tool_schemas(const ToolRegistry& registry) {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& spec : registry.specs()) {
        nlohmann::ordered_json properties = nlohmann::ordered_json::object();
        nlohmann::ordered_json required = nlohmann::ordered_json::array();
        for (const auto& p : spec.params) {
            nlohmann::ordered_json prop{{"type", type_name(p.type)}, {"description", p.description}};
            if (p.type == ParamType::BoundingBox) {
                prop["items"] = {{"type", "number"}, {"minimum", 0}, {"maximum", 1}};
                prop["minItems"] = 4;
                prop["maxItems"] = 4;
            }
            if (p.type == ParamType::Location) {
                prop["format"] = "location";
            }
            if (p.minimum) {
                prop["minimum"] = *p.minimum;
            }
            if (p.maximum) {
                prop["maximum"] = *p.maximum;
            }
            properties[p.name] = std::move(prop);
            if (p.required) {
                required.push_back(p.name);
            }
        }
        out.push_back({{"type", "function"},
                       {"function",
                        {{"name", spec.name},
                         {"description", spec.description},
                         {"parameters", {{"type", "object"}, {"properties", properties}, {"required", required}}}}}});
    }
    return out;
}

std::vector<ToolSpec> parse_tool_schemas(const nlohmann::ordered_json& schemas) {
    if (!schemas.is_array()) {
        throw std::invalid_argument("tool schemas must be an array");
    }
    std::vector<ToolSpec> specs;
    for (const auto& entry : schemas) {
        if (entry.value("type", "") != "function" || !entry.contains("function")) {
            throw std::invalid_argument("tool schema entry must be a function");
        }
        const auto& fn = entry.at("function");
        ToolSpec spec{fn.at("name").get<std::string>(), fn.value("description", ""), {}};
        const auto& params = fn.at("parameters");
        std::set<std::string> required;
        const auto required_list = params.value("required", nlohmann::ordered_json::array());
        const auto properties = params.value("properties", nlohmann::ordered_json::object());
        for (const auto& r : required_list) {
            required.insert(r.get<std::string>());
        }
        for (const auto& [name, prop] : properties.items()) {
            ParamSpec p;
            p.name = name;
            p.description = prop.value("description", "");
            p.required = required.count(name) > 0;
            const std::string type = prop.value("type", "string");
            if (type == "array") {
                p.type = ParamType::BoundingBox;
            } else if (type == "integer") {
                p.type = ParamType::Integer;
                if (prop.contains("minimum")) {
                    p.minimum = prop.at("minimum").get<long long>();
                }
                if (prop.contains("maximum")) {
                    p.maximum = prop.at("maximum").get<long long>();
                }
            } else if (prop.value("format", "") == "location") {
                p.type = ParamType::Location;
            } else {
                p.type = ParamType::Text;
            }
            spec.params.push_back(std::move(p));
        }
        specs.push_back(std::move(spec));
    }
    return specs;
}

}  // namespace mapagent
