#include "mapagent/map_env.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace mapagent {

namespace {

std::string getenv_string(const std::string& name) {
    const char* v = std::getenv(name.c_str());
    return v == nullptr ? std::string() : std::string(v);
}

std::string lon_lat(const GeoPoint& p) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", p.lon(), p.lat());
    return buf;
}

std::string lat_lon(const GeoPoint& p) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", p.lat(), p.lon());
    return buf;
}

std::optional<GeoPoint> parse_lon_lat(const nlohmann::json& v) {
    if (!v.is_string()) {
        return std::nullopt;
    }
    const auto s = v.get<std::string>();
    const auto comma = s.find(',');
    if (comma == std::string::npos) {
        return std::nullopt;
    }
    try {
        return GeoPoint(std::stod(s.substr(comma + 1)), std::stod(s.substr(0, comma)));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

std::string text_or_empty(const nlohmann::json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        return {};
    }
    if (it->is_string()) {
        return it->get<std::string>();
    }
    if (it->is_array() && it->empty()) {
        return {};  // provider A encodes missing strings as []
    }
    return it->dump();
}

nlohmann::json parse_body(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw ProviderError("provider-error", "provider returned a non-JSON body");
    }
    return j;
}

// Provider A signals errors in-band with status "0" and an info code.
void check_provider_a(const nlohmann::json& j) {
    if (j.value("status", "1") == "1") {
        return;
    }
    const std::string info = j.value("info", "unknown error");
    if (info.find("LIMIT") != std::string::npos || info.find("EXCEEDED") != std::string::npos) {
        throw ProviderError("quota-exceeded", info);
    }
    throw ProviderError("provider-error", info);
}

void check_provider_b(const nlohmann::json& j) {
    const std::string status = j.value("status", "OK");
    if (status == "OK" || status == "ZERO_RESULTS") {
        return;
    }
    if (status == "OVER_QUERY_LIMIT" || status == "RESOURCE_EXHAUSTED") {
        throw ProviderError("quota-exceeded", status);
    }
    if (status == "NOT_FOUND" || status == "INVALID_REQUEST") {
        throw ProviderError("not-found", status);
    }
    throw ProviderError("provider-error", status + ": " + j.value("error_message", ""));
}

std::optional<Poi> poi_from_provider_a(const nlohmann::json& p) {
    auto loc = parse_lon_lat(p.value("location", nlohmann::json()));
    if (!loc) {
        return std::nullopt;
    }
    Poi poi{text_or_empty(p, "id"), text_or_empty(p, "name"), text_or_empty(p, "address"), text_or_empty(p, "type"),
            *loc, {}};
    for (const char* key : {"tel", "business_area", "cityname", "adname", "pname", "district"}) {
        if (auto v = text_or_empty(p, key); !v.empty()) {
            poi.extra.emplace(key, v);
        }
    }
    if (auto biz = p.find("biz_ext"); biz != p.end() && biz->is_object()) {
        for (const auto& [k, v] : biz->items()) {
            if (auto text = v.is_string() ? v.get<std::string>() : std::string(); !text.empty()) {
                poi.extra.emplace(k, text);
            }
        }
    }
    return poi;
}

std::optional<Poi> poi_from_provider_b(const nlohmann::json& p) {
    const auto geometry = p.value("geometry", nlohmann::json::object());
    const auto loc = geometry.value("location", nlohmann::json::object());
    if (!loc.contains("lat") || !loc.contains("lng")) {
        return std::nullopt;
    }
    std::string category;
    if (auto types = p.find("types"); types != p.end() && types->is_array() && !types->empty()) {
        category = (*types)[0].get<std::string>();
    }
    Poi poi{text_or_empty(p, "place_id"), text_or_empty(p, "name"),
            text_or_empty(p, "formatted_address").empty() ? text_or_empty(p, "vicinity")
                                                           : text_or_empty(p, "formatted_address"),
            category, GeoPoint(loc.at("lat").get<double>(), loc.at("lng").get<double>()), {}};
    for (const char* key : {"formatted_phone_number", "international_phone_number", "website", "rating"}) {
        if (auto v = text_or_empty(p, key); !v.empty()) {
            poi.extra.emplace(key, v);
        }
    }
    if (auto hours = p.find("opening_hours"); hours != p.end() && hours->contains("weekday_text")) {
        std::string joined;
        for (const auto& line : hours->at("weekday_text")) {
            joined += (joined.empty() ? "" : "; ") + line.get<std::string>();
        }
        poi.extra.emplace("opening_hours", joined);
    }
    return poi;
}

}  // namespace

ProviderCredentials ProviderCredentials::from_environment(const MapBackendConfig& config) {
    ProviderCredentials c{getenv_string(config.provider_a_key_env), getenv_string(config.provider_b_key_env)};
    if (c.provider_a_key.empty()) {
        throw std::runtime_error("environment variable " + config.provider_a_key_env + " is not set");
    }
    if (c.provider_b_key.empty()) {
        throw std::runtime_error("environment variable " + config.provider_b_key_env + " is not set");
    }
    return c;
}

LiveMapBackend::LiveMapBackend(MapBackendConfig config, ProviderCredentials credentials, HttpTransport& transport,
                               Clock& clock, JsonlLog* audit_log)
    : config_(std::move(config)),
      credentials_(std::move(credentials)),
      transport_(transport),
      clock_(clock),
      audit_log_(audit_log),
      limiter_(config_.max_requests_per_second, clock) {}

LiveMapBackend::Fetched LiveMapBackend::fetch(ProviderId provider, std::string_view tool, const std::string& url) {
    std::string last_error = "no attempt made";
    for (int attempt = 1; attempt <= config_.retry.max_attempts; ++attempt) {
        if (attempt > 1) {
            clock_.sleep_for(config_.retry.backoff_before(attempt));
        }
        limiter_.acquire();
        const auto started = std::chrono::steady_clock::now();
        nlohmann::ordered_json audit{{"ts_ms", unix_millis()},
                                     {"provider", provider_name(provider)},
                                     {"tool", tool},
                                     {"url", redact_url(url, {"key"})},
                                     {"attempt", attempt}};
        Fetched fetched;
        bool transport_failed = false;
        try {
            HttpResponse resp = transport_.send(HttpRequest{"GET", url, {}, {}, std::chrono::seconds(30)});
            fetched = Fetched{resp.status, std::move(resp.body)};
        } catch (const TransportError& e) {
            transport_failed = true;
            last_error = e.what();
            audit["error"] = last_error;
        }
        audit["latency_ms"] =
            std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started).count();
        if (!transport_failed) {
            audit["status"] = fetched.status;
            const bool binary = !fetched.body.empty() && static_cast<unsigned char>(fetched.body[0]) == 0x89;
            audit["response"] = binary ? "<" + std::to_string(fetched.body.size()) + " bytes binary>" : fetched.body;
        }
        if (audit_log_ != nullptr) {
            audit_log_->append(audit.dump());
        }
        if (transport_failed) {
            continue;
        }
        if (fetched.status == 429) {
            last_error = "HTTP 429";
            if (attempt == config_.retry.max_attempts) {
                throw ProviderError("quota-exceeded", "provider rate limit (HTTP 429)");
            }
            continue;
        }
        if (is_retryable_status(fetched.status)) {
            last_error = "HTTP " + std::to_string(fetched.status);
            continue;
        }
        if (fetched.status == 404) {
            throw ProviderError("not-found", "HTTP 404");
        }
        if (fetched.status >= 400) {
            throw ProviderError("provider-error", "HTTP " + std::to_string(fetched.status));
        }
        return fetched;
    }
    throw ProviderError("provider-unreachable", std::string(provider_name(provider)) + " unreachable after " +
                                                    std::to_string(config_.retry.max_attempts) +
                                                    " attempt(s): " + last_error);
}

ToolResult LiveMapBackend::search(const ToolCall& call, ProviderId provider, bool tips,
                                  const std::optional<GeoPoint>& center) {
    const std::string query = call.arguments.at(tips ? "query" : "keyword").get<std::string>();
    const std::size_t limit = tips ? config_.max_tip_results : config_.max_search_results;
    std::string url;
    if (provider == ProviderId::A) {
        if (tips) {
            url = config_.provider_a_base_url + "/v3/assistant/inputtips?keywords=" + url_encode(query);
            if (center) {
                url += "&location=" + lon_lat(*center);
            }
        } else if (center) {
            url = config_.provider_a_base_url + "/v3/place/around?keywords=" + url_encode(query) +
                  "&location=" + lon_lat(*center) + "&radius=50000&sortrule=weight";
        } else {
            url = config_.provider_a_base_url + "/v3/place/text?keywords=" + url_encode(query);
        }
        url += "&offset=" + std::to_string(limit) + "&page=1&extensions=all&key=" + credentials_.provider_a_key;
    } else {
        url = config_.provider_b_base_url + "/maps/api/place/textsearch/json?query=" + url_encode(query);
        if (center) {
            url += "&location=" + lat_lon(*center) + "&radius=50000";
        }
        url += "&key=" + credentials_.provider_b_key;
    }
    const auto body = parse_body(fetch(provider, call.tool_name, url).body);
    std::vector<Poi> pois;
    if (provider == ProviderId::A) {
        check_provider_a(body);
        for (const auto& p : body.value(tips ? "tips" : "pois", nlohmann::json::array())) {
            if (auto poi = poi_from_provider_a(p); poi && pois.size() < limit) {
                pois.push_back(std::move(*poi));
            }
        }
    } else {
        check_provider_b(body);
        for (const auto& p : body.value("results", nlohmann::json::array())) {
            if (auto poi = poi_from_provider_b(p); poi && pois.size() < limit) {
                pois.push_back(std::move(*poi));
            }
        }
    }
    {
        std::lock_guard lock(ids_mu_);
        for (const auto& p : pois) {
            id_provider_[p.id] = provider;
        }
    }
    return ToolResult::text(call.call_id, tips ? format_tips(query, pois) : format_poi_list(query, pois, center));
}

ToolResult LiveMapBackend::detail(const ToolCall& call, ProviderId provider) {
    const std::string id = call.arguments.at("poi_id").get<std::string>();
    std::optional<Poi> poi;
    if (provider == ProviderId::A) {
        const auto body = parse_body(fetch(provider, call.tool_name,
                                           config_.provider_a_base_url + "/v3/place/detail?id=" + url_encode(id) +
                                               "&key=" + credentials_.provider_a_key)
                                         .body);
        check_provider_a(body);
        const auto pois = body.value("pois", nlohmann::json::array());
        if (!pois.empty()) {
            poi = poi_from_provider_a(pois[0]);
        }
    } else {
        const auto body = parse_body(
            fetch(provider, call.tool_name,
                  config_.provider_b_base_url + "/maps/api/place/details/json?place_id=" + url_encode(id) +
                      "&fields=place_id,name,formatted_address,geometry,types,formatted_phone_number,"
                      "opening_hours,website,rating&key=" +
                      credentials_.provider_b_key)
                .body);
        check_provider_b(body);
        if (body.contains("result")) {
            poi = poi_from_provider_b(body.at("result"));
        }
    }
    if (!poi) {
        return ToolResult::failure(call.call_id, "not-found", "no POI with id '" + id + "'");
    }
    return ToolResult::text(call.call_id, format_poi_details(*poi));
}

ToolResult LiveMapBackend::map_image(const ToolCall& call, ProviderId provider, MapKind kind, const GeoPoint& center,
                                     int zoom, EpisodeContext& context) {
    std::string url;
    if (provider == ProviderId::A && kind == MapKind::Static) {
        url = config_.provider_a_base_url + "/v3/staticmap?location=" + lon_lat(center) +
              "&zoom=" + std::to_string(zoom) + "&size=" + std::to_string(config_.map_width) + "*" +
              std::to_string(config_.map_height) + "&key=" + credentials_.provider_a_key;
    } else {
        // Provider A has no satellite static-map endpoint; satellite imagery always comes from B.
        provider = ProviderId::B;
        url = config_.provider_b_base_url + "/maps/api/staticmap?center=" + lat_lon(center) +
              "&zoom=" + std::to_string(zoom) + "&size=" + std::to_string(config_.map_width) + "x" +
              std::to_string(config_.map_height) + "&maptype=" + (kind == MapKind::Static ? "roadmap" : "satellite") +
              "&key=" + credentials_.provider_b_key;
    }
    auto fetched = fetch(provider, call.tool_name, url);
    EncodedImage image;
    try {
        image = make_encoded_image(std::vector<std::uint8_t>(fetched.body.begin(), fetched.body.end()));
    } catch (const ImageError&) {
        return ToolResult::failure(call.call_id, "provider-error", "map provider did not return an image");
    }
    std::ostringstream caption;
    caption << (kind == MapKind::Static ? "Static" : "Satellite") << " map centered at " << lat_lon(center) << ", zoom "
            << zoom << ", " << image.width << "x" << image.height;
    const auto& stored = context.images.add(std::move(image), caption.str());
    return ToolResult::image(call.call_id, stored.handle, stored.label);
}

std::optional<GeoPoint> LiveMapBackend::resolve_place(const std::string& place, ProviderId provider) {
    ToolCall probe{"resolve", std::string(tool_names::kPoiKeywordSearch), {{"keyword", place}}};
    std::string url;
    if (provider == ProviderId::A) {
        url = config_.provider_a_base_url + "/v3/place/text?keywords=" + url_encode(place) +
              "&offset=1&page=1&key=" + credentials_.provider_a_key;
        const auto body = parse_body(fetch(provider, probe.tool_name, url).body);
        check_provider_a(body);
        for (const auto& p : body.value("pois", nlohmann::json::array())) {
            if (auto poi = poi_from_provider_a(p)) {
                return poi->location;
            }
        }
        return std::nullopt;
    }
    url = config_.provider_b_base_url + "/maps/api/place/textsearch/json?query=" + url_encode(place) +
          "&key=" + credentials_.provider_b_key;
    const auto body = parse_body(fetch(provider, probe.tool_name, url).body);
    check_provider_b(body);
    for (const auto& p : body.value("results", nlohmann::json::array())) {
        if (auto poi = poi_from_provider_b(p)) {
            return poi->location;
        }
    }
    return std::nullopt;
}

ToolResult LiveMapBackend::execute(const ValidatedCall& validated, EpisodeContext& context) {
    const ToolCall& call = validated.call();
    const std::string& name = call.tool_name;
    try {
        if (name == tool_names::kImageZoom) {
            const std::string handle = call.arguments.value("image", std::string("query"));
            const StoredImage* source = context.images.find(handle);
            if (source == nullptr) {
                return ToolResult::failure(call.call_id, "not-found", "no image with handle '" + handle + "'");
            }
            const NormalizedBox box = parse_bounding_box(call.arguments.at("bbox"));
            EncodedImage crop = crop_normalized(source->image, box);
            const auto& stored = context.images.add(std::move(crop), "Zoomed region of " + handle);
            return ToolResult::image(call.call_id, stored.handle, stored.label);
        }

        std::optional<GeoPoint> center;
        ProviderId provider = route_provider(config_, ProviderHint{std::nullopt, context.region_hint});
        if (auto it = call.arguments.find("center"); it != call.arguments.end() && !it->is_null()) {
            auto loc = parse_location(*it);
            if (loc && std::holds_alternative<GeoPoint>(*loc)) {
                center = std::get<GeoPoint>(*loc);
            } else if (loc) {
                center = resolve_place(std::get<std::string>(*loc), provider);
                if (!center) {
                    return ToolResult::failure(call.call_id, "not-found", "could not resolve center " + it->dump());
                }
            }
            provider = route_provider(config_, ProviderHint{center, context.region_hint});
        }

        if (name == tool_names::kPoiKeywordSearch) {
            return search(call, provider, false, center);
        }
        if (name == tool_names::kPoiInputTips) {
            return search(call, provider, true, center);
        }
        if (name == tool_names::kPoiDetailQuery) {
            const auto id = call.arguments.at("poi_id").get<std::string>();
            std::lock_guard lock(ids_mu_);
            if (auto it = id_provider_.find(id); it != id_provider_.end()) {
                provider = it->second;
            }
        }
        if (name == tool_names::kPoiDetailQuery) {
            return detail(call, provider);
        }
        if (name == tool_names::kStaticMapQuery || name == tool_names::kSatelliteMapQuery) {
            int zoom = config_.default_zoom;
            if (auto z = call.arguments.find("zoom"); z != call.arguments.end() && z->is_number()) {
                zoom = z->get<int>();
            }
            return map_image(call, provider,
                             name == tool_names::kStaticMapQuery ? MapKind::Static : MapKind::Satellite, *center, zoom,
                             context);
        }
        return ToolResult::failure(call.call_id, "unsupported", "tool '" + name + "' has no live backend");
    } catch (const ProviderError& e) {
        return ToolResult::failure(call.call_id, e.kind(), e.what());
    } catch (const ImageError& e) {
        return ToolResult::failure(call.call_id, "constraint-violation", e.what());
    } catch (const nlohmann::json::exception& e) {
        return ToolResult::failure(call.call_id, "provider-error", std::string("malformed provider payload: ") + e.what());
    }
}

}  // namespace mapagent
