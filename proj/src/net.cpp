#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "mapagent/net.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <thread>

namespace mapagent {

namespace {

class SystemClock final : public Clock {
public:
    duration now() override {
        return std::chrono::duration_cast<duration>(std::chrono::steady_clock::now().time_since_epoch());
    }
    void sleep_for(duration d) override { std::this_thread::sleep_for(d); }
};

struct SplitUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;    // /path?query
};

SplitUrl split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw TransportError("malformed URL: " + url);
    }
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
        return {url, "/"};
    }
    return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

HttpResponse HttplibTransport::send(const HttpRequest& request) {
    const auto parts = split_url(request.url);
    httplib::Client client(parts.origin);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(request.timeout).count();
    client.set_connection_timeout(std::max<long long>(1, std::min<long long>(secs, 30)), 0);
    client.set_read_timeout(std::max<long long>(1, secs), 0);
    client.set_write_timeout(std::max<long long>(1, secs), 0);

    httplib::Headers headers;
    std::string content_type = "application/json";
    for (const auto& [k, v] : request.headers) {
        if (k == "Content-Type") {
            content_type = v;
        } else {
            headers.emplace(k, v);
        }
    }
    httplib::Result result = request.method == "POST"
                                 ? client.Post(parts.path, headers, request.body, content_type)
                                 : client.Get(parts.path, headers);
    if (!result) {
        throw TransportError("HTTP request failed: " + httplib::to_string(result.error()));
    }
    return HttpResponse{result->status, result->body};
}

Clock& Clock::system() {
    static SystemClock clock;
    return clock;
}

Clock::duration ManualClock::now() {
    std::lock_guard lock(mu_);
    return now_;
}

void ManualClock::sleep_for(duration d) { advance(d); }

void ManualClock::advance(duration d) {
    std::lock_guard lock(mu_);
    now_ += d;
}

RateLimiter::RateLimiter(double max_per_second, Clock& clock) : rate_(max_per_second), clock_(clock) {
    if (!(max_per_second > 0.0) || !std::isfinite(max_per_second)) {
        throw std::invalid_argument("rate limit must be positive");
    }
    interval_ = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(1.0 / max_per_second));
    if (std::chrono::duration<double>(interval_).count() * max_per_second < 1.0) {
        interval_ += Clock::duration(1);  // round up so the spacing never undershoots
    }
}

Clock::duration RateLimiter::acquire() {
    Clock::duration slot;
    {
        std::lock_guard lock(mu_);
        const auto now = clock_.now();
        slot = std::max(now, next_);
        next_ = slot + interval_;
    }
    const auto now = clock_.now();
    if (slot > now) {
        clock_.sleep_for(slot - now);
    }
    return slot;
}

std::chrono::milliseconds RetryPolicy::backoff_before(int attempt) const {
    if (attempt <= 1) {
        return std::chrono::milliseconds(0);
    }
    const double ms = static_cast<double>(initial_backoff.count()) * std::pow(backoff_multiplier, attempt - 2);
    return std::chrono::milliseconds(static_cast<long long>(ms));
}

bool is_retryable_status(int status) {
    return status == 408 || status == 425 || status == 429 || (status >= 500 && status <= 599);
}

std::string redact_url(const std::string& url, std::initializer_list<std::string_view> secret_params) {
    std::string out = url;
    for (auto name : secret_params) {
        for (const char sep : {'?', '&'}) {
            const std::string needle = std::string(1, sep) + std::string(name) + "=";
            std::size_t pos = 0;
            while ((pos = out.find(needle, pos)) != std::string::npos) {
                const std::size_t value_start = pos + needle.size();
                const std::size_t value_end = out.find('&', value_start);
                out.replace(value_start, (value_end == std::string::npos ? out.size() : value_end) - value_start,
                            "REDACTED");
                pos = value_start;
            }
        }
    }
    return out;
}

std::string url_encode(std::string_view text) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : text) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(kHex[c >> 4]);
            out.push_back(kHex[c & 0xF]);
        }
    }
    return out;
}

JsonlLog::JsonlLog(std::filesystem::path path) : path_(std::move(path)) {
    if (!path_.empty()) {
        std::ofstream touch(path_, std::ios::app);
        if (!touch) {
            throw std::runtime_error("cannot open log file " + path_.string());
        }
    }
}

void JsonlLog::append(const std::string& json_line) {
    std::lock_guard lock(mu_);
    lines_.push_back(json_line);
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::app);
        out << json_line << '\n';
    }
}

std::vector<std::string> JsonlLog::lines() const {
    std::lock_guard lock(mu_);
    return lines_;
}

long long unix_millis() {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
        .count();
}

}  // namespace mapagent
