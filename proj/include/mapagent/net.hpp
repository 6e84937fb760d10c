#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mapagent {

struct HttpRequest {
    std::string method = "GET";
    std::string url;
    std::map<std::string, std::string> headers;
    std::string body;
    std::chrono::milliseconds timeout{60000};
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// Raised when no HTTP response was obtained at all (DNS, connect, TLS, timeout).
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    virtual HttpResponse send(const HttpRequest& request) = 0;
};

/// cpp-httplib backed transport for http:// and https:// URLs.
class HttplibTransport final : public HttpTransport {
public:
    HttpResponse send(const HttpRequest& request) override;
};

/// Monotonic time source. Tests substitute a manual clock.
class Clock {
public:
    using duration = std::chrono::nanoseconds;
    virtual ~Clock() = default;
    virtual duration now() = 0;
    virtual void sleep_for(duration d) = 0;

    static Clock& system();
};

class ManualClock final : public Clock {
public:
    duration now() override;
    void sleep_for(duration d) override;
    void advance(duration d);

private:
    std::mutex mu_;
    duration now_{0};
};

/// Spaces acquisitions at least 1/rate apart, so any window of one second admits at most
/// `max_per_second` requests. Safe for concurrent callers.
class RateLimiter {
public:
    RateLimiter(double max_per_second, Clock& clock);

    /// Blocks until the caller may issue one request; returns the granted time.
    Clock::duration acquire();

    [[nodiscard]] double rate() const noexcept { return rate_; }

private:
    double rate_;
    Clock::duration interval_;
    Clock& clock_;
    std::mutex mu_;
    Clock::duration next_{Clock::duration::min()};
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{500};
    double backoff_multiplier = 2.0;

    /// Delay before attempt `attempt` (1-based; attempt 1 has no delay).
    [[nodiscard]] std::chrono::milliseconds backoff_before(int attempt) const;
};

/// Status codes worth retrying: 408, 425, 429 and 5xx.
bool is_retryable_status(int status);

/// Replaces the values of query parameters named in `secret_params` with "REDACTED".
std::string redact_url(const std::string& url, std::initializer_list<std::string_view> secret_params);

std::string url_encode(std::string_view text);

/// Append-only JSON-lines sink shared by concurrent writers. Writes to a file when a path
/// is given, and always keeps the lines in memory.
class JsonlLog {
public:
    JsonlLog() = default;
    explicit JsonlLog(std::filesystem::path path);

    void append(const std::string& json_line);
    [[nodiscard]] std::vector<std::string> lines() const;

private:
    mutable std::mutex mu_;
    std::filesystem::path path_;
    std::vector<std::string> lines_;
};

/// Milliseconds since the Unix epoch, for audit logs.
long long unix_millis();

}  // namespace mapagent
