#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>
#include <json.hpp>

#include "mapagent/agent.hpp"
#include "mapagent/chat.hpp"
#include "mapagent/map_env.hpp"
#include "mapagent/net.hpp"

// Tests run with the fixtures directory as working directory.
namespace testsupport {

namespace fs = std::filesystem;

inline std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

inline void write_text(const fs::path& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << body;
}

/// Compares against tests/golden/<name>; MAPAGENT_UPDATE_GOLDEN=1 rewrites the file instead.
inline ::testing::AssertionResult matches_golden(const std::string& name, const std::string& actual) {
    const fs::path path = fs::path(MAPAGENT_GOLDEN_DIR) / name;
    const char* update = std::getenv("MAPAGENT_UPDATE_GOLDEN");
    if (update != nullptr && std::string(update) == "1") {
        write_text(path, actual);
        return ::testing::AssertionSuccess();
    }
    if (!fs::exists(path)) {
        return ::testing::AssertionFailure() << "missing golden file " << path << " (run with MAPAGENT_UPDATE_GOLDEN=1)";
    }
    const std::string expected = read_text(path);
    if (expected == actual) {
        return ::testing::AssertionSuccess();
    }
    std::size_t i = 0;
    while (i < expected.size() && i < actual.size() && expected[i] == actual[i]) {
        ++i;
    }
    return ::testing::AssertionFailure() << "differs from " << path << " at byte " << i << "\nexpected: "
                                         << expected.substr(i, 80) << "\nactual:   " << actual.substr(i, 80);
}

inline nlohmann::json read_json(const fs::path& path) { return nlohmann::json::parse(read_text(path)); }

/// Policy script for one sample from policy_script.json.
inline std::unique_ptr<mapagent::ScriptedPolicy> script_for(const std::string& sample,
                                                            const std::string& file = "policy_script.json") {
    const auto doc = read_json(file);
    return std::unique_ptr<mapagent::ScriptedPolicy>(
        new mapagent::ScriptedPolicy(mapagent::ScriptedPolicy::from_json(doc.at(sample), sample)));
}

inline std::unique_ptr<mapagent::ScriptedPolicy> script_from(const nlohmann::json& turns,
                                                             const std::string& id = "scripted") {
    return std::unique_ptr<mapagent::ScriptedPolicy>(
        new mapagent::ScriptedPolicy(mapagent::ScriptedPolicy::from_json(turns, id)));
}

inline std::shared_ptr<const mapagent::PoiFixture> fixture() {
    static const auto f = std::make_shared<const mapagent::PoiFixture>(mapagent::PoiFixture::load("pois.jsonl"));
    return f;
}

inline mapagent::GeoQuery bund_query() {
    mapagent::GeoQuery q;
    q.image_path = "images/bund.png";
    q.region_hint = "cn";
    q.sample_id = "sh-river-001";
    return q;
}

inline mapagent::GeoQuery cafe_query() {
    mapagent::GeoQuery q;
    q.image_path = "images/flore.png";
    q.region_hint = "fr";
    q.sample_id = "pa-cafe-002";
    return q;
}

/// The four-turn riverside-cafe episode used by several golden tests.
inline mapagent::Trajectory bund_episode() {
    auto policy = script_for("sh-river-001");
    mapagent::SimulatedMapBackend env(fixture());
    return mapagent::run_episode(bund_query(), *policy, env, mapagent::ToolRegistry::standard(), mapagent::Budget{});
}

/// Canned HTTP responses, recorded requests.
class FakeTransport final : public mapagent::HttpTransport {
public:
    using Handler = std::function<mapagent::HttpResponse(const mapagent::HttpRequest&)>;

    explicit FakeTransport(Handler handler = nullptr) : handler_(std::move(handler)) {}

    void push(int status, std::string body) {
        std::lock_guard lock(mu_);
        queue_.push_back({status, std::move(body)});
    }
    void push_failure() {
        std::lock_guard lock(mu_);
        queue_.push_back({-1, {}});
    }

    mapagent::HttpResponse send(const mapagent::HttpRequest& request) override {
        std::lock_guard lock(mu_);
        requests_.push_back(request);
        if (handler_) {
            return handler_(request);
        }
        if (queue_.empty()) {
            throw mapagent::TransportError("no canned response");
        }
        auto r = queue_.front();
        queue_.pop_front();
        if (r.status < 0) {
            throw mapagent::TransportError("connection refused");
        }
        return r;
    }

    std::vector<mapagent::HttpRequest> requests() const {
        std::lock_guard lock(mu_);
        return requests_;
    }

private:
    Handler handler_;
    mutable std::mutex mu_;
    std::deque<mapagent::HttpResponse> queue_;
    std::vector<mapagent::HttpRequest> requests_;
};

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                ("mapagent-test-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

/// Chat-completions response body carrying one assistant message.
inline std::string chat_body(const std::string& content, const nlohmann::json& tool_calls = nlohmann::json::array()) {
    nlohmann::json msg{{"role", "assistant"}, {"content", content}};
    if (!tool_calls.empty()) {
        msg["tool_calls"] = tool_calls;
    }
    return nlohmann::json{{"choices", {{{"index", 0}, {"message", msg}}}}}.dump();
}

}  // namespace testsupport
