#pragma once

#include <chrono>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mapagent/images.hpp"
#include "mapagent/net.hpp"
#include "mapagent/tools.hpp"

namespace mapagent {

enum class Role { System, User, Assistant, Tool };
std::string_view role_name(Role role);
Role parse_role(std::string_view name);

struct ContentPart {
    enum class Kind { Text, Image };
    Kind kind = Kind::Text;
    std::string text;
    /// ImageStore handle, for Kind::Image.
    std::string image_handle;

    static ContentPart make_text(std::string text) { return {Kind::Text, std::move(text), {}}; }
    static ContentPart make_image(std::string handle) { return {Kind::Image, {}, std::move(handle)}; }

    friend bool operator==(const ContentPart&, const ContentPart&) = default;
};

struct ChatMessage {
    Role role = Role::User;
    std::vector<ContentPart> content;
    std::vector<ToolCall> tool_calls;
    /// Set on role=tool messages only.
    std::optional<std::string> tool_call_id;

    static ChatMessage system(std::string text);
    static ChatMessage user(std::string text);
    static ChatMessage assistant(std::string text, std::vector<ToolCall> calls = {});
    static ChatMessage tool(std::string call_id, std::string text);

    /// Concatenated text parts.
    [[nodiscard]] std::string text() const;
    [[nodiscard]] std::size_t image_count() const;

    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

/// Storage form (images by handle). Used for trajectory logs, scripts and rollout export.
nlohmann::ordered_json message_to_json(const ChatMessage& message);
ChatMessage message_from_json(const nlohmann::json& j);

struct SamplingParams {
    double temperature = 1.0;
    double top_p = 0.95;
    int top_k = 60;
    int max_response_tokens = 4096;
};

struct PolicyEndpoint {
    std::string base_url;
    std::string model;
    /// Name of the environment variable holding the API key.
    std::string api_key_env = "LLM_API_KEY";
    SamplingParams sampling;
    std::chrono::milliseconds timeout{180000};
    RetryPolicy retry;
    int max_in_flight = 4;

    void validate() const;
};

enum class ChatErrorKind { Transport, MalformedResponse, ContextLengthExceeded, ScriptExhausted };
std::string_view chat_error_name(ChatErrorKind kind);

class ChatError : public std::runtime_error {
public:
    ChatError(ChatErrorKind kind, const std::string& message) : std::runtime_error(message), kind_(kind) {}
    [[nodiscard]] ChatErrorKind kind() const noexcept { return kind_; }

private:
    ChatErrorKind kind_;
};

/// One assistant turn of a policy (or verifier). Implementations never modify `messages`.
class ChatPolicy {
public:
    virtual ~ChatPolicy() = default;
    virtual ChatMessage chat(std::span<const ChatMessage> messages, const nlohmann::ordered_json& tool_schemas,
                             const SamplingParams& params, const ImageStore* images) = 0;
    [[nodiscard]] virtual std::string model_id() const = 0;
};

/// Wire form of a single message. Image parts become base64 data URLs resolved through `images`.
nlohmann::ordered_json message_to_wire(const ChatMessage& message, const ImageStore* images);

/// Full chat-completions request body. `tools` is omitted when `tool_schemas` is empty.
nlohmann::ordered_json build_chat_request(const std::string& model, std::span<const ChatMessage> messages,
                                          const nlohmann::ordered_json& tool_schemas, const SamplingParams& params,
                                          const ImageStore* images);

/// Parses choices[0].message of a chat-completions response. Throws ChatError(MalformedResponse).
ChatMessage parse_chat_response(const std::string& body);

/// OpenAI-compatible chat-completions client with retries and an in-flight cap.
class HttpChatPolicy final : public ChatPolicy {
public:
    HttpChatPolicy(PolicyEndpoint endpoint, std::string api_key, HttpTransport& transport,
                   JsonlLog* call_log = nullptr, Clock& clock = Clock::system());

    ChatMessage chat(std::span<const ChatMessage> messages, const nlohmann::ordered_json& tool_schemas,
                     const SamplingParams& params, const ImageStore* images) override;
    [[nodiscard]] std::string model_id() const override { return endpoint_.model; }
    [[nodiscard]] const PolicyEndpoint& endpoint() const noexcept { return endpoint_; }

private:
    PolicyEndpoint endpoint_;
    std::string api_key_;
    HttpTransport& transport_;
    JsonlLog* call_log_;
    Clock& clock_;
    std::counting_semaphore<> in_flight_;
    std::mutex seq_mu_;
    long long seq_ = 0;
};

/// A canned turn for ScriptedPolicy: either a reply or a failure to raise.
using ScriptedTurn = std::variant<ChatMessage, ChatError>;

/// Replays a fixed list of turns regardless of input. Exhaustion raises ScriptExhausted.
class ScriptedPolicy final : public ChatPolicy {
public:
    explicit ScriptedPolicy(std::vector<ScriptedTurn> script, std::string id = "scripted");

    /// Array of turns: message objects (message_from_json) or {"error": "transport" | "malformed" |
    /// "context_length", "message": "..."}.
    static ScriptedPolicy from_json(const nlohmann::json& script, std::string id = "scripted");

    ChatMessage chat(std::span<const ChatMessage> messages, const nlohmann::ordered_json& tool_schemas,
                     const SamplingParams& params, const ImageStore* images) override;
    [[nodiscard]] std::string model_id() const override { return id_; }

    [[nodiscard]] std::size_t calls() const;
    /// Whether tools were offered on each call so far.
    [[nodiscard]] std::vector<bool> tools_offered() const;
    /// Message count of the conversation passed on each call so far.
    [[nodiscard]] std::vector<std::size_t> conversation_sizes() const;

private:
    std::vector<ScriptedTurn> script_;
    std::string id_;
    mutable std::mutex mu_;
    std::size_t next_ = 0;
    std::vector<bool> tools_offered_;
    std::vector<std::size_t> sizes_;
};

}  // namespace mapagent
