#include "mapagent/chat.hpp"

#include <algorithm>

namespace mapagent {

namespace {

bool mentions_context_limit(const std::string& body) {
    std::string lowered(body);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return lowered.find("context_length_exceeded") != std::string::npos ||
           lowered.find("maximum context length") != std::string::npos ||
           lowered.find("context length") != std::string::npos;
}

nlohmann::json parse_arguments(const nlohmann::json& raw) {
    if (raw.is_object()) {
        return raw;
    }
    if (raw.is_string()) {
        auto parsed = nlohmann::json::parse(raw.get<std::string>(), nullptr, false);
        if (!parsed.is_discarded() && parsed.is_object()) {
            return parsed;
        }
        // Unparseable arguments are kept so validation can report them in-band.
        return nlohmann::json{{"_raw", raw.get<std::string>()}};
    }
    return nlohmann::json::object();
}

std::string content_text(const nlohmann::json& content) {
    if (content.is_string()) {
        return content.get<std::string>();
    }
    std::string out;
    if (content.is_array()) {
        for (const auto& part : content) {
            if (part.value("type", "") == "text") {
                out += part.value("text", "");
            }
        }
    }
    return out;
}

}  // namespace

std::string_view role_name(Role role) {
    switch (role) {
        case Role::System:
            return "system";
        case Role::User:
            return "user";
        case Role::Assistant:
            return "assistant";
        case Role::Tool:
            return "tool";
    }
    return "user";
}

Role parse_role(std::string_view name) {
    if (name == "system") {
        return Role::System;
    }
    if (name == "user") {
        return Role::User;
    }
    if (name == "assistant") {
        return Role::Assistant;
    }
    if (name == "tool") {
        return Role::Tool;
    }
    throw std::invalid_argument("unknown chat role: " + std::string(name));
}

std::string_view chat_error_name(ChatErrorKind kind) {
    switch (kind) {
        case ChatErrorKind::Transport:
            return "transport-failure";
        case ChatErrorKind::MalformedResponse:
            return "malformed-response";
        case ChatErrorKind::ContextLengthExceeded:
            return "context-length-exceeded";
        case ChatErrorKind::ScriptExhausted:
            return "scripted-exhausted";
    }
    return "transport-failure";
}

ChatMessage ChatMessage::system(std::string text) {
    return ChatMessage{Role::System, {ContentPart::make_text(std::move(text))}, {}, std::nullopt};
}

ChatMessage ChatMessage::user(std::string text) {
    return ChatMessage{Role::User, {ContentPart::make_text(std::move(text))}, {}, std::nullopt};
}

ChatMessage ChatMessage::assistant(std::string text, std::vector<ToolCall> calls) {
    ChatMessage m{Role::Assistant, {}, std::move(calls), std::nullopt};
    if (!text.empty()) {
        m.content.push_back(ContentPart::make_text(std::move(text)));
    }
    return m;
}

ChatMessage ChatMessage::tool(std::string call_id, std::string text) {
    return ChatMessage{Role::Tool, {ContentPart::make_text(std::move(text))}, {}, std::move(call_id)};
}

std::string ChatMessage::text() const {
    std::string out;
    for (const auto& part : content) {
        if (part.kind == ContentPart::Kind::Text) {
            out += part.text;
        }
    }
    return out;
}

std::size_t ChatMessage::image_count() const {
    return static_cast<std::size_t>(std::count_if(content.begin(), content.end(), [](const ContentPart& p) {
        return p.kind == ContentPart::Kind::Image;
    }));
}

nlohmann::ordered_json message_to_json(const ChatMessage& message) {
    nlohmann::ordered_json j;
    j["role"] = role_name(message.role);
    nlohmann::ordered_json parts = nlohmann::ordered_json::array();
    for (const auto& part : message.content) {
        if (part.kind == ContentPart::Kind::Text) {
            parts.push_back({{"type", "text"}, {"text", part.text}});
        } else {
            parts.push_back({{"type", "image"}, {"image", part.image_handle}});
        }
    }
    j["content"] = std::move(parts);
    if (!message.tool_calls.empty()) {
        nlohmann::ordered_json calls = nlohmann::ordered_json::array();
        for (const auto& c : message.tool_calls) {
            calls.push_back({{"id", c.call_id}, {"name", c.tool_name}, {"arguments", c.arguments}});
        }
        j["tool_calls"] = std::move(calls);
    }
    if (message.tool_call_id) {
        j["tool_call_id"] = *message.tool_call_id;
    }
    return j;
}

ChatMessage message_from_json(const nlohmann::json& j) {
    ChatMessage m;
    m.role = parse_role(j.value("role", "assistant"));
    if (auto content = j.find("content"); content != j.end()) {
        if (content->is_string()) {
            if (!content->get_ref<const std::string&>().empty()) {
                m.content.push_back(ContentPart::make_text(content->get<std::string>()));
            }
        } else if (content->is_array()) {
            for (const auto& part : *content) {
                const std::string type = part.value("type", "text");
                if (type == "image") {
                    m.content.push_back(ContentPart::make_image(part.value("image", "")));
                } else {
                    m.content.push_back(ContentPart::make_text(part.value("text", "")));
                }
            }
        }
    }
    if (auto calls = j.find("tool_calls"); calls != j.end() && calls->is_array()) {
        for (const auto& c : *calls) {
            m.tool_calls.push_back(ToolCall{c.value("id", ""), c.value("name", ""),
                                            parse_arguments(c.value("arguments", nlohmann::json::object()))});
        }
    }
    if (auto id = j.find("tool_call_id"); id != j.end() && id->is_string()) {
        m.tool_call_id = id->get<std::string>();
    }
    if (m.role == Role::Tool && !m.tool_call_id) {
        throw std::invalid_argument("tool message without tool_call_id");
    }
    return m;
}

void PolicyEndpoint::validate() const {
    const bool scheme_ok = base_url.rfind("http://", 0) == 0 || base_url.rfind("https://", 0) == 0;
    if (!scheme_ok || base_url.size() <= std::string("https://").size()) {
        throw std::invalid_argument("policy endpoint URL must be http(s)://host[...]: '" + base_url + "'");
    }
    if (model.empty()) {
        throw std::invalid_argument("policy endpoint needs a model name");
    }
    if (timeout.count() <= 0) {
        throw std::invalid_argument("policy endpoint timeout must be positive");
    }
    if (retry.max_attempts < 1 || max_in_flight < 1) {
        throw std::invalid_argument("policy endpoint needs >= 1 attempt and >= 1 in-flight request");
    }
}

nlohmann::ordered_json message_to_wire(const ChatMessage& message, const ImageStore* images) {
    nlohmann::ordered_json j;
    j["role"] = role_name(message.role);
    const bool has_images = message.image_count() > 0;
    if (message.role == Role::Tool || message.role == Role::System || (!has_images && message.role != Role::User)) {
        if (message.role == Role::Assistant && message.content.empty()) {
            j["content"] = nullptr;
        } else {
            j["content"] = message.text();
        }
    } else {
        nlohmann::ordered_json parts = nlohmann::ordered_json::array();
        for (const auto& part : message.content) {
            if (part.kind == ContentPart::Kind::Text) {
                parts.push_back({{"type", "text"}, {"text", part.text}});
                continue;
            }
            std::string url = "image:" + part.image_handle;
            if (images != nullptr) {
                const StoredImage* stored = images->find(part.image_handle);
                if (stored == nullptr) {
                    throw std::invalid_argument("unknown image handle in message: " + part.image_handle);
                }
                url = data_url(stored->image);
            }
            parts.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
        }
        j["content"] = std::move(parts);
    }
    if (!message.tool_calls.empty()) {
        nlohmann::ordered_json calls = nlohmann::ordered_json::array();
        for (const auto& c : message.tool_calls) {
            calls.push_back({{"id", c.call_id},
                             {"type", "function"},
                             {"function", {{"name", c.tool_name}, {"arguments", c.arguments.dump()}}}});
        }
        j["tool_calls"] = std::move(calls);
    }
    if (message.tool_call_id) {
        j["tool_call_id"] = *message.tool_call_id;
    }
    return j;
}

nlohmann::ordered_json build_chat_request(const std::string& model, std::span<const ChatMessage> messages,
                                          const nlohmann::ordered_json& tool_schemas, const SamplingParams& params,
                                          const ImageStore* images) {
    nlohmann::ordered_json body;
    body["model"] = model;
    nlohmann::ordered_json wire = nlohmann::ordered_json::array();
    for (const auto& m : messages) {
        wire.push_back(message_to_wire(m, images));
    }
    body["messages"] = std::move(wire);
    if (tool_schemas.is_array() && !tool_schemas.empty()) {
        body["tools"] = tool_schemas;
        body["tool_choice"] = "auto";
    }
    body["temperature"] = params.temperature;
    body["top_p"] = params.top_p;
    body["top_k"] = params.top_k;
    body["max_tokens"] = params.max_response_tokens;
    return body;
}

ChatMessage parse_chat_response(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        throw ChatError(ChatErrorKind::MalformedResponse, "response body is not a JSON object");
    }
    auto choices = j.find("choices");
    if (choices == j.end() || !choices->is_array() || choices->empty() || !(*choices)[0].contains("message")) {
        throw ChatError(ChatErrorKind::MalformedResponse, "response has no choices[0].message");
    }
    const auto& msg = (*choices)[0].at("message");
    ChatMessage out = ChatMessage::assistant(content_text(msg.value("content", nlohmann::json())));
    if (auto calls = msg.find("tool_calls"); calls != msg.end() && calls->is_array()) {
        for (const auto& c : *calls) {
            if (!c.contains("function")) {
                throw ChatError(ChatErrorKind::MalformedResponse, "tool call without function");
            }
            const auto& fn = c.at("function");
            out.tool_calls.push_back(ToolCall{c.value("id", ""), fn.value("name", ""),
                                              parse_arguments(fn.value("arguments", nlohmann::json("{}")))});
        }
    }
    return out;
}

HttpChatPolicy::HttpChatPolicy(PolicyEndpoint endpoint, std::string api_key, HttpTransport& transport,
                               JsonlLog* call_log, Clock& clock)
    : endpoint_(std::move(endpoint)),
      api_key_(std::move(api_key)),
      transport_(transport),
      call_log_(call_log),
      clock_(clock),
      in_flight_(endpoint_.max_in_flight) {
    endpoint_.validate();
}

ChatMessage HttpChatPolicy::chat(std::span<const ChatMessage> messages, const nlohmann::ordered_json& tool_schemas,
                                 const SamplingParams& params, const ImageStore* images) {
    if (messages.empty() || (messages.front().role != Role::System && messages.front().role != Role::User)) {
        throw std::invalid_argument("conversation must start with a system or user message");
    }
    HttpRequest request;
    request.method = "POST";
    std::string url = endpoint_.base_url;
    while (!url.empty() && url.back() == '/') {
        url.pop_back();
    }
    request.url = url + "/chat/completions";
    request.headers = {{"Content-Type", "application/json"}};
    if (!api_key_.empty()) {
        request.headers.emplace("Authorization", "Bearer " + api_key_);
    }
    request.body = build_chat_request(endpoint_.model, messages, tool_schemas, params, images).dump();
    request.timeout = endpoint_.timeout;

    long long seq = 0;
    {
        std::lock_guard lock(seq_mu_);
        seq = ++seq_;
    }
    // Logged copy of the request carries image handles instead of base64 payloads.
    const auto logged_request = call_log_ ? build_chat_request(endpoint_.model, messages, tool_schemas, params, nullptr)
                                          : nlohmann::ordered_json();

    in_flight_.acquire();
    struct Release {
        std::counting_semaphore<>& sem;
        ~Release() { sem.release(); }
    } release{in_flight_};

    std::string last_error;
    for (int attempt = 1; attempt <= endpoint_.retry.max_attempts; ++attempt) {
        if (attempt > 1) {
            clock_.sleep_for(endpoint_.retry.backoff_before(attempt));
        }
        nlohmann::ordered_json entry{{"seq", seq},
                                     {"ts_ms", unix_millis()},
                                     {"model", endpoint_.model},
                                     {"attempt", attempt},
                                     {"retries_so_far", attempt - 1}};
        if (attempt == 1 && call_log_) {
            entry["request"] = logged_request;
        }
        HttpResponse response;
        try {
            response = transport_.send(request);
        } catch (const TransportError& e) {
            last_error = e.what();
            entry["error"] = last_error;
            if (call_log_) {
                call_log_->append(entry.dump());
            }
            continue;
        }
        entry["status"] = response.status;
        entry["response"] = response.body;
        if (call_log_) {
            call_log_->append(entry.dump());
        }
        if (response.status == 200) {
            return parse_chat_response(response.body);
        }
        if (response.status == 400 || response.status == 413) {
            if (mentions_context_limit(response.body)) {
                throw ChatError(ChatErrorKind::ContextLengthExceeded, "context length exceeded");
            }
        }
        if (is_retryable_status(response.status)) {
            last_error = "HTTP " + std::to_string(response.status);
            continue;
        }
        throw ChatError(ChatErrorKind::Transport, "HTTP " + std::to_string(response.status) + ": " +
                                                      response.body.substr(0, 300));
    }
    throw ChatError(ChatErrorKind::Transport, "chat request failed after " +
                                                  std::to_string(endpoint_.retry.max_attempts) +
                                                  " attempt(s): " + last_error);
}

ScriptedPolicy::ScriptedPolicy(std::vector<ScriptedTurn> script, std::string id)
    : script_(std::move(script)), id_(std::move(id)) {
    if (script_.empty()) {
        throw std::invalid_argument("scripted policy needs a non-empty script");
    }
}

ScriptedPolicy ScriptedPolicy::from_json(const nlohmann::json& script, std::string id) {
    if (!script.is_array()) {
        throw std::invalid_argument("policy script must be a JSON array");
    }
    std::vector<ScriptedTurn> turns;
    for (const auto& entry : script) {
        if (entry.contains("error")) {
            const std::string kind = entry.at("error").get<std::string>();
            const std::string message = entry.value("message", "scripted " + kind + " failure");
            ChatErrorKind k = ChatErrorKind::Transport;
            if (kind == "malformed") {
                k = ChatErrorKind::MalformedResponse;
            } else if (kind == "context_length") {
                k = ChatErrorKind::ContextLengthExceeded;
            } else if (kind != "transport") {
                throw std::invalid_argument("unknown scripted error kind: " + kind);
            }
            turns.emplace_back(ChatError(k, message));
            continue;
        }
        nlohmann::json msg = entry;
        msg["role"] = "assistant";
        turns.emplace_back(message_from_json(msg));
    }
    return ScriptedPolicy(std::move(turns), std::move(id));
}

ChatMessage ScriptedPolicy::chat(std::span<const ChatMessage> messages, const nlohmann::ordered_json& tool_schemas,
                                 const SamplingParams&, const ImageStore*) {
    std::lock_guard lock(mu_);
    tools_offered_.push_back(tool_schemas.is_array() && !tool_schemas.empty());
    sizes_.push_back(messages.size());
    if (next_ >= script_.size()) {
        throw ChatError(ChatErrorKind::ScriptExhausted, "scripted policy '" + id_ + "' has no turns left");
    }
    const std::size_t turn = next_++;
    if (const auto* err = std::get_if<ChatError>(&script_[turn])) {
        throw *err;
    }
    ChatMessage reply = std::get<ChatMessage>(script_[turn]);
    for (std::size_t i = 0; i < reply.tool_calls.size(); ++i) {
        if (reply.tool_calls[i].call_id.empty()) {
            reply.tool_calls[i].call_id = "call_" + std::to_string(turn) + "_" + std::to_string(i);
        }
    }
    return reply;
}

std::size_t ScriptedPolicy::calls() const {
    std::lock_guard lock(mu_);
    return tools_offered_.size();
}

std::vector<bool> ScriptedPolicy::tools_offered() const {
    std::lock_guard lock(mu_);
    return tools_offered_;
}

std::vector<std::size_t> ScriptedPolicy::conversation_sizes() const {
    std::lock_guard lock(mu_);
    return sizes_;
}

}  // namespace mapagent
