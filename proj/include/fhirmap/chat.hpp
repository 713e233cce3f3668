#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fhirmap/error.hpp"
#include "fhirmap/json_util.hpp"

namespace fhirmap {

enum class FunctionCallMode { automatic, none };

inline std::string_view to_string(FunctionCallMode m) { return m == FunctionCallMode::automatic ? "auto" : "none"; }

/// Smallest top_p sent on the wire; providers reject 0.
inline constexpr double kMinTopP = 1e-9;

struct GenerationParams {
    double temperature = 0.0;
    double top_p = 1.0;
    FunctionCallMode function_call = FunctionCallMode::automatic;
    std::size_t max_candidates = 3;
    std::optional<std::uint64_t> seed;

    static GenerationParams baseline() { return {}; }
    static GenerationParams realworld() {
        GenerationParams p;
        p.top_p = kMinTopP;
        return p;
    }

    /// Throws ConfigError for out-of-range values; maps top_p <= 0 to kMinTopP.
    [[nodiscard]] GenerationParams normalized() const {
        if (!(temperature >= 0.0)) throw ConfigError("temperature must be >= 0");
        if (top_p > 1.0 || top_p < 0.0) throw ConfigError("top_p must be in (0, 1]");
        if (max_candidates < 1) throw ConfigError("max candidates must be >= 1");
        GenerationParams p = *this;
        if (p.top_p < kMinTopP) p.top_p = kMinTopP;
        return p;
    }
};

inline Json to_json(const GenerationParams& p) {
    Json j{{"temperature", p.temperature},
           {"top_p", p.top_p},
           {"function_call", to_string(p.function_call)},
           {"max_candidates", p.max_candidates}};
    if (p.seed) j["seed"] = *p.seed;
    return j;
}

/// A callable tool: one FHIR resource whose JSON schema is the parameter schema.
struct ToolSchema {
    std::string name;
    std::string description;
    Json parameters;
};

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatRequest {
    std::vector<ChatMessage> messages;
    GenerationParams params;
    std::vector<ToolSchema> tools;
};

struct ToolCall {
    std::string name;
    std::string arguments;  // JSON text as produced by the model
};

struct Usage {
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
};

/// Exactly one of `text` / `tool_call` is set.
struct ChatResponse {
    std::optional<std::string> text;
    std::optional<ToolCall> tool_call;
    std::string finish_reason;
    Usage usage;

    [[nodiscard]] std::string_view payload() const {
        if (tool_call) return tool_call->arguments;
        if (text) return *text;
        return {};
    }
};

/// Chat-completions request body with tools.
inline Json to_wire_json(const ChatRequest& req, const std::string& model) {
    if (req.messages.empty()) throw InvalidInput("chat request has no messages");
    auto params = req.params.normalized();
    Json msgs = Json::array();
    for (const auto& m : req.messages) msgs.push_back(Json{{"role", m.role}, {"content", m.content}});
    Json body{{"model", model},
              {"messages", std::move(msgs)},
              {"temperature", params.temperature},
              {"top_p", params.top_p}};
    if (params.seed) body["seed"] = *params.seed;
    if (!req.tools.empty()) {
        Json tools = Json::array();
        for (const auto& t : req.tools)
            tools.push_back(Json{{"type", "function"},
                                 {"function", {{"name", t.name}, {"description", t.description}, {"parameters", t.parameters}}}});
        body["tools"] = std::move(tools);
        body["tool_choice"] = to_string(params.function_call);
    }
    return body;
}

/// Parses a chat-completions response body. Throws MalformedResponse.
inline ChatResponse from_wire_json(std::string_view body, const std::string& provider) {
    Json j;
    try {
        j = Json::parse(body.begin(), body.end());
    } catch (const nlohmann::json::parse_error&) {
        throw MalformedResponse(provider, "response body is not JSON");
    }
    try {
        const auto& choice = j.at("choices").at(0);
        const auto& msg = choice.at("message");
        ChatResponse r;
        if (auto fr = choice.find("finish_reason"); fr != choice.end() && fr->is_string()) r.finish_reason = *fr;
        if (auto tc = msg.find("tool_calls"); tc != msg.end() && tc->is_array() && !tc->empty()) {
            const auto& fn = tc->at(0).at("function");
            r.tool_call = ToolCall{fn.at("name").get<std::string>(), fn.at("arguments").get<std::string>()};
        } else if (auto c = msg.find("content"); c != msg.end() && c->is_string()) {
            r.text = c->get<std::string>();
        } else {
            throw MalformedResponse(provider, "response carries neither content nor a tool call");
        }
        if (auto u = j.find("usage"); u != j.end() && u->is_object()) {
            r.usage.prompt_tokens = u->value("prompt_tokens", std::uint64_t{0});
            r.usage.completion_tokens = u->value("completion_tokens", std::uint64_t{0});
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedResponse(provider, std::string("unexpected response shape: ") + e.what());
    }
}

}  // namespace fhirmap
