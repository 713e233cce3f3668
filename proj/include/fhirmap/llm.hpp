#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <random>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fhirmap/chat.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/http_transport.hpp"
#include "fhirmap/lexical.hpp"
#include "fhirmap/validation.hpp"

namespace fhirmap {

struct ProviderConfig {
    enum class Kind { http, mock };
    Kind kind = Kind::mock;
    std::string endpoint;
    std::string model = "mock-lexical";
    std::string auth_env;  // name of the env var holding the API key; the key itself is never stored
    std::string auth_header = "Authorization";
    double timeout_s = 60.0;
    int max_retries = 3;
    int parallelism = 4;
    bool training_opt_out = true;
    double backoff_base_s = 1.0;

    void validate() const {
        if (!training_opt_out)
            throw ConfigError("provider.training_opt_out must be true: requests must be excluded from model training");
        if (max_retries < 0) throw ConfigError("provider.max_retries must be >= 0");
        if (parallelism < 1) throw ConfigError("provider.parallelism must be >= 1");
        if (!(timeout_s > 0.0)) throw ConfigError("provider.timeout_s must be positive");
        if (kind == Kind::http) {
            (void)parse_endpoint(endpoint);
            if (model.empty()) throw ConfigError("provider.model is required for http providers");
        }
    }

    [[nodiscard]] std::string name() const { return (kind == Kind::mock ? "mock:" : "http:") + model; }
};

inline ProviderConfig provider_from_json(const Json& j) {
    ProviderConfig c;
    if (!j.is_object()) throw ConfigError("provider section must be an object");
    auto kind = j.value("kind", std::string("mock"));
    if (kind == "http")
        c.kind = ProviderConfig::Kind::http;
    else if (kind == "mock")
        c.kind = ProviderConfig::Kind::mock;
    else
        throw ConfigError("provider.kind must be 'http' or 'mock', got '" + kind + "'");
    try {
        c.endpoint = j.value("endpoint", c.endpoint);
        c.model = j.value("model", c.model);
        c.auth_env = j.value("auth_env", c.auth_env);
        c.auth_header = j.value("auth_header", c.auth_header);
        c.timeout_s = j.value("timeout_s", c.timeout_s);
        c.max_retries = j.value("max_retries", c.max_retries);
        c.parallelism = j.value("parallelism", c.parallelism);
        c.training_opt_out = j.value("training_opt_out", c.training_opt_out);
        c.backoff_base_s = j.value("backoff_base_s", c.backoff_base_s);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("provider section: ") + e.what());
    }
    c.validate();
    return c;
}

/// Serializable view of the config; carries the env var name, never its value.
inline Json to_json(const ProviderConfig& c) {
    return Json{{"kind", c.kind == ProviderConfig::Kind::http ? "http" : "mock"},
                {"endpoint", c.endpoint},
                {"model", c.model},
                {"auth_env", c.auth_env},
                {"auth_header", c.auth_header},
                {"timeout_s", c.timeout_s},
                {"max_retries", c.max_retries},
                {"parallelism", c.parallelism},
                {"training_opt_out", c.training_opt_out}};
}

// ---------------------------------------------------------------------------
// Offline mock provider

namespace detail {

/// "valueQuantity" -> "value Quantity" so path segments tokenize into words.
inline std::string split_camel(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        char c = s[i];
        if (i > 0 && std::isupper(static_cast<unsigned char>(c)) && std::islower(static_cast<unsigned char>(s[i - 1])))
            out += ' ';
        out += c;
    }
    return out;
}

struct EnumeratedAttribute {
    std::string name;
    std::string description;
};

inline std::string_view block_between(std::string_view text, std::string_view open, std::string_view close) {
    auto a = text.rfind(open);
    if (a == std::string_view::npos) return {};
    a += open.size();
    auto b = text.find(close, a);
    if (b == std::string_view::npos) return {};
    return text.substr(a, b - a);
}

inline std::vector<std::string_view> block_lines(std::string_view block) {
    std::vector<std::string_view> out;
    std::size_t pos = 0;
    while (pos < block.size()) {
        auto nl = block.find('\n', pos);
        auto line = block.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        if (line.starts_with("- ")) out.push_back(line.substr(2));
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return out;
}

inline std::vector<EnumeratedAttribute> parse_attribute_block(std::string_view prompt) {
    std::vector<EnumeratedAttribute> out;
    for (auto line : block_lines(block_between(prompt, "<attributes>", "</attributes>"))) {
        auto sep = line.find(" :: ");
        EnumeratedAttribute a;
        a.name = std::string(line.substr(0, sep));
        if (sep != std::string_view::npos) {
            auto rest = line.substr(sep + 4);
            auto sep2 = rest.find(" :: ");
            a.description = std::string(rest.substr(0, sep2));
            if (a.description == "(no description)") a.description.clear();
        }
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace detail

/// Deterministic stand-in for a chat model. For each enumerated attribute it
/// ranks the element paths of the attached schemas (or, without attachments,
/// of the named candidate resources it knows) by TF-IDF cosine against the
/// attribute name and description, and answers with the top 3 in the mapping
/// response format.
class MockProvider {
public:
    MockProvider() = default;
    explicit MockProvider(std::vector<FhirResourceDoc> knowledge) : knowledge_(std::move(knowledge)) {}

    [[nodiscard]] ChatResponse respond(const ChatRequest& request) const {
        std::string prompt;
        for (const auto& m : request.messages)
            if (m.role == "user") prompt = m.content;
        auto attrs = detail::parse_attribute_block(prompt);

        std::vector<std::string> paths;
        for (const auto& t : request.tools) {
            auto idx = build_element_index(t.parameters, t.name);
            paths.insert(paths.end(), idx.begin(), idx.end());
        }
        if (request.tools.empty()) {
            for (auto line : detail::block_lines(
                     detail::block_between(prompt, "<candidate_resources>", "</candidate_resources>"))) {
                if (const auto* doc = find_resource(knowledge_, line))
                    paths.insert(paths.end(), doc->element_index.begin(), doc->element_index.end());
            }
        }
        ChatResponse r;
        r.finish_reason = "stop";
        if (attrs.empty() || paths.empty()) {
            r.text = "I am unable to produce a mapping: the request lists no attributes or no candidate FHIR resources.";
            return r;
        }
        std::sort(paths.begin(), paths.end());
        paths.erase(std::unique(paths.begin(), paths.end()), paths.end());

        std::vector<CanonicalDocument> docs;
        docs.reserve(paths.size());
        for (const auto& p : paths) docs.push_back({p, DocKind::resource, detail::split_camel(p)});
        TfidfIndex index(docs);

        Json mappings = Json::array();
        for (const auto& a : attrs) {
            auto q = index.vectorize(a.name + " " + a.description);
            std::vector<std::pair<double, std::size_t>> scored;
            for (std::size_t i = 0; i < docs.size(); ++i) {
                double s = cosine_similarity(q, index.vectors()[i]);
                if (s > 0.0) scored.emplace_back(s, i);
            }
            std::sort(scored.begin(), scored.end(), [&](const auto& x, const auto& y) {
                if (x.first != y.first) return x.first > y.first;
                return paths[x.second] < paths[y.second];
            });
            Json cands = Json::array();
            for (std::size_t k = 0; k < kMaxCandidates; ++k)
                cands.push_back(k < scored.size() ? paths[scored[k].second] : std::string(kPlaceholder));
            mappings.push_back(Json{{"attribute", a.name}, {"candidates", std::move(cands)}});
        }
        r.text = Json{{"mappings", std::move(mappings)}}.dump();
        r.usage.prompt_tokens = tokenize(prompt).size();
        r.usage.completion_tokens = tokenize(*r.text).size();
        return r;
    }

private:
    std::vector<FhirResourceDoc> knowledge_;
};

inline ChatResponse mock_respond(const ChatRequest& request) { return MockProvider{}.respond(request); }

// ---------------------------------------------------------------------------
// Client

struct CallRecord {
    std::size_t attempt = 0;  // 1-based within one send()
    std::string timestamp;    // UTC, ISO-8601
    double latency_ms = 0.0;
    int status = 0;
    std::string outcome;  // ok | retry | auth_error | timeout | error | malformed
};

inline Json to_json(const CallRecord& r) {
    return Json{{"attempt", r.attempt},
                {"timestamp", r.timestamp},
                {"latency_ms", r.latency_ms},
                {"status", r.status},
                {"outcome", r.outcome}};
}

namespace detail {

inline bool transient_status(int status) { return status == 408 || status == 429 || (status >= 500 && status <= 599); }

}  // namespace detail

/// Thread-safe chat client over an HTTP transport or the offline mock.
/// Transient failures (network, 408, 429, 5xx) are retried with exponential
/// backoff (factor 2, +-20% jitter); at most `parallelism` requests are in flight.
class LlmClient {
public:
    using Sleeper = std::function<void(std::chrono::milliseconds)>;

    explicit LlmClient(ProviderConfig config, std::shared_ptr<Transport> transport = nullptr,
                       MockProvider mock = {})
        : config_(std::move(config)), transport_(std::move(transport)), mock_(std::move(mock)),
          slots_(config_.parallelism > 0 ? config_.parallelism : 1), jitter_(0x5eed) {
        config_.validate();
        if (config_.kind == ProviderConfig::Kind::http && !transport_)
            transport_ = std::make_shared<HttpTransport>(config_.endpoint);
        sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    }

    void set_sleeper(Sleeper s) { sleeper_ = std::move(s); }

    ChatResponse send(const ChatRequest& request) {
        if (request.messages.empty()) throw InvalidInput("chat request has no messages");
        Headers headers = resolve_auth();
        if (config_.kind == ProviderConfig::Kind::mock) {
            Slot slot(slots_);
            auto t0 = std::chrono::steady_clock::now();
            auto r = mock_.respond(request);
            log_attempt(1, t0, 200, "ok");
            return r;
        }
        const std::string body = to_wire_json(request, config_.model).dump();
        const auto timeout = std::chrono::milliseconds(static_cast<long long>(config_.timeout_s * 1000.0));
        const std::size_t max_attempts = static_cast<std::size_t>(config_.max_retries) + 1;
        std::string last_error;
        bool last_timeout = false;
        for (std::size_t attempt = 1; attempt <= max_attempts; ++attempt) {
            HttpResult res;
            auto t0 = std::chrono::steady_clock::now();
            {
                Slot slot(slots_);
                res = transport_->post(body, headers, timeout);
            }
            if (res.status == 401 || res.status == 403) {
                log_attempt(attempt, t0, res.status, "auth_error");
                throw AuthError(config_.name(), "authentication rejected (HTTP " + std::to_string(res.status) + ")");
            }
            if (res.status >= 200 && res.status < 300) {
                try {
                    auto r = from_wire_json(res.body, config_.name());
                    log_attempt(attempt, t0, res.status, "ok");
                    return r;
                } catch (const MalformedResponse&) {
                    log_attempt(attempt, t0, res.status, "malformed");
                    throw;
                }
            }
            bool transient = res.network_error || detail::transient_status(res.status);
            last_timeout = res.timed_out;
            last_error = res.network_error ? res.error : "HTTP " + std::to_string(res.status);
            if (!transient) {
                log_attempt(attempt, t0, res.status, "error");
                throw ProviderError(config_.name(), "request failed: " + last_error);
            }
            log_attempt(attempt, t0, res.status, attempt < max_attempts ? "retry" : (last_timeout ? "timeout" : "error"));
            if (attempt < max_attempts) sleeper_(backoff_delay(attempt));
        }
        if (last_timeout)
            throw TimeoutError(config_.name(), "timed out after " + std::to_string(max_attempts) + " attempts");
        throw ProviderError(config_.name(), "giving up after " + std::to_string(max_attempts) + " attempts: " + last_error);
    }

    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1) * U[0.8, 1.2].
    std::chrono::milliseconds backoff_delay(std::size_t attempt) {
        double factor;
        {
            std::lock_guard lock(mu_);
            factor = 0.8 + 0.4 * (static_cast<double>(jitter_() >> 11) * 0x1.0p-53);
        }
        double ms = config_.backoff_base_s * 1000.0 * std::pow(2.0, static_cast<double>(attempt - 1)) * factor;
        return std::chrono::milliseconds(static_cast<long long>(std::llround(ms)));
    }

    [[nodiscard]] std::vector<CallRecord> call_log() const {
        std::lock_guard lock(mu_);
        return log_;
    }
    [[nodiscard]] const ProviderConfig& config() const noexcept { return config_; }
    [[nodiscard]] std::string name() const { return config_.name(); }

private:
    struct Slot {
        explicit Slot(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
        ~Slot() { sem.release(); }
        std::counting_semaphore<>& sem;
    };

    Headers resolve_auth() const {
        Headers h;
        if (config_.kind == ProviderConfig::Kind::mock || config_.auth_env.empty()) return h;
        const char* key = std::getenv(config_.auth_env.c_str());
        if (!key || !*key)
            throw ConfigError("API key environment variable '" + config_.auth_env + "' is not set");
        std::string value = config_.auth_header == "Authorization" ? std::string("Bearer ") + key : std::string(key);
        h.emplace_back(config_.auth_header, std::move(value));
        return h;
    }

    void log_attempt(std::size_t attempt, std::chrono::steady_clock::time_point t0, int status, std::string outcome) {
        auto dt = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lock(mu_);
        log_.push_back({attempt, detail::utc_now_iso(), dt, status, std::move(outcome)});
    }

    ProviderConfig config_;
    std::shared_ptr<Transport> transport_;
    MockProvider mock_;
    std::counting_semaphore<> slots_;
    mutable std::mutex mu_;
    std::vector<CallRecord> log_;
    std::mt19937_64 jitter_;
    Sleeper sleeper_;
};

}  // namespace fhirmap
