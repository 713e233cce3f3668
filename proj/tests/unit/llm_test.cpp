#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <future>
#include <thread>

#include "../support/oracles.hpp"
#include "fhirmap/embedding_http.hpp"
#include "fhirmap/llm.hpp"
#include "fhirmap/prompt.hpp"

using namespace fhirmap;
using namespace std::chrono_literals;

namespace {

const std::vector<FhirResourceDoc>& corpus() {
    static const auto c = load_fhir_corpus(testenv::fixtures() / "corpus");
    return c;
}

ToolSchema tool(const std::string& name) { return make_tool_schema(*find_resource(corpus(), name)); }

ChatRequest request_for(std::vector<AttributeDescriptor> attrs, std::vector<std::string> resources, bool attach = true) {
    ChatRequest r;
    std::string user = render_attribute_block(attrs) + "\n" + render_candidate_block(resources);
    r.messages = {{"system", "sys"}, {"user", user}};
    if (attach)
        for (const auto& n : resources) r.tools.push_back(tool(n));
    return r;
}

std::string ok_body(const std::string& content) {
    return Json{{"choices", Json::array({Json{{"message", {{"role", "assistant"}, {"content", content}}}, {"finish_reason", "stop"}}})},
                {"usage", {{"prompt_tokens", 5}, {"completion_tokens", 7}}}}
        .dump();
}

/// Replays canned results and records what it was sent.
class ScriptedTransport final : public Transport {
public:
    explicit ScriptedTransport(std::deque<HttpResult> script) : script_(std::move(script)) {}
    HttpResult post(const std::string& body, const Headers& headers, std::chrono::milliseconds) override {
        std::lock_guard lock(mu);
        ++calls;
        bodies.push_back(body);
        seen_headers.push_back(headers);
        if (script_.empty()) return HttpResult{500, "", false, false, ""};
        auto r = script_.front();
        script_.pop_front();
        return r;
    }
    std::mutex mu;
    int calls = 0;
    std::vector<std::string> bodies;
    std::vector<Headers> seen_headers;

private:
    std::deque<HttpResult> script_;
};

/// Counts concurrent posts.
class GaugeTransport final : public Transport {
public:
    HttpResult post(const std::string&, const Headers&, std::chrono::milliseconds) override {
        int now = ++in_flight;
        int prev = peak.load();
        while (now > prev && !peak.compare_exchange_weak(prev, now)) {
        }
        std::this_thread::sleep_for(5ms);
        --in_flight;
        return HttpResult{200, ok_body("{\"mappings\":[]}"), false, false, ""};
    }
    std::atomic<int> in_flight{0}, peak{0};
};

ProviderConfig http_config() {
    ProviderConfig c;
    c.kind = ProviderConfig::Kind::http;
    c.endpoint = "http://127.0.0.1:9/v1/chat/completions";
    c.model = "test-model";
    return c;
}

ChatRequest hello() {
    ChatRequest r;
    r.messages = {{"user", "hello"}};
    return r;
}

}  // namespace

TEST(Mock, ValueuomMapsToQuantityUnit) {
    AttributeDescriptor a{"valueuom", "unit of measurement for the value", {"mL"}, std::nullopt};
    auto r = mock_respond(request_for({a}, {"Observation"}));
    ASSERT_TRUE(r.text);
    auto doc = parse_mapping_text(*r.text);
    ASSERT_EQ(doc.mappings.size(), 1u);
    EXPECT_EQ(doc.mappings[0].candidates.at(0).text, "Observation.valueQuantity.unit");
    EXPECT_EQ(doc.mappings[0].candidates.size(), 3u);
}

TEST(Mock, LeafNameRanksFirst) {
    for (const auto& [attr, expected] : std::vector<std::pair<std::string, std::string>>{
             {"status", "Observation.status"}, {"issued", "Observation.issued"}, {"interpretation", "Observation.interpretation"}}) {
        auto r = mock_respond(request_for({{attr, "", {}, std::nullopt}}, {"Observation"}));
        auto doc = parse_mapping_text(*r.text);
        EXPECT_EQ(doc.mappings[0].candidates.at(0).text, expected) << attr;
    }
}

TEST(Mock, DeterministicAndFast) {
    auto tables = load_dataset_descriptor(testenv::fixtures() / "baseline.dataset.json");
    auto req = request_for(tables[0].attributes, {"Observation", "Encounter"});
    auto t0 = std::chrono::steady_clock::now();
    auto a = mock_respond(req);
    auto dt = std::chrono::steady_clock::now() - t0;
    auto b = mock_respond(req);
    EXPECT_EQ(*a.text, *b.text);
    EXPECT_LT(dt, 10ms);
    auto doc = parse_mapping_text(*a.text);
    EXPECT_EQ(doc.mappings.size(), tables[0].attributes.size());
}

TEST(Mock, RefusesWithoutCandidates) {
    auto r = mock_respond(request_for({{"x", "", {}, std::nullopt}}, {}));
    ASSERT_TRUE(r.text);
    EXPECT_THROW((void)parse_mapping_text(*r.text), ParseError);
    ChatRequest none;
    none.messages = {{"user", "no attribute block at all"}};
    EXPECT_THROW((void)parse_mapping_text(*mock_respond(none).text), ParseError);
}

TEST(Mock, UsesKnownCorpusWithoutSchemas) {
    MockProvider mock(corpus());
    AttributeDescriptor a{"valueuom", "unit of measurement for the value", {}, std::nullopt};
    auto r = mock.respond(request_for({a}, {"Observation"}, false));
    EXPECT_EQ(parse_mapping_text(*r.text).mappings[0].candidates[0].text, "Observation.valueQuantity.unit");
    EXPECT_THROW((void)parse_mapping_text(*mock_respond(request_for({a}, {"Observation"}, false)).text), ParseError);
}

TEST(Client, MockLogsOneAttempt) {
    LlmClient client(ProviderConfig{});
    auto r = client.send(request_for({{"status", "", {}, std::nullopt}}, {"Observation"}));
    EXPECT_TRUE(r.text);
    ASSERT_EQ(client.call_log().size(), 1u);
    EXPECT_EQ(client.call_log()[0].outcome, "ok");
    EXPECT_EQ(client.name(), "mock:mock-lexical");
}

TEST(Client, RetriesTransientThenSucceeds) {
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{429, "slow down", false, false, ""},
                                                                        {200, ok_body("fine"), false, false, ""}});
    LlmClient client(http_config(), t);
    std::vector<std::chrono::milliseconds> slept;
    client.set_sleeper([&](auto d) { slept.push_back(d); });
    auto r = client.send(hello());
    EXPECT_EQ(r.text, "fine");
    EXPECT_EQ(r.usage.completion_tokens, 7u);
    auto log = client.call_log();
    ASSERT_EQ(log.size(), 2u);
    EXPECT_EQ(log[0].outcome, "retry");
    EXPECT_EQ(log[0].status, 429);
    EXPECT_EQ(log[1].outcome, "ok");
    EXPECT_EQ(log[1].attempt, 2u);
    EXPECT_FALSE(log[0].timestamp.empty());
    ASSERT_EQ(slept.size(), 1u);
    EXPECT_GE(slept[0], 800ms);
    EXPECT_LE(slept[0], 1200ms);
}

TEST(Client, LogLengthEqualsAttempts) {
    std::deque<HttpResult> script;
    for (int i = 0; i < 10; ++i) script.push_back({503, "", false, false, ""});
    auto t = std::make_shared<ScriptedTransport>(script);
    auto cfg = http_config();
    cfg.max_retries = 3;
    LlmClient client(cfg, t);
    client.set_sleeper([](auto) {});
    EXPECT_THROW((void)client.send(hello()), ProviderError);
    EXPECT_EQ(t->calls, 4);
    EXPECT_EQ(client.call_log().size(), 4u);
}

TEST(Client, AuthFailureIsNotRetried) {
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{401, "bad key", false, false, ""}});
    LlmClient client(http_config(), t);
    client.set_sleeper([](auto) { FAIL() << "slept on auth error"; });
    EXPECT_THROW((void)client.send(hello()), AuthError);
    EXPECT_EQ(t->calls, 1);
    EXPECT_EQ(client.call_log().at(0).outcome, "auth_error");
}

TEST(Client, ClientErrorIsNotRetried) {
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{400, "bad request", false, false, ""}});
    LlmClient client(http_config(), t);
    EXPECT_THROW((void)client.send(hello()), ProviderError);
    EXPECT_EQ(t->calls, 1);
}

TEST(Client, MalformedBody) {
    for (std::string body : {"<html>", "{\"choices\":[]}", "{\"choices\":[{\"message\":{}}]}"}) {
        auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{200, body, false, false, ""}});
        LlmClient client(http_config(), t);
        EXPECT_THROW((void)client.send(hello()), MalformedResponse) << body;
    }
}

TEST(Client, TimeoutsExhaustRetries) {
    std::deque<HttpResult> script(4, HttpResult{0, "", true, true, "Read"});
    auto t = std::make_shared<ScriptedTransport>(script);
    LlmClient client(http_config(), t);
    client.set_sleeper([](auto) {});
    EXPECT_THROW((void)client.send(hello()), TimeoutError);
    EXPECT_EQ(client.call_log().back().outcome, "timeout");
}

TEST(Client, ToolCallPayload) {
    Json body{{"choices", Json::array({Json{{"message", {{"tool_calls", Json::array({Json{{"function", {{"name", "Observation"}, {"arguments", "{\"mappings\":[]}"}}}}})}}}}})}};
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{200, body.dump(), false, false, ""}});
    LlmClient client(http_config(), t);
    auto r = client.send(hello());
    ASSERT_TRUE(r.tool_call);
    EXPECT_EQ(r.payload(), "{\"mappings\":[]}");
}

TEST(Client, MissingSecretFailsBeforeAnyCall) {
    ::unsetenv("FHIRMAP_TEST_ABSENT_KEY");
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{});
    auto cfg = http_config();
    cfg.auth_env = "FHIRMAP_TEST_ABSENT_KEY";
    LlmClient client(cfg, t);
    EXPECT_THROW((void)client.send(hello()), ConfigError);
    EXPECT_EQ(t->calls, 0);
    EXPECT_TRUE(client.call_log().empty());
}

TEST(Client, SecretNeverLogged) {
    const std::string secret = "sk-test-7f3c9a1b";
    ::setenv("FHIRMAP_TEST_KEY", secret.c_str(), 1);
    auto t = std::make_shared<ScriptedTransport>(std::deque<HttpResult>{{500, "", false, false, ""}, {401, "", false, false, ""}});
    auto cfg = http_config();
    cfg.auth_env = "FHIRMAP_TEST_KEY";
    LlmClient client(cfg, t);
    client.set_sleeper([](auto) {});
    std::string err;
    try {
        (void)client.send(hello());
    } catch (const AuthError& e) {
        err = e.what();
    }
    ASSERT_EQ(t->seen_headers.size(), 2u);
    EXPECT_EQ(t->seen_headers[0].at(0).second, "Bearer " + secret);
    Json log = Json::array();
    for (const auto& r : client.call_log()) log.push_back(to_json(r));
    EXPECT_EQ(log.dump().find(secret), std::string::npos);
    EXPECT_EQ(to_json(cfg).dump().find(secret), std::string::npos);
    EXPECT_EQ(err.find(secret), std::string::npos);
    EXPECT_EQ(t->bodies[0].find(secret), std::string::npos);
    ::unsetenv("FHIRMAP_TEST_KEY");
}

TEST(Client, ParallelismBound) {
    for (int p : {1, 2, 3}) {
        auto gauge = std::make_shared<GaugeTransport>();
        auto cfg = http_config();
        cfg.parallelism = p;
        LlmClient client(cfg, gauge);
        std::vector<std::future<void>> jobs;
        for (int i = 0; i < 12; ++i) jobs.push_back(std::async(std::launch::async, [&] { (void)client.send(hello()); }));
        for (auto& j : jobs) j.get();
        EXPECT_LE(gauge->peak.load(), p);
        EXPECT_EQ(client.call_log().size(), 12u);
    }
}

TEST(Client, BackoffBounds) {
    LlmClient client(http_config(), std::make_shared<ScriptedTransport>(std::deque<HttpResult>{}));
    for (int rep = 0; rep < 200; ++rep)
        for (std::size_t a = 1; a <= 4; ++a) {
            auto d = client.backoff_delay(a).count();
            double nominal = 1000.0 * std::pow(2.0, static_cast<double>(a - 1));
            EXPECT_GE(d, static_cast<long long>(0.8 * nominal) - 1);
            EXPECT_LE(d, static_cast<long long>(1.2 * nominal) + 1);
        }
}

TEST(ProviderConfig, Validation) {
    EXPECT_THROW((void)provider_from_json(Json{{"kind", "carrier-pigeon"}}), ConfigError);
    EXPECT_THROW((void)provider_from_json(Json{{"kind", "http"}, {"endpoint", "ftp://x"}}), ConfigError);
    EXPECT_THROW((void)provider_from_json(Json{{"training_opt_out", false}}), ConfigError);
    EXPECT_THROW((void)provider_from_json(Json{{"parallelism", 0}}), ConfigError);
    auto c = provider_from_json(Json{{"kind", "http"}, {"endpoint", "https://api.example.com/v1/chat/completions"},
                                     {"model", "gpt-4o"}, {"auth_env", "OPENAI_API_KEY"}});
    EXPECT_EQ(c.name(), "http:gpt-4o");
    auto e = parse_endpoint(c.endpoint);
    EXPECT_EQ(e.origin, "https://api.example.com");
    EXPECT_EQ(e.path, "/v1/chat/completions");
}

TEST(WireFormat, RequestCarriesParamsAndTools) {
    ChatRequest r = request_for({{"status", "", {}, std::nullopt}}, {"Observation"});
    r.params = GenerationParams::realworld();
    r.params.seed = 7;
    auto j = to_wire_json(r, "gpt-4o");
    EXPECT_EQ(j["model"], "gpt-4o");
    EXPECT_EQ(j["temperature"], 0.0);
    EXPECT_EQ(j["top_p"], kMinTopP);
    EXPECT_EQ(j["seed"], 7);
    EXPECT_EQ(j["tool_choice"], "auto");
    EXPECT_EQ(j["tools"][0]["function"]["name"], "Observation");
    EXPECT_EQ(j["messages"].size(), 2u);
}

namespace {

/// httplib server on an ephemeral port, stopped on scope exit.
struct LocalServer {
    httplib::Server server;
    int port = 0;
    std::thread thread;

    void start() {
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        if (thread.joinable()) thread.join();
    }
    [[nodiscard]] std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port) + path; }
};

}  // namespace

TEST(HttpTransport, ChatRoundTripAgainstLocalServer) {
    LocalServer s;
    std::atomic<int> hits{0};
    std::string seen_auth, seen_body;
    s.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        if (hits++ == 0) {
            res.status = 503;
            return;
        }
        seen_auth = req.get_header_value("Authorization");
        seen_body = req.body;
        res.set_content(ok_body("{\"mappings\":[]}"), "application/json");
    });
    s.start();
    ::setenv("FHIRMAP_LOCAL_KEY", "local-secret", 1);
    auto cfg = http_config();
    cfg.endpoint = s.url("/v1/chat/completions");
    cfg.auth_env = "FHIRMAP_LOCAL_KEY";
    cfg.backoff_base_s = 0.001;
    LlmClient client(cfg);
    auto r = client.send(request_for({{"status", "", {}, std::nullopt}}, {"Observation"}));
    EXPECT_EQ(r.text, "{\"mappings\":[]}");
    EXPECT_EQ(hits.load(), 2);
    EXPECT_EQ(seen_auth, "Bearer local-secret");
    auto body = Json::parse(seen_body);
    EXPECT_EQ(body["model"], "test-model");
    EXPECT_EQ(body["tools"][0]["function"]["name"], "Observation");
    EXPECT_EQ(client.call_log().size(), 2u);
    ::unsetenv("FHIRMAP_LOCAL_KEY");
}

TEST(HttpTransport, ConnectionRefusedIsRetriedThenFails) {
    LocalServer s;
    s.start();
    auto url = s.url("/nothing");
    s.server.stop();
    s.thread.join();
    auto cfg = http_config();
    cfg.endpoint = url;
    cfg.max_retries = 1;
    cfg.backoff_base_s = 0.001;
    cfg.timeout_s = 2;
    LlmClient client(cfg);
    EXPECT_THROW((void)client.send(hello()), ProviderError);
    EXPECT_EQ(client.call_log().size(), 2u);
}

TEST(HttpEmbedding, LocalServiceRoundTrip) {
    LocalServer s;
    s.server.Post("/embed", [](const httplib::Request& req, httplib::Response& res) {
        auto j = Json::parse(req.body);
        Json vecs = Json::array();
        for (const auto& t : j["texts"]) {
            double len = static_cast<double>(t.get<std::string>().size());
            vecs.push_back(Json::array({len, 1.0, 0.0}));
        }
        res.set_content(Json{{"vectors", vecs}, {"dimension", 3}}.dump(), "application/json");
    });
    s.server.Post("/wrong-dim", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"vectors":[[1,2]],"dimension":2})", "application/json");
    });
    s.server.Post("/deny", [](const httplib::Request&, httplib::Response& res) { res.status = 403; });
    s.start();

    HttpEmbeddingProvider p({"local-encoder", s.url("/embed"), "", "Authorization", 3, 5});
    auto v = p.embed("abcd");
    EXPECT_EQ(v.values, (std::vector<double>{4, 1, 0}));
    std::vector<std::string> texts{"a", "bb"};
    auto vs = p.embed_batch(texts);
    ASSERT_EQ(vs.size(), 2u);
    EXPECT_EQ(vs[1].values[0], 2.0);

    HttpEmbeddingProvider bad({"bad", s.url("/wrong-dim"), "", "Authorization", 3, 5});
    EXPECT_THROW((void)bad.embed("x"), MalformedResponse);
    HttpEmbeddingProvider deny({"deny", s.url("/deny"), "", "Authorization", 3, 5});
    EXPECT_THROW((void)deny.embed("x"), AuthError);
    EXPECT_THROW((HttpEmbeddingProvider{{"zero", s.url("/embed"), "", "Authorization", 0, 5}}), ConfigError);

    // usable as a retrieval model; failures carry the provider name
    auto model = RetrievalModel::embedding(std::make_shared<HttpEmbeddingProvider>(
        EmbeddingServiceConfig{"deny", s.url("/deny"), "", "Authorization", 3, 5}));
    try {
        (void)rank_by_model(model, {"q", DocKind::table, "x"}, {{"a", DocKind::resource, "y"}});
        FAIL();
    } catch (const ProviderError& e) {
        EXPECT_EQ(e.provider(), "deny");
    }
}
