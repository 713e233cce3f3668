#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <memory>
#include <string>
#include <vector>

#include "fhirmap/error.hpp"
#include "fhirmap/http_transport.hpp"
#include "fhirmap/json_util.hpp"
#include "fhirmap/lexical.hpp"

namespace fhirmap {

struct EmbeddingServiceConfig {
    std::string name = "http-embedding";
    std::string endpoint;
    std::string auth_env;
    std::string auth_header = "Authorization";
    std::size_t dimension = 0;
    double timeout_s = 30.0;
};

/// Remote sentence encoder. Wire contract: POST {"texts":[...]} returning
/// {"vectors":[[...],...],"dimension":d}.
class HttpEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit HttpEmbeddingProvider(EmbeddingServiceConfig cfg, std::shared_ptr<Transport> transport = nullptr)
        : cfg_(std::move(cfg)), transport_(std::move(transport)) {
        if (cfg_.dimension == 0) throw ConfigError("embedding provider '" + cfg_.name + "' needs a positive dimension");
        if (!transport_) transport_ = std::make_shared<HttpTransport>(cfg_.endpoint);
    }

    [[nodiscard]] std::string name() const override { return cfg_.name; }
    [[nodiscard]] std::size_t dimension() const override { return cfg_.dimension; }

    [[nodiscard]] DenseVector embed(std::string_view text) const override {
        std::vector<std::string> one{std::string(text)};
        return std::move(embed_batch(one).front());
    }

    [[nodiscard]] std::vector<DenseVector> embed_batch(std::span<const std::string> texts) const override {
        Headers headers;
        if (!cfg_.auth_env.empty()) {
            const char* key = std::getenv(cfg_.auth_env.c_str());
            if (!key || !*key) throw ConfigError("API key environment variable '" + cfg_.auth_env + "' is not set");
            headers.emplace_back(cfg_.auth_header,
                                 cfg_.auth_header == "Authorization" ? std::string("Bearer ") + key : std::string(key));
        }
        Json body{{"texts", Json::array()}};
        for (const auto& t : texts) body["texts"].push_back(t);
        auto res = transport_->post(body.dump(), headers,
                                    std::chrono::milliseconds(static_cast<long long>(cfg_.timeout_s * 1000.0)));
        if (res.status == 401 || res.status == 403) throw AuthError(cfg_.name, "authentication rejected");
        if (res.timed_out) throw TimeoutError(cfg_.name, "embedding request timed out");
        if (res.network_error) throw ProviderError(cfg_.name, "embedding request failed: " + res.error);
        if (res.status < 200 || res.status >= 300)
            throw ProviderError(cfg_.name, "embedding request failed: HTTP " + std::to_string(res.status));

        std::vector<DenseVector> out;
        try {
            auto j = Json::parse(res.body);
            auto dim = j.at("dimension").get<std::size_t>();
            if (dim != cfg_.dimension)
                throw MalformedResponse(cfg_.name, "service dimension " + std::to_string(dim) + " differs from configured " +
                                                       std::to_string(cfg_.dimension));
            const auto& vecs = j.at("vectors");
            if (!vecs.is_array() || vecs.size() != texts.size())
                throw MalformedResponse(cfg_.name, "expected one vector per input text");
            for (const auto& v : vecs) {
                DenseVector dv{v.get<std::vector<double>>(), cfg_.name};
                if (dv.values.size() != dim) throw MalformedResponse(cfg_.name, "vector of wrong dimension");
                for (double x : dv.values)
                    if (!std::isfinite(x)) throw MalformedResponse(cfg_.name, "non-finite vector component");
                out.push_back(std::move(dv));
            }
        } catch (const nlohmann::json::exception& e) {
            throw MalformedResponse(cfg_.name, std::string("bad embedding response: ") + e.what());
        }
        return out;
    }

private:
    EmbeddingServiceConfig cfg_;
    std::shared_ptr<Transport> transport_;
};

}  // namespace fhirmap
