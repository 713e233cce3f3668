#pragma once

#include <chrono>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>

#include "fhirmap/error.hpp"

namespace fhirmap {

using Headers = std::vector<std::pair<std::string, std::string>>;

struct HttpResult {
    int status = 0;  // 0 when no HTTP response arrived
    std::string body;
    bool network_error = false;
    bool timed_out = false;
    std::string error;
};

/// Minimal POST-only transport so retry logic can be tested without sockets.
class Transport {
public:
    virtual ~Transport() = default;
    virtual HttpResult post(const std::string& body, const Headers& headers, std::chrono::milliseconds timeout) = 0;
};

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string path;    // begins with '/'
};

/// Splits `http(s)://host[:port]/path`; throws ConfigError otherwise.
inline Endpoint parse_endpoint(const std::string& url) {
    std::string_view u = url;
    std::size_t scheme_end = u.find("://");
    if (scheme_end == std::string_view::npos) throw ConfigError("endpoint '" + url + "' has no scheme");
    auto scheme = u.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") throw ConfigError("endpoint '" + url + "' must use http or https");
    auto rest = u.substr(scheme_end + 3);
    auto slash = rest.find('/');
    auto host = rest.substr(0, slash);
    if (host.empty() || host.find(' ') != std::string_view::npos) throw ConfigError("endpoint '" + url + "' has no host");
    Endpoint e;
    e.origin = std::string(scheme) + "://" + std::string(host);
    e.path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
    return e;
}

class HttpTransport final : public Transport {
public:
    explicit HttpTransport(const std::string& url) : endpoint_(parse_endpoint(url)) {}

    HttpResult post(const std::string& body, const Headers& headers, std::chrono::milliseconds timeout) override {
        httplib::Client cli(endpoint_.origin);
        auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
        auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
        cli.set_connection_timeout(secs.count(), usecs.count());
        cli.set_read_timeout(secs.count(), usecs.count());
        cli.set_write_timeout(secs.count(), usecs.count());
        httplib::Headers h;
        for (const auto& [k, v] : headers) h.emplace(k, v);
        auto res = cli.Post(endpoint_.path, h, body, "application/json");
        HttpResult out;
        if (!res) {
            out.network_error = true;
            out.timed_out = res.error() == httplib::Error::Read || res.error() == httplib::Error::Write ||
                            res.error() == httplib::Error::ConnectionTimeout;
            out.error = httplib::to_string(res.error());
            return out;
        }
        out.status = res->status;
        out.body = res->body;
        return out;
    }

private:
    Endpoint endpoint_;
};

}  // namespace fhirmap
