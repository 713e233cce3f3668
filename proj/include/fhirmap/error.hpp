#pragma once

#include <stdexcept>
#include <string>

namespace fhirmap {

/// Root of every error the library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed input files: descriptor, corpus, gold, config or model output.
class ParseError : public Error {
public:
    using Error::Error;
};

/// Structural violation of a documented contract (duplicate ids, empty tables,
/// missing schema pairs, invalid parameters).
class InvalidInput : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Any failure talking to an LLM or embedding backend.
class ProviderError : public Error {
public:
    ProviderError(std::string provider, const std::string& what)
        : Error(provider + ": " + what), provider_(std::move(provider)) {}

    [[nodiscard]] const std::string& provider() const noexcept { return provider_; }

private:
    std::string provider_;
};

class AuthError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

class TimeoutError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

class MalformedResponse : public ProviderError {
public:
    using ProviderError::ProviderError;
};

/// Numerical degeneracy in a clustering index (zero scatter, coincident centroids).
class DegenerateClustering : public Error {
public:
    using Error::Error;
};

/// Nothing usable came out of the model; the run cannot be scored.
class ValidationFatal : public Error {
public:
    using Error::Error;
};

}  // namespace fhirmap
