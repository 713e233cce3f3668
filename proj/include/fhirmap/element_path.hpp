#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace fhirmap {

/// A FHIR element reference such as `Observation.valueQuantity.unit`.
/// Matching is case-sensitive, as in FHIR itself.
struct ElementPath {
    std::string resource;
    std::vector<std::string> segments;  // at least one

    [[nodiscard]] std::string str() const {
        std::string out = resource;
        for (const auto& s : segments) {
            out += '.';
            out += s;
        }
        return out;
    }

    friend bool operator==(const ElementPath&, const ElementPath&) = default;
    friend auto operator<=>(const ElementPath&, const ElementPath&) = default;
};

namespace detail {

inline bool is_identifier_segment(std::string_view s) {
    if (s.empty()) return false;
    auto alpha = [](char c) { return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z'); };
    auto digit = [](char c) { return c >= '0' && c <= '9'; };
    if (!alpha(s.front())) return false;
    for (char c : s)
        if (!alpha(c) && !digit(c)) return false;
    return true;
}

}  // namespace detail

/// Parses `Resource.seg(.seg)*`; returns nullopt when the text is not a
/// syntactically valid element path.
inline std::optional<ElementPath> parse_element_path(std::string_view text) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        auto dot = text.find('.', start);
        auto part = text.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start);
        if (!detail::is_identifier_segment(part)) return std::nullopt;
        parts.emplace_back(part);
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    if (parts.size() < 2) return std::nullopt;
    ElementPath p;
    p.resource = std::move(parts.front());
    p.segments.assign(std::make_move_iterator(parts.begin() + 1), std::make_move_iterator(parts.end()));
    return p;
}

}  // namespace fhirmap
