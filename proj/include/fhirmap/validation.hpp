#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fhirmap/chat.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/element_path.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/json_util.hpp"

namespace fhirmap {

/// Filler for rank positions the model could not populate.
inline constexpr std::string_view kPlaceholder = "N/A";
inline constexpr std::size_t kMaxCandidates = 3;

/// A proposed element path, kept verbatim so that malformed or hallucinated
/// proposals survive into the audit trail.
struct Candidate {
    std::string text;

    [[nodiscard]] bool placeholder() const { return text == kPlaceholder; }
    friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct AttributeMapping {
    std::string attribute;
    std::vector<Candidate> candidates;  // rank = position + 1
    bool low_confidence = false;

    [[nodiscard]] const Candidate* top() const { return candidates.empty() ? nullptr : &candidates.front(); }
    friend bool operator==(const AttributeMapping&, const AttributeMapping&) = default;
};

struct Provenance {
    std::string strategy;
    std::string run_id;
    std::string provider;
    Json params = Json::object();
};

struct MappingDocument {
    std::vector<AttributeMapping> mappings;
    Provenance provenance;
    std::string scope;  // source table id the attributes belong to

    [[nodiscard]] const AttributeMapping* find(std::string_view attribute) const {
        for (const auto& m : mappings)
            if (m.attribute == attribute) return &m;
        return nullptr;
    }
    [[nodiscard]] bool empty() const noexcept { return mappings.empty(); }
};

// ---------------------------------------------------------------------------
// Response format: {"mappings":[{"attribute":str,"candidates":[str, ...]}]}

namespace detail {

/// Drops one surrounding markdown code fence, if present.
inline std::string_view strip_code_fence(std::string_view s) {
    auto trim = [](std::string_view v) {
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.remove_prefix(1);
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.remove_suffix(1);
        return v;
    };
    s = trim(s);
    if (!s.starts_with("```") || !s.ends_with("```") || s.size() < 6) return s;
    s.remove_prefix(3);
    s.remove_suffix(3);
    auto nl = s.find('\n');
    if (nl != std::string_view::npos) s.remove_prefix(nl + 1);
    return trim(s);
}

}  // namespace detail

inline MappingDocument mapping_from_json(const Json& j) {
    if (!j.is_object()) throw ParseError("mapping response: top level must be an object");
    auto it = j.find("mappings");
    if (it == j.end()) throw ParseError("mapping response: missing field 'mappings'");
    if (!it->is_array()) throw ParseError("mapping response: field 'mappings' must be an array");
    MappingDocument doc;
    std::set<std::string> seen_attrs;
    for (std::size_t i = 0; i < it->size(); ++i) {
        const auto& e = (*it)[i];
        std::string where = "mappings[" + std::to_string(i) + "]";
        if (!e.is_object()) throw ParseError("mapping response: " + where + " must be an object");
        auto a = e.find("attribute");
        if (a == e.end() || !a->is_string() || a->get<std::string>().empty())
            throw ParseError("mapping response: " + where + ".attribute must be a non-empty string");
        auto c = e.find("candidates");
        if (c == e.end() || !c->is_array()) throw ParseError("mapping response: " + where + ".candidates must be an array");
        if (c->size() > kMaxCandidates)
            throw ParseError("mapping response: " + where + ".candidates holds more than " +
                             std::to_string(kMaxCandidates) + " entries");
        AttributeMapping m;
        m.attribute = a->get<std::string>();
        if (!seen_attrs.insert(m.attribute).second)
            throw ParseError("mapping response: " + where + ".attribute '" + m.attribute + "' repeated");
        std::set<std::string> seen_paths;
        for (std::size_t k = 0; k < c->size(); ++k) {
            const auto& v = (*c)[k];
            if (!v.is_string())
                throw ParseError("mapping response: " + where + ".candidates[" + std::to_string(k) + "] must be a string");
            Candidate cand{v.get<std::string>()};
            if (!cand.placeholder() && !seen_paths.insert(cand.text).second)
                throw ParseError("mapping response: " + where + ".candidates repeats '" + cand.text + "'");
            m.candidates.push_back(std::move(cand));
        }
        if (auto lc = e.find("low_confidence"); lc != e.end() && lc->is_boolean()) m.low_confidence = *lc;
        doc.mappings.push_back(std::move(m));
    }
    return doc;
}

inline MappingDocument parse_mapping_text(std::string_view text) {
    auto body = detail::strip_code_fence(text);
    Json j;
    try {
        j = Json::parse(body.begin(), body.end());
    } catch (const nlohmann::json::parse_error& e) {
        auto offset = static_cast<std::size_t>(body.data() - text.data()) + (e.byte > 0 ? e.byte - 1 : 0);
        throw ParseError("mapping response is not JSON (byte offset " + std::to_string(offset) + ")");
    }
    return mapping_from_json(j);
}

/// Strict parse of a model reply. Attributes listed in `expected` but absent
/// from the reply are added with an empty candidate list.
inline MappingDocument parse_mapping_response(const ChatResponse& response,
                                              const std::vector<std::string>& expected = {}) {
    if (!response.text && !response.tool_call) throw ParseError("mapping response: empty model reply");
    auto doc = parse_mapping_text(response.payload());
    for (const auto& name : expected)
        if (!doc.find(name)) doc.mappings.push_back(AttributeMapping{name, {}, false});
    return doc;
}

/// Response-format JSON (provenance excluded).
inline Json mapping_to_json(const MappingDocument& doc) {
    Json arr = Json::array();
    for (const auto& m : doc.mappings) {
        Json cands = Json::array();
        for (const auto& c : m.candidates) cands.push_back(c.text);
        Json e{{"attribute", m.attribute}, {"candidates", std::move(cands)}};
        if (m.low_confidence) e["low_confidence"] = true;
        arr.push_back(std::move(e));
    }
    return Json{{"mappings", std::move(arr)}};
}

// ---------------------------------------------------------------------------
// Grounding

enum class IssueKind { unknown_resource, unknown_element, malformed, placeholder };

inline std::string_view to_string(IssueKind k) {
    switch (k) {
        case IssueKind::unknown_resource: return "unknown_resource";
        case IssueKind::unknown_element: return "unknown_element";
        case IssueKind::malformed: return "malformed";
        case IssueKind::placeholder: return "placeholder";
    }
    return "?";
}

struct ValidationIssue {
    std::string attribute;
    std::string path;
    IssueKind kind = IssueKind::malformed;
    std::string message;
};

inline Json to_json(const ValidationIssue& i) {
    return Json{{"attribute", i.attribute}, {"path", i.path}, {"kind", to_string(i.kind)}, {"message", i.message}};
}

/// Checks one candidate; nullopt means it is grounded in the corpus.
inline std::optional<ValidationIssue> check_candidate(const std::string& attribute, const Candidate& c,
                                                      const std::vector<FhirResourceDoc>& corpus) {
    if (c.placeholder()) return ValidationIssue{attribute, c.text, IssueKind::placeholder, "placeholder candidate"};
    auto path = parse_element_path(c.text);
    if (!path) return ValidationIssue{attribute, c.text, IssueKind::malformed, "not a dotted FHIR element path"};
    const auto* res = find_resource(corpus, path->resource);
    if (!res) return ValidationIssue{attribute, c.text, IssueKind::unknown_resource, "resource '" + path->resource + "' is not in the corpus"};
    if (!res->has_element(c.text))
        return ValidationIssue{attribute, c.text, IssueKind::unknown_element,
                               "element not defined by the " + path->resource + " schema"};
    return std::nullopt;
}

/// One issue per ungrounded candidate (placeholders included); an empty
/// result means every candidate resolves in the corpus element indexes.
inline std::vector<ValidationIssue> validate_mapping(const MappingDocument& doc,
                                                     const std::vector<FhirResourceDoc>& corpus) {
    std::vector<ValidationIssue> issues;
    for (const auto& m : doc.mappings)
        for (const auto& c : m.candidates)
            if (auto issue = check_candidate(m.attribute, c, corpus)) issues.push_back(std::move(*issue));
    return issues;
}

}  // namespace fhirmap
