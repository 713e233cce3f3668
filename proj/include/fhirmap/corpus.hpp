#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fhirmap/element_path.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/json_util.hpp"

namespace fhirmap {

/// Maximum number of dotted segments in an element path, resource name included.
inline constexpr std::size_t kMaxPathSegments = 5;

struct AttributeDescriptor {
    std::string name;
    std::string description;
    std::vector<std::string> example_values;
    std::optional<std::string> source_table;  // unknown in the real-world scenario

    friend bool operator==(const AttributeDescriptor&, const AttributeDescriptor&) = default;
};

struct TableDescriptor {
    std::string id;
    std::string name;
    std::string description;
    std::string use_case;
    std::vector<AttributeDescriptor> attributes;

    friend bool operator==(const TableDescriptor&, const TableDescriptor&) = default;
};

/// A group of schema-less attributes treated as one retrieval query.
struct AttributeCluster {
    std::string id;
    std::vector<AttributeDescriptor> members;
};

struct FhirResourceDoc {
    std::string resource_name;
    std::string description;
    Json schema;
    std::set<std::string> element_index;
    std::vector<std::string> index_warnings;

    [[nodiscard]] bool has_element(const std::string& path) const { return element_index.contains(path); }
};

enum class DocKind { table, attribute, cluster, resource };

inline std::string_view to_string(DocKind k) {
    switch (k) {
        case DocKind::table: return "table";
        case DocKind::attribute: return "attribute";
        case DocKind::cluster: return "cluster";
        case DocKind::resource: return "resource";
    }
    return "?";
}

struct CanonicalDocument {
    std::string doc_id;
    DocKind kind = DocKind::table;
    std::string text;

    friend bool operator==(const CanonicalDocument&, const CanonicalDocument&) = default;
};

// ---------------------------------------------------------------------------
// Dataset descriptor

namespace detail {

inline AttributeDescriptor parse_attribute(const Json& j, const std::string& where) {
    AttributeDescriptor a;
    a.name = require_string(j, "name", where);
    a.description = optional_string(j, "description", where);
    if (auto it = j.find("example_values"); it != j.end() && !it->is_null()) {
        if (!it->is_array()) throw ParseError(where + ".example_values: expected an array");
        for (std::size_t i = 0; i < it->size(); ++i) {
            const auto& v = (*it)[i];
            if (v.is_string())
                a.example_values.push_back(v.get<std::string>());
            else if (v.is_number() || v.is_boolean())
                a.example_values.push_back(v.dump());
            else
                throw ParseError(where + ".example_values[" + std::to_string(i) + "]: expected a scalar");
        }
    }
    if (auto it = j.find("source_table"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) throw ParseError(where + ".source_table: expected a string or null");
        a.source_table = it->get<std::string>();
    }
    return a;
}

inline void check_table(const TableDescriptor& t, const std::string& where) {
    if (t.id.empty()) throw InvalidInput(where + ": table id is empty");
    if (t.attributes.empty()) throw InvalidInput(where + " ('" + t.id + "'): table has no attributes");
    std::map<std::string, std::vector<std::size_t>> seen;
    for (std::size_t i = 0; i < t.attributes.size(); ++i) {
        const auto& a = t.attributes[i];
        std::string aw = where + ".attributes[" + std::to_string(i) + "]";
        if (a.name.empty()) throw InvalidInput(aw + ": attribute name is empty");
        if (a.description.empty() && a.example_values.empty())
            throw InvalidInput(aw + " ('" + a.name + "'): needs a description or at least one example value");
        seen[a.name].push_back(i);
    }
    std::string dups;
    for (const auto& [name, idx] : seen) {
        if (idx.size() < 2) continue;
        if (!dups.empty()) dups += ", ";
        dups += "'" + name + "' at attributes";
        for (auto i : idx) dups += " [" + std::to_string(i) + "]";
    }
    if (!dups.empty()) throw InvalidInput(where + " ('" + t.id + "'): duplicate attribute names: " + dups);
}

}  // namespace detail

inline std::vector<TableDescriptor> parse_dataset_descriptor(const Json& root, const std::string& origin) {
    const auto& tables = detail::require_field(root, "tables", origin);
    if (!tables.is_array()) throw ParseError(origin + ".tables: expected an array");
    std::vector<TableDescriptor> out;
    out.reserve(tables.size());
    for (std::size_t i = 0; i < tables.size(); ++i) {
        std::string where = origin + ".tables[" + std::to_string(i) + "]";
        const auto& tj = tables[i];
        TableDescriptor t;
        t.id = detail::require_string(tj, "id", where);
        t.name = detail::optional_string(tj, "name", where);
        if (t.name.empty()) t.name = t.id;
        t.description = detail::optional_string(tj, "description", where);
        t.use_case = detail::optional_string(tj, "use_case", where);
        const auto& attrs = detail::require_field(tj, "attributes", where);
        if (!attrs.is_array()) throw ParseError(where + ".attributes: expected an array");
        for (std::size_t k = 0; k < attrs.size(); ++k)
            t.attributes.push_back(detail::parse_attribute(attrs[k], where + ".attributes[" + std::to_string(k) + "]"));
        detail::check_table(t, where);
        out.push_back(std::move(t));
    }
    std::map<std::string, std::vector<std::size_t>> ids;
    for (std::size_t i = 0; i < out.size(); ++i) ids[out[i].id].push_back(i);
    std::string dups;
    for (const auto& [id, idx] : ids) {
        if (idx.size() < 2) continue;
        if (!dups.empty()) dups += "; ";
        dups += "'" + id + "' used by";
        for (auto i : idx) dups += " tables[" + std::to_string(i) + "]";
    }
    if (!dups.empty()) throw InvalidInput(origin + ": duplicate table ids: " + dups);
    return out;
}

inline std::vector<TableDescriptor> load_dataset_descriptor(const std::filesystem::path& path) {
    return parse_dataset_descriptor(detail::parse_json_file(path), path.string());
}

inline Json to_json(const AttributeDescriptor& a) {
    Json j{{"name", a.name}, {"description", a.description}, {"example_values", a.example_values}};
    if (a.source_table) j["source_table"] = *a.source_table;
    return j;
}

inline Json to_json(const TableDescriptor& t) {
    Json attrs = Json::array();
    for (const auto& a : t.attributes) attrs.push_back(to_json(a));
    return Json{{"id", t.id},
                {"name", t.name},
                {"description", t.description},
                {"use_case", t.use_case},
                {"attributes", std::move(attrs)}};
}

inline Json dataset_to_json(const std::vector<TableDescriptor>& tables) {
    Json arr = Json::array();
    for (const auto& t : tables) arr.push_back(to_json(t));
    return Json{{"tables", std::move(arr)}};
}

// ---------------------------------------------------------------------------
// Element index

namespace detail {

inline std::string upper_camel(std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
}

inline std::optional<std::string> ref_target(const Json& node) {
    auto it = node.find("$ref");
    if (it == node.end() || !it->is_string()) return std::nullopt;
    auto ref = it->get<std::string>();
    auto slash = ref.rfind('/');
    return slash == std::string::npos ? ref : ref.substr(slash + 1);
}

inline const Json* lookup_definition(const Json& root, const std::string& name) {
    for (const char* section : {"definitions", "$defs"}) {
        auto sec = root.find(section);
        if (sec == root.end() || !sec->is_object()) continue;
        auto def = sec->find(name);
        if (def != sec->end()) return &*def;
    }
    return nullptr;
}

inline std::string chain_text(const std::vector<std::string>& chain, const std::string& closing) {
    std::string out;
    for (const auto& c : chain) out += c + " -> ";
    return out + closing;
}

/// Follows `$ref` hops until a concrete node is reached. Every hop is pushed on
/// `stack`; the caller pops `pushed` entries when leaving the subtree.
inline const Json& resolve_refs(const Json& root, const Json& node, std::vector<std::string>& stack,
                                std::size_t& pushed, const std::string& resource) {
    const Json* cur = &node;
    while (auto target = ref_target(*cur)) {
        if (std::find(stack.begin(), stack.end(), *target) != stack.end())
            throw InvalidInput("schema for " + resource + " has a reference cycle: " + chain_text(stack, *target));
        const Json* def = lookup_definition(root, *target);
        if (!def) throw ParseError("schema for " + resource + ": unresolved $ref '" + *target + "'");
        stack.push_back(*target);
        ++pushed;
        cur = def;
    }
    return *cur;
}

/// The typed name a choice option contributes, e.g. "Quantity" or "String".
inline std::string choice_type_name(const Json& option) {
    if (auto t = ref_target(option)) return upper_camel(*t);
    for (const char* key : {"x-fhir-type", "title"})
        if (auto it = option.find(key); it != option.end() && it->is_string()) return upper_camel(it->get<std::string>());
    if (auto it = option.find("type"); it != option.end() && it->is_string()) return upper_camel(it->get<std::string>());
    return {};
}

inline const Json* choice_options(const Json& node) {
    for (const char* key : {"anyOf", "oneOf"})
        if (auto it = node.find(key); it != node.end() && it->is_array()) return &*it;
    return nullptr;
}

struct IndexWalker {
    const Json& root;
    const std::string& resource;
    std::set<std::string>& out;
    std::vector<std::string>* warnings;
    std::vector<std::string> ref_stack;

    void warn(const std::string& msg) {
        if (warnings) warnings->push_back(msg);
    }

    void add(const std::string& path, std::size_t depth, const Json& child) {
        if (depth > kMaxPathSegments) {
            warn("path truncated at " + std::to_string(kMaxPathSegments) + " segments: " + path);
            return;
        }
        out.insert(path);
        walk(child, path, depth);
    }

    void walk(const Json& raw, const std::string& prefix, std::size_t depth) {
        std::size_t pushed = 0;
        const Json& node = resolve_refs(root, raw, ref_stack, pushed, resource);
        if (auto items = node.find("items"); items != node.end() && items->is_object()) walk(*items, prefix, depth);
        if (auto props = node.find("properties"); props != node.end() && props->is_object()) {
            for (const auto& [key, child] : props->items()) {
                if (key.size() > 3 && key.ends_with("[x]")) {
                    std::string base = key.substr(0, key.size() - 3);
                    const Json* opts = choice_options(child);
                    if (!opts) throw ParseError("schema for " + resource + ": choice element '" + key +
                                                "' needs anyOf/oneOf type options");
                    for (const auto& opt : *opts) {
                        std::string type = choice_type_name(opt);
                        if (type.empty())
                            throw ParseError("schema for " + resource + ": untyped option under '" + key + "'");
                        add(prefix + "." + base + type, depth + 1, opt);
                    }
                } else {
                    add(prefix + "." + key, depth + 1, child);
                }
            }
        }
        ref_stack.resize(ref_stack.size() - pushed);
    }
};

}  // namespace detail

/// Every dotted path from the resource root to each named property, with
/// choice elements (`value[x]`) expanded to one path per typed variant.
/// Paths deeper than kMaxPathSegments are dropped and reported in `warnings`.
inline std::set<std::string> build_element_index(const Json& schema, const std::string& resource_name,
                                                 std::vector<std::string>* warnings = nullptr) {
    if (!schema.is_object()) throw ParseError("schema for " + resource_name + ": expected a JSON object");
    std::set<std::string> out;
    detail::IndexWalker walker{schema, resource_name, out, warnings, {}};
    walker.walk(schema, resource_name, 1);
    return out;
}

inline std::set<std::string> build_element_index(FhirResourceDoc& doc) {
    doc.index_warnings.clear();
    doc.element_index = build_element_index(doc.schema, doc.resource_name, &doc.index_warnings);
    return doc.element_index;
}

/// Walks `path` through `schema` directly, without consulting an index.
inline bool element_resolvable(const Json& schema, const ElementPath& path) {
    const Json* node = &schema;
    auto deref = [&](const Json* n) -> const Json* {
        for (int hops = 0; hops < 64 && n; ++hops) {
            auto t = detail::ref_target(*n);
            if (!t) return n;
            n = detail::lookup_definition(schema, *t);
        }
        return nullptr;
    };
    for (const auto& seg : path.segments) {
        node = deref(node);
        if (!node) return false;
        while (true) {
            auto items = node->find("items");
            if (items == node->end() || !items->is_object() || node->contains("properties")) break;
            node = deref(&*items);
            if (!node) return false;
        }
        auto props = node->find("properties");
        if (props == node->end() || !props->is_object()) return false;
        if (auto direct = props->find(seg); direct != props->end() && !seg.ends_with("[x]")) {
            node = &*direct;
            continue;
        }
        const Json* next = nullptr;
        for (const auto& [key, child] : props->items()) {
            if (!key.ends_with("[x]")) continue;
            std::string base = key.substr(0, key.size() - 3);
            if (!seg.starts_with(base)) continue;
            if (const Json* opts = detail::choice_options(child)) {
                for (const auto& opt : *opts) {
                    if (base + detail::choice_type_name(opt) == seg) {
                        next = &opt;
                        break;
                    }
                }
            }
            if (next) break;
        }
        if (!next) return false;
        node = next;
    }
    return true;
}

/// Loads `<Resource>.description.txt` / `<Resource>.schema.json` pairs,
/// ordered by resource name.
inline std::vector<FhirResourceDoc> load_fhir_corpus(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw InvalidInput("corpus directory not found: " + dir.string());
    constexpr std::string_view kDesc = ".description.txt";
    constexpr std::string_view kSchema = ".schema.json";
    std::map<std::string, std::pair<fs::path, fs::path>> pairs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.ends_with(kDesc))
            pairs[name.substr(0, name.size() - kDesc.size())].first = entry.path();
        else if (name.ends_with(kSchema))
            pairs[name.substr(0, name.size() - kSchema.size())].second = entry.path();
    }
    if (pairs.empty()) throw InvalidInput("empty corpus: " + dir.string());
    std::vector<FhirResourceDoc> docs;
    for (const auto& [resource, files] : pairs) {
        if (files.first.empty())
            throw InvalidInput("corpus pairing error: " + resource + " has a schema but no description file");
        if (files.second.empty())
            throw InvalidInput("corpus pairing error: " + resource + " has a description but no schema file");
        FhirResourceDoc doc;
        doc.resource_name = resource;
        doc.description = detail::read_text_file(files.first);
        try {
            doc.schema = detail::parse_json_file(files.second);
            build_element_index(doc);
        } catch (const Error& e) {
            throw ParseError("malformed schema for resource " + resource + ": " + e.what());
        }
        if (doc.element_index.empty()) throw ParseError("schema for resource " + resource + " defines no elements");
        docs.push_back(std::move(doc));
    }
    return docs;
}

inline const FhirResourceDoc* find_resource(const std::vector<FhirResourceDoc>& corpus, std::string_view name) {
    for (const auto& d : corpus)
        if (d.resource_name == name) return &d;
    return nullptr;
}

// ---------------------------------------------------------------------------
// Canonical text

/// Lowercases and collapses whitespace runs to single spaces. Punctuation is kept.
inline std::string normalize_text(std::string_view in) {
    std::string out;
    out.reserve(in.size());
    bool pending_space = false;
    for (char c : in) {
        auto uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += static_cast<char>(std::tolower(uc));
    }
    return out;
}

namespace detail {

struct TextBuilder {
    std::string raw;
    void add(std::string_view part) {
        if (part.empty()) return;
        if (!raw.empty()) raw += ' ';
        raw += part;
    }
    void add_examples(const AttributeDescriptor& a) {
        for (const auto& v : a.example_values) add(v);
    }
};

}  // namespace detail

// Field order: name, description, use case, attribute names, attribute
// descriptions, example values. Entities without a field skip it.

inline CanonicalDocument canonicalize(const AttributeDescriptor& a) {
    detail::TextBuilder b;
    b.add(a.name);
    b.add(a.description);
    b.add_examples(a);
    std::string id = a.source_table ? *a.source_table + "." + a.name : a.name;
    return {std::move(id), DocKind::attribute, normalize_text(b.raw)};
}

inline CanonicalDocument canonicalize(const TableDescriptor& t) {
    detail::TextBuilder b;
    b.add(t.name);
    b.add(t.description);
    b.add(t.use_case);
    for (const auto& a : t.attributes) b.add(a.name);
    for (const auto& a : t.attributes) b.add(a.description);
    for (const auto& a : t.attributes) b.add_examples(a);
    return {t.id, DocKind::table, normalize_text(b.raw)};
}

inline CanonicalDocument canonicalize(const AttributeCluster& c) {
    detail::TextBuilder b;
    for (const auto& a : c.members) b.add(a.name);
    for (const auto& a : c.members) b.add(a.description);
    for (const auto& a : c.members) b.add_examples(a);
    return {c.id, DocKind::cluster, normalize_text(b.raw)};
}

inline CanonicalDocument canonicalize(const FhirResourceDoc& r) {
    detail::TextBuilder b;
    b.add(r.resource_name);
    b.add(r.description);
    return {r.resource_name, DocKind::resource, normalize_text(b.raw)};
}

inline std::vector<CanonicalDocument> canonicalize_corpus(const std::vector<FhirResourceDoc>& corpus) {
    std::vector<CanonicalDocument> out;
    out.reserve(corpus.size());
    for (const auto& r : corpus) out.push_back(canonicalize(r));
    return out;
}

}  // namespace fhirmap
