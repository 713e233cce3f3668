#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fhirmap/chat.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/fusion.hpp"
#include "fhirmap/validation.hpp"

#ifndef FHIRMAP_TEMPLATE_DIR
#define FHIRMAP_TEMPLATE_DIR "templates/v1"
#endif

namespace fhirmap {

enum class PromptStrategy { Reflexive, MoP, Serial5Schema, Serial5NoSchema, RealWorldRefined };

inline std::string_view to_string(PromptStrategy s) {
    switch (s) {
        case PromptStrategy::Reflexive: return "Reflexive";
        case PromptStrategy::MoP: return "MoP";
        case PromptStrategy::Serial5Schema: return "Serial5Schema";
        case PromptStrategy::Serial5NoSchema: return "Serial5NoSchema";
        case PromptStrategy::RealWorldRefined: return "RealWorldRefined";
    }
    return "?";
}

inline PromptStrategy parse_strategy(std::string_view s) {
    for (auto v : {PromptStrategy::Reflexive, PromptStrategy::MoP, PromptStrategy::Serial5Schema,
                   PromptStrategy::Serial5NoSchema, PromptStrategy::RealWorldRefined})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown prompt strategy '" + std::string(s) +
                      "' (expected Reflexive, MoP, Serial5Schema, Serial5NoSchema or RealWorldRefined)");
}

// ---------------------------------------------------------------------------
// Templates

/// Versioned prompt templates with `{{slot}}` placeholders.
class TemplateSet {
public:
    static TemplateSet load(const std::filesystem::path& dir) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir)) throw ConfigError("template directory not found: " + dir.string());
        TemplateSet t;
        t.version_ = dir.filename().string();
        for (const auto& e : fs::directory_iterator(dir)) {
            if (!e.is_regular_file() || e.path().extension() != ".txt") continue;
            std::string text = detail::read_text_file(e.path());
            while (!text.empty() && (text.back() == '\n' || text.back() == '\r' || text.back() == ' ')) text.pop_back();
            t.texts_[e.path().stem().string()] = std::move(text);
        }
        return t;
    }

    /// `$FHIRMAP_TEMPLATES` when set, else the directory baked in at build time.
    static std::filesystem::path default_dir() {
        if (const char* env = std::getenv("FHIRMAP_TEMPLATES"); env && *env) return env;
        return FHIRMAP_TEMPLATE_DIR;
    }

    [[nodiscard]] const std::string& get(const std::string& name) const {
        auto it = texts_.find(name);
        if (it == texts_.end()) throw ConfigError("prompt template '" + name + "' missing from set " + version_);
        return it->second;
    }
    [[nodiscard]] const std::string& version() const noexcept { return version_; }
    void set(const std::string& name, std::string text) { texts_[name] = std::move(text); }

private:
    std::map<std::string, std::string> texts_;
    std::string version_;
};

/// Single-pass substitution; slot values are inserted verbatim and never rescanned.
inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& slots) {
    std::string out;
    std::size_t pos = 0;
    while (true) {
        auto open = tpl.find("{{", pos);
        if (open == std::string_view::npos) break;
        auto close = tpl.find("}}", open + 2);
        if (close == std::string_view::npos) break;
        std::string name(tpl.substr(open + 2, close - open - 2));
        auto it = slots.find(name);
        if (it == slots.end()) throw ConfigError("template slot '{{" + name + "}}' has no value");
        out.append(tpl.substr(pos, open - pos));
        out += it->second;
        pos = close + 2;
    }
    out.append(tpl.substr(pos));
    return out;
}

// ---------------------------------------------------------------------------
// Context and plans

/// Everything a prompt needs about one query (a table or an attribute cluster).
struct PromptContext {
    std::string query_id;
    std::string description;
    std::vector<AttributeDescriptor> attributes;
    std::vector<std::string> candidate_resources;
    std::vector<ToolSchema> schemas;  // one per candidate resource that has one
};

inline ToolSchema make_tool_schema(const FhirResourceDoc& doc) {
    std::string desc = doc.description;
    if (auto nl = desc.find('\n'); nl != std::string::npos) desc.resize(nl);
    return ToolSchema{doc.resource_name, desc, doc.schema};
}

inline std::vector<ToolSchema> tool_schemas_for(const std::vector<std::string>& resources,
                                                const std::vector<FhirResourceDoc>& corpus) {
    std::vector<ToolSchema> out;
    for (const auto& r : resources)
        if (const auto* doc = find_resource(corpus, r)) out.push_back(make_tool_schema(*doc));
    return out;
}

inline PromptContext make_context(const TableDescriptor& table, const RetrievalResult& retrieval,
                                  const std::vector<FhirResourceDoc>& corpus) {
    PromptContext c;
    c.query_id = table.id;
    c.description = table.name + ": " + table.description;
    if (!table.use_case.empty()) c.description += "\nUse case: " + table.use_case;
    c.attributes = table.attributes;
    for (const auto& d : retrieval.top) c.candidate_resources.push_back(d.doc_id);
    c.schemas = tool_schemas_for(c.candidate_resources, corpus);
    return c;
}

inline PromptContext make_context(const AttributeCluster& cluster, const RetrievalResult& retrieval,
                                  const std::vector<FhirResourceDoc>& corpus) {
    PromptContext c;
    c.query_id = cluster.id;
    c.description = cluster.id + ": " + std::to_string(cluster.members.size()) +
                    " attributes grouped by semantic similarity; no table-level description is available.";
    c.attributes = cluster.members;
    for (const auto& d : retrieval.top) c.candidate_resources.push_back(d.doc_id);
    c.schemas = tool_schemas_for(c.candidate_resources, corpus);
    return c;
}

enum class Aggregation { last_response, majority_vote };

struct PromptStep {
    std::string template_name;
    bool attach_schemas = true;
    bool embeds_prior = false;
};

struct PromptPlan {
    PromptStrategy strategy = PromptStrategy::Reflexive;
    PromptContext context;
    std::vector<PromptStep> steps;
    Aggregation aggregation = Aggregation::last_response;
    bool independent_steps = false;  // true for MoP variants
    GenerationParams params;
    TemplateSet templates;

    [[nodiscard]] std::size_t size() const noexcept { return steps.size(); }
    /// Attribute count times candidates per attribute.
    [[nodiscard]] std::size_t candidate_slots() const { return context.attributes.size() * params.max_candidates; }
    [[nodiscard]] std::size_t schema_attachments() const {
        std::size_t n = 0;
        for (const auto& s : steps)
            if (s.attach_schemas) n += context.schemas.size();
        return n;
    }
};

struct RenderedPrompt {
    std::size_t step_index = 0;
    ChatRequest request;
    [[nodiscard]] const std::string& text() const { return request.messages.back().content; }
};

inline constexpr std::size_t kMopVariants = 3;

inline bool requires_schemas(PromptStrategy s) { return s != PromptStrategy::Serial5NoSchema; }

/// Assembles the step list for `strategy` over `context`.
inline PromptPlan build_plan(PromptStrategy strategy, PromptContext context, const TemplateSet& templates,
                             GenerationParams params = {}) {
    if (context.candidate_resources.empty()) throw InvalidInput("build_plan: retrieval produced no candidate resources");
    if (context.attributes.empty()) throw InvalidInput("build_plan: context has no attributes");
    if (requires_schemas(strategy)) {
        for (const auto& r : context.candidate_resources) {
            bool found = std::any_of(context.schemas.begin(), context.schemas.end(),
                                     [&](const ToolSchema& t) { return t.name == r; });
            if (!found)
                throw InvalidInput("build_plan: strategy " + std::string(to_string(strategy)) +
                                   " needs a JSON schema for resource '" + r + "'");
        }
    }
    PromptPlan plan;
    plan.strategy = strategy;
    plan.context = std::move(context);
    plan.params = params.normalized();
    plan.templates = templates;
    switch (strategy) {
        case PromptStrategy::Reflexive:
            plan.steps = {{"reflexive_1", true, false}, {"reflexive_2", true, true}};
            break;
        case PromptStrategy::MoP:
            for (std::size_t v = 1; v <= kMopVariants; ++v) plan.steps.push_back({"mop_" + std::to_string(v), true, false});
            plan.aggregation = Aggregation::majority_vote;
            plan.independent_steps = true;
            break;
        case PromptStrategy::Serial5Schema:
        case PromptStrategy::Serial5NoSchema: {
            bool attach = strategy == PromptStrategy::Serial5Schema;
            for (std::size_t s = 1; s <= 5; ++s) plan.steps.push_back({"serial_" + std::to_string(s), attach, s > 1});
            break;
        }
        case PromptStrategy::RealWorldRefined:
            plan.steps = {{"realworld", true, false}};
            break;
    }
    for (const auto& s : plan.steps) (void)plan.templates.get(s.template_name);
    return plan;
}

// ---------------------------------------------------------------------------
// Rendering

/// Enumeration block the model (and the offline mock) reads attributes from.
inline std::string render_attribute_block(const std::vector<AttributeDescriptor>& attrs) {
    std::string out = "<attributes>\n";
    for (const auto& a : attrs) {
        out += "- " + a.name + " :: " + (a.description.empty() ? std::string("(no description)") : a.description) + " :: ";
        for (std::size_t i = 0; i < a.example_values.size(); ++i) {
            if (i) out += "; ";
            out += a.example_values[i];
        }
        out += '\n';
    }
    return out + "</attributes>";
}

inline std::string render_candidate_block(const std::vector<std::string>& resources) {
    std::string out = "<candidate_resources>\n";
    for (const auto& r : resources) out += "- " + r + '\n';
    return out + "</candidate_resources>";
}

inline RenderedPrompt render_step(const PromptPlan& plan, std::size_t index, const std::string& prior_response) {
    const auto& step = plan.steps.at(index);
    const auto& ctx = plan.context;
    std::map<std::string, std::string> slots{
        {"candidate_count", std::to_string(plan.params.max_candidates)},
        {"attribute_count", std::to_string(ctx.attributes.size())},
        {"slot_total", std::to_string(plan.candidate_slots())},
    };
    slots["response_format"] = render_template(plan.templates.get("response_format"), slots);
    slots["schema_note"] = plan.templates.get(step.attach_schemas ? "schema_note_attached" : "schema_note_absent");
    slots["table_description"] = ctx.description;
    slots["attributes"] = render_attribute_block(ctx.attributes);
    slots["candidate_resources"] = render_candidate_block(ctx.candidate_resources);
    slots["prior_response"] = step.embeds_prior ? prior_response : std::string();

    RenderedPrompt out;
    out.step_index = index;
    out.request.params = plan.params;
    out.request.messages = {{"system", plan.templates.get("system")},
                            {"user", render_template(plan.templates.get(step.template_name), slots)}};
    if (step.attach_schemas) out.request.tools = ctx.schemas;
    return out;
}

/// Next prompt to send given the assistant replies so far, or nullopt when
/// the plan is complete. Serial steps embed the previous reply verbatim.
inline std::optional<RenderedPrompt> next_step(const PromptPlan& plan, const std::vector<std::string>& transcript) {
    if (transcript.size() > plan.steps.size())
        throw InvalidInput("next_step: transcript has " + std::to_string(transcript.size()) +
                           " replies but the plan has only " + std::to_string(plan.steps.size()) + " steps");
    if (transcript.size() == plan.steps.size()) return std::nullopt;
    std::size_t i = transcript.size();
    return render_step(plan, i, i > 0 ? transcript.back() : std::string());
}

/// All prompts of a plan whose steps do not depend on each other (MoP).
inline std::vector<RenderedPrompt> independent_steps(const PromptPlan& plan) {
    if (!plan.independent_steps) throw InvalidInput("independent_steps: plan steps are sequential");
    std::vector<RenderedPrompt> out;
    for (std::size_t i = 0; i < plan.steps.size(); ++i) out.push_back(render_step(plan, i, {}));
    return out;
}

// ---------------------------------------------------------------------------
// Aggregation

namespace detail {

struct PathTally {
    std::size_t votes = 0;       // responses ranking it first
    double rank_sum = 0.0;       // over responses listing it anywhere
    std::size_t appearances = 0;
    [[nodiscard]] double mean_rank() const {
        return appearances ? rank_sum / static_cast<double>(appearances) : 1e300;
    }
};

inline AttributeMapping vote(const std::string& attribute, const std::vector<const AttributeMapping*>& entries,
                             std::size_t responses, std::size_t max_candidates) {
    std::map<std::string, PathTally> tally;
    for (const auto* e : entries) {
        if (!e) continue;
        for (std::size_t r = 0; r < e->candidates.size(); ++r) {
            const auto& c = e->candidates[r];
            if (c.placeholder()) continue;
            auto& t = tally[c.text];
            t.rank_sum += static_cast<double>(r + 1);
            ++t.appearances;
            if (r == 0) ++t.votes;
        }
    }
    std::vector<std::pair<std::string, PathTally>> order(tally.begin(), tally.end());
    std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.second.votes != b.second.votes) return a.second.votes > b.second.votes;
        if (a.second.mean_rank() != b.second.mean_rank()) return a.second.mean_rank() < b.second.mean_rank();
        return a.first < b.first;
    });
    AttributeMapping m{attribute, {}, false};
    for (std::size_t i = 0; i < order.size() && i < max_candidates; ++i) m.candidates.push_back({order[i].first});
    if (!m.candidates.empty()) {
        while (m.candidates.size() < max_candidates) m.candidates.push_back({std::string(kPlaceholder)});
        std::size_t needed = (responses + 1) / 2;
        std::size_t winner_votes = order.front().second.votes;
        bool tied = order.size() > 1 && order[1].second.votes == winner_votes;
        m.low_confidence = winner_votes < needed || tied;
    }
    return m;
}

}  // namespace detail

/// Serial and reflexive plans keep the last reply. MoP takes a per-attribute
/// majority vote over top-1 paths (ties: lower mean rank, then lexicographic)
/// and flags winners without a majority as low confidence.
inline MappingDocument aggregate(const PromptPlan& plan, const std::vector<MappingDocument>& responses) {
    if (responses.empty()) throw ValidationFatal("no valid mapping produced");
    if (plan.aggregation == Aggregation::last_response) return responses.back();

    MappingDocument out;
    out.provenance = responses.front().provenance;
    std::vector<std::string> names;
    for (const auto& a : plan.context.attributes) names.push_back(a.name);
    for (const auto& r : responses)
        for (const auto& m : r.mappings)
            if (std::find(names.begin(), names.end(), m.attribute) == names.end()) names.push_back(m.attribute);
    for (const auto& name : names) {
        std::vector<const AttributeMapping*> entries;
        for (const auto& r : responses) entries.push_back(r.find(name));
        out.mappings.push_back(detail::vote(name, entries, responses.size(), plan.params.max_candidates));
    }
    return out;
}

}  // namespace fhirmap
