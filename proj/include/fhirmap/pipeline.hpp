#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <future>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "fhirmap/chat.hpp"
#include "fhirmap/clustering.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/embedding_http.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/evaluation.hpp"
#include "fhirmap/fusion.hpp"
#include "fhirmap/json_util.hpp"
#include "fhirmap/lexical.hpp"
#include "fhirmap/llm.hpp"
#include "fhirmap/prompt.hpp"
#include "fhirmap/validation.hpp"

namespace fhirmap {

enum class Scenario { baseline, realworld };

inline std::string_view to_string(Scenario s) { return s == Scenario::baseline ? "baseline" : "realworld"; }

struct EmbeddingConfig {
    std::string kind = "hash";  // hash | http
    std::size_t dimension = 256;
    EmbeddingServiceConfig service;  // used when kind == http
};

struct PipelineConfig {
    Scenario scenario = Scenario::baseline;
    std::filesystem::path dataset;
    std::filesystem::path corpus;
    std::optional<std::filesystem::path> gold;
    std::filesystem::path templates = TemplateSet::default_dir();
    std::vector<std::string> retrieval_models{"tfidf", "bm25", "test-embedding"};
    int fusion_k = 60;
    std::size_t top_k = 1;
    EmbeddingConfig embedding;
    Json clustering_grid = "default";  // "default" or an explicit list
    std::size_t clustering_restarts = 10;
    PromptStrategy strategy = PromptStrategy::Reflexive;
    GenerationParams generation = GenerationParams::baseline();
    std::size_t runs = 1;
    std::uint64_t seed = 42;
    std::string condition;  // report row label; derived when empty
    std::filesystem::path out = "out";
    std::size_t parallel_runs = 1;
    ProviderConfig provider;

    void validate() const {
        if (dataset.empty()) throw ConfigError("config: dataset path is required");
        if (corpus.empty()) throw ConfigError("config: corpus path is required");
        if (runs < 1) throw ConfigError("config: runs must be >= 1");
        if (top_k < 1) throw ConfigError("config: top_k must be >= 1");
        if (fusion_k < 1) throw ConfigError("config: fusion k_const must be >= 1");
        if (retrieval_models.empty()) throw ConfigError("config: at least one retrieval model is required");
        if (scenario == Scenario::realworld && !(clustering_grid.is_string() || (clustering_grid.is_array() && !clustering_grid.empty())))
            throw ConfigError("config: realworld scenario needs a clustering grid");
        if (parallel_runs < 1) throw ConfigError("config: parallel_runs must be >= 1");
        if (parallel_runs > 1 && strategy != PromptStrategy::MoP && strategy != PromptStrategy::RealWorldRefined)
            throw ConfigError("config: --parallel-runs > 1 is only allowed with independent strategies (MoP, RealWorldRefined)");
        (void)generation.normalized();
        provider.validate();
    }

    [[nodiscard]] std::string condition_label() const {
        if (!condition.empty()) return condition;
        if (scenario == Scenario::baseline) return std::string(to_string(strategy));
        std::ostringstream os;
        os << generation.temperature;
        return "t=" + os.str();
    }
};

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace detail {

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
}

inline ClusteringConfig clustering_entry_from_json(const Json& j, std::uint64_t seed, std::size_t restarts) {
    auto algo = j.at("algorithm").get<std::string>();
    if (algo == "kmeans") return ClusteringConfig::kmeans_k(j.at("k").get<std::size_t>(), seed, j.value("restarts", restarts));
    if (algo == "agglomerative") {
        auto l = j.value("linkage", std::string("average"));
        auto m = j.value("metric", std::string("cosine"));
        Linkage link = l == "average" ? Linkage::average : l == "complete" ? Linkage::complete : l == "single" ? Linkage::single
                                                                                                               : throw ConfigError("unknown linkage '" + l + "'");
        Metric met = m == "euclidean" ? Metric::euclidean : m == "cosine" ? Metric::cosine : throw ConfigError("unknown metric '" + m + "'");
        return ClusteringConfig::agglomerative_k(j.at("k").get<std::size_t>(), link, met);
    }
    if (algo == "dbscan") return ClusteringConfig::dbscan_eps(j.at("eps").get<double>(), j.at("min_pts").get<std::size_t>());
    throw ConfigError("unknown clustering algorithm '" + algo + "'");
}

}  // namespace detail

inline std::vector<ClusteringConfig> clustering_grid(const PipelineConfig& cfg) {
    if (cfg.clustering_grid.is_string()) {
        if (cfg.clustering_grid.get<std::string>() != "default") throw ConfigError("clustering.grid must be \"default\" or a list");
        return default_clustering_grid(cfg.seed, cfg.clustering_restarts);
    }
    std::vector<ClusteringConfig> g;
    try {
        for (const auto& e : cfg.clustering_grid) g.push_back(detail::clustering_entry_from_json(e, cfg.seed, cfg.clustering_restarts));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("clustering.grid: ") + e.what());
    }
    return g;
}

/// Parses the JSON config; relative paths resolve against `base_dir`.
inline PipelineConfig config_from_json(const Json& j, const std::filesystem::path& base_dir = {}) {
    PipelineConfig c;
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    try {
        auto scen = j.value("scenario", std::string("baseline"));
        if (scen == "baseline")
            c.scenario = Scenario::baseline;
        else if (scen == "realworld")
            c.scenario = Scenario::realworld;
        else
            throw ConfigError("scenario must be 'baseline' or 'realworld', got '" + scen + "'");
        if (c.scenario == Scenario::realworld) {
            c.top_k = 5;
            c.strategy = PromptStrategy::RealWorldRefined;
            c.generation = GenerationParams::realworld();
        }
        if (j.contains("dataset")) c.dataset = detail::resolve_path(base_dir, j.at("dataset").get<std::string>());
        if (j.contains("corpus")) c.corpus = detail::resolve_path(base_dir, j.at("corpus").get<std::string>());
        if (j.contains("gold") && !j.at("gold").is_null()) c.gold = detail::resolve_path(base_dir, j.at("gold").get<std::string>());
        if (j.contains("templates")) c.templates = detail::resolve_path(base_dir, j.at("templates").get<std::string>());
        if (j.contains("out")) c.out = detail::resolve_path(base_dir, j.at("out").get<std::string>());
        if (auto r = j.find("retrieval"); r != j.end()) {
            c.retrieval_models = r->value("models", c.retrieval_models);
            c.fusion_k = r->value("k_const", c.fusion_k);
            c.top_k = r->value("top_k", c.top_k);
        }
        if (auto e = j.find("embedding"); e != j.end()) {
            c.embedding.kind = e->value("kind", c.embedding.kind);
            c.embedding.dimension = e->value("dimension", c.embedding.dimension);
            if (c.embedding.kind == "http") {
                c.embedding.service.name = e->value("name", std::string("http-embedding"));
                c.embedding.service.endpoint = e->value("endpoint", std::string());
                c.embedding.service.auth_env = e->value("auth_env", std::string());
                c.embedding.service.dimension = c.embedding.dimension;
                c.embedding.service.timeout_s = e->value("timeout_s", 30.0);
            } else if (c.embedding.kind != "hash") {
                throw ConfigError("embedding.kind must be 'hash' or 'http'");
            }
        }
        if (auto cl = j.find("clustering"); cl != j.end()) {
            if (cl->contains("grid")) c.clustering_grid = cl->at("grid");
            c.clustering_restarts = cl->value("restarts", c.clustering_restarts);
        }
        if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
        if (auto g = j.find("generation"); g != j.end()) {
            c.generation.temperature = g->value("temperature", c.generation.temperature);
            c.generation.top_p = g->value("top_p", c.generation.top_p);
            auto fc = g->value("function_call", std::string(to_string(c.generation.function_call)));
            if (fc != "auto" && fc != "none") throw ConfigError("generation.function_call must be 'auto' or 'none'");
            c.generation.function_call = fc == "auto" ? FunctionCallMode::automatic : FunctionCallMode::none;
            c.generation.max_candidates = g->value("candidates", c.generation.max_candidates);
        }
        c.runs = j.value("runs", c.runs);
        c.seed = j.value("seed", c.seed);
        c.condition = j.value("condition", c.condition);
        c.parallel_runs = j.value("parallel_runs", c.parallel_runs);
        if (auto p = j.find("provider"); p != j.end()) c.provider = provider_from_json(*p);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    Json j;
    try {
        j = detail::parse_json_file(path);
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return config_from_json(j, path.parent_path());
}

/// Effective configuration; the basis of the config hash. Output location and
/// run parallelism are excluded since they do not change results.
inline Json to_json(const PipelineConfig& c) {
    Json emb{{"kind", c.embedding.kind}, {"dimension", c.embedding.dimension}};
    if (c.embedding.kind == "http")
        emb.update(Json{{"name", c.embedding.service.name}, {"endpoint", c.embedding.service.endpoint}, {"auth_env", c.embedding.service.auth_env}});
    return Json{{"scenario", to_string(c.scenario)},
                {"dataset", c.dataset.string()},
                {"corpus", c.corpus.string()},
                {"gold", c.gold ? Json(c.gold->string()) : Json(nullptr)},
                {"templates", c.templates.string()},
                {"retrieval", {{"models", c.retrieval_models}, {"k_const", c.fusion_k}, {"top_k", c.top_k}}},
                {"embedding", emb},
                {"clustering", {{"grid", c.clustering_grid}, {"restarts", c.clustering_restarts}}},
                {"strategy", to_string(c.strategy)},
                {"generation", to_json(c.generation.normalized())},
                {"runs", c.runs},
                {"seed", c.seed},
                {"condition", c.condition_label()},
                {"provider", to_json(c.provider)}};
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

inline std::string config_hash(const PipelineConfig& c) { return sha256_hex(to_json(c).dump()); }

// ---------------------------------------------------------------------------
// Stage plumbing

/// A stage failure carrying the stage name and the process exit code.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, int exit_code)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)), exit_code_(exit_code) {}
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }
    [[nodiscard]] int exit_code() const noexcept { return exit_code_; }

private:
    std::string stage_;
    int exit_code_;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitProvider = 3;
inline constexpr int kExitValidation = 4;

inline int exit_code_for(const std::exception& e) {
    if (const auto* s = dynamic_cast<const StageError*>(&e)) return s->exit_code();
    if (dynamic_cast<const ValidationFatal*>(&e)) return kExitValidation;
    if (dynamic_cast<const ProviderError*>(&e)) return kExitProvider;
    if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) || dynamic_cast<const InvalidInput*>(&e))
        return kExitConfig;
    return kExitFailure;
}

namespace artifacts {
inline constexpr const char* ingest = "ingest.json";
inline constexpr const char* clusters = "clusters.json";
inline constexpr const char* retrieval = "retrieval.json";
inline constexpr const char* mappings = "mappings.jsonl";
inline constexpr const char* calls = "llm_calls.json";
inline constexpr const char* runs = "runs.json";
inline constexpr const char* failed = "FAILED";
}  // namespace artifacts

namespace detail {

inline Json read_artifact(const PipelineConfig& cfg, const char* name, const std::string& hash) {
    auto path = cfg.out / name;
    if (!std::filesystem::exists(path))
        throw InvalidInput("missing upstream artifact: expected " + path.string() + " (run the previous stage first)");
    auto j = parse_json_file(path);
    if (j.value("config_hash", std::string()) != hash)
        throw ConfigError("stale artifact " + path.string() + ": produced under a different configuration (config hash mismatch)");
    return j;
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

}  // namespace detail

/// Inputs shared by every stage, loaded from the paths in the config.
struct Inputs {
    std::vector<TableDescriptor> tables;
    std::vector<FhirResourceDoc> corpus;
};

inline Inputs load_inputs(const PipelineConfig& cfg) {
    Inputs in;
    in.tables = load_dataset_descriptor(cfg.dataset);
    in.corpus = load_fhir_corpus(cfg.corpus);
    if (cfg.scenario == Scenario::realworld && in.tables.size() != 1)
        throw InvalidInput("realworld scenario expects a single source table, got " + std::to_string(in.tables.size()));
    return in;
}

inline std::shared_ptr<const EmbeddingProvider> make_embedding_provider(const EmbeddingConfig& e) {
    if (e.kind == "http") return std::make_shared<HttpEmbeddingProvider>(e.service);
    return std::make_shared<HashEmbeddingProvider>(e.dimension);
}

inline std::vector<RetrievalModel> make_retrieval_models(const PipelineConfig& cfg) {
    std::vector<RetrievalModel> models;
    std::shared_ptr<const EmbeddingProvider> emb;
    for (const auto& name : cfg.retrieval_models) {
        if (name == "tfidf") {
            models.push_back(RetrievalModel::tfidf());
        } else if (name == "bm25") {
            models.push_back(RetrievalModel::bm25());
        } else if (name == "test-embedding" || name == "embedding" || (cfg.embedding.kind == "http" && name == cfg.embedding.service.name)) {
            if (!emb) emb = name == "test-embedding" ? std::make_shared<HashEmbeddingProvider>(cfg.embedding.dimension)
                                                     : make_embedding_provider(cfg.embedding);
            models.push_back(RetrievalModel::embedding(emb));
        } else {
            throw ConfigError("unknown retrieval model '" + name + "'");
        }
    }
    return models;
}

// ---------------------------------------------------------------------------
// Stages

/// Validates and canonicalizes the inputs; writes ingest.json.
inline Json stage_ingest(const PipelineConfig& cfg) {
    auto hash = config_hash(cfg);
    auto in = load_inputs(cfg);
    Json corpus = Json::array();
    for (const auto& r : in.corpus)
        corpus.push_back(Json{{"resource", r.resource_name}, {"elements", r.element_index.size()}, {"warnings", r.index_warnings}});
    Json docs = Json::array();
    auto add_doc = [&](const CanonicalDocument& d) { docs.push_back(Json{{"doc_id", d.doc_id}, {"kind", to_string(d.kind)}, {"text", d.text}}); };
    for (const auto& t : in.tables) add_doc(canonicalize(t));
    for (const auto& r : in.corpus) add_doc(canonicalize(r));
    Json out{{"config_hash", hash},
             {"scenario", to_string(cfg.scenario)},
             {"dataset", dataset_to_json(in.tables)},
             {"corpus", corpus},
             {"documents", docs}};
    detail::write_json(cfg.out / artifacts::ingest, out);
    return out;
}

/// Groups the attributes of the single real-world table; writes clusters.json.
inline Json stage_cluster(const PipelineConfig& cfg) {
    if (cfg.scenario != Scenario::realworld) throw ConfigError("clustering applies to realworld scenario");
    auto hash = config_hash(cfg);
    (void)detail::read_artifact(cfg, artifacts::ingest, hash);
    auto in = load_inputs(cfg);
    const auto& table = in.tables.front();
    std::vector<std::string> texts, ids;
    for (const auto& a : table.attributes) {
        texts.push_back(canonicalize(a).text);
        ids.push_back(a.name);
    }
    auto provider = make_embedding_provider(cfg.embedding);
    auto m = embed_rows(*provider, texts, ids);
    auto sel = select_clustering(m, clustering_grid(cfg));
    Json report = cluster_report(m, sel);

    Json groups = Json::array();
    for (const auto& c : report["clusters"]) {
        int label = c["label"].get<int>();
        if (label == kNoise) {
            for (const auto& a : c["attributes"])
                groups.push_back(Json{{"id", "noise-" + a.get<std::string>()}, {"attributes", Json::array({a})}});
        } else {
            groups.push_back(Json{{"id", "cluster-" + std::to_string(label)}, {"attributes", c["attributes"]}});
        }
    }
    Json out{{"config_hash", hash}, {"table", table.id}, {"report", report}, {"groups", groups}};
    detail::write_json(cfg.out / artifacts::clusters, out);
    return out;
}

namespace detail {

inline Json ranking_json(const Ranking& r) {
    Json entries = Json::array();
    for (const auto& e : r.entries) entries.push_back(Json{{"doc_id", e.doc_id}, {"score", e.score}, {"rank", e.rank}});
    return Json{{"model", r.model}, {"ranking", entries}};
}

inline Json fused_json(const std::vector<FusedDoc>& v) {
    Json a = Json::array();
    for (const auto& d : v) a.push_back(Json{{"doc_id", d.doc_id}, {"score", d.score}});
    return a;
}

inline std::vector<AttributeCluster> groups_from_clusters(const Json& clusters, const TableDescriptor& table) {
    std::vector<AttributeCluster> out;
    for (const auto& g : clusters.at("groups")) {
        AttributeCluster c;
        c.id = g.at("id").get<std::string>();
        for (const auto& name : g.at("attributes")) {
            auto it = std::find_if(table.attributes.begin(), table.attributes.end(),
                                   [&](const AttributeDescriptor& a) { return a.name == name.get<std::string>(); });
            if (it == table.attributes.end()) throw InvalidInput("clusters.json names unknown attribute " + name.dump());
            c.members.push_back(*it);
        }
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace detail

/// One query per table (baseline) or per attribute group (realworld); writes retrieval.json.
inline Json stage_retrieve(const PipelineConfig& cfg) {
    auto hash = config_hash(cfg);
    (void)detail::read_artifact(cfg, artifacts::ingest, hash);
    auto in = load_inputs(cfg);
    auto models = make_retrieval_models(cfg);
    RetrievalOptions opt;
    opt.top_k = cfg.top_k;
    opt.k_const = cfg.fusion_k;

    struct Query {
        CanonicalDocument doc;
        std::string scope;
        std::vector<std::string> members;
    };
    std::vector<Query> queries;
    if (cfg.scenario == Scenario::baseline) {
        for (const auto& t : in.tables) {
            std::vector<std::string> members;
            for (const auto& a : t.attributes) members.push_back(a.name);
            queries.push_back({canonicalize(t), t.id, members});
        }
    } else {
        auto clusters = detail::read_artifact(cfg, artifacts::clusters, hash);
        const auto& table = in.tables.front();
        for (const auto& g : detail::groups_from_clusters(clusters, table)) {
            std::vector<std::string> members;
            for (const auto& a : g.members) members.push_back(a.name);
            queries.push_back({canonicalize(g), table.id, members});
        }
    }

    Json qs = Json::array();
    for (const auto& q : queries) {
        auto res = retrieve_resources(q.doc, in.corpus, models, opt);
        Json per_model = Json::array();
        for (const auto& r : res.per_model) per_model.push_back(detail::ranking_json(r));
        qs.push_back(Json{{"query_id", q.doc.doc_id},
                          {"kind", to_string(q.doc.kind)},
                          {"scope", q.scope},
                          {"members", q.members},
                          {"per_model", per_model},
                          {"fused", detail::fused_json(res.fused.entries)},
                          {"top", detail::fused_json(res.top)},
                          {"failures", res.failures}});
    }
    Json out{{"config_hash", hash},
             {"scenario", to_string(cfg.scenario)},
             {"top_k", cfg.top_k},
             {"k_const", cfg.fusion_k},
             {"models", cfg.retrieval_models},
             {"queries", qs}};
    detail::write_json(cfg.out / artifacts::retrieval, out);
    return out;
}

inline RetrievalResult retrieval_from_json(const Json& q, std::size_t top_k, int k_const) {
    RetrievalResult r;
    r.query_id = q.at("query_id").get<std::string>();
    r.k_requested = top_k;
    r.fused.k_const = k_const;
    for (const auto& d : q.at("top")) r.top.push_back({d.at("doc_id").get<std::string>(), d.at("score").get<double>()});
    for (const auto& d : q.at("fused")) r.fused.entries.push_back({d.at("doc_id").get<std::string>(), d.at("score").get<double>()});
    for (const auto& [k, v] : q.value("failures", Json::object()).items()) r.failures[k] = v.get<std::string>();
    return r;
}

struct PlanOutcome {
    MappingDocument document;
    std::vector<std::string> raw_responses;
    std::vector<std::string> parse_errors;
};

/// Runs every step of `plan` against `client` and aggregates the parsed replies.
inline PlanOutcome execute_plan(const PromptPlan& plan, LlmClient& client) {
    PlanOutcome out;
    std::vector<std::string> expected;
    for (const auto& a : plan.context.attributes) expected.push_back(a.name);
    std::vector<MappingDocument> parsed;
    auto absorb = [&](const ChatResponse& r) {
        out.raw_responses.emplace_back(r.payload());
        try {
            parsed.push_back(parse_mapping_response(r, expected));
        } catch (const ParseError& e) {
            out.parse_errors.push_back("step " + std::to_string(out.raw_responses.size()) + ": " + e.what());
        }
    };
    if (plan.independent_steps) {
        auto prompts = independent_steps(plan);
        std::vector<std::future<ChatResponse>> jobs;
        for (const auto& p : prompts) jobs.push_back(std::async(std::launch::async, [&client, &p] { return client.send(p.request); }));
        for (auto& j : jobs) absorb(j.get());
    } else {
        while (auto step = next_step(plan, out.raw_responses)) absorb(client.send(step->request));
    }
    out.document = aggregate(plan, parsed);
    return out;
}

namespace detail {

inline std::vector<PromptContext> build_contexts(const PipelineConfig& cfg, const Inputs& in, const Json& retrieval) {
    std::vector<PromptContext> out;
    auto top_k = retrieval.at("top_k").get<std::size_t>();
    auto k_const = retrieval.at("k_const").get<int>();
    for (const auto& q : retrieval.at("queries")) {
        auto res = retrieval_from_json(q, top_k, k_const);
        auto scope = q.at("scope").get<std::string>();
        auto table = std::find_if(in.tables.begin(), in.tables.end(), [&](const TableDescriptor& t) { return t.id == scope; });
        if (table == in.tables.end()) throw InvalidInput("retrieval.json references unknown table '" + scope + "'");
        if (cfg.scenario == Scenario::baseline) {
            out.push_back(make_context(*table, res, in.corpus));
        } else {
            AttributeCluster c;
            c.id = res.query_id;
            for (const auto& name : q.at("members")) {
                auto it = std::find_if(table->attributes.begin(), table->attributes.end(),
                                       [&](const AttributeDescriptor& a) { return a.name == name.get<std::string>(); });
                if (it == table->attributes.end()) throw InvalidInput("retrieval.json names unknown attribute " + name.dump());
                c.members.push_back(*it);
            }
            out.push_back(make_context(c, res, in.corpus));
        }
    }
    return out;
}

}  // namespace detail

struct MapStageResult {
    std::vector<std::vector<MappingDocument>> runs;  // per run, per query
    std::string jsonl;
};

/// Executes N runs of the prompt strategy over every retrieved query; writes
/// mappings.jsonl (deterministic content, no timestamps) and llm_calls.json.
inline MapStageResult stage_map(const PipelineConfig& cfg, std::shared_ptr<Transport> transport = nullptr) {
    auto hash = config_hash(cfg);
    auto retrieval = detail::read_artifact(cfg, artifacts::retrieval, hash);
    auto in = load_inputs(cfg);
    auto templates = TemplateSet::load(cfg.templates);
    auto contexts = detail::build_contexts(cfg, in, retrieval);
    std::map<std::string, std::string> scope_of;
    for (const auto& q : retrieval.at("queries")) scope_of[q.at("query_id").get<std::string>()] = q.at("scope").get<std::string>();

    LlmClient client(cfg.provider, std::move(transport), MockProvider(in.corpus));

    struct RunOutput {
        std::vector<MappingDocument> docs;
        std::vector<std::vector<ValidationIssue>> issues;
        std::vector<std::vector<std::string>> parse_errors;
    };
    auto run_one = [&](std::size_t run) {
        RunOutput ro;
        GenerationParams params = cfg.generation;
        params.seed = cfg.seed + run;
        std::size_t parsed_any = 0;
        for (const auto& ctx : contexts) {
            auto plan = build_plan(cfg.strategy, ctx, templates, params);
            MappingDocument doc;
            std::vector<std::string> errors;
            try {
                auto outcome = execute_plan(plan, client);
                doc = std::move(outcome.document);
                errors = std::move(outcome.parse_errors);
                ++parsed_any;
            } catch (const ValidationFatal& e) {
                errors.push_back(e.what());
                for (const auto& a : ctx.attributes) doc.mappings.push_back({a.name, {}, false});
            }
            doc.scope = scope_of.at(ctx.query_id);
            doc.provenance = Provenance{std::string(to_string(cfg.strategy)), "run-" + std::to_string(run), client.name(),
                                        to_json(params.normalized())};
            ro.issues.push_back(validate_mapping(doc, in.corpus));
            ro.parse_errors.push_back(std::move(errors));
            ro.docs.push_back(std::move(doc));
        }
        if (parsed_any == 0)
            throw ValidationFatal("run " + std::to_string(run) + ": no valid mapping produced for any query");
        return ro;
    };

    std::vector<RunOutput> outputs(cfg.runs);
    if (cfg.parallel_runs > 1) {
        for (std::size_t start = 0; start < cfg.runs; start += cfg.parallel_runs) {
            std::vector<std::future<RunOutput>> jobs;
            for (std::size_t r = start; r < std::min(cfg.runs, start + cfg.parallel_runs); ++r)
                jobs.push_back(std::async(std::launch::async, run_one, r));
            for (std::size_t i = 0; i < jobs.size(); ++i) outputs[start + i] = jobs[i].get();
        }
    } else {
        for (std::size_t r = 0; r < cfg.runs; ++r) outputs[r] = run_one(r);
    }

    MapStageResult result;
    std::string jsonl;
    for (std::size_t r = 0; r < outputs.size(); ++r) {
        const auto& ro = outputs[r];
        for (std::size_t q = 0; q < ro.docs.size(); ++q) {
            const auto& doc = ro.docs[q];
            for (const auto& m : doc.mappings) {
                Json cands = Json::array();
                for (const auto& c : m.candidates) cands.push_back(c.text);
                Json issues = Json::array();
                for (const auto& i : ro.issues[q])
                    if (i.attribute == m.attribute) issues.push_back(to_json(i));
                Json line{{"config_hash", hash},
                          {"run", r},
                          {"run_id", doc.provenance.run_id},
                          {"query", contexts[q].query_id},
                          {"scope", doc.scope},
                          {"attribute", m.attribute},
                          {"candidates", cands},
                          {"low_confidence", m.low_confidence},
                          {"issues", issues},
                          {"parse_errors", ro.parse_errors[q]},
                          {"provenance",
                           {{"strategy", doc.provenance.strategy},
                            {"provider", doc.provenance.provider},
                            {"params", doc.provenance.params}}}};
                jsonl += line.dump() + "\n";
            }
        }
        result.runs.push_back(ro.docs);
    }
    detail::write_text_file(cfg.out / artifacts::mappings, jsonl);
    Json calls = Json::array();
    for (const auto& c : client.call_log()) calls.push_back(to_json(c));
    detail::write_json(cfg.out / artifacts::calls, Json{{"config_hash", hash}, {"calls", calls}});
    result.jsonl = std::move(jsonl);
    return result;
}

/// Reads mappings.jsonl back into per-run documents keyed by query.
inline std::vector<std::vector<MappingDocument>> read_mappings(const PipelineConfig& cfg, const std::string& hash) {
    auto path = cfg.out / artifacts::mappings;
    if (!std::filesystem::exists(path)) throw InvalidInput("missing upstream artifact: expected " + path.string() + " (run the map stage first)");
    std::istringstream in(detail::read_text_file(path));
    std::map<std::size_t, std::map<std::string, MappingDocument>> by_run;
    std::map<std::size_t, std::vector<std::string>> query_order;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto j = detail::parse_json_text(line, path.string() + ":" + std::to_string(lineno));
        if (j.value("config_hash", std::string()) != hash)
            throw ConfigError("stale artifact " + path.string() + ": produced under a different configuration (config hash mismatch)");
        auto run = j.at("run").get<std::size_t>();
        auto query = j.at("query").get<std::string>();
        auto& docs = by_run[run];
        if (!docs.contains(query)) query_order[run].push_back(query);
        auto& doc = docs[query];
        doc.scope = j.at("scope").get<std::string>();
        doc.provenance.run_id = j.at("run_id").get<std::string>();
        AttributeMapping m;
        m.attribute = j.at("attribute").get<std::string>();
        for (const auto& c : j.at("candidates")) m.candidates.push_back({c.get<std::string>()});
        m.low_confidence = j.value("low_confidence", false);
        doc.mappings.push_back(std::move(m));
    }
    std::vector<std::vector<MappingDocument>> out;
    for (auto& [run, docs] : by_run) {
        std::vector<MappingDocument> v;
        for (const auto& q : query_order[run]) v.push_back(std::move(docs[q]));
        out.push_back(std::move(v));
    }
    return out;
}

/// Scores every run against the gold mapping; writes runs.json and the report.
inline Report stage_eval(const PipelineConfig& cfg) {
    if (!cfg.gold) throw ConfigError("gold mapping required for eval");
    auto hash = config_hash(cfg);
    auto retrieval = detail::read_artifact(cfg, artifacts::retrieval, hash);
    auto runs = read_mappings(cfg, hash);
    auto corpus = load_fhir_corpus(cfg.corpus);
    auto gold = load_gold(*cfg.gold);
    check_gold(gold, corpus);

    auto top_k = retrieval.at("top_k").get<std::size_t>();
    auto k_const = retrieval.at("k_const").get<int>();
    std::vector<RetrievalResult> results;
    std::map<std::string, std::vector<std::string>> members;
    for (const auto& q : retrieval.at("queries")) {
        results.push_back(retrieval_from_json(q, top_k, k_const));
        auto scope = q.at("scope").get<std::string>();
        for (const auto& m : q.at("members")) members[results.back().query_id].push_back(scope + "." + m.get<std::string>());
    }
    Json resource_detail;
    double resource_accuracy = 0.0;
    if (cfg.scenario == Scenario::baseline) {
        resource_accuracy = score_resource_identification(results, gold);
        resource_detail = Json{{"mode", "top-1 per table"}, {"accuracy", resource_accuracy}, {"queries", results.size()}};
    } else {
        auto cov = score_resource_coverage(results, members, gold);
        resource_accuracy = cov.per_attribute;
        resource_detail = Json{{"mode", "top-k coverage"},
                               {"per_attribute", cov.per_attribute},
                               {"per_cluster", cov.per_cluster},
                               {"attributes", cov.attributes},
                               {"clusters", cov.clusters}};
    }

    std::vector<RunRecord> records;
    Json run_details = Json::array();
    for (std::size_t r = 0; r < runs.size(); ++r) {
        auto score = score_attribute_mapping(runs[r], gold);
        RunRecord rec;
        rec.run_id = "run-" + std::to_string(r);
        rec.condition = cfg.condition_label();
        rec.seed = cfg.seed + r;
        rec.params = to_json(cfg.generation.normalized());
        rec.resource_accuracy = resource_accuracy;
        rec.hit_at_1 = score.hit_at_1;
        rec.hit_at_3 = score.hit_at_3;
        rec.timestamp = detail::utc_now_iso();
        records.push_back(rec);
        Json d = to_json(rec);
        d.erase("timestamp");
        d["attributes"] = to_json(score);
        run_details.push_back(std::move(d));
    }
    ReportOptions opt;
    opt.primary_metric = cfg.scenario == Scenario::baseline ? "hit_at_1" : "hit_at_3";
    opt.config_echo = to_json(cfg);
    opt.config_echo["config_hash"] = hash;
    auto rep = emit_report(records, cfg.out, opt);
    rep.json["deterministic"]["resource_identification"] = resource_detail;
    rep.json["deterministic"]["runs"] = run_details;
    detail::write_json(cfg.out / "report.json", rep.json);
    detail::write_json(cfg.out / artifacts::runs, Json{{"config_hash", hash}, {"runs", run_details}});
    return rep;
}

/// Chains every stage for the configured scenario. On failure a FAILED marker
/// naming the stage is written next to whatever artifacts were produced.
inline Report run_pipeline(const PipelineConfig& cfg, std::shared_ptr<Transport> transport = nullptr) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out);
    std::filesystem::remove(cfg.out / artifacts::failed);
    std::string stage;
    auto guarded = [&](const char* name, auto&& fn) {
        stage = name;
        try {
            return fn();
        } catch (const std::exception& e) {
            detail::write_json(cfg.out / artifacts::failed, Json{{"stage", stage}, {"error", e.what()}});
            throw StageError(stage, e.what(), exit_code_for(e));
        }
    };
    guarded("ingest", [&] { return stage_ingest(cfg); });
    if (cfg.scenario == Scenario::realworld) guarded("cluster", [&] { return stage_cluster(cfg); });
    guarded("retrieve", [&] { return stage_retrieve(cfg); });
    guarded("map", [&] { return stage_map(cfg, transport); });
    if (!cfg.gold) return Report{Json{{"deterministic", Json{{"note", "no gold mapping configured; evaluation skipped"}}}}, {}};
    return guarded("eval", [&] { return stage_eval(cfg); });
}

}  // namespace fhirmap
