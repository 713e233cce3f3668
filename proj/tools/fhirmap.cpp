// fhirmap: command line driver for the mapping pipeline.
//
//   fhirmap pipeline --config data/fixtures/configs/baseline.json
//   fhirmap retrieve --config cfg.json --top-k 3
//
// Exit codes: 0 ok, 2 config/input, 3 provider, 4 validation-fatal, 1 other.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "fhirmap/fhirmap.hpp"

namespace {

struct Overrides {
    std::string config;
    std::optional<std::string> scenario, strategy, provider, out, dataset, corpus, gold, templates;
    std::optional<double> temperature, top_p;
    std::optional<std::size_t> runs, top_k, parallel_runs;
    std::optional<std::uint64_t> seed;
};

void add_options(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "pipeline configuration (JSON)")->check(CLI::ExistingFile);
    cmd->add_option("--scenario", o.scenario, "baseline | realworld")->check(CLI::IsMember({"baseline", "realworld"}));
    cmd->add_option("--strategy", o.strategy, "Reflexive | MoP | Serial5Schema | Serial5NoSchema | RealWorldRefined");
    cmd->add_option("--temperature", o.temperature, "sampling temperature");
    cmd->add_option("--top-p", o.top_p, "nucleus sampling mass");
    cmd->add_option("--runs", o.runs, "independent repetitions");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--provider", o.provider, "mock | http (http needs the provider section of the config)")
        ->check(CLI::IsMember({"mock", "http"}));
    cmd->add_option("--top-k", o.top_k, "resources retrieved per query");
    cmd->add_option("--out", o.out, "artifact directory");
    cmd->add_option("--parallel-runs", o.parallel_runs, "runs executed concurrently (independent strategies only)");
    cmd->add_option("--dataset", o.dataset, "dataset descriptor (JSON)");
    cmd->add_option("--corpus", o.corpus, "FHIR corpus directory");
    cmd->add_option("--gold", o.gold, "gold mapping (JSON)");
    cmd->add_option("--templates", o.templates, "prompt template directory");
}

fhirmap::PipelineConfig effective_config(const Overrides& o) {
    using namespace fhirmap;
    Json j = Json::object();
    std::filesystem::path base;
    if (!o.config.empty()) {
        try {
            j = detail::parse_json_file(o.config);
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
        base = std::filesystem::path(o.config).parent_path();
    }
    // Scenario first: it selects the defaults the remaining fields override.
    if (o.scenario) j["scenario"] = *o.scenario;
    PipelineConfig c = config_from_json(j, base);
    if (o.strategy) c.strategy = parse_strategy(*o.strategy);
    if (o.temperature) c.generation.temperature = *o.temperature;
    if (o.top_p) c.generation.top_p = *o.top_p;
    if (o.runs) c.runs = *o.runs;
    if (o.seed) c.seed = *o.seed;
    if (o.provider) c.provider.kind = *o.provider == "http" ? ProviderConfig::Kind::http : ProviderConfig::Kind::mock;
    if (o.top_k) c.top_k = *o.top_k;
    if (o.out) c.out = *o.out;
    if (o.parallel_runs) c.parallel_runs = *o.parallel_runs;
    if (o.dataset) c.dataset = *o.dataset;
    if (o.corpus) c.corpus = *o.corpus;
    if (o.gold) c.gold = std::filesystem::path(*o.gold);
    if (o.templates) c.templates = *o.templates;
    c.validate();
    return c;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Map tabular clinical schemas to FHIR element paths"};
    app.require_subcommand(1);
    Overrides o;
    const char* names[] = {"ingest", "retrieve", "cluster", "map", "eval", "pipeline"};
    const char* help[] = {"validate inputs and write ingest.json",
                          "rank candidate resources per table or cluster",
                          "group real-world attributes (realworld scenario only)",
                          "prompt the model and write mappings.jsonl",
                          "score mappings against the gold mapping",
                          "run every stage in order"};
    std::vector<CLI::App*> cmds;
    for (std::size_t i = 0; i < std::size(names); ++i) {
        cmds.push_back(app.add_subcommand(names[i], help[i]));
        add_options(cmds.back(), o);
    }
    CLI11_PARSE(app, argc, argv);

    std::string stage = app.get_subcommands().front()->get_name();
    try {
        auto cfg = effective_config(o);
        if (stage == "pipeline") {
            auto rep = fhirmap::run_pipeline(cfg);
            if (!rep.table.empty()) std::cout << rep.table;
            std::cout << "artifacts written to " << cfg.out.string() << "\n";
            return fhirmap::kExitOk;
        }
        std::filesystem::create_directories(cfg.out);
        if (stage == "ingest") {
            auto j = fhirmap::stage_ingest(cfg);
            std::cout << j["dataset"]["tables"].size() << " table(s), " << j["corpus"].size() << " resource(s)\n";
        } else if (stage == "cluster") {
            auto j = fhirmap::stage_cluster(cfg);
            const auto& cfgj = j["report"];
            std::cout << "selected " << cfgj["algorithm"].get<std::string>() << " " << cfgj["params"].dump() << ", "
                      << j["groups"].size() << " group(s)\n";
        } else if (stage == "retrieve") {
            auto j = fhirmap::stage_retrieve(cfg);
            for (const auto& q : j["queries"]) {
                std::cout << q["query_id"].get<std::string>() << ":";
                for (const auto& d : q["top"]) std::cout << " " << d["doc_id"].get<std::string>();
                std::cout << "\n";
            }
        } else if (stage == "map") {
            auto r = fhirmap::stage_map(cfg);
            std::cout << r.runs.size() << " run(s) written to " << (cfg.out / fhirmap::artifacts::mappings).string() << "\n";
        } else if (stage == "eval") {
            auto rep = fhirmap::stage_eval(cfg);
            std::cout << rep.table;
        }
        return fhirmap::kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "fhirmap " << stage << ": " << e.what() << "\n";
        return fhirmap::exit_code_for(e);
    }
}
