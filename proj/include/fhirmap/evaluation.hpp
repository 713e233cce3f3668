#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "fhirmap/corpus.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/fusion.hpp"
#include "fhirmap/json_util.hpp"
#include "fhirmap/validation.hpp"

namespace fhirmap {

/// Expert reference: the resource per table and the acceptable element paths
/// per `table.attribute`.
struct GoldMapping {
    std::map<std::string, std::string> table_resources;
    std::map<std::string, std::set<std::string>> attribute_paths;

    [[nodiscard]] const std::set<std::string>* paths_for(const std::string& qualified) const {
        auto it = attribute_paths.find(qualified);
        return it == attribute_paths.end() ? nullptr : &it->second;
    }
};

inline GoldMapping parse_gold(const Json& j, const std::string& origin) {
    GoldMapping g;
    if (!j.is_object()) throw ParseError(origin + ": expected an object");
    if (auto t = j.find("tables"); t != j.end()) {
        if (!t->is_object()) throw ParseError(origin + ".tables: expected an object");
        for (const auto& [id, v] : t->items()) g.table_resources[id] = detail::require_string(v, "resource", origin + ".tables." + id);
    }
    if (auto a = j.find("attributes"); a != j.end()) {
        if (!a->is_object()) throw ParseError(origin + ".attributes: expected an object");
        for (const auto& [name, v] : a->items()) {
            const auto& paths = detail::require_field(v, "paths", origin + ".attributes." + name);
            if (!paths.is_array() || paths.empty())
                throw ParseError(origin + ".attributes." + name + ".paths: expected a non-empty array");
            for (const auto& p : paths) {
                if (!p.is_string()) throw ParseError(origin + ".attributes." + name + ".paths: expected strings");
                g.attribute_paths[name].insert(p.get<std::string>());
            }
        }
    }
    return g;
}

inline GoldMapping load_gold(const std::filesystem::path& path) {
    return parse_gold(detail::parse_json_file(path), path.string());
}

inline Json to_json(const GoldMapping& g) {
    Json tables = Json::object(), attrs = Json::object();
    for (const auto& [id, r] : g.table_resources) tables[id] = Json{{"resource", r}};
    for (const auto& [name, paths] : g.attribute_paths) attrs[name] = Json{{"paths", paths}};
    return Json{{"tables", tables}, {"attributes", attrs}};
}

/// Every gold path and resource must exist in the corpus.
inline void check_gold(const GoldMapping& g, const std::vector<FhirResourceDoc>& corpus) {
    std::vector<std::string> bad;
    for (const auto& [id, r] : g.table_resources)
        if (!find_resource(corpus, r)) bad.push_back(id + " -> " + r);
    for (const auto& [name, paths] : g.attribute_paths)
        for (const auto& p : paths)
            if (check_candidate(name, Candidate{p}, corpus)) bad.push_back(name + " -> " + p);
    if (!bad.empty()) {
        std::string msg = "gold mapping references elements outside the corpus:";
        for (const auto& b : bad) msg += " " + b + ";";
        throw ValidationFatal(msg);
    }
}

// ---------------------------------------------------------------------------
// Scores

/// Fraction of queries whose top-1 fused resource equals the gold resource.
inline double score_resource_identification(const std::vector<RetrievalResult>& results, const GoldMapping& gold) {
    if (results.empty()) throw InvalidInput("empty evaluation set");
    std::size_t hits = 0;
    for (const auto& r : results) {
        auto it = gold.table_resources.find(r.query_id);
        if (it == gold.table_resources.end()) throw InvalidInput("query '" + r.query_id + "' has no gold resource");
        if (r.best() == it->second) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

enum class MatchMode { intersect, exact_set };

struct AttributeScore {
    double hit_at_1 = 0.0;
    double hit_at_3 = 0.0;
    std::size_t hits_at_1 = 0;
    std::size_t hits_at_3 = 0;
    std::size_t denominator = 0;  // gold attributes in scope
    std::size_t unmapped = 0;     // in scope but absent or without candidates
    std::size_t ungraded = 0;     // mapped but missing from gold
};

inline Json to_json(const AttributeScore& s) {
    return Json{{"hit_at_1", s.hit_at_1}, {"hit_at_3", s.hit_at_3}, {"hits_at_1", s.hits_at_1},
                {"hits_at_3", s.hits_at_3}, {"denominator", s.denominator}, {"unmapped", s.unmapped},
                {"ungraded", s.ungraded}};
}

/// hit@1: the top candidate is acceptable. hit@3: any real candidate is.
/// The denominator is every gold attribute of the tables the documents cover;
/// attributes with no candidates count as misses.
inline AttributeScore score_attribute_mapping(const std::vector<MappingDocument>& docs, const GoldMapping& gold,
                                              MatchMode mode = MatchMode::intersect) {
    std::set<std::string> scopes;
    std::map<std::string, const AttributeMapping*> predicted;
    AttributeScore s;
    for (const auto& d : docs) {
        scopes.insert(d.scope);
        for (const auto& m : d.mappings) {
            std::string q = d.scope.empty() ? m.attribute : d.scope + "." + m.attribute;
            if (!gold.paths_for(q)) {
                ++s.ungraded;
                continue;
            }
            predicted[q] = &m;
        }
    }
    for (const auto& [q, paths] : gold.attribute_paths) {
        auto dot = q.find('.');
        std::string scope = dot == std::string::npos ? std::string() : q.substr(0, dot);
        if (!scopes.contains(scope)) continue;
        ++s.denominator;
        auto it = predicted.find(q);
        const AttributeMapping* m = it == predicted.end() ? nullptr : it->second;
        std::vector<std::string> real;
        if (m)
            for (const auto& c : m->candidates)
                if (!c.placeholder()) real.push_back(c.text);
        if (real.empty()) {
            ++s.unmapped;
            continue;
        }
        bool top_ok = !m->candidates.front().placeholder() && paths.contains(m->candidates.front().text);
        bool any_ok = std::any_of(real.begin(), real.end(), [&](const std::string& p) { return paths.contains(p); });
        if (mode == MatchMode::exact_set) {
            // some ranked prefix must equal the gold set; the length-1 prefix is hit@1
            std::set<std::string> prefix;
            any_ok = false;
            for (const auto& p : real) {
                prefix.insert(p);
                any_ok = any_ok || prefix == paths;
            }
            top_ok = top_ok && paths.size() == 1;
        }
        s.hits_at_1 += top_ok ? 1 : 0;
        s.hits_at_3 += any_ok ? 1 : 0;
    }
    if (s.denominator > 0) {
        s.hit_at_1 = static_cast<double>(s.hits_at_1) / static_cast<double>(s.denominator);
        s.hit_at_3 = static_cast<double>(s.hits_at_3) / static_cast<double>(s.denominator);
    }
    return s;
}

struct CoverageScore {
    double per_attribute = 0.0;
    double per_cluster = 0.0;
    std::size_t attributes = 0;
    std::size_t clusters = 0;
};

/// Top-k resource coverage for attribute groups. An attribute is covered when
/// one of its gold resources is among its group's retrieved resources; a group
/// is covered when all of its graded members are.
inline CoverageScore score_resource_coverage(const std::vector<RetrievalResult>& results,
                                             const std::map<std::string, std::vector<std::string>>& members,
                                             const GoldMapping& gold) {
    if (results.empty()) throw InvalidInput("empty evaluation set");
    CoverageScore s;
    std::size_t attr_hits = 0, cluster_hits = 0;
    for (const auto& r : results) {
        auto mem = members.find(r.query_id);
        if (mem == members.end()) throw InvalidInput("query '" + r.query_id + "' has no member list");
        std::set<std::string> retrieved;
        for (const auto& d : r.top) retrieved.insert(d.doc_id);
        bool all = true;
        std::size_t graded = 0;
        for (const auto& q : mem->second) {
            const auto* paths = gold.paths_for(q);
            if (!paths) continue;
            ++graded;
            ++s.attributes;
            bool hit = std::any_of(paths->begin(), paths->end(), [&](const std::string& p) {
                return retrieved.contains(p.substr(0, p.find('.')));
            });
            attr_hits += hit ? 1 : 0;
            all = all && hit;
        }
        if (graded == 0) continue;
        ++s.clusters;
        cluster_hits += all ? 1 : 0;
    }
    if (s.attributes) s.per_attribute = static_cast<double>(attr_hits) / static_cast<double>(s.attributes);
    if (s.clusters) s.per_cluster = static_cast<double>(cluster_hits) / static_cast<double>(s.clusters);
    return s;
}

// ---------------------------------------------------------------------------
// Intervals

struct ConfidenceInterval {
    double mean = 0.0;
    double sd = 0.0;  // sample standard deviation
    double lo = 0.0;
    double hi = 0.0;
    std::size_t n = 0;
};

namespace detail {

inline void check_samples(const std::vector<double>& samples) {
    if (samples.size() < 2) throw InvalidInput("confidence interval needs at least 2 samples");
    for (double s : samples)
        if (!(s >= 0.0 && s <= 1.0)) throw InvalidInput("accuracy samples must lie in [0, 1]");
}

/// Mean and sample SD over sorted values so the result does not depend on input order.
inline std::pair<double, double> mean_sd(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double sum = 0.0;
    for (double x : v) sum += x;
    double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace detail

/// Student-t interval: mean +- t(N-1, (1+level)/2) * SD / sqrt(N), clamped to [0, 1].
inline ConfidenceInterval confidence_interval(const std::vector<double>& samples, double level = 0.95) {
    detail::check_samples(samples);
    if (!(level > 0.0 && level < 1.0)) throw InvalidInput("confidence level must be in (0, 1)");
    auto [mean, sd] = detail::mean_sd(samples);
    auto n = samples.size();
    boost::math::students_t dist(static_cast<double>(n - 1));
    double t = boost::math::quantile(dist, 0.5 + level / 2.0);
    double half = t * sd / std::sqrt(static_cast<double>(n));
    return {mean, sd, std::clamp(mean - half, 0.0, 1.0), std::clamp(mean + half, 0.0, 1.0), n};
}

/// Percentile bootstrap of the mean, for sensitivity checks against the t interval.
inline ConfidenceInterval bootstrap_interval(const std::vector<double>& samples, double level = 0.95,
                                             std::size_t resamples = 10000, std::uint64_t seed = 0) {
    detail::check_samples(samples);
    auto [mean, sd] = detail::mean_sd(samples);
    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    std::mt19937_64 rng(seed);
    std::vector<double> means(resamples);
    const auto n = sorted.size();
    for (auto& m : means) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += sorted[rng() % n];
        m = s / static_cast<double>(n);
    }
    std::sort(means.begin(), means.end());
    double alpha = (1.0 - level) / 2.0;
    auto at = [&](double q) {
        auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(resamples - 1)));
        return means[std::min(idx, resamples - 1)];
    };
    return {mean, sd, std::clamp(at(alpha), 0.0, 1.0), std::clamp(at(1.0 - alpha), 0.0, 1.0), n};
}

// ---------------------------------------------------------------------------
// Runs and reports

struct RunRecord {
    std::string run_id;
    std::string condition;  // row label in the report, e.g. "t=0" or a strategy name
    std::uint64_t seed = 0;
    Json params = Json::object();
    double resource_accuracy = 0.0;
    double hit_at_1 = 0.0;
    double hit_at_3 = 0.0;
    std::string timestamp;
};

inline Json to_json(const RunRecord& r) {
    return Json{{"run_id", r.run_id},       {"condition", r.condition}, {"seed", r.seed},
                {"params", r.params},       {"resource_accuracy", r.resource_accuracy},
                {"hit_at_1", r.hit_at_1},   {"hit_at_3", r.hit_at_3},   {"timestamp", r.timestamp}};
}

inline RunRecord run_record_from_json(const Json& j) {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.condition = j.value("condition", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
    r.params = j.value("params", Json::object());
    r.resource_accuracy = j.at("resource_accuracy").get<double>();
    r.hit_at_1 = j.at("hit_at_1").get<double>();
    r.hit_at_3 = j.at("hit_at_3").get<double>();
    r.timestamp = j.value("timestamp", std::string());
    return r;
}

enum class IntervalMethod { student_t, bootstrap };

struct MetricSummary {
    double mean = 0.0;
    double sd = 0.0;
    std::optional<std::pair<double, double>> ci;
    std::size_t n = 0;
};

struct ReportOptions {
    std::string primary_metric = "hit_at_1";
    IntervalMethod method = IntervalMethod::student_t;
    double level = 0.95;
    std::uint64_t bootstrap_seed = 0;
    Json config_echo = Json::object();
};

inline MetricSummary summarize(const std::vector<double>& v, const ReportOptions& opt) {
    MetricSummary m;
    m.n = v.size();
    auto [mean, sd] = detail::mean_sd(v);
    m.mean = mean;
    m.sd = sd;
    if (v.size() >= 2) {
        auto ci = opt.method == IntervalMethod::student_t ? confidence_interval(v, opt.level)
                                                          : bootstrap_interval(v, opt.level, 10000, opt.bootstrap_seed);
        m.ci = std::make_pair(ci.lo, ci.hi);
    }
    return m;
}

struct Report {
    Json json;
    std::string table;
};

namespace detail {

inline std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v * 100.0;
    return os.str();
}

inline const double& metric_of(const RunRecord& r, const std::string& name) {
    if (name == "resource_accuracy") return r.resource_accuracy;
    if (name == "hit_at_1") return r.hit_at_1;
    if (name == "hit_at_3") return r.hit_at_3;
    throw InvalidInput("unknown metric '" + name + "'");
}

}  // namespace detail

/// Groups runs by condition and summarizes each metric. The JSON splits a
/// deterministic section from run metadata; the text table has one row per
/// condition, shaped "condition  N  metric  mean  lo to hi" in percent.
inline Report build_report(const std::vector<RunRecord>& records, const ReportOptions& opt = {}) {
    if (records.empty()) throw InvalidInput("report needs at least one run record");
    std::vector<std::string> order;
    std::map<std::string, std::vector<const RunRecord*>> groups;
    for (const auto& r : records) {
        if (!groups.contains(r.condition)) order.push_back(r.condition);
        groups[r.condition].push_back(&r);
    }
    const std::vector<std::string> metrics{"resource_accuracy", "hit_at_1", "hit_at_3"};
    (void)detail::metric_of(records.front(), opt.primary_metric);

    Json rows = Json::array();
    std::ostringstream table;
    table << std::left << std::setw(20) << "condition" << std::setw(5) << "N" << std::setw(20) << "metric"
          << std::setw(10) << "mean" << "95% CI\n";
    std::vector<std::string> notices;
    for (const auto& cond : order) {
        const auto& g = groups[cond];
        Json row{{"condition", cond}, {"n", g.size()}, {"metrics", Json::object()}};
        for (const auto& name : metrics) {
            std::vector<double> v;
            for (const auto* r : g) v.push_back(detail::metric_of(*r, name));
            auto s = summarize(v, opt);
            Json mj{{"mean", s.mean}, {"sd", s.sd}, {"n", s.n}};
            mj["ci"] = s.ci ? Json::array({s.ci->first, s.ci->second}) : Json(nullptr);
            row["metrics"][name] = std::move(mj);
        }
        std::vector<double> pv;
        for (const auto* r : g) pv.push_back(detail::metric_of(*r, opt.primary_metric));
        const auto primary = summarize(pv, opt);
        std::string label = cond.empty() ? "(all)" : cond;
        table << std::left << std::setw(20) << label << std::setw(5) << g.size() << std::setw(20) << opt.primary_metric
              << std::setw(10) << detail::pct(primary.mean);
        if (primary.ci)
            table << detail::pct(primary.ci->first) << " to " << detail::pct(primary.ci->second);
        else
            table << "n/a";
        table << '\n';
        if (!primary.ci) notices.push_back("condition '" + label + "': CI omitted, fewer than 2 runs");
        rows.push_back(std::move(row));
    }
    for (const auto& n : notices) table << "note: " << n << '\n';

    Json runs = Json::array();
    for (const auto& r : records) runs.push_back(to_json(r));
    Json det{{"ci_method", opt.method == IntervalMethod::student_t ? "student-t" : "bootstrap-percentile"},
             {"level", opt.level},
             {"primary_metric", opt.primary_metric},
             {"conditions", std::move(rows)},
             {"notices", notices},
             {"config", opt.config_echo}};
    Json meta{{"generated_at", detail::utc_now_iso()}, {"runs", std::move(runs)}};
    return {Json{{"deterministic", std::move(det)}, {"metadata", std::move(meta)}}, table.str()};
}

/// Writes `<dir>/report.json` and `<dir>/report.txt`.
inline Report emit_report(const std::vector<RunRecord>& records, const std::filesystem::path& dir,
                          const ReportOptions& opt = {}) {
    auto rep = build_report(records, opt);
    detail::write_text_file(dir / "report.json", rep.json.dump(2) + "\n");
    detail::write_text_file(dir / "report.txt", rep.table);
    return rep;
}

}  // namespace fhirmap
