#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "../support/oracles.hpp"
#include "fhirmap/evaluation.hpp"

using namespace fhirmap;

namespace {

RetrievalResult result(const std::string& q, const std::string& top) {
    RetrievalResult r;
    r.query_id = q;
    r.top.push_back({top, 1.0});
    return r;
}

GoldMapping gold_xy() {
    GoldMapping g;
    g.table_resources = {{"t", "Observation"}, {"u", "Patient"}};
    g.attribute_paths["t.a"] = {"Observation.code"};
    g.attribute_paths["t.b"] = {"Observation.subject"};
    return g;
}

MappingDocument doc(const std::string& scope, std::vector<AttributeMapping> ms) {
    MappingDocument d;
    d.scope = scope;
    d.mappings = std::move(ms);
    return d;
}

// two-sided 97.5% Student t quantiles from printed tables, df = 1..9
double t975(std::size_t df) {
    static const double tab[] = {12.7062, 4.3027, 3.1824, 2.7764, 2.5706, 2.4469, 2.3646, 2.3060, 2.2622};
    return tab[df - 1];
}

std::pair<double, double> ci_oracle(const std::vector<double>& v) {
    double n = static_cast<double>(v.size()), mean = 0, ss = 0;
    for (double x : v) mean += x / n;
    for (double x : v) ss += (x - mean) * (x - mean);
    double half = t975(v.size() - 1) * std::sqrt(ss / (n - 1)) / std::sqrt(n);
    return {std::clamp(mean - half, 0.0, 1.0), std::clamp(mean + half, 0.0, 1.0)};
}

RunRecord run(const std::string& cond, double acc, int i) {
    RunRecord r;
    r.run_id = cond + "-" + std::to_string(i);
    r.condition = cond;
    r.seed = static_cast<std::uint64_t>(i);
    r.resource_accuracy = 1.0;
    r.hit_at_1 = acc;
    r.hit_at_3 = std::min(1.0, acc + 0.1);
    r.timestamp = "2026-01-01T00:00:0" + std::to_string(i % 10) + "Z";
    return r;
}

}  // namespace

TEST(ResourceIdentification, Examples) {
    auto g = gold_xy();
    EXPECT_DOUBLE_EQ(score_resource_identification({result("t", "Observation"), result("u", "Patient")}, g), 1.0);
    EXPECT_DOUBLE_EQ(score_resource_identification({result("t", "Observation"), result("u", "Encounter")}, g), 0.5);
    try {
        (void)score_resource_identification({}, g);
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("empty evaluation set"), std::string::npos);
    }
    try {
        (void)score_resource_identification({result("zzz", "Patient")}, g);
        FAIL();
    } catch (const InvalidInput& e) {
        EXPECT_NE(std::string(e.what()).find("zzz"), std::string::npos);
    }
    RetrievalResult empty;
    empty.query_id = "t";
    EXPECT_DOUBLE_EQ(score_resource_identification({empty}, g), 0.0);
}

TEST(AttributeMapping, HitAtOneAndThree) {
    auto g = gold_xy();
    auto s = score_attribute_mapping({doc("t", {{"a", {{"Observation.code"}, {"N/A"}, {"N/A"}}, false}})}, g);
    EXPECT_EQ(s.denominator, 2u);
    EXPECT_EQ(s.hits_at_1, 1u);
    EXPECT_EQ(s.hits_at_3, 1u);
    EXPECT_EQ(s.unmapped, 1u);  // t.b absent
    EXPECT_DOUBLE_EQ(s.hit_at_1, 0.5);

    s = score_attribute_mapping(
        {doc("t", {{"a", {{"Observation.status"}, {"Observation.code"}, {"N/A"}}, false},
                   {"b", {{"N/A"}, {"Observation.subject"}}, false}})},
        g);
    EXPECT_EQ(s.hits_at_1, 0u);
    EXPECT_EQ(s.hits_at_3, 2u);
}

TEST(AttributeMapping, UngradedAndOutOfScope) {
    auto g = gold_xy();
    g.attribute_paths["u.x"] = {"Patient.gender"};
    auto s = score_attribute_mapping({doc("t", {{"zz", {{"Observation.code"}}, false}})}, g);
    EXPECT_EQ(s.ungraded, 1u);
    EXPECT_EQ(s.denominator, 2u);  // u.x not in scope
    EXPECT_EQ(s.hits_at_3, 0u);
}

TEST(AttributeMapping, ExactSetMode) {
    GoldMapping g;
    g.attribute_paths["t.a"] = {"Observation.code", "Observation.category"};
    auto d = doc("t", {{"a", {{"Observation.code"}, {"Observation.category"}}, false}});
    auto s = score_attribute_mapping({d}, g, MatchMode::exact_set);
    EXPECT_EQ(s.hits_at_3, 1u);
    EXPECT_EQ(s.hits_at_1, 0u);
    d.mappings[0].candidates.pop_back();
    EXPECT_EQ(score_attribute_mapping({d}, g, MatchMode::exact_set).hits_at_3, 0u);
    EXPECT_EQ(score_attribute_mapping({d}, g).hits_at_3, 1u);
}

TEST(AttributeMapping, HitAtThreeNeverBelowHitAtOne) {
    std::mt19937_64 rng(21);
    const std::vector<std::string> pool{"A.a", "A.b", "A.c", "A.d", "N/A"};
    for (int t = 0; t < 300; ++t) {
        GoldMapping g;
        MappingDocument d;
        d.scope = "s";
        for (int i = 0; i < 6; ++i) {
            std::string name = "x" + std::to_string(i);
            g.attribute_paths["s." + name] = {pool[rng() % 4]};
            if (rng() % 2) g.attribute_paths["s." + name].insert(pool[rng() % 4]);
            if (rng() % 5 == 0) continue;
            AttributeMapping m{name, {}, false};
            for (std::size_t j = 0, k = rng() % 4; j < k; ++j) m.candidates.push_back({pool[rng() % pool.size()]});
            d.mappings.push_back(m);
        }
        for (auto mode : {MatchMode::intersect, MatchMode::exact_set}) {
            auto s = score_attribute_mapping({d}, g, mode);
            EXPECT_GE(s.hit_at_3, s.hit_at_1);
            EXPECT_LE(s.hit_at_3, 1.0);
        }
    }
}

TEST(Coverage, PerAttributeAndPerCluster) {
    auto g = gold_xy();
    g.attribute_paths["u.x"] = {"Patient.gender"};
    RetrievalResult r1 = result("c0", "Observation");
    RetrievalResult r2 = result("c1", "Observation");
    r2.top.push_back({"Encounter", 0.5});
    std::map<std::string, std::vector<std::string>> mem{{"c0", {"t.a", "t.b"}}, {"c1", {"u.x", "t.a", "nogold"}}};
    auto s = score_resource_coverage({r1, r2}, mem, g);
    EXPECT_EQ(s.attributes, 4u);  // nogold skipped
    EXPECT_EQ(s.clusters, 2u);
    EXPECT_DOUBLE_EQ(s.per_attribute, 3.0 / 4.0);  // u.x -> Patient not retrieved
    EXPECT_DOUBLE_EQ(s.per_cluster, 0.5);
    EXPECT_THROW((void)score_resource_coverage({result("c9", "X")}, mem, g), InvalidInput);
}

TEST(GoldFixtures, ResolveAgainstCorpus) {
    auto corpus = load_fhir_corpus(testenv::fixtures() / "corpus");
    for (const char* f : {"baseline.gold.json", "realworld.gold.json", "adversarial.gold.json"}) {
        auto g = load_gold(testenv::fixtures() / f);
        EXPECT_NO_THROW(check_gold(g, corpus)) << f;
        EXPECT_EQ(parse_gold(to_json(g), "rt").attribute_paths, g.attribute_paths);
    }
    GoldMapping bad;
    bad.attribute_paths["t.a"] = {"Observation.banana"};
    EXPECT_THROW(check_gold(bad, corpus), ValidationFatal);
    EXPECT_THROW((void)parse_gold(Json::parse(R"({"attributes":{"t.a":{"paths":[]}}})"), "g"), ParseError);
}

TEST(ConfidenceInterval, WorkedExample) {
    std::vector<double> v{0.67, 0.68, 0.69, 0.70};
    auto ci = confidence_interval(v);
    EXPECT_NEAR(ci.mean, 0.685, 1e-12);
    auto [lo, hi] = ci_oracle(v);
    EXPECT_NEAR(ci.lo, lo, 1e-4);
    EXPECT_NEAR(ci.hi, hi, 1e-4);
    EXPECT_NEAR(ci.lo, 0.6645, 1e-4);
    EXPECT_NEAR(ci.hi, 0.7055, 1e-4);
    EXPECT_LE(ci.lo, ci.mean);
    EXPECT_LE(ci.mean, ci.hi);
}

TEST(ConfidenceInterval, ZeroVarianceAndClamp) {
    auto ci = confidence_interval({0.7, 0.7, 0.7});
    EXPECT_DOUBLE_EQ(ci.lo, 0.7);
    EXPECT_DOUBLE_EQ(ci.hi, 0.7);
    ci = confidence_interval({0.0, 1.0});
    EXPECT_DOUBLE_EQ(ci.lo, 0.0);
    EXPECT_DOUBLE_EQ(ci.hi, 1.0);
}

TEST(ConfidenceInterval, Errors) {
    EXPECT_THROW((void)confidence_interval({0.5}), InvalidInput);
    EXPECT_THROW((void)confidence_interval({}), InvalidInput);
    EXPECT_THROW((void)confidence_interval({0.5, 1.5}), InvalidInput);
    EXPECT_THROW((void)confidence_interval({0.5, 0.6}, 1.0), InvalidInput);
}

TEST(ConfidenceInterval, MatchesTableOracleAndIsPermutationInvariant) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.4, 0.9);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> v(2 + rng() % 9);
        for (auto& x : v) x = u(rng);
        auto ci = confidence_interval(v);
        auto [lo, hi] = ci_oracle(v);
        EXPECT_NEAR(ci.lo, lo, 1e-3);
        EXPECT_NEAR(ci.hi, hi, 1e-3);
        auto w = v;
        std::shuffle(w.begin(), w.end(), rng);
        auto cj = confidence_interval(w);
        EXPECT_EQ(ci.lo, cj.lo);
        EXPECT_EQ(ci.hi, cj.hi);
        EXPECT_LE(ci.lo, ci.mean);
        EXPECT_LE(ci.mean, ci.hi);
    }
}

TEST(Bootstrap, SeededAndBracketsMean) {
    std::vector<double> v{0.6, 0.65, 0.7, 0.72, 0.68, 0.66};
    auto a = bootstrap_interval(v, 0.95, 2000, 3);
    auto b = bootstrap_interval(v, 0.95, 2000, 3);
    EXPECT_EQ(a.lo, b.lo);
    EXPECT_EQ(a.hi, b.hi);
    EXPECT_LE(a.lo, a.mean);
    EXPECT_GE(a.hi, a.mean);
    EXPECT_GE(a.lo, 0.6);
    EXPECT_LE(a.hi, 0.72);
    auto t = confidence_interval(v);
    EXPECT_LT(a.hi - a.lo, t.hi - t.lo);  // percentile bootstrap is narrower at small N
}

TEST(Report, TenRunsOneRow) {
    std::vector<RunRecord> rs;
    for (int i = 0; i < 10; ++i) rs.push_back(run("t=0", 0.66 + 0.004 * i, i));
    auto rep = build_report(rs);
    const auto& rows = rep.json["deterministic"]["conditions"];
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0]["condition"], "t=0");
    EXPECT_EQ(rows[0]["n"], 10);
    std::vector<double> v;
    for (const auto& r : rs) v.push_back(r.hit_at_1);
    auto ci = confidence_interval(v);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f to %.3f", ci.lo * 100, ci.hi * 100);
    EXPECT_NE(rep.table.find(buf), std::string::npos) << rep.table;
    EXPECT_EQ(rep.table.rfind("condition", 0), 0u);
    std::istringstream lines(rep.table);
    std::string header, row;
    std::getline(lines, header);
    std::getline(lines, row);
    EXPECT_EQ(row.rfind("t=0", 0), 0u);
    EXPECT_TRUE(rep.json["deterministic"]["notices"].empty());
}

TEST(Report, SingleRunOmitsCiWithNotice) {
    auto rep = build_report({run("t=0", 0.7, 0)});
    const auto& m = rep.json["deterministic"]["conditions"][0]["metrics"]["hit_at_1"];
    EXPECT_TRUE(m["ci"].is_null());
    EXPECT_DOUBLE_EQ(m["mean"].get<double>(), 0.7);
    EXPECT_NE(rep.table.find("n/a"), std::string::npos);
    EXPECT_NE(rep.table.find("note:"), std::string::npos);
    EXPECT_EQ(rep.json["deterministic"]["notices"].size(), 1u);
}

TEST(Report, FourByFourTable) {
    std::vector<RunRecord> rs;
    const std::vector<std::string> conds{"reflexive", "mop", "serial5-schema", "serial5-noschema"};
    for (std::size_t c = 0; c < conds.size(); ++c)
        for (int i = 0; i < 4; ++i) rs.push_back(run(conds[c], 0.5 + 0.1 * static_cast<double>(c) + 0.01 * i, i));
    auto rep = build_report(rs);
    ASSERT_EQ(rep.json["deterministic"]["conditions"].size(), 4u);
    std::istringstream lines(rep.table);
    std::vector<std::string> ls;
    for (std::string l; std::getline(lines, l);) ls.push_back(l);
    ASSERT_EQ(ls.size(), 5u);
    for (std::size_t c = 0; c < conds.size(); ++c) {
        EXPECT_EQ(ls[c + 1].rfind(conds[c], 0), 0u);
        EXPECT_NE(ls[c + 1].find(" to "), std::string::npos);
    }
}

TEST(Report, DeterministicSectionIsPure) {
    std::vector<RunRecord> rs;
    for (int i = 0; i < 4; ++i) rs.push_back(run("t=0", 0.6 + 0.02 * i, i));
    auto a = build_report(rs), b = build_report(rs);
    EXPECT_EQ(a.json["deterministic"].dump(), b.json["deterministic"].dump());
    EXPECT_EQ(a.table, b.table);
    auto shuffled = rs;
    std::swap(shuffled[0], shuffled[3]);
    EXPECT_EQ(build_report(shuffled).json["deterministic"]["conditions"].dump(),
              a.json["deterministic"]["conditions"].dump());
}

TEST(Report, ErrorsAndFiles) {
    EXPECT_THROW((void)build_report({}), InvalidInput);
    ReportOptions o;
    o.primary_metric = "f1";
    EXPECT_THROW((void)build_report({run("a", 0.5, 0)}, o), InvalidInput);
    auto dir = testenv::scratch("report");
    auto rep = emit_report({run("a", 0.5, 0), run("a", 0.6, 1)}, dir);
    std::ifstream in(dir / "report.json");
    EXPECT_EQ(Json::parse(in)["deterministic"], rep.json["deterministic"]);
    EXPECT_TRUE(std::filesystem::exists(dir / "report.txt"));
    EXPECT_THROW((void)emit_report({run("a", 0.5, 0)}, dir / "report.json" / "nested"), Error);
}

TEST(RunRecord, JsonRoundTrip) {
    auto r = run("t=0.5", 0.42, 3);
    r.params = Json{{"temperature", 0.5}};
    auto back = run_record_from_json(to_json(r));
    EXPECT_EQ(to_json(back), to_json(r));
}
