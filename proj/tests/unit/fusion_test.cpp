#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "../support/oracles.hpp"
#include "fhirmap/corpus.hpp"
#include "fhirmap/fusion.hpp"

using namespace fhirmap;

namespace {

Ranking ranking(std::string model, const std::vector<std::string>& ids) {
    Ranking r{std::move(model), {}};
    for (std::size_t i = 0; i < ids.size(); ++i) r.entries.push_back({ids[i], 0.0, i + 1});
    return r;
}

double score_of(const FusedRanking& f, const std::string& id) {
    for (const auto& e : f.entries)
        if (e.doc_id == id) return e.score;
    return -1;
}

std::vector<std::string> order(const FusedRanking& f) {
    std::vector<std::string> ids;
    for (const auto& e : f.entries) ids.push_back(e.doc_id);
    return ids;
}

}  // namespace

TEST(Rrf, SingleRanking) {
    auto f = rrf_fuse({ranking("m", {"A", "B"})}, 60);
    EXPECT_DOUBLE_EQ(score_of(f, "A"), 1.0 / 61);
    EXPECT_DOUBLE_EQ(score_of(f, "B"), 1.0 / 62);
    EXPECT_EQ(order(f), (std::vector<std::string>{"A", "B"}));
}

TEST(Rrf, TwoRankingsWorkedExample) {
    auto f = rrf_fuse({ranking("r1", {"A", "B", "C"}), ranking("r2", {"C", "A", "B"})}, 60);
    EXPECT_NEAR(score_of(f, "A"), 1.0 / 61 + 1.0 / 62, 1e-15);
    EXPECT_NEAR(score_of(f, "A"), 0.032522, 1e-6);
    EXPECT_NEAR(score_of(f, "C"), 0.032266, 1e-6);
    EXPECT_NEAR(score_of(f, "B"), 0.032002, 1e-6);
    EXPECT_EQ(order(f), (std::vector<std::string>{"A", "C", "B"}));
    EXPECT_EQ(f.models, (std::vector<std::string>{"r1", "r2"}));
}

TEST(Rrf, DuplicatedRankingDoublesScores) {
    auto r = ranking("m", {"x", "y", "z"});
    auto once = rrf_fuse({r}, 60), twice = rrf_fuse({r, r}, 60);
    for (const auto& e : once.entries) EXPECT_DOUBLE_EQ(score_of(twice, e.doc_id), 2 * e.score);
    EXPECT_EQ(order(once), order(twice));
}

TEST(Rrf, TiesBreakById) {
    auto f = rrf_fuse({ranking("a", {"B", "A"}), ranking("b", {"A", "B"})}, 60);
    EXPECT_EQ(order(f), (std::vector<std::string>{"A", "B"}));
}

TEST(Rrf, MissingDocumentsContributeNothing) {
    auto f = rrf_fuse({ranking("a", {"X"}), ranking("b", {"Y", "X"})}, 60);
    EXPECT_DOUBLE_EQ(score_of(f, "X"), 1.0 / 61 + 1.0 / 62);
    EXPECT_DOUBLE_EQ(score_of(f, "Y"), 1.0 / 61);
}

TEST(Rrf, InvalidArguments) {
    EXPECT_THROW((void)rrf_fuse({}, 60), InvalidInput);
    EXPECT_THROW((void)rrf_fuse({ranking("a", {"X"})}, 0), InvalidInput);
}

TEST(Rrf, MatchesOracleOnRandomRankings) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t m = 1 + rng() % 4, pool = 1 + rng() % 8;
        int k = 1 + static_cast<int>(rng() % 100);
        std::vector<Ranking> rankings;
        oracle::RankLists lists;
        for (std::size_t r = 0; r < m; ++r) {
            std::vector<std::string> ids;
            for (std::size_t i = 0; i < pool; ++i) ids.push_back("d" + std::to_string(i));
            std::shuffle(ids.begin(), ids.end(), rng);
            ids.resize(1 + rng() % pool);
            lists.push_back(ids);
            rankings.push_back(ranking("m" + std::to_string(r), ids));
        }
        auto got = rrf_fuse(rankings, k);
        auto want = oracle::rrf(lists, k);
        ASSERT_EQ(got.entries.size(), want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            EXPECT_EQ(got.entries[i].doc_id, want[i].first);
            EXPECT_NEAR(got.entries[i].score, want[i].second, 1e-12);
        }
        // upper bound: m/(k+1), reached only by a doc ranked first everywhere
        for (const auto& e : got.entries) EXPECT_LE(e.score, static_cast<double>(m) / (k + 1) + 1e-15);
    }
}

TEST(Rrf, ImprovingARankNeverLowersTheScore) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::string> ids{"a", "b", "c", "d", "e"};
        std::shuffle(ids.begin(), ids.end(), rng);
        auto other = ranking("o", {"e", "d", "c", "b", "a"});
        auto before = rrf_fuse({ranking("m", ids), other}, 60);
        auto pos = static_cast<std::size_t>(rng() % 4) + 1;
        auto moved = ids;
        std::swap(moved[pos], moved[pos - 1]);  // moved[pos-1] improved by one place
        auto after = rrf_fuse({ranking("m", moved), other}, 60);
        EXPECT_GT(score_of(after, moved[pos - 1]), score_of(before, moved[pos - 1]));
    }
}

namespace {

const std::vector<FhirResourceDoc>& fixture_corpus() {
    static const auto corpus = load_fhir_corpus(testenv::fixtures() / "corpus");
    return corpus;
}

std::vector<RetrievalModel> default_models() {
    return {RetrievalModel::tfidf(), RetrievalModel::bm25(),
            RetrievalModel::embedding(std::make_shared<HashEmbeddingProvider>())};
}

class DownProvider final : public EmbeddingProvider {
public:
    [[nodiscard]] std::string name() const override { return "down"; }
    [[nodiscard]] std::size_t dimension() const override { return 2; }
    [[nodiscard]] DenseVector embed(std::string_view) const override { throw ProviderError("down", "503"); }
};

}  // namespace

TEST(Retrieve, OutputeventsTopOneIsObservation) {
    auto tables = load_dataset_descriptor(testenv::fixtures() / "baseline.dataset.json");
    auto res = retrieve_resources(canonicalize(tables[0]), fixture_corpus(), default_models(), {.top_k = 1});
    ASSERT_EQ(res.top.size(), 1u);
    EXPECT_EQ(res.best(), "Observation");
    EXPECT_EQ(res.per_model.size(), 3u);
    EXPECT_EQ(res.fused.entries.size(), fixture_corpus().size());
}

TEST(Retrieve, SingleResourceCorpus) {
    std::vector<FhirResourceDoc> one{fixture_corpus()[0]};
    auto res = retrieve_resources({"q", DocKind::table, "anything at all"}, one, default_models(), {.top_k = 3});
    ASSERT_EQ(res.top.size(), 1u);
    EXPECT_EQ(res.best(), one[0].resource_name);
}

TEST(Retrieve, VitalSignClusterTopFiveHasObservation) {
    auto rw = load_dataset_descriptor(testenv::fixtures() / "realworld.dataset.json");
    AttributeCluster c{"vitals", {}};
    for (const auto& a : rw[0].attributes)
        if (a.name == "heartrate" || a.name == "resprate" || a.name == "sysbp" || a.name == "spo2") c.members.push_back(a);
    ASSERT_EQ(c.members.size(), 4u);
    auto res = retrieve_resources(canonicalize(c), fixture_corpus(), default_models(), {.top_k = 5});
    ASSERT_EQ(res.top.size(), 5u);
    EXPECT_TRUE(std::any_of(res.top.begin(), res.top.end(), [](const FusedDoc& d) { return d.doc_id == "Observation"; }));
}

TEST(Retrieve, FailedModelIsSkippedAndRecorded) {
    auto models = default_models();
    models.push_back(RetrievalModel::embedding(std::make_shared<DownProvider>()));
    auto res = retrieve_resources({"q", DocKind::table, "heart rate"}, fixture_corpus(), models);
    EXPECT_EQ(res.per_model.size(), 3u);
    ASSERT_TRUE(res.failures.contains("down"));

    RetrievalOptions strict;
    strict.tolerate_model_failure = false;
    EXPECT_THROW((void)retrieve_resources({"q", DocKind::table, "x"}, fixture_corpus(), models, strict), ProviderError);
    EXPECT_THROW((void)retrieve_resources({"q", DocKind::table, "x"}, fixture_corpus(),
                                          {RetrievalModel::embedding(std::make_shared<DownProvider>())}),
                 ProviderError);
}

TEST(Retrieve, ParallelMatchesSequential) {
    auto tables = load_dataset_descriptor(testenv::fixtures() / "baseline.dataset.json");
    for (const auto& t : tables) {
        RetrievalOptions par{.top_k = 3, .parallel = true};
        auto a = retrieve_resources(canonicalize(t), fixture_corpus(), default_models(), {.top_k = 3});
        auto b = retrieve_resources(canonicalize(t), fixture_corpus(), default_models(), par);
        EXPECT_EQ(order(a.fused), order(b.fused));
    }
}

TEST(Retrieve, InvalidOptions) {
    CanonicalDocument q{"q", DocKind::table, "x"};
    EXPECT_THROW((void)retrieve_resources(q, {}, default_models()), InvalidInput);
    EXPECT_THROW((void)retrieve_resources(q, fixture_corpus(), {}), InvalidInput);
    EXPECT_THROW((void)retrieve_resources(q, fixture_corpus(), default_models(), {.top_k = 0}), InvalidInput);
}
