#pragma once

#include <algorithm>
#include <future>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fhirmap/corpus.hpp"
#include "fhirmap/error.hpp"
#include "fhirmap/lexical.hpp"

namespace fhirmap {

struct RankedDoc {
    std::string doc_id;
    double score = 0.0;
    std::size_t rank = 0;  // 1-based
};

struct Ranking {
    std::string model;
    std::vector<RankedDoc> entries;
};

struct FusedDoc {
    std::string doc_id;
    double score = 0.0;
};

struct FusedRanking {
    std::vector<FusedDoc> entries;
    int k_const = 60;
    std::vector<std::string> models;
};

/// One retrieval model: a lexical scorer or an embedding provider.
class RetrievalModel {
public:
    enum class Kind { tfidf, bm25, embedding };

    static RetrievalModel tfidf() { return RetrievalModel(Kind::tfidf, nullptr); }
    static RetrievalModel bm25() { return RetrievalModel(Kind::bm25, nullptr); }
    static RetrievalModel embedding(std::shared_ptr<const EmbeddingProvider> p) {
        if (!p) throw InvalidInput("embedding model needs a provider");
        return RetrievalModel(Kind::embedding, std::move(p));
    }

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] std::string name() const {
        switch (kind_) {
            case Kind::tfidf: return "tfidf";
            case Kind::bm25: return "bm25";
            case Kind::embedding: return provider_->name();
        }
        return {};
    }
    [[nodiscard]] const EmbeddingProvider* provider() const noexcept { return provider_.get(); }

private:
    RetrievalModel(Kind k, std::shared_ptr<const EmbeddingProvider> p) : kind_(k), provider_(std::move(p)) {}
    Kind kind_;
    std::shared_ptr<const EmbeddingProvider> provider_;
};

namespace detail {

/// Descending score, ascending doc id on exact ties.
inline bool score_order(double sa, const std::string& ia, double sb, const std::string& ib) {
    if (sa != sb) return sa > sb;
    return ia < ib;
}

inline Ranking to_ranking(std::string model, std::vector<std::pair<std::string, double>> scored) {
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return score_order(a.second, a.first, b.second, b.first); });
    Ranking r{std::move(model), {}};
    r.entries.reserve(scored.size());
    for (std::size_t i = 0; i < scored.size(); ++i) r.entries.push_back({scored[i].first, scored[i].second, i + 1});
    return r;
}

}  // namespace detail

/// Full ordering of `corpus` by similarity to `query` under one model.
inline Ranking rank_by_model(const RetrievalModel& model, const CanonicalDocument& query,
                             const std::vector<CanonicalDocument>& corpus) {
    if (corpus.empty()) throw InvalidInput("rank_by_model: empty corpus");
    std::vector<std::pair<std::string, double>> scored;
    scored.reserve(corpus.size());
    switch (model.kind()) {
        case RetrievalModel::Kind::tfidf: {
            TfidfIndex index(corpus);
            SparseVector q = index.vectorize(query.text);
            for (std::size_t i = 0; i < corpus.size(); ++i)
                scored.emplace_back(corpus[i].doc_id, cosine_similarity(q, index.vectors()[i]));
            break;
        }
        case RetrievalModel::Kind::bm25: {
            Bm25Index index(corpus);
            auto q = tokenize(query.text);
            for (std::size_t i = 0; i < corpus.size(); ++i) scored.emplace_back(corpus[i].doc_id, index.score(q, i));
            break;
        }
        case RetrievalModel::Kind::embedding: {
            const auto* p = model.provider();
            try {
                std::vector<std::string> texts;
                texts.reserve(corpus.size() + 1);
                texts.push_back(query.text);
                for (const auto& d : corpus) texts.push_back(d.text);
                auto vecs = p->embed_batch(texts);
                if (vecs.size() != texts.size())
                    throw MalformedResponse(p->name(), "embedding count does not match request");
                for (std::size_t i = 0; i < corpus.size(); ++i)
                    scored.emplace_back(corpus[i].doc_id, cosine_similarity(vecs[0], vecs[i + 1]));
            } catch (const ProviderError&) {
                throw;
            } catch (const std::exception& e) {
                throw ProviderError(p->name(), e.what());
            }
            break;
        }
    }
    return detail::to_ranking(model.name(), std::move(scored));
}

/// Reciprocal Rank Fusion: score(d) = sum over rankings of 1/(k_const + rank(d)).
/// Documents missing from a ranking get nothing from it.
inline FusedRanking rrf_fuse(const std::vector<Ranking>& rankings, int k_const = 60) {
    if (rankings.empty()) throw InvalidInput("rrf_fuse: no rankings to fuse");
    if (k_const <= 0) throw InvalidInput("rrf_fuse: k_const must be positive");
    std::map<std::string, double> scores;
    FusedRanking out;
    out.k_const = k_const;
    for (const auto& r : rankings) {
        out.models.push_back(r.model);
        for (const auto& e : r.entries) scores[e.doc_id] += 1.0 / (static_cast<double>(k_const) + static_cast<double>(e.rank));
    }
    out.entries.reserve(scores.size());
    for (const auto& [id, s] : scores) out.entries.push_back({id, s});
    std::stable_sort(out.entries.begin(), out.entries.end(),
                     [](const FusedDoc& a, const FusedDoc& b) { return detail::score_order(a.score, a.doc_id, b.score, b.doc_id); });
    return out;
}

struct RetrievalResult {
    std::string query_id;
    std::size_t k_requested = 1;
    std::vector<FusedDoc> top;          // length <= k_requested
    FusedRanking fused;                 // full list, kept for audit
    std::vector<Ranking> per_model;
    std::map<std::string, std::string> failures;  // model name -> error text

    [[nodiscard]] std::optional<std::string> best() const {
        if (top.empty()) return std::nullopt;
        return top.front().doc_id;
    }
};

struct RetrievalOptions {
    std::size_t top_k = 1;
    int k_const = 60;
    /// When false, a failing model aborts retrieval instead of being skipped.
    bool tolerate_model_failure = true;
    bool parallel = false;
};

/// Ranks the resource corpus under each model, fuses with RRF and keeps the top k.
inline RetrievalResult retrieve_resources(const CanonicalDocument& query, const std::vector<FhirResourceDoc>& corpus,
                                          const std::vector<RetrievalModel>& models, const RetrievalOptions& opt = {}) {
    if (corpus.empty()) throw InvalidInput("retrieve_resources: empty corpus");
    if (opt.top_k < 1) throw InvalidInput("retrieve_resources: top_k must be >= 1");
    if (models.empty()) throw InvalidInput("retrieve_resources: no retrieval models configured");
    auto docs = canonicalize_corpus(corpus);

    std::vector<std::optional<Ranking>> partial(models.size());
    std::vector<std::string> errors(models.size());
    auto run_one = [&](std::size_t i) {
        try {
            partial[i] = rank_by_model(models[i], query, docs);
        } catch (const ProviderError& e) {
            errors[i] = e.what();
            if (!opt.tolerate_model_failure) throw;
        }
    };
    if (opt.parallel && models.size() > 1) {
        std::vector<std::future<void>> jobs;
        for (std::size_t i = 0; i < models.size(); ++i) jobs.push_back(std::async(std::launch::async, run_one, i));
        for (auto& j : jobs) j.get();
    } else {
        for (std::size_t i = 0; i < models.size(); ++i) run_one(i);
    }

    RetrievalResult res;
    res.query_id = query.doc_id;
    res.k_requested = opt.top_k;
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (partial[i])
            res.per_model.push_back(std::move(*partial[i]));
        else
            res.failures[models[i].name()] = errors[i];
    }
    if (res.per_model.empty()) throw ProviderError("retrieval", "every retrieval model failed for query " + query.doc_id);
    res.fused = rrf_fuse(res.per_model, opt.k_const);
    auto n = std::min(opt.top_k, res.fused.entries.size());
    res.top.assign(res.fused.entries.begin(), res.fused.entries.begin() + static_cast<std::ptrdiff_t>(n));
    return res;
}

}  // namespace fhirmap
