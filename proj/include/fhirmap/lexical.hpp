#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fhirmap/corpus.hpp"
#include "fhirmap/error.hpp"

namespace fhirmap {

/// Lowercase ASCII alphanumeric runs. Everything else, underscores included,
/// separates tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        auto uc = static_cast<unsigned char>(c);
        if (uc < 0x80 && std::isalnum(uc)) {
            cur += static_cast<char>(std::tolower(uc));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

// ---------------------------------------------------------------------------
// Vectors

struct SparseVector {
    std::vector<std::pair<std::uint32_t, double>> entries;  // strictly increasing ids

    [[nodiscard]] double norm() const {
        double s = 0.0;
        for (const auto& [id, w] : entries) s += w * w;
        return std::sqrt(s);
    }
    [[nodiscard]] double weight(std::uint32_t id) const {
        auto it = std::lower_bound(entries.begin(), entries.end(), id,
                                   [](const auto& e, std::uint32_t v) { return e.first < v; });
        return it != entries.end() && it->first == id ? it->second : 0.0;
    }
};

struct DenseVector {
    std::vector<double> values;
    std::string provider;
};

inline double dot(const SparseVector& a, const SparseVector& b) {
    double s = 0.0;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    while (ia != a.entries.end() && ib != b.entries.end()) {
        if (ia->first < ib->first) {
            ++ia;
        } else if (ib->first < ia->first) {
            ++ib;
        } else {
            s += ia->second * ib->second;
            ++ia;
            ++ib;
        }
    }
    return s;
}

namespace detail {

inline double finish_cosine(double d, double na, double nb, bool* degenerate) {
    if (degenerate) *degenerate = false;
    if (na == 0.0 || nb == 0.0) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return std::clamp(d / (na * nb), -1.0, 1.0);
}

}  // namespace detail

/// dot(a,b)/(|a||b|). A zero vector on either side yields 0 and sets
/// `*degenerate` when provided.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b, bool* degenerate = nullptr) {
    if (a.size() != b.size())
        throw InvalidInput("cosine_similarity: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                           std::to_string(b.size()) + ")");
    double d = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return detail::finish_cosine(d, std::sqrt(na), std::sqrt(nb), degenerate);
}

inline double cosine_similarity(const DenseVector& a, const DenseVector& b, bool* degenerate = nullptr) {
    return cosine_similarity(std::span<const double>(a.values), std::span<const double>(b.values), degenerate);
}

inline double cosine_similarity(const SparseVector& a, const SparseVector& b, bool* degenerate = nullptr) {
    return detail::finish_cosine(dot(a, b), a.norm(), b.norm(), degenerate);
}

// ---------------------------------------------------------------------------
// Vocabulary, TF-IDF, BM25

class Vocabulary {
public:
    /// Adds one document's tokens; each distinct term bumps its df once.
    void add_document(const std::vector<std::string>& tokens) {
        std::vector<std::uint32_t> seen;
        for (const auto& t : tokens) {
            auto [it, inserted] = ids_.try_emplace(t, static_cast<std::uint32_t>(df_.size()));
            if (inserted) df_.push_back(0);
            seen.push_back(it->second);
        }
        std::sort(seen.begin(), seen.end());
        seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
        for (auto id : seen) ++df_[id];
        ++n_docs_;
    }

    [[nodiscard]] std::optional<std::uint32_t> id(const std::string& term) const {
        auto it = ids_.find(term);
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }
    [[nodiscard]] std::uint32_t df(std::uint32_t id) const { return df_.at(id); }
    [[nodiscard]] std::size_t size() const noexcept { return df_.size(); }
    [[nodiscard]] std::size_t document_count() const noexcept { return n_docs_; }

private:
    std::unordered_map<std::string, std::uint32_t> ids_;
    std::vector<std::uint32_t> df_;
    std::size_t n_docs_ = 0;
};

namespace detail {

inline std::map<std::uint32_t, double> term_counts(const Vocabulary& vocab, const std::vector<std::string>& tokens) {
    std::map<std::uint32_t, double> tf;
    for (const auto& t : tokens)
        if (auto id = vocab.id(t)) tf[*id] += 1.0;
    return tf;
}

inline void l2_normalize(SparseVector& v) {
    double n = v.norm();
    if (n == 0.0) return;
    for (auto& e : v.entries) e.second /= n;
}

}  // namespace detail

/// Smoothed TF-IDF: w(t,d) = tf(t,d) * (ln((1+N)/(1+df(t))) + 1), then L2
/// normalized per document.
class TfidfIndex {
public:
    explicit TfidfIndex(const std::vector<CanonicalDocument>& docs) {
        if (docs.empty()) throw InvalidInput("build_tfidf: no documents");
        std::vector<std::vector<std::string>> toks;
        toks.reserve(docs.size());
        bool any = false;
        for (const auto& d : docs) {
            toks.push_back(tokenize(d.text));
            any = any || !toks.back().empty();
            vocab_.add_document(toks.back());
        }
        if (!any) throw InvalidInput("build_tfidf: all documents are empty");
        for (std::size_t i = 0; i < docs.size(); ++i) {
            doc_ids_.push_back(docs[i].doc_id);
            vectors_.push_back(vectorize(toks[i]));
        }
    }

    [[nodiscard]] double idf(std::uint32_t id) const {
        double n = static_cast<double>(vocab_.document_count());
        return std::log((1.0 + n) / (1.0 + vocab_.df(id))) + 1.0;
    }

    /// Terms unknown to the corpus contribute nothing.
    [[nodiscard]] SparseVector vectorize(const std::vector<std::string>& tokens) const {
        SparseVector v;
        for (const auto& [id, tf] : detail::term_counts(vocab_, tokens)) v.entries.emplace_back(id, tf * idf(id));
        detail::l2_normalize(v);
        return v;
    }
    [[nodiscard]] SparseVector vectorize(std::string_view text) const { return vectorize(tokenize(text)); }

    [[nodiscard]] const Vocabulary& vocabulary() const noexcept { return vocab_; }
    [[nodiscard]] const std::vector<SparseVector>& vectors() const noexcept { return vectors_; }
    [[nodiscard]] const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }

private:
    Vocabulary vocab_;
    std::vector<std::string> doc_ids_;
    std::vector<SparseVector> vectors_;
};

inline TfidfIndex build_tfidf(const std::vector<CanonicalDocument>& docs) { return TfidfIndex(docs); }

struct Bm25Params {
    double k1 = 1.5;
    double b = 0.75;
};

/// Okapi BM25 with idf(t) = ln(1 + (N - df + 0.5)/(df + 0.5)), which is never negative.
class Bm25Index {
public:
    explicit Bm25Index(const std::vector<CanonicalDocument>& docs, Bm25Params params = {}) : params_(params) {
        if (docs.empty()) throw InvalidInput("bm25: no documents");
        double total = 0.0;
        for (const auto& d : docs) {
            auto toks = tokenize(d.text);
            vocab_.add_document(toks);
            total += static_cast<double>(toks.size());
            lengths_.push_back(static_cast<double>(toks.size()));
            tokens_.push_back(std::move(toks));
            doc_ids_.push_back(d.doc_id);
        }
        avgdl_ = total / static_cast<double>(docs.size());
        for (const auto& toks : tokens_) tf_.push_back(detail::term_counts(vocab_, toks));
    }

    [[nodiscard]] double idf(std::uint32_t id) const {
        double n = static_cast<double>(vocab_.document_count());
        double df = vocab_.df(id);
        return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
    }

    [[nodiscard]] double score(const std::vector<std::string>& query, std::size_t doc) const {
        if (doc >= tf_.size()) throw InvalidInput("bm25: document index out of range");
        if (avgdl_ == 0.0) return 0.0;
        double s = 0.0;
        double norm = params_.k1 * (1.0 - params_.b + params_.b * lengths_[doc] / avgdl_);
        for (const auto& term : query) {
            auto id = vocab_.id(term);
            if (!id) continue;
            auto it = tf_[doc].find(*id);
            if (it == tf_[doc].end()) continue;
            double tf = it->second;
            s += idf(*id) * tf * (params_.k1 + 1.0) / (tf + norm);
        }
        return s;
    }

    [[nodiscard]] double score(const std::vector<std::string>& query, const std::string& doc_id) const {
        auto it = std::find(doc_ids_.begin(), doc_ids_.end(), doc_id);
        if (it == doc_ids_.end()) throw InvalidInput("bm25: unknown document id '" + doc_id + "'");
        return score(query, static_cast<std::size_t>(it - doc_ids_.begin()));
    }

    [[nodiscard]] const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }

private:
    Bm25Params params_;
    Vocabulary vocab_;
    std::vector<std::string> doc_ids_;
    std::vector<std::vector<std::string>> tokens_;
    std::vector<std::map<std::uint32_t, double>> tf_;
    std::vector<double> lengths_;
    double avgdl_ = 0.0;
};

inline double bm25_score(const Bm25Index& index, const std::vector<std::string>& query, const std::string& doc_id) {
    return index.score(query, doc_id);
}

// ---------------------------------------------------------------------------
// Embedding providers

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    [[nodiscard]] virtual std::string name() const = 0;
    [[nodiscard]] virtual std::size_t dimension() const = 0;
    [[nodiscard]] virtual DenseVector embed(std::string_view text) const = 0;

    [[nodiscard]] virtual std::vector<DenseVector> embed_batch(std::span<const std::string> texts) const {
        std::vector<DenseVector> out;
        out.reserve(texts.size());
        for (const auto& t : texts) out.push_back(embed(t));
        return out;
    }
};

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

/// Offline stand-in for a sentence encoder: signed feature hashing of the
/// token bag (plus adjacent-token bigrams), L2 normalized. Pure and
/// platform independent.
class HashEmbeddingProvider final : public EmbeddingProvider {
public:
    explicit HashEmbeddingProvider(std::size_t dimension = 256) : dim_(dimension) {
        if (dim_ == 0) throw InvalidInput("hash embedding dimension must be positive");
    }

    [[nodiscard]] std::string name() const override { return "test-embedding"; }
    [[nodiscard]] std::size_t dimension() const override { return dim_; }

    [[nodiscard]] DenseVector embed(std::string_view text) const override {
        DenseVector v{std::vector<double>(dim_, 0.0), name()};
        auto toks = tokenize(text);
        auto feed = [&](std::string_view feature, double w) {
            std::uint64_t h = detail::fnv1a64(feature);
            double sign = (h >> 63) != 0 ? -1.0 : 1.0;
            v.values[h % dim_] += sign * w;
        };
        for (std::size_t i = 0; i < toks.size(); ++i) {
            feed(toks[i], 1.0);
            if (i + 1 < toks.size()) feed(toks[i] + ' ' + toks[i + 1], 0.5);
        }
        double n = std::sqrt(std::inner_product(v.values.begin(), v.values.end(), v.values.begin(), 0.0));
        if (n > 0.0)
            for (auto& x : v.values) x /= n;
        return v;
    }

private:
    std::size_t dim_;
};

}  // namespace fhirmap
