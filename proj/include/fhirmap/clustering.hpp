#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fhirmap/error.hpp"
#include "fhirmap/json_util.hpp"
#include "fhirmap/lexical.hpp"

namespace fhirmap {

/// Row-major n x d matrix, one row per attribute.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    FeatureMatrix(std::size_t rows, std::size_t cols, std::vector<double> data, std::vector<std::string> ids = {})
        : rows_(rows), cols_(cols), data_(std::move(data)), ids_(std::move(ids)) {
        if (data_.size() != rows_ * cols_) throw InvalidInput("FeatureMatrix: data size does not match shape");
        if (ids_.empty())
            for (std::size_t i = 0; i < rows_; ++i) ids_.push_back(std::to_string(i));
        if (ids_.size() != rows_) throw InvalidInput("FeatureMatrix: row id count does not match rows");
        for (double v : data_)
            if (!std::isfinite(v)) throw InvalidInput("FeatureMatrix: non-finite entry");
    }

    static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows, std::vector<std::string> ids = {}) {
        std::size_t d = rows.empty() ? 0 : rows.front().size();
        std::vector<double> data;
        data.reserve(rows.size() * d);
        for (const auto& r : rows) {
            if (r.size() != d) throw InvalidInput("FeatureMatrix: ragged rows");
            data.insert(data.end(), r.begin(), r.end());
        }
        return FeatureMatrix(rows.size(), d, std::move(data), std::move(ids));
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }
    [[nodiscard]] const std::vector<std::string>& ids() const noexcept { return ids_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
    std::vector<std::string> ids_;
};

/// Embeds each text with `provider` and stacks the vectors.
inline FeatureMatrix embed_rows(const EmbeddingProvider& provider, const std::vector<std::string>& texts,
                                std::vector<std::string> ids) {
    auto vecs = provider.embed_batch(texts);
    std::vector<std::vector<double>> rows;
    rows.reserve(vecs.size());
    for (auto& v : vecs) {
        if (v.values.size() != provider.dimension())
            throw MalformedResponse(provider.name(), "vector dimension differs from declared dimension");
        rows.push_back(std::move(v.values));
    }
    return FeatureMatrix::from_rows(rows, std::move(ids));
}

inline constexpr int kNoise = -1;

struct ClusterAssignment {
    std::vector<int> labels;  // per row; kNoise for density outliers
    std::string algorithm;
    Json params = Json::object();
    std::optional<double> sse;  // k-means only

    [[nodiscard]] int cluster_count() const {
        int m = -1;
        for (int l : labels) m = std::max(m, l);
        return m + 1;
    }
    [[nodiscard]] std::size_t noise_count() const {
        return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), kNoise));
    }
};

struct QualityReport {
    double silhouette = 0.0;
    double calinski_harabasz = 0.0;
    double davies_bouldin = 0.0;
    int clusters = 0;
    std::size_t noise = 0;
};

inline Json to_json(const QualityReport& q) {
    return Json{{"silhouette", q.silhouette},
                {"calinski_harabasz", q.calinski_harabasz},
                {"davies_bouldin", q.davies_bouldin},
                {"clusters", q.clusters},
                {"noise", q.noise}};
}

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double euclid(std::span<const double> a, std::span<const double> b) { return std::sqrt(sq_dist(a, b)); }

/// Renumbers non-noise labels by first appearance so equal partitions compare equal.
inline void canonical_labels(std::vector<int>& labels) {
    std::map<int, int> remap;
    for (int& l : labels) {
        if (l == kNoise) continue;
        auto [it, _] = remap.try_emplace(l, static_cast<int>(remap.size()));
        l = it->second;
    }
}

/// Uniform double in [0,1) from a 64-bit engine, identical on every platform.
inline double unit_draw(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

struct Centroids {
    std::size_t k = 0, d = 0;
    std::vector<double> c;
    std::vector<std::size_t> sizes;
    [[nodiscard]] std::span<const double> at(std::size_t i) const { return {c.data() + i * d, d}; }
};

/// Centroids over non-noise points for labels 0..k-1.
inline Centroids centroids(const FeatureMatrix& m, const std::vector<int>& labels, std::size_t k) {
    Centroids out{k, m.cols(), std::vector<double>(k * m.cols(), 0.0), std::vector<std::size_t>(k, 0)};
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (labels[i] == kNoise) continue;
        auto l = static_cast<std::size_t>(labels[i]);
        ++out.sizes[l];
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) out.c[l * m.cols() + j] += r[j];
    }
    for (std::size_t l = 0; l < k; ++l)
        if (out.sizes[l] > 0)
            for (std::size_t j = 0; j < m.cols(); ++j) out.c[l * m.cols() + j] /= static_cast<double>(out.sizes[l]);
    return out;
}

inline void check_labels(const FeatureMatrix& m, const ClusterAssignment& a) {
    if (a.labels.size() != m.rows()) throw InvalidInput("assignment size does not match matrix rows");
}

/// Number of non-empty clusters among non-noise points; labels must be dense.
inline std::size_t active_clusters(const ClusterAssignment& a) {
    std::vector<bool> seen(static_cast<std::size_t>(std::max(0, a.cluster_count())), false);
    for (int l : a.labels)
        if (l != kNoise) seen[static_cast<std::size_t>(l)] = true;
    if (std::find(seen.begin(), seen.end(), false) != seen.end())
        throw InvalidInput("cluster labels are not dense");
    return seen.size();
}

/// Moves single points between clusters while that strictly lowers SSE.
/// Lloyd stops at any Voronoi-stable partition; this escapes many of them.
inline void single_moves(const FeatureMatrix& m, std::vector<int>& labels, std::size_t k) {
    auto cs = centroids(m, labels, k);
    for (bool moved = true; moved;) {
        moved = false;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            auto from = static_cast<std::size_t>(labels[i]);
            if (cs.sizes[from] <= 1) continue;
            auto nf = static_cast<double>(cs.sizes[from]);
            double loss = nf / (nf - 1.0) * sq_dist(m.row(i), cs.at(from));
            std::size_t to = from;
            double best = loss;
            for (std::size_t c = 0; c < k; ++c) {
                if (c == from) continue;
                auto nc = static_cast<double>(cs.sizes[c]);
                double gain = nc / (nc + 1.0) * sq_dist(m.row(i), cs.at(c));
                if (gain < best * (1.0 - 1e-12)) {
                    best = gain;
                    to = c;
                }
            }
            if (to == from) continue;
            labels[i] = static_cast<int>(to);
            cs = centroids(m, labels, k);
            moved = true;
        }
    }
}

inline std::size_t non_noise(const ClusterAssignment& a) { return a.labels.size() - a.noise_count(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Algorithms

/// Lloyd iterations from k-means++ seeding, then single-point moves; the
/// restart with the lowest within-cluster SSE wins. An emptied cluster is
/// reseeded with the point farthest from its current centroid.
inline ClusterAssignment kmeans(const FeatureMatrix& m, std::size_t k, std::uint64_t seed, std::size_t restarts = 10,
                                std::size_t max_iter = 300) {
    const std::size_t n = m.rows(), d = m.cols();
    if (k < 1) throw InvalidInput("kmeans: k must be >= 1");
    if (k > n) throw InvalidInput("kmeans: k=" + std::to_string(k) + " exceeds row count " + std::to_string(n));
    restarts = std::max<std::size_t>(restarts, 1);
    std::mt19937_64 rng(seed);

    std::vector<int> best_labels;
    double best_sse = std::numeric_limits<double>::infinity();

    for (std::size_t run = 0; run < restarts; ++run) {
        // k-means++ seeding
        std::vector<double> cent;
        cent.reserve(k * d);
        std::vector<std::size_t> chosen;
        chosen.push_back(static_cast<std::size_t>(detail::unit_draw(rng) * static_cast<double>(n)));
        std::vector<double> d2(n, std::numeric_limits<double>::infinity());
        while (chosen.size() < k) {
            auto last = m.row(chosen.back());
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                d2[i] = std::min(d2[i], detail::sq_dist(m.row(i), last));
                total += d2[i];
            }
            std::size_t pick = n;
            if (total > 0.0) {
                double target = detail::unit_draw(rng) * total, acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += d2[i];
                    if (d2[i] > 0.0 && acc > target) {
                        pick = i;
                        break;
                    }
                }
                if (pick == n)
                    for (std::size_t i = n; i-- > 0;)
                        if (d2[i] > 0.0) {
                            pick = i;
                            break;
                        }
            } else {
                for (std::size_t i = 0; i < n; ++i)
                    if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
                        pick = i;
                        break;
                    }
            }
            chosen.push_back(pick);
        }
        for (auto c : chosen) {
            auto r = m.row(c);
            cent.insert(cent.end(), r.begin(), r.end());
        }

        std::vector<int> labels(n, -1);
        for (std::size_t it = 0; it < max_iter; ++it) {
            bool changed = false;
            for (std::size_t i = 0; i < n; ++i) {
                int best = 0;
                double bd = std::numeric_limits<double>::infinity();
                for (std::size_t c = 0; c < k; ++c) {
                    double dd = detail::sq_dist(m.row(i), {cent.data() + c * d, d});
                    if (dd < bd) {
                        bd = dd;
                        best = static_cast<int>(c);
                    }
                }
                if (labels[i] != best) {
                    labels[i] = best;
                    changed = true;
                }
            }
            auto cs = detail::centroids(m, labels, k);
            for (std::size_t c = 0; c < k; ++c) {
                if (cs.sizes[c] > 0) continue;
                std::size_t far = 0;
                double fd = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    auto l = static_cast<std::size_t>(labels[i]);
                    if (cs.sizes[l] <= 1) continue;
                    double dd = detail::sq_dist(m.row(i), cs.at(l));
                    if (dd > fd) {
                        fd = dd;
                        far = i;
                    }
                }
                --cs.sizes[static_cast<std::size_t>(labels[far])];
                labels[far] = static_cast<int>(c);
                cs = detail::centroids(m, labels, k);
                changed = true;
            }
            cent = cs.c;
            if (!changed) break;
        }
        detail::single_moves(m, labels, k);
        cent = detail::centroids(m, labels, k).c;
        double sse = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            sse += detail::sq_dist(m.row(i), {cent.data() + static_cast<std::size_t>(labels[i]) * d, d});
        if (sse < best_sse) {
            best_sse = sse;
            best_labels = labels;
        }
    }

    ClusterAssignment out;
    out.labels = std::move(best_labels);
    detail::canonical_labels(out.labels);
    out.algorithm = "kmeans";
    out.params = Json{{"k", k}, {"seed", seed}, {"restarts", restarts}};
    out.sse = best_sse;
    return out;
}

enum class Linkage { average, complete, single };
enum class Metric { euclidean, cosine };

inline std::string_view to_string(Linkage l) {
    switch (l) {
        case Linkage::average: return "average";
        case Linkage::complete: return "complete";
        case Linkage::single: return "single";
    }
    return "?";
}
inline std::string_view to_string(Metric m) { return m == Metric::euclidean ? "euclidean" : "cosine"; }

/// Greedy bottom-up merging until `k` clusters remain. Cluster distances are
/// updated with the Lance-Williams recurrences; equal distances resolve to the
/// lowest (i, j) slot pair.
inline ClusterAssignment agglomerative(const FeatureMatrix& m, std::size_t k, Linkage linkage = Linkage::average,
                                       Metric metric = Metric::euclidean) {
    const std::size_t n = m.rows();
    if (k < 1) throw InvalidInput("agglomerative: k must be >= 1");
    if (k > n) throw InvalidInput("agglomerative: k=" + std::to_string(k) + " exceeds row count " + std::to_string(n));

    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double v = metric == Metric::euclidean ? detail::euclid(m.row(i), m.row(j))
                                                   : 1.0 - cosine_similarity(m.row(i), m.row(j));
            dist[i * n + j] = dist[j * n + i] = v;
        }

    std::vector<bool> active(n, true);
    std::vector<std::size_t> size(n, 1);
    std::vector<int> owner(n);
    std::iota(owner.begin(), owner.end(), 0);
    for (std::size_t remaining = n; remaining > k; --remaining) {
        std::size_t bi = 0, bj = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            if (!active[i]) continue;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (!active[j]) continue;
                if (dist[i * n + j] < bd) {
                    bd = dist[i * n + j];
                    bi = i;
                    bj = j;
                }
            }
        }
        for (std::size_t x = 0; x < n; ++x) {
            if (!active[x] || x == bi || x == bj) continue;
            double di = dist[bi * n + x], dj = dist[bj * n + x], v = 0.0;
            switch (linkage) {
                case Linkage::average:
                    v = (static_cast<double>(size[bi]) * di + static_cast<double>(size[bj]) * dj) /
                        static_cast<double>(size[bi] + size[bj]);
                    break;
                case Linkage::complete: v = std::max(di, dj); break;
                case Linkage::single: v = std::min(di, dj); break;
            }
            dist[bi * n + x] = dist[x * n + bi] = v;
        }
        size[bi] += size[bj];
        active[bj] = false;
        for (auto& o : owner)
            if (o == static_cast<int>(bj)) o = static_cast<int>(bi);
    }

    ClusterAssignment out;
    out.labels = owner;
    detail::canonical_labels(out.labels);
    out.algorithm = "agglomerative";
    out.params = Json{{"k", k}, {"linkage", to_string(linkage)}, {"metric", to_string(metric)}};
    return out;
}

/// Density-based labeling. A point is core when its closed eps-neighborhood
/// holds at least `min_pts` points; rows are scanned in index order and a
/// border point joins the first cluster that reaches it.
inline ClusterAssignment dbscan(const FeatureMatrix& m, double eps, std::size_t min_pts) {
    if (!(eps > 0.0)) throw InvalidInput("dbscan: eps must be positive");
    if (min_pts < 1) throw InvalidInput("dbscan: min_pts must be >= 1");
    const std::size_t n = m.rows();
    std::vector<std::vector<std::size_t>> nbrs(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (detail::euclid(m.row(i), m.row(j)) <= eps) nbrs[i].push_back(j);

    constexpr int kUnvisited = -2;
    std::vector<int> labels(n, kUnvisited);
    int next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] != kUnvisited) continue;
        if (nbrs[i].size() < min_pts) {
            labels[i] = kNoise;
            continue;
        }
        int c = next++;
        labels[i] = c;
        std::vector<std::size_t> frontier(nbrs[i].begin(), nbrs[i].end());
        for (std::size_t f = 0; f < frontier.size(); ++f) {
            std::size_t q = frontier[f];
            if (labels[q] == kNoise) labels[q] = c;  // border point
            if (labels[q] != kUnvisited) continue;
            labels[q] = c;
            if (nbrs[q].size() >= min_pts) frontier.insert(frontier.end(), nbrs[q].begin(), nbrs[q].end());
        }
    }

    ClusterAssignment out;
    out.labels = std::move(labels);
    out.algorithm = "dbscan";
    out.params = Json{{"eps", eps}, {"min_pts", min_pts}};
    return out;
}

// ---------------------------------------------------------------------------
// Quality indices (noise points excluded, Euclidean distance)

/// Mean over points of (b - a) / max(a, b). Points alone in their cluster score 0.
inline double silhouette(const FeatureMatrix& m, const ClusterAssignment& a) {
    detail::check_labels(m, a);
    const std::size_t k = detail::active_clusters(a);
    if (k < 2) throw InvalidInput("silhouette: needs at least 2 clusters, got " + std::to_string(k));
    const std::size_t n = m.rows();
    std::vector<std::size_t> sizes(k, 0);
    for (int l : a.labels)
        if (l != kNoise) ++sizes[static_cast<std::size_t>(l)];

    double total = 0.0;
    std::size_t counted = 0;
    std::vector<double> sums(k);
    for (std::size_t i = 0; i < n; ++i) {
        if (a.labels[i] == kNoise) continue;
        auto own = static_cast<std::size_t>(a.labels[i]);
        ++counted;
        if (sizes[own] == 1) continue;
        std::fill(sums.begin(), sums.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || a.labels[j] == kNoise) continue;
            sums[static_cast<std::size_t>(a.labels[j])] += detail::euclid(m.row(i), m.row(j));
        }
        double ai = sums[own] / static_cast<double>(sizes[own] - 1);
        double bi = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            if (c != own) bi = std::min(bi, sums[c] / static_cast<double>(sizes[c]));
        double denom = std::max(ai, bi);
        if (denom > 0.0) total += (bi - ai) / denom;
    }
    return total / static_cast<double>(counted);
}

/// (B/(k-1)) / (W/(n-k)) with B the between-cluster and W the within-cluster scatter.
inline double calinski_harabasz(const FeatureMatrix& m, const ClusterAssignment& a) {
    detail::check_labels(m, a);
    const std::size_t k = detail::active_clusters(a);
    const std::size_t n = detail::non_noise(a);
    if (k < 2 || k > n - 1)
        throw InvalidInput("calinski_harabasz: needs 2 <= k <= n-1 (k=" + std::to_string(k) + ", n=" +
                           std::to_string(n) + ")");
    auto cs = detail::centroids(m, a.labels, k);
    std::vector<double> mean(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (a.labels[i] == kNoise) continue;
        auto r = m.row(i);
        for (std::size_t j = 0; j < m.cols(); ++j) mean[j] += r[j];
    }
    for (auto& v : mean) v /= static_cast<double>(n);
    double between = 0.0, within = 0.0;
    for (std::size_t c = 0; c < k; ++c) between += static_cast<double>(cs.sizes[c]) * detail::sq_dist(cs.at(c), mean);
    for (std::size_t i = 0; i < m.rows(); ++i)
        if (a.labels[i] != kNoise) within += detail::sq_dist(m.row(i), cs.at(static_cast<std::size_t>(a.labels[i])));
    if (within < 1e-15) throw DegenerateClustering("calinski_harabasz: degenerate zero within-scatter");
    return (between / static_cast<double>(k - 1)) / (within / static_cast<double>(n - k));
}

/// (1/k) * sum_i max_{j != i} (s_i + s_j) / d_ij, s = mean distance to centroid.
inline double davies_bouldin(const FeatureMatrix& m, const ClusterAssignment& a) {
    detail::check_labels(m, a);
    const std::size_t k = detail::active_clusters(a);
    if (k < 2) throw InvalidInput("davies_bouldin: needs at least 2 clusters");
    auto cs = detail::centroids(m, a.labels, k);
    std::vector<double> scatter(k, 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        if (a.labels[i] == kNoise) continue;
        auto c = static_cast<std::size_t>(a.labels[i]);
        scatter[c] += detail::euclid(m.row(i), cs.at(c));
    }
    for (std::size_t c = 0; c < k; ++c) scatter[c] /= static_cast<double>(cs.sizes[c]);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) continue;
            double dij = detail::euclid(cs.at(i), cs.at(j));
            if (dij < 1e-15) throw DegenerateClustering("davies_bouldin: coincident centroids");
            worst = std::max(worst, (scatter[i] + scatter[j]) / dij);
        }
        total += worst;
    }
    return total / static_cast<double>(k);
}

inline QualityReport evaluate_quality(const FeatureMatrix& m, const ClusterAssignment& a) {
    QualityReport q;
    q.silhouette = silhouette(m, a);
    q.calinski_harabasz = calinski_harabasz(m, a);
    q.davies_bouldin = davies_bouldin(m, a);
    q.clusters = a.cluster_count();
    q.noise = a.noise_count();
    return q;
}

// ---------------------------------------------------------------------------
// Configuration search

struct ClusteringConfig {
    enum class Algorithm { kmeans, agglomerative, dbscan };
    Algorithm algorithm = Algorithm::kmeans;
    std::size_t k = 2;
    std::uint64_t seed = 0;
    std::size_t restarts = 10;
    Linkage linkage = Linkage::average;
    Metric metric = Metric::euclidean;
    double eps = 0.5;
    std::size_t min_pts = 2;

    static ClusteringConfig kmeans_k(std::size_t k, std::uint64_t seed = 0, std::size_t restarts = 10) {
        ClusteringConfig c;
        c.algorithm = Algorithm::kmeans;
        c.k = k;
        c.seed = seed;
        c.restarts = restarts;
        return c;
    }
    static ClusteringConfig agglomerative_k(std::size_t k, Linkage l = Linkage::average, Metric m = Metric::cosine) {
        ClusteringConfig c;
        c.algorithm = Algorithm::agglomerative;
        c.k = k;
        c.linkage = l;
        c.metric = m;
        return c;
    }
    static ClusteringConfig dbscan_eps(double eps, std::size_t min_pts) {
        ClusteringConfig c;
        c.algorithm = Algorithm::dbscan;
        c.eps = eps;
        c.min_pts = min_pts;
        return c;
    }

    [[nodiscard]] std::string label() const {
        switch (algorithm) {
            case Algorithm::kmeans: return "kmeans(k=" + std::to_string(k) + ")";
            case Algorithm::agglomerative:
                return "agglomerative(k=" + std::to_string(k) + "," + std::string(to_string(linkage)) + "," +
                       std::string(to_string(metric)) + ")";
            case Algorithm::dbscan: {
                Json e = eps;
                return "dbscan(eps=" + e.dump() + ",min_pts=" + std::to_string(min_pts) + ")";
            }
        }
        return "?";
    }
};

inline ClusterAssignment run_clustering(const FeatureMatrix& m, const ClusteringConfig& c) {
    switch (c.algorithm) {
        case ClusteringConfig::Algorithm::kmeans: return kmeans(m, c.k, c.seed, c.restarts);
        case ClusteringConfig::Algorithm::agglomerative: return agglomerative(m, c.k, c.linkage, c.metric);
        case ClusteringConfig::Algorithm::dbscan: return dbscan(m, c.eps, c.min_pts);
    }
    throw InvalidInput("unknown clustering algorithm");
}

/// kmeans and agglomerative (average, cosine) for k in 4..12, dbscan over
/// eps {0.3, 0.5, 0.7} x min_pts {2, 3}.
inline std::vector<ClusteringConfig> default_clustering_grid(std::uint64_t seed = 0, std::size_t restarts = 10) {
    std::vector<ClusteringConfig> g;
    for (std::size_t k = 4; k <= 12; ++k) g.push_back(ClusteringConfig::kmeans_k(k, seed, restarts));
    for (std::size_t k = 4; k <= 12; ++k) g.push_back(ClusteringConfig::agglomerative_k(k));
    for (double eps : {0.3, 0.5, 0.7})
        for (std::size_t mp : {2, 3}) g.push_back(ClusteringConfig::dbscan_eps(eps, mp));
    return g;
}

struct GridEntry {
    ClusteringConfig config;
    std::optional<ClusterAssignment> assignment;
    std::optional<QualityReport> quality;
    std::string rejection;  // why the config could not be scored
    int rank_sum = 0;
};

struct ClusteringSelection {
    ClusterAssignment assignment;
    QualityReport quality;
    ClusteringConfig config;
    std::vector<GridEntry> evaluated;
};

/// Scores every config, then picks the lowest rank-sum over silhouette
/// (desc), Calinski-Harabasz (desc) and Davies-Bouldin (asc). Ties go to the
/// higher silhouette, then to grid order.
inline ClusteringSelection select_clustering(const FeatureMatrix& m, const std::vector<ClusteringConfig>& grid,
                                             bool parallel = true) {
    if (grid.empty()) throw InvalidInput("select_clustering: empty configuration grid");
    if (m.rows() < 3) throw InvalidInput("select_clustering: needs at least 3 rows");

    std::vector<GridEntry> entries(grid.size());
    auto eval = [&](std::size_t i) {
        auto& e = entries[i];
        e.config = grid[i];
        try {
            auto a = run_clustering(m, grid[i]);
            if (a.cluster_count() < 2) {
                e.rejection = a.cluster_count() == 0 ? "all points are noise" : "fewer than 2 clusters";
            } else if (2 * a.noise_count() > m.rows()) {
                // Indices ignore noise, so a few tight survivors would otherwise win.
                e.rejection = "more than half of the points are noise";
            } else {
                e.quality = evaluate_quality(m, a);
            }
            e.assignment = std::move(a);
        } catch (const Error& ex) {
            e.rejection = ex.what();
        }
    };
    if (parallel && grid.size() > 1) {
        std::vector<std::future<void>> jobs;
        for (std::size_t i = 0; i < grid.size(); ++i) jobs.push_back(std::async(std::launch::async, eval, i));
        for (auto& j : jobs) j.get();
    } else {
        for (std::size_t i = 0; i < grid.size(); ++i) eval(i);
    }

    std::vector<std::size_t> valid;
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].quality) valid.push_back(i);
    if (valid.empty()) {
        std::string msg = "select_clustering: no valid clustering among attempted configs:";
        for (const auto& e : entries) msg += " " + e.config.label() + " [" + e.rejection + "]";
        throw InvalidInput(msg);
    }
    auto rank_of = [&](std::size_t i, auto better) {
        int r = 1;
        for (auto j : valid)
            if (better(*entries[j].quality, *entries[i].quality)) ++r;
        return r;
    };
    for (auto i : valid) {
        entries[i].rank_sum =
            rank_of(i, [](const QualityReport& x, const QualityReport& y) { return x.silhouette > y.silhouette; }) +
            rank_of(i, [](const QualityReport& x, const QualityReport& y) { return x.calinski_harabasz > y.calinski_harabasz; }) +
            rank_of(i, [](const QualityReport& x, const QualityReport& y) { return x.davies_bouldin < y.davies_bouldin; });
    }
    std::size_t best = valid.front();
    for (auto i : valid) {
        const auto& e = entries[i];
        const auto& b = entries[best];
        if (e.rank_sum < b.rank_sum || (e.rank_sum == b.rank_sum && e.quality->silhouette > b.quality->silhouette))
            best = i;
    }
    ClusteringSelection sel{*entries[best].assignment, *entries[best].quality, entries[best].config, {}};
    sel.evaluated = std::move(entries);
    return sel;
}

/// Cluster report: {"algorithm","params","clusters":[{"label","attributes"}],"quality",...}.
/// Noise points appear under label -1.
inline Json cluster_report(const FeatureMatrix& m, const ClusteringSelection& sel) {
    std::map<int, std::vector<std::string>> groups;
    for (std::size_t i = 0; i < m.rows(); ++i) groups[sel.assignment.labels[i]].push_back(m.ids()[i]);
    Json clusters = Json::array();
    for (const auto& [label, attrs] : groups) {
        if (label == kNoise) continue;
        clusters.push_back(Json{{"label", label}, {"attributes", attrs}});
    }
    if (auto it = groups.find(kNoise); it != groups.end())
        clusters.push_back(Json{{"label", kNoise}, {"attributes", it->second}});
    Json evaluated = Json::array();
    for (const auto& e : sel.evaluated) {
        Json row{{"config", e.config.label()}};
        if (e.quality) {
            row["quality"] = to_json(*e.quality);
            row["rank_sum"] = e.rank_sum;
        } else {
            row["rejected"] = e.rejection;
        }
        evaluated.push_back(std::move(row));
    }
    return Json{{"algorithm", sel.assignment.algorithm},
                {"params", sel.assignment.params},
                {"clusters", std::move(clusters)},
                {"quality", to_json(sel.quality)},
                {"evaluated", std::move(evaluated)}};
}

}  // namespace fhirmap
