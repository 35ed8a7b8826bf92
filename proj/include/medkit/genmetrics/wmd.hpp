#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/genmetrics/metrics.hpp"

namespace medkit::genmetrics {

using Embedder = std::function<std::vector<double>(const std::string&)>;

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("embedding widths differ");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s);
}

// Normalized bag of words: distinct tokens (sorted) and their counts.
struct Bag {
    std::vector<std::string> words;
    std::vector<std::size_t> counts;
    std::size_t total = 0;
};

inline Bag bag_of(const Tokens& tokens) {
    std::map<std::string, std::size_t> m;
    for (const auto& t : tokens) {
        ++m[t];
    }
    Bag b;
    for (const auto& [w, c] : m) {
        b.words.push_back(w);
        b.counts.push_back(c);
        b.total += c;
    }
    return b;
}

// Minimum transport cost between supplies a and demands b (equal integer
// totals) under cost[i][j], by successive shortest augmenting paths.
inline double min_cost_transport(const std::vector<long long>& a, const std::vector<long long>& b,
                                 const std::vector<std::vector<double>>& cost) {
    const std::size_t n = a.size(), m = b.size();
    const std::size_t nodes = n + m + 2, src = n + m, dst = n + m + 1;
    struct Edge {
        std::size_t to;
        long long cap;
        double cost;
    };
    std::vector<Edge> edges;
    std::vector<std::vector<std::size_t>> adj(nodes);
    auto add = [&](std::size_t u, std::size_t v, long long cap, double c) {
        adj[u].push_back(edges.size());
        edges.push_back({v, cap, c});
        adj[v].push_back(edges.size());
        edges.push_back({u, 0, -c});
    };
    for (std::size_t i = 0; i < n; ++i) {
        add(src, i, a[i], 0.0);
    }
    for (std::size_t j = 0; j < m; ++j) {
        add(n + j, dst, b[j], 0.0);
    }
    const long long big = std::accumulate(a.begin(), a.end(), 0LL);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            add(i, n + j, big, cost[i][j]);
        }
    }
    double total = 0.0;
    long long flow = 0;
    constexpr double inf = std::numeric_limits<double>::infinity();
    while (flow < big) {
        std::vector<double> dist(nodes, inf);
        std::vector<std::size_t> via(nodes, edges.size());
        dist[src] = 0.0;
        for (std::size_t round = 0; round + 1 < nodes; ++round) {
            bool changed = false;
            for (std::size_t u = 0; u < nodes; ++u) {
                if (dist[u] == inf) {
                    continue;
                }
                for (std::size_t e : adj[u]) {
                    const auto& ed = edges[e];
                    if (ed.cap > 0 && dist[u] + ed.cost < dist[ed.to] - 1e-15) {
                        dist[ed.to] = dist[u] + ed.cost;
                        via[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if (!changed) {
                break;
            }
        }
        if (dist[dst] == inf) {
            throw NumericError("transport problem is infeasible");
        }
        long long push = big - flow;
        for (std::size_t v = dst; v != src; v = edges[via[v] ^ 1].to) {
            push = std::min(push, edges[via[v]].cap);
        }
        for (std::size_t v = dst; v != src; v = edges[via[v] ^ 1].to) {
            edges[via[v]].cap -= push;
            edges[via[v] ^ 1].cap += push;
            total += static_cast<double>(push) * edges[via[v]].cost;
        }
        flow += push;
    }
    return total;
}

// Word mover's distance between the normalized bags of the two sentences.
inline double wmd_distance(const Tokens& cand, const Tokens& ref, const Embedder& embed) {
    if (cand.empty() || ref.empty()) {
        throw ConfigError("WMD needs two non-empty sentences");
    }
    const Bag p = bag_of(cand);
    const Bag q = bag_of(ref);
    // Scale both distributions to integers over lcm(|cand|, |ref|).
    const auto scale = static_cast<long long>(std::lcm(p.total, q.total));
    std::vector<long long> a, b;
    for (auto c : p.counts) {
        a.push_back(static_cast<long long>(c) * (scale / static_cast<long long>(p.total)));
    }
    for (auto c : q.counts) {
        b.push_back(static_cast<long long>(c) * (scale / static_cast<long long>(q.total)));
    }
    std::vector<std::vector<double>> ev, fv;
    for (const auto& w : p.words) {
        ev.push_back(embed(w));
    }
    for (const auto& w : q.words) {
        fv.push_back(embed(w));
    }
    std::vector<std::vector<double>> cost(p.words.size(), std::vector<double>(q.words.size()));
    for (std::size_t i = 0; i < p.words.size(); ++i) {
        for (std::size_t j = 0; j < q.words.size(); ++j) {
            cost[i][j] = p.words[i] == q.words[j] ? 0.0 : euclidean(ev[i], fv[j]);
        }
    }
    return min_cost_transport(a, b, cost) / static_cast<double>(scale);
}

inline double wmd_similarity(const Tokens& cand, const Tokens& ref, const Embedder& embed) {
    return 1.0 / (1.0 + wmd_distance(cand, ref, embed));
}

// One-hot embedding over a fixed word list; words outside it share the last
// (unknown) slot.
inline Embedder one_hot_embedder(std::vector<std::string> words) {
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    return [words = std::move(words)](const std::string& w) {
        std::vector<double> v(words.size() + 1, 0.0);
        const auto it = std::lower_bound(words.begin(), words.end(), w);
        v[it != words.end() && *it == w ? static_cast<std::size_t>(it - words.begin()) : words.size()] = 1.0;
        return v;
    };
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a == b) {
        return std::any_of(a.begin(), a.end(), [](double x) { return x != 0.0; }) ? 1.0 : 0.0;
    }
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return aa > 0.0 && bb > 0.0 ? ab / std::sqrt(aa * bb) : 0.0;
}

// Greedy max-cosine matching of token vectors, cosines floored at 0.
inline Prf embed_score(const std::vector<std::vector<double>>& cand, const std::vector<std::vector<double>>& ref) {
    if (cand.empty() || ref.empty()) {
        return {};
    }
    std::vector<double> best_c(cand.size(), 0.0), best_r(ref.size(), 0.0);
    for (std::size_t i = 0; i < cand.size(); ++i) {
        for (std::size_t j = 0; j < ref.size(); ++j) {
            const double c = std::max(0.0, cosine(cand[i], ref[j]));
            best_c[i] = std::max(best_c[i], c);
            best_r[j] = std::max(best_r[j], c);
        }
    }
    Prf out;
    out.precision = std::accumulate(best_c.begin(), best_c.end(), 0.0) / static_cast<double>(cand.size());
    out.recall = std::accumulate(best_r.begin(), best_r.end(), 0.0) / static_cast<double>(ref.size());
    out.f1 = harmonic(out.precision, out.recall);
    return out;
}

}  // namespace medkit::genmetrics
