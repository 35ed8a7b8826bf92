#pragma once

// Brute-force metric oracles computed straight from the definitions, shared
// by the unit tests and the acceptance run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "medkit/genmetrics/metrics.hpp"

namespace oracle {

namespace gm = medkit::genmetrics;
using gm::Tokens;

// Everything below works on plain vectors with linear scans, never on the
// library's n-gram maps.

inline bool same_at(const Tokens& s, std::size_t at, const Tokens& g) {
    if (at + g.size() > s.size()) {
        return false;
    }
    for (std::size_t k = 0; k < g.size(); ++k) {
        if (s[at + k] != g[k]) {
            return false;
        }
    }
    return true;
}

inline std::size_t occurrences(const Tokens& s, const Tokens& g) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        c += same_at(s, i, g) ? 1 : 0;
    }
    return c;
}

inline Tokens gram(const Tokens& s, std::size_t i, std::size_t n) { return Tokens(s.begin() + i, s.begin() + i + n); }

// Each distinct candidate n-gram is visited at its first occurrence.
inline bool first_time(const Tokens& s, std::size_t i, std::size_t n) {
    for (std::size_t j = 0; j < i; ++j) {
        if (gram(s, j, n) == gram(s, i, n)) {
            return false;
        }
    }
    return true;
}

inline std::size_t grams(const Tokens& s, std::size_t n) { return s.size() >= n ? s.size() - n + 1 : 0; }

// Clipped matches against the per-n-gram maximum over references.
inline std::size_t clipped(const Tokens& c, const std::vector<Tokens>& refs, std::size_t n) {
    std::size_t m = 0;
    for (std::size_t i = 0; i + n <= c.size(); ++i) {
        if (!first_time(c, i, n)) {
            continue;
        }
        const Tokens g = gram(c, i, n);
        std::size_t best = 0;
        for (const auto& r : refs) {
            best = std::max(best, occurrences(r, g));
        }
        m += std::min(occurrences(c, g), best);
    }
    return m;
}

inline std::size_t clipped(const Tokens& c, const Tokens& r, std::size_t n) { return clipped(c, std::vector<Tokens>{r}, n); }

inline double bleu(const Tokens& c, const std::vector<Tokens>& refs, std::size_t max_n) {
    if (c.empty()) {
        return 0.0;
    }
    double product = 1.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        if (grams(c, n) == 0) {
            return 0.0;
        }
        product *= static_cast<double>(clipped(c, refs, n)) / static_cast<double>(grams(c, n));
    }
    if (product == 0.0) {
        return 0.0;
    }
    // Closest reference length, shorter one on a tie.
    std::size_t r = refs[0].size();
    for (const auto& ref : refs) {
        const auto d_new = std::abs(static_cast<long>(ref.size()) - static_cast<long>(c.size()));
        const auto d_old = std::abs(static_cast<long>(r) - static_cast<long>(c.size()));
        if (d_new < d_old || (d_new == d_old && ref.size() < r)) {
            r = ref.size();
        }
    }
    const double bp = c.size() < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c.size())) : 1.0;
    return bp * std::pow(product, 1.0 / static_cast<double>(max_n));
}

inline Tokens chars_without_space(const std::string& s) {
    Tokens out;
    for (char ch : s) {
        if (ch != ' ') {
            out.push_back(std::string(1, ch));
        }
    }
    return out;
}

inline double chrf(const std::string& cs, const std::string& rs) {
    const Tokens c = chars_without_space(cs);
    const Tokens r = chars_without_space(rs);
    if (c.empty() && r.empty()) {
        return 1.0;
    }
    if (c.empty() || r.empty()) {
        return 0.0;
    }
    double p = 0.0, rec = 0.0;
    std::size_t orders = 0;
    for (std::size_t n = 1; n <= 6; ++n) {
        if (grams(c, n) == 0 || grams(r, n) == 0) {
            break;
        }
        const auto m = static_cast<double>(clipped(c, r, n));
        p += m / static_cast<double>(grams(c, n));
        rec += m / static_cast<double>(grams(r, n));
        ++orders;
    }
    p /= orders;
    rec /= orders;
    return p + rec == 0.0 ? 0.0 : 5.0 * p * rec / (4.0 * p + rec);
}

inline double gleu(const Tokens& c, const Tokens& r) {
    if (c.empty() || r.empty()) {
        return 0.0;
    }
    double m = 0, tc = 0, tr = 0;
    for (std::size_t n = 1; n <= 4; ++n) {
        m += static_cast<double>(clipped(c, r, n));
        tc += static_cast<double>(grams(c, n));
        tr += static_cast<double>(grams(r, n));
    }
    return std::min(m / tc, m / tr);
}

inline gm::Prf weighted(const Tokens& c, const Tokens& r) {
    if (c.empty() && r.empty()) {
        return {1, 1, 1};
    }
    if (c.empty() || r.empty()) {
        return {0, 0, 0};
    }
    std::vector<double> ps, rs;
    for (std::size_t n = 1; n <= 4 && grams(c, n) > 0 && grams(r, n) > 0; ++n) {
        const auto m = static_cast<double>(clipped(c, r, n));
        ps.push_back(m / static_cast<double>(grams(c, n)));
        rs.push_back(m / static_cast<double>(grams(r, n)));
    }
    const double p = std::accumulate(ps.begin(), ps.end(), 0.0) / ps.size();
    const double rr = std::accumulate(rs.begin(), rs.end(), 0.0) / rs.size();
    return {p, rr, p + rr == 0.0 ? 0.0 : 2 * p * rr / (p + rr)};
}

// Levenshtein by plain memoized recursion.
inline std::size_t lev(const Tokens& a, const Tokens& b) {
    std::vector<std::vector<long>> memo(a.size() + 1, std::vector<long>(b.size() + 1, -1));
    std::function<long(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) -> long {
        if (i == 0) {
            return static_cast<long>(j);
        }
        if (j == 0) {
            return static_cast<long>(i);
        }
        if (memo[i][j] >= 0) {
            return memo[i][j];
        }
        const long sub = go(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0 : 1);
        return memo[i][j] = std::min({go(i - 1, j) + 1, go(i, j - 1) + 1, sub});
    };
    return static_cast<std::size_t>(go(a.size(), b.size()));
}

// All block moves are enumerated by erase + insert; a move is allowed when
// the block appears in the reference. The largest drop wins, first found in
// (start, length, destination) order.
inline double ter(Tokens c, const Tokens& r) {
    std::size_t shifts = 0;
    std::size_t cur = lev(c, r);
    for (;;) {
        std::size_t best = 0;
        Tokens best_c;
        for (std::size_t i = 0; i < c.size(); ++i) {
            for (std::size_t len = 1; i + len <= c.size() && len <= 10; ++len) {
                const Tokens block = gram(c, i, len);
                if (occurrences(r, block) == 0) {
                    continue;
                }
                Tokens rest = c;
                rest.erase(rest.begin() + i, rest.begin() + i + len);
                for (std::size_t d = 0; d <= rest.size(); ++d) {
                    if (d == i) {
                        continue;
                    }
                    Tokens moved = rest;
                    moved.insert(moved.begin() + d, block.begin(), block.end());
                    const std::size_t after = lev(moved, r);
                    if (after < cur && cur - after > best) {
                        best = cur - after;
                        best_c = moved;
                    }
                }
            }
        }
        if (best == 0) {
            break;
        }
        c = best_c;
        cur -= best;
        ++shifts;
    }
    return static_cast<double>(shifts + cur) / static_cast<double>(r.size());
}

inline std::string joined(const Tokens& s, std::size_t from, std::size_t to) {
    std::string out;
    for (std::size_t k = from; k < to; ++k) {
        out += "\x1f" + s[k];
    }
    return out + "\x1f";
}

inline std::size_t count_joined(const Tokens& s, const std::string& needle, std::size_t width, std::size_t* first) {
    std::size_t c = 0;
    for (std::size_t i = 0; i + width <= s.size(); ++i) {
        if (joined(s, i, i + width) == needle) {
            if (c == 0 && first) {
                *first = i;
            }
            ++c;
        }
    }
    return c;
}

// Context alignment: unique word, else the narrowest context (right before
// left at each width) that is unique on both sides. Reference positions are
// claimed once.
inline double ribes(const Tokens& c, const Tokens& r) {
    if (c.empty() || r.empty()) {
        return 0.0;
    }
    std::vector<long> order;
    std::vector<int> claimed(r.size(), 0);
    auto claim = [&](std::size_t pos) {
        if (pos < r.size() && !claimed[pos]) {
            claimed[pos] = 1;
            order.push_back(static_cast<long>(pos));
        }
    };
    const std::size_t n = c.size();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos = 0;
        const std::string w = joined(c, i, i + 1);
        const std::size_t in_r = count_joined(r, w, 1, &pos);
        if (in_r == 0) {
            continue;
        }
        if (in_r == 1 && count_joined(c, w, 1, nullptr) == 1) {
            claim(pos);
            continue;
        }
        for (std::size_t width = 1; width < std::max(i, n - i + 1); ++width) {
            if (i + width < n) {
                const std::string right = joined(c, i, i + width + 1);
                if (count_joined(r, right, width + 1, &pos) == 1 && count_joined(c, right, width + 1, nullptr) == 1) {
                    claim(pos);
                    break;
                }
            }
            if (width <= i) {
                const std::string left = joined(c, i - width, i + 1);
                if (count_joined(r, left, width + 1, &pos) == 1 && count_joined(c, left, width + 1, nullptr) == 1) {
                    claim(pos + width);
                    break;
                }
            }
        }
    }
    if (order.empty()) {
        return 0.0;
    }
    double nkt = 0.5;
    if (order.size() > 1) {
        long concordant = 0, discordant = 0;
        for (std::size_t a = 0; a < order.size(); ++a) {
            for (std::size_t b = a + 1; b < order.size(); ++b) {
                (order[a] < order[b] ? concordant : discordant) += 1;
            }
        }
        const double tau = static_cast<double>(concordant - discordant) / static_cast<double>(concordant + discordant);
        nkt = (tau + 1.0) / 2.0;
    }
    const double p1 = static_cast<double>(order.size()) / static_cast<double>(c.size());
    const double bp = c.size() < r.size() ? std::exp(1.0 - static_cast<double>(r.size()) / c.size()) : 1.0;
    return nkt * std::pow(p1, 0.25) * std::pow(bp, 0.10);
}

inline double self_bleu(const std::vector<Tokens>& corpus, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::vector<Tokens> rest;
        for (std::size_t j = 0; j < corpus.size(); ++j) {
            if (j != i) {
                rest.push_back(corpus[j]);
            }
        }
        s += bleu(corpus[i], rest, n);
    }
    return s / static_cast<double>(corpus.size());
}

// Minimum transport cost over the vertices of the transport polytope. A
// vertex is supported on a spanning tree of the row/column bipartite graph;
// the flows on a tree follow by peeling leaves.
inline double transport_by_vertices(const std::vector<double>& a, const std::vector<double>& b,
                             const std::vector<std::vector<double>>& cost) {
    const std::size_t n = a.size(), m = b.size(), cells = n * m, k = n + m - 1;
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick(cells, 0);
    std::fill(pick.end() - static_cast<long>(k), pick.end(), 1);
    do {
        std::vector<double> ra = a, cb = b;
        std::vector<double> flow(cells, 0.0);
        std::vector<int> open = pick;
        bool progressed = true;
        std::size_t left = k;
        while (left > 0 && progressed) {
            progressed = false;
            for (std::size_t i = 0; i < n && !progressed; ++i) {
                std::size_t cnt = 0, at = 0;
                for (std::size_t j = 0; j < m; ++j) {
                    if (open[i * m + j]) {
                        ++cnt, at = j;
                    }
                }
                if (cnt == 1) {
                    flow[i * m + at] = ra[i];
                    cb[at] -= ra[i];
                    ra[i] = 0;
                    open[i * m + at] = 0;
                    --left, progressed = true;
                }
            }
            for (std::size_t j = 0; j < m && !progressed; ++j) {
                std::size_t cnt = 0, at = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (open[i * m + j]) {
                        ++cnt, at = i;
                    }
                }
                if (cnt == 1) {
                    flow[at * m + j] = cb[j];
                    ra[at] -= cb[j];
                    cb[j] = 0;
                    open[at * m + j] = 0;
                    --left, progressed = true;
                }
            }
        }
        if (left > 0) {
            continue;  // support has a cycle
        }
        bool feasible = true;
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < m; ++j) {
                feasible = feasible && flow[i * m + j] >= -1e-12;
                s += flow[i * m + j];
            }
            feasible = feasible && std::abs(s - a[i]) < 1e-12;
        }
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) {
                s += flow[i * m + j];
            }
            feasible = feasible && std::abs(s - b[j]) < 1e-12;
        }
        if (!feasible) {
            continue;
        }
        double total = 0;
        for (std::size_t c = 0; c < cells; ++c) {
            total += flow[c] * cost[c / m][c % m];
        }
        best = std::min(best, total);
    } while (std::next_permutation(pick.begin(), pick.end()));
    return best;
}


struct Fuzz {
    std::mt19937_64 rng{20261017};

    Tokens sentence(std::size_t lo, std::size_t hi, std::size_t alphabet = 5) {
        std::uniform_int_distribution<std::size_t> len(lo, hi), sym(0, alphabet - 1);
        Tokens out(len(rng));
        for (auto& t : out) {
            t = std::string(1, static_cast<char>('a' + sym(rng)));
        }
        return out;
    }

    static std::string text(const Tokens& t) {
        std::string s;
        for (std::size_t i = 0; i < t.size(); ++i) {
            s += (i ? " " : "") + t[i];
        }
        return s;
    }
};

}  // namespace oracle
