#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/genmetrics/ngram.hpp"

namespace medkit::genmetrics {

// Clipped n-gram precision for orders 1..max_n (uniform weights, no
// smoothing) times the brevity penalty against the closest reference length.
inline double bleu(const Tokens& cand, const std::vector<Tokens>& refs, std::size_t max_n = 1) {
    if (cand.empty() || refs.empty() || max_n == 0) {
        return 0.0;
    }
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const auto c = ngrams(cand, n);
        const std::size_t denom = total(c);
        if (denom == 0) {
            return 0.0;
        }
        std::map<Ngram, std::size_t> best;
        for (const auto& r : refs) {
            for (const auto& [g, k] : ngrams(r, n)) {
                best[g] = std::max(best[g], k);
            }
        }
        const std::size_t m = clipped_matches(c, best);
        if (m == 0) {
            return 0.0;
        }
        log_sum += std::log(static_cast<double>(m) / static_cast<double>(denom));
    }
    const auto clen = static_cast<double>(cand.size());
    double r = std::numeric_limits<double>::infinity();
    for (const auto& ref : refs) {
        const auto rl = static_cast<double>(ref.size());
        if (std::abs(rl - clen) < std::abs(r - clen) || (std::abs(rl - clen) == std::abs(r - clen) && rl < r)) {
            r = rl;
        }
    }
    const double bp = clen < r ? std::exp(1.0 - r / clen) : 1.0;
    return bp * std::exp(log_sum / static_cast<double>(max_n));
}

inline double bleu(const Tokens& cand, const Tokens& ref, std::size_t max_n = 1) {
    return bleu(cand, std::vector<Tokens>{ref}, max_n);
}

// Character n-gram F-beta with whitespace removed. P and R are averaged over
// the orders both strings are long enough to have.
inline double chrf(std::string_view cand, std::string_view ref, std::size_t max_n = 6, double beta = 2.0) {
    auto strip = [](std::string_view s) {
        Tokens out;
        for (char32_t c : utf8::decode(s)) {
            if (!utf8::is_space(c)) {
                out.push_back(utf8::encode(c));
            }
        }
        return out;
    };
    const Tokens c = strip(cand);
    const Tokens r = strip(ref);
    if (c.empty() && r.empty()) {
        return 1.0;
    }
    if (c.empty() || r.empty()) {
        return 0.0;
    }
    const std::size_t orders = std::min({max_n, c.size(), r.size()});
    double p = 0.0, rec = 0.0;
    for (std::size_t n = 1; n <= orders; ++n) {
        const auto cn = ngrams(c, n);
        const auto rn = ngrams(r, n);
        const auto m = static_cast<double>(clipped_matches(cn, rn));
        p += m / static_cast<double>(total(cn));
        rec += m / static_cast<double>(total(rn));
    }
    p /= static_cast<double>(orders);
    rec /= static_cast<double>(orders);
    const double b2 = beta * beta;
    const double denom = b2 * p + rec;
    return denom > 0.0 ? (1.0 + b2) * p * rec / denom : 0.0;
}

// min(precision, recall) of n-gram matches pooled over orders 1..max_n.
inline double gleu(const Tokens& cand, const Tokens& ref, std::size_t max_n = 4) {
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    std::size_t m = 0, tc = 0, tr = 0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const auto cn = ngrams(cand, n);
        const auto rn = ngrams(ref, n);
        m += clipped_matches(cn, rn);
        tc += total(cn);
        tr += total(rn);
    }
    return std::min(static_cast<double>(m) / static_cast<double>(tc), static_cast<double>(m) / static_cast<double>(tr));
}

struct Prf {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

// Uniform mean over orders 1..min(4, |c|, |r|) of clipped n-gram precision
// and recall; F1 is the harmonic mean of the two means.
inline Prf weighted_prf(const Tokens& cand, const Tokens& ref, std::size_t max_n = 4) {
    if (cand.empty() && ref.empty()) {
        return {1.0, 1.0, 1.0};
    }
    if (cand.empty() || ref.empty()) {
        return {};
    }
    const std::size_t orders = std::min({max_n, cand.size(), ref.size()});
    Prf out;
    for (std::size_t n = 1; n <= orders; ++n) {
        const auto cn = ngrams(cand, n);
        const auto rn = ngrams(ref, n);
        const auto m = static_cast<double>(clipped_matches(cn, rn));
        out.precision += m / static_cast<double>(total(cn));
        out.recall += m / static_cast<double>(total(rn));
    }
    out.precision /= static_cast<double>(orders);
    out.recall /= static_cast<double>(orders);
    out.f1 = harmonic(out.precision, out.recall);
    return out;
}

// Reference-side statistics for NIST information weights.
class NistWeights {
public:
    NistWeights(const std::vector<Tokens>& refs, std::size_t max_n) {
        for (const auto& r : refs) {
            words_ += r.size();
            for (std::size_t n = 1; n <= max_n; ++n) {
                for (const auto& [g, c] : ngrams(r, n)) {
                    counts_[g] += c;
                }
            }
        }
    }

    // log2(count(prefix) / count(ngram)); the prefix of a unigram is the
    // whole reference word count.
    double info(const Ngram& g) const {
        const auto it = counts_.find(g);
        if (it == counts_.end()) {
            return 0.0;
        }
        const double prefix = g.size() == 1 ? static_cast<double>(words_)
                                            : static_cast<double>(counts_.at(Ngram(g.begin(), g.end() - 1)));
        return std::log2(prefix / static_cast<double>(it->second));
    }

private:
    std::map<Ngram, std::size_t> counts_;
    std::size_t words_ = 0;
};

// Corpus NIST: per order, information-weighted clipped matches over all
// segments divided by the candidate n-gram total; summed over orders and
// scaled by exp(beta * ln^2(min(1, Lsys/Lref))), beta fixing 0.5 at a 2/3
// length ratio.
inline double nist(const std::vector<Tokens>& cands, const std::vector<Tokens>& refs, std::size_t max_n = 5) {
    if (cands.size() != refs.size()) {
        throw ConfigError("nist needs one reference per candidate");
    }
    const NistWeights weights{refs, max_n};
    double score = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        std::map<Ngram, std::size_t> matched;
        std::size_t cand_total = 0;
        for (std::size_t s = 0; s < cands.size(); ++s) {
            const auto cn = ngrams(cands[s], n);
            const auto rn = ngrams(refs[s], n);
            cand_total += total(cn);
            for (const auto& [g, c] : cn) {
                if (const auto it = rn.find(g); it != rn.end()) {
                    matched[g] += std::min(c, it->second);
                }
            }
        }
        if (cand_total == 0) {
            continue;
        }
        double info_sum = 0.0;
        for (const auto& [g, c] : matched) {
            info_sum += weights.info(g) * static_cast<double>(c);
        }
        score += info_sum / static_cast<double>(cand_total);
    }
    std::size_t lsys = 0, lref = 0;
    for (std::size_t s = 0; s < cands.size(); ++s) {
        lsys += cands[s].size();
        lref += refs[s].size();
    }
    if (lsys == 0 || lref == 0) {
        return 0.0;
    }
    const double ratio = std::min(1.0, static_cast<double>(lsys) / static_cast<double>(lref));
    const double beta = std::log(0.5) / std::pow(std::log(1.5), 2);
    return score * std::exp(beta * std::pow(std::log(ratio), 2));
}

inline double nist(const Tokens& cand, const Tokens& ref, std::size_t max_n = 5) {
    return nist(std::vector<Tokens>{cand}, std::vector<Tokens>{ref}, max_n);
}

namespace detail {

inline std::size_t count_of(const Tokens& seq, const Ngram& g) {
    std::size_t c = 0;
    for (std::size_t i = 0; i + g.size() <= seq.size(); ++i) {
        c += std::equal(g.begin(), g.end(), seq.begin() + static_cast<std::ptrdiff_t>(i));
    }
    return c;
}

inline std::size_t first_position(const Tokens& seq, const Ngram& g) {
    for (std::size_t i = 0; i + g.size() <= seq.size(); ++i) {
        if (std::equal(g.begin(), g.end(), seq.begin() + static_cast<std::ptrdiff_t>(i))) {
            return i;
        }
    }
    return seq.size();
}

}  // namespace detail

// Reference positions of the aligned candidate words, in candidate order. A
// word unique on both sides aligns directly; otherwise the shortest right,
// then left, context n-gram that is unique on both sides fixes the position.
// A reference position is used at most once.
inline std::vector<std::size_t> ribes_alignment(const Tokens& cand, const Tokens& ref) {
    std::vector<std::size_t> order;
    std::vector<bool> used(ref.size(), false);
    auto take = [&](std::size_t pos) {
        if (pos < ref.size() && !used[pos]) {
            used[pos] = true;
            order.push_back(pos);
        }
    };
    const std::size_t n = cand.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Ngram word{cand[i]};
        const std::size_t in_ref = detail::count_of(ref, word);
        if (in_ref == 0) {
            continue;
        }
        if (in_ref == 1 && detail::count_of(cand, word) == 1) {
            take(detail::first_position(ref, word));
            continue;
        }
        const std::size_t max_window = std::max(i, n - i + 1);
        for (std::size_t w = 1; w < max_window; ++w) {
            if (i + w < n) {
                const Ngram right(cand.begin() + static_cast<std::ptrdiff_t>(i),
                                  cand.begin() + static_cast<std::ptrdiff_t>(i + w + 1));
                if (detail::count_of(ref, right) == 1 && detail::count_of(cand, right) == 1) {
                    take(detail::first_position(ref, right));
                    break;
                }
            }
            if (w <= i) {
                const Ngram left(cand.begin() + static_cast<std::ptrdiff_t>(i - w),
                                 cand.begin() + static_cast<std::ptrdiff_t>(i + 1));
                if (detail::count_of(ref, left) == 1 && detail::count_of(cand, left) == 1) {
                    take(detail::first_position(ref, left) + w);
                    break;
                }
            }
        }
    }
    return order;
}

// NKT * p1^alpha * BP^beta, NKT being the normalized Kendall tau of the
// alignment order (0.5 for a single aligned word).
inline double ribes(const Tokens& cand, const Tokens& ref, double alpha = 0.25, double beta = 0.10) {
    if (cand.empty() || ref.empty()) {
        return 0.0;
    }
    const auto order = ribes_alignment(cand, ref);
    const std::size_t k = order.size();
    if (k == 0) {
        return 0.0;
    }
    double nkt = 0.5;
    if (k > 1) {
        std::size_t ascending = 0;
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = a + 1; b < k; ++b) {
                ascending += order[a] < order[b];
            }
        }
        nkt = static_cast<double>(ascending) / static_cast<double>(k * (k - 1) / 2);
    }
    const double p1 = static_cast<double>(k) / static_cast<double>(cand.size());
    const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size())));
    return nkt * std::pow(p1, alpha) * std::pow(bp, beta);
}

// Word-level Levenshtein distance.
inline std::size_t edit_distance(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    std::iota(prev.begin(), prev.end(), std::size_t{0});
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

// Moves cand[i, i+len) so that it starts at index dest of the result.
inline Tokens apply_shift(const Tokens& cand, std::size_t i, std::size_t len, std::size_t dest) {
    Tokens rest;
    rest.insert(rest.end(), cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(i));
    rest.insert(rest.end(), cand.begin() + static_cast<std::ptrdiff_t>(i + len), cand.end());
    Tokens out(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(dest));
    out.insert(out.end(), cand.begin() + static_cast<std::ptrdiff_t>(i),
               cand.begin() + static_cast<std::ptrdiff_t>(i + len));
    out.insert(out.end(), rest.begin() + static_cast<std::ptrdiff_t>(dest), rest.end());
    return out;
}

struct TerResult {
    std::size_t shifts = 0;
    std::size_t edits = 0;  // Levenshtein distance after the shifts
    double score = 0.0;
};

// Greedy block shifts, then edit distance, all over the reference length.
// Each round considers every block (up to max_shift tokens) that occurs in
// the reference, moved to every other position; the shift with the largest
// drop in edit distance wins (ties: smallest start, length, destination) and
// is applied while the drop is positive.
inline TerResult ter_detail(Tokens cand, const Tokens& ref, std::size_t max_shift = 10) {
    if (ref.empty()) {
        throw ConfigError("TER needs a non-empty reference");
    }
    TerResult out;
    std::size_t current = edit_distance(cand, ref);
    while (current > 0) {
        std::size_t best_gain = 0, bi = 0, bl = 0, bd = 0;
        for (std::size_t i = 0; i < cand.size(); ++i) {
            for (std::size_t len = 1; len <= max_shift && i + len <= cand.size(); ++len) {
                const Ngram block(cand.begin() + static_cast<std::ptrdiff_t>(i),
                                  cand.begin() + static_cast<std::ptrdiff_t>(i + len));
                if (detail::count_of(ref, block) == 0) {
                    break;
                }
                for (std::size_t dest = 0; dest + len <= cand.size(); ++dest) {
                    if (dest == i) {
                        continue;
                    }
                    const std::size_t after = edit_distance(apply_shift(cand, i, len, dest), ref);
                    if (after < current && current - after > best_gain) {
                        best_gain = current - after;
                        bi = i, bl = len, bd = dest;
                    }
                }
            }
        }
        if (best_gain == 0) {
            break;
        }
        cand = apply_shift(cand, bi, bl, bd);
        current -= best_gain;
        ++out.shifts;
    }
    out.edits = current;
    out.score = static_cast<double>(out.shifts + out.edits) / static_cast<double>(ref.size());
    return out;
}

inline double ter(const Tokens& cand, const Tokens& ref, std::size_t max_shift = 10) {
    return ter_detail(cand, ref, max_shift).score;
}

// Shannon entropy (bits) of the unigram distribution.
inline double entropy(const std::vector<Tokens>& corpus) {
    std::map<std::string, std::size_t> counts;
    std::size_t n = 0;
    for (const auto& s : corpus) {
        for (const auto& t : s) {
            ++counts[t];
            ++n;
        }
    }
    if (n == 0) {
        throw ConfigError("entropy of an empty corpus");
    }
    double h = 0.0;
    for (const auto& [t, c] : counts) {
        const double p = static_cast<double>(c) / static_cast<double>(n);
        h -= p * std::log2(p);
    }
    return h;
}

// Type-token ratio.
inline double lexical_diversity(const std::vector<Tokens>& corpus) {
    std::map<std::string, std::size_t> counts;
    std::size_t n = 0;
    for (const auto& s : corpus) {
        for (const auto& t : s) {
            ++counts[t];
            ++n;
        }
    }
    if (n == 0) {
        throw ConfigError("lexical diversity of an empty corpus");
    }
    return static_cast<double>(counts.size()) / static_cast<double>(n);
}

// D_KL(gen || ref) in nats over add-one smoothed unigram distributions on the
// union vocabulary.
inline double kl_divergence(const std::vector<Tokens>& gen, const std::vector<Tokens>& ref) {
    std::map<std::string, std::pair<std::size_t, std::size_t>> counts;
    std::size_t ng = 0, nr = 0;
    for (const auto& s : gen) {
        for (const auto& t : s) {
            ++counts[t].first;
            ++ng;
        }
    }
    for (const auto& s : ref) {
        for (const auto& t : s) {
            ++counts[t].second;
            ++nr;
        }
    }
    if (counts.empty()) {
        throw ConfigError("KL divergence of two empty corpora");
    }
    const auto v = static_cast<double>(counts.size());
    double kl = 0.0;
    for (const auto& [t, c] : counts) {
        const double p = (static_cast<double>(c.first) + 1.0) / (static_cast<double>(ng) + v);
        const double q = (static_cast<double>(c.second) + 1.0) / (static_cast<double>(nr) + v);
        kl += p * std::log(p / q);
    }
    return std::max(0.0, kl);
}

// Order-independent mean: the values are summed in sorted order.
inline double stable_mean(std::vector<double> values) {
    if (values.empty()) {
        return 0.0;
    }
    std::sort(values.begin(), values.end());
    double s = 0.0;
    for (double v : values) {
        s += v;
    }
    return s / static_cast<double>(values.size());
}

// Mean BLEU of each sentence against all the others.
inline double self_bleu(const std::vector<Tokens>& corpus, std::size_t max_n) {
    if (corpus.size() < 2) {
        throw ConfigError("self-BLEU needs at least two sentences");
    }
    std::vector<double> scores;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        std::vector<Tokens> others;
        for (std::size_t j = 0; j < corpus.size(); ++j) {
            if (j != i) {
                others.push_back(corpus[j]);
            }
        }
        scores.push_back(bleu(corpus[i], others, max_n));
    }
    return stable_mean(scores);
}

}  // namespace medkit::genmetrics
