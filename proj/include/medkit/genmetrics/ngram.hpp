#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "medkit/text/utf8.hpp"

namespace medkit::genmetrics {

using Tokens = std::vector<std::string>;
using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, std::size_t>;

// Whitespace separates words; every CJK ideograph or punctuation mark is a
// token of its own, and runs of other characters stay together.
inline Tokens tokenize(std::string_view text) {
    auto standalone = [](char32_t c) {
        return (c >= 0x2E80 && c <= 0x9FFF) || (c >= 0xF900 && c <= 0xFAFF) || (c >= 0xFF00 && c <= 0xFFEF) ||
               (c >= 0x3000 && c <= 0x303F) || (c >= 0x20000 && c <= 0x2FFFF);
    };
    Tokens out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(std::move(word));
            word.clear();
        }
    };
    for (char32_t c : utf8::decode(text)) {
        if (utf8::is_space(c)) {
            flush();
        } else if (standalone(c)) {
            flush();
            utf8::append(out.emplace_back(), c);
        } else {
            utf8::append(word, c);
        }
    }
    flush();
    return out;
}

inline NgramCounts ngrams(const Tokens& tokens, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++out[Ngram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                    tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

inline std::size_t total(const NgramCounts& counts) {
    std::size_t t = 0;
    for (const auto& [g, c] : counts) {
        t += c;
    }
    return t;
}

// Sum over candidate n-grams of min(candidate count, reference count).
inline std::size_t clipped_matches(const NgramCounts& cand, const NgramCounts& ref) {
    std::size_t m = 0;
    for (const auto& [g, c] : cand) {
        if (const auto it = ref.find(g); it != ref.end()) {
            m += std::min(c, it->second);
        }
    }
    return m;
}

}  // namespace medkit::genmetrics
