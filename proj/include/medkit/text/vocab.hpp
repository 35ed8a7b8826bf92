#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/text/utf8.hpp"

namespace medkit {

using TokenId = std::size_t;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kBos = 5;
inline constexpr TokenId kEos = 6;
inline constexpr std::size_t kCount = 7;
inline constexpr std::array<std::string_view, kCount> kNames{"[PAD]", "[UNK]", "[CLS]", "[SEP]",
                                                             "[MASK]", "[BOS]", "[EOS]"};
}  // namespace special

// Character-level vocabulary. Ids 0..6 are the reserved special tokens; every
// other id is one Unicode code point.
class Vocab {
public:
    Vocab() {
        for (auto name : special::kNames) {
            tokens_.emplace_back(name);
        }
    }

    // Characters with frequency >= min_freq, ordered by frequency (descending)
    // then code point.
    static Vocab build(const std::vector<std::string>& texts, std::size_t min_freq = 1) {
        if (texts.empty()) {
            throw ConfigError("cannot build a vocabulary from an empty corpus");
        }
        std::map<char32_t, std::size_t> freq;
        for (const auto& t : texts) {
            for (char32_t cp : utf8::decode(t)) {
                ++freq[cp];
            }
        }
        std::vector<std::pair<char32_t, std::size_t>> entries(freq.begin(), freq.end());
        std::stable_sort(entries.begin(), entries.end(),
                         [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocab v;
        for (const auto& [cp, n] : entries) {
            if (n >= min_freq) {
                v.add(cp);
            }
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }

    TokenId add(char32_t cp) {
        if (auto it = ids_.find(cp); it != ids_.end()) {
            return it->second;
        }
        const TokenId id = tokens_.size();
        tokens_.push_back(utf8::encode(cp));
        ids_.emplace(cp, id);
        return id;
    }

    TokenId id_of(char32_t cp) const {
        auto it = ids_.find(cp);
        return it == ids_.end() ? special::kUnk : it->second;
    }

    bool contains(char32_t cp) const { return ids_.contains(cp); }

    const std::string& token(TokenId id) const {
        if (id >= tokens_.size()) {
            throw ConfigError("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(tokens_.size()));
        }
        return tokens_[id];
    }

    static bool is_special(TokenId id) { return id < special::kCount; }

    // Ids of the characters of `text`, no special tokens added.
    std::vector<TokenId> ids_of(std::string_view text) const {
        std::vector<TokenId> out;
        for (char32_t cp : utf8::decode(text)) {
            out.push_back(id_of(cp));
        }
        return out;
    }

    // One token per line: the seven reserved names, then characters in id
    // order. Backslash, newline, carriage return and tab are escaped.
    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) {
            throw IoError("cannot write vocabulary " + path.string());
        }
        for (const auto& t : tokens_) {
            os << escape(t) << '\n';
        }
    }

    static Vocab load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) {
            throw IoError("cannot read vocabulary " + path.string());
        }
        Vocab v;
        std::string line;
        std::size_t n = 0;
        while (std::getline(is, line)) {
            if (n < special::kCount) {
                if (line != special::kNames[n]) {
                    throw FormatError("vocabulary line " + std::to_string(n + 1) + " must be " +
                                      std::string(special::kNames[n]));
                }
            } else {
                const auto cps = utf8::decode(unescape(line));
                if (cps.size() != 1) {
                    throw FormatError("vocabulary line " + std::to_string(n + 1) +
                                      " is not a single character");
                }
                if (v.contains(cps[0])) {
                    throw FormatError("duplicate vocabulary entry on line " + std::to_string(n + 1));
                }
                v.add(cps[0]);
            }
            ++n;
        }
        if (n < special::kCount) {
            throw FormatError("vocabulary file lacks the reserved header");
        }
        return v;
    }

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

private:
    static std::string escape(const std::string& t) {
        std::string out;
        for (char c : t) {
            switch (c) {
                case '\\': out += "\\\\"; break;
                case '\n': out += "\\n"; break;
                case '\r': out += "\\r"; break;
                case '\t': out += "\\t"; break;
                default: out.push_back(c);
            }
        }
        return out;
    }

    static std::string unescape(const std::string& t) {
        std::string out;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] == '\\' && i + 1 < t.size()) {
                const char c = t[++i];
                out.push_back(c == 'n' ? '\n' : c == 'r' ? '\r' : c == 't' ? '\t' : c);
            } else {
                out.push_back(t[i]);
            }
        }
        return out;
    }

    std::vector<std::string> tokens_;
    std::unordered_map<char32_t, TokenId> ids_;
};

enum class EncodeMode { encoder, decoder };

struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<bool> attention_mask;
    std::size_t original_length = 0;

    std::size_t size() const { return ids.size(); }
    std::size_t real_length() const {
        return static_cast<std::size_t>(std::count(attention_mask.begin(), attention_mask.end(), true));
    }
};

// Encoder mode: [CLS] chars [SEP], characters truncated so the whole fits
// max_len, then [PAD] up to max_len. Decoder mode: [BOS] chars [EOS], same
// truncation, no padding.
inline TokenSequence encode(std::string_view text, const Vocab& vocab, std::size_t max_len,
                            EncodeMode mode = EncodeMode::encoder) {
    if (max_len < 3) {
        throw ConfigError("max_len must be at least 3");
    }
    auto chars = vocab.ids_of(text);
    TokenSequence seq;
    seq.original_length = chars.size();
    if (chars.size() > max_len - 2) {
        chars.resize(max_len - 2);
    }
    const bool enc = mode == EncodeMode::encoder;
    seq.ids.push_back(enc ? special::kCls : special::kBos);
    seq.ids.insert(seq.ids.end(), chars.begin(), chars.end());
    seq.ids.push_back(enc ? special::kSep : special::kEos);
    seq.attention_mask.assign(seq.ids.size(), true);
    if (enc) {
        seq.ids.resize(max_len, special::kPad);
        seq.attention_mask.resize(max_len, false);
    }
    return seq;
}

// Concatenates non-special tokens, stopping at the first [EOS].
inline std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
    std::string out;
    for (TokenId id : ids) {
        if (id >= vocab.size()) {
            throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
        }
        if (id == special::kEos) {
            break;
        }
        if (!Vocab::is_special(id)) {
            out += vocab.token(id);
        }
    }
    return out;
}

}  // namespace medkit
