#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/log.hpp"
#include "medkit/text/utf8.hpp"
#include "medkit/text/vocab.hpp"

namespace medkit::kgraph {

struct KnowledgeTriple {
    std::string head;
    std::string relation;
    std::string tail;

    auto operator<=>(const KnowledgeTriple&) const = default;
};

struct TripleReject {
    std::size_t line = 0;
    std::string reason;
};

// Triples in load order plus a head-surface index.
class KnowledgeGraph {
public:
    // Returns false when the triple was already present.
    bool add(KnowledgeTriple t) {
        if (t.head.empty() || t.relation.empty() || t.tail.empty()) {
            throw FormatError("knowledge triple fields must be non-empty");
        }
        if (!seen_.insert(t).second) {
            return false;
        }
        by_head_[t.head].push_back(triples_.size());
        max_head_chars_ = std::max(max_head_chars_, utf8::length(t.head));
        triples_.push_back(std::move(t));
        return true;
    }

    std::size_t size() const { return triples_.size(); }
    bool empty() const { return triples_.empty(); }
    const std::vector<KnowledgeTriple>& triples() const { return triples_; }
    bool has_entity(const std::string& head) const { return by_head_.contains(head); }
    std::size_t max_entity_chars() const { return max_head_chars_; }

    // All triples whose head is exactly `head`, in load order.
    std::vector<KnowledgeTriple> lookup(const std::string& head) const {
        std::vector<KnowledgeTriple> out;
        if (const auto it = by_head_.find(head); it != by_head_.end()) {
            for (std::size_t id : it->second) {
                out.push_back(triples_[id]);
            }
        }
        return out;
    }

    // Indexed entities starting with `prefix`.
    std::vector<std::string> entities_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (auto it = by_head_.lower_bound(prefix); it != by_head_.end() && it->first.starts_with(prefix); ++it) {
            out.push_back(it->first);
        }
        return out;
    }

    std::vector<TripleReject> rejects;

private:
    std::vector<KnowledgeTriple> triples_;
    std::set<KnowledgeTriple> seen_;
    std::map<std::string, std::vector<std::size_t>> by_head_;
    std::size_t max_head_chars_ = 0;
};

// JSONL of {"head", "relation", "tail"}. Bad lines land in `rejects`;
// duplicates are dropped.
inline KnowledgeGraph load_triples(std::istream& in) {
    KnowledgeGraph g;
    std::string line;
    std::size_t lineno = 0;
    std::size_t duplicates = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            KnowledgeTriple t{j.at("head").get<std::string>(), j.at("relation").get<std::string>(),
                              j.at("tail").get<std::string>()};
            duplicates += !g.add(std::move(t));
        } catch (const nlohmann::json::exception& e) {
            g.rejects.push_back({lineno, e.what()});
        } catch (const FormatError& e) {
            g.rejects.push_back({lineno, e.what()});
        }
    }
    if (g.empty()) {
        log().warn("knowledge graph is empty");
    }
    if (duplicates || !g.rejects.empty()) {
        log().info("knowledge graph: {} triples, {} duplicates dropped, {} lines rejected", g.size(), duplicates,
                   g.rejects.size());
    }
    return g;
}

inline KnowledgeGraph load_triples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read knowledge graph " + path.string());
    }
    return load_triples(in);
}

// Greedy longest match: at each position take the longest indexed entity that
// starts there and skip past it. Ordered by first occurrence, no repeats.
inline std::vector<std::string> match_entities(std::string_view question, const KnowledgeGraph& graph) {
    std::vector<std::string> out;
    if (graph.empty()) {
        return out;
    }
    const auto chars = utf8::chars(question);
    std::size_t i = 0;
    while (i < chars.size()) {
        std::size_t taken = 0;
        for (std::size_t len = std::min(graph.max_entity_chars(), chars.size() - i); len > 0; --len) {
            std::string cand;
            for (std::size_t k = i; k < i + len; ++k) {
                cand += chars[k];
            }
            if (graph.has_entity(cand)) {
                if (std::find(out.begin(), out.end(), cand) == out.end()) {
                    out.push_back(cand);
                }
                taken = len;
                break;
            }
        }
        i += taken ? taken : 1;
    }
    return out;
}

inline std::string serialize(const KnowledgeTriple& t) { return t.head + " " + t.relation + " " + t.tail + "。"; }

// Supplement text I: serialized triples of the matched entities, stopping
// before the first triple that would push past max_chars code points.
inline std::string retrieve(std::string_view question, const KnowledgeGraph& graph, std::size_t max_chars) {
    std::string out;
    std::size_t used = 0;
    for (const auto& entity : match_entities(question, graph)) {
        for (const auto& t : graph.lookup(entity)) {
            const std::string piece = serialize(t);
            const std::size_t n = utf8::length(piece);
            if (used + n > max_chars) {
                return out;
            }
            out += piece;
            used += n;
        }
    }
    return out;
}

// [BOS] Q [SEP] I [SEP] with the spans of Q and I.
struct Supplemented {
    std::vector<TokenId> ids;
    std::size_t q_begin = 0, q_end = 0;
    std::size_t i_begin = 0, i_end = 0;
};

// Fits within max_len by trimming I first, then Q.
inline Supplemented supplement(std::vector<TokenId> q, std::vector<TokenId> i, std::size_t max_len) {
    if (max_len < 3) {
        throw ConfigError("supplement needs max_len of at least 3");
    }
    const std::size_t room = max_len - 3;
    if (q.size() + i.size() > room) {
        i.resize(q.size() >= room ? 0 : room - q.size());
        q.resize(std::min(q.size(), room));
    }
    Supplemented s;
    s.ids.push_back(special::kBos);
    s.q_begin = s.ids.size();
    s.ids.insert(s.ids.end(), q.begin(), q.end());
    s.q_end = s.ids.size();
    s.ids.push_back(special::kSep);
    s.i_begin = s.ids.size();
    s.ids.insert(s.ids.end(), i.begin(), i.end());
    s.i_end = s.ids.size();
    s.ids.push_back(special::kSep);
    return s;
}

inline Supplemented supplement(std::string_view question, std::string_view info, const Vocab& vocab,
                               std::size_t max_len) {
    return supplement(vocab.ids_of(question), vocab.ids_of(info), max_len);
}

}  // namespace medkit::kgraph
