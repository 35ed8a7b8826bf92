#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/genmetrics/metrics.hpp"
#include "medkit/genmetrics/wmd.hpp"
#include "medkit/model/encoder.hpp"

namespace medkit::genmetrics {

struct MetricReport {
    std::size_t pairs = 0;
    Prf weighted;
    double bleu1 = 0.0;
    double chrf = 0.0;
    double gleu = 0.0;
    double nist = 0.0;
    double ribes = 0.0;
    double ter = 0.0;
    double wmd = 0.0;
    Prf embed;
    std::optional<double> entropy;  // unset when the generated side has no tokens
    std::optional<double> lexical_diversity;
    double kl_divergence = 0.0;
    std::optional<double> self_bleu2;
    std::optional<double> self_bleu3;
};

inline nlohmann::json to_json(const MetricReport& r) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"pairs", r.pairs},
            {"weight_precision", r.weighted.precision},
            {"weight_recall", r.weighted.recall},
            {"weight_f1", r.weighted.f1},
            {"bleu1", r.bleu1},
            {"chrf", r.chrf},
            {"gleu", r.gleu},
            {"nist", r.nist},
            {"ribes", r.ribes},
            {"ter", r.ter},
            {"wmd_similarity", r.wmd},
            {"embed_precision", r.embed.precision},
            {"embed_recall", r.embed.recall},
            {"embed_f1", r.embed.f1},
            {"entropy", opt(r.entropy)},
            {"lexical_diversity", opt(r.lexical_diversity)},
            {"kl_divergence", r.kl_divergence},
            {"self_bleu2", opt(r.self_bleu2)},
            {"self_bleu3", opt(r.self_bleu3)}};
}

// Token vectors for the embedding score: contextual encoder rows of the
// sentence's characters, or one-hot rows when no encoder is given.
class SentenceEmbedder {
public:
    SentenceEmbedder(const model::Encoder* encoder, const Vocab* vocab, std::vector<std::string> words)
        : encoder_{encoder}, vocab_{vocab}, one_hot_{one_hot_embedder(std::move(words))} {
        if (encoder_ && !vocab_) {
            throw ConfigError("an encoder needs its vocabulary for metric embeddings");
        }
    }

    std::vector<std::vector<double>> contextual(const std::string& text, const Tokens& tokens) const {
        std::vector<std::vector<double>> rows;
        if (!encoder_) {
            for (const auto& t : tokens) {
                rows.push_back(one_hot_(t));
            }
            return rows;
        }
        NoGradGuard no_grad;
        const auto seq = encode(text, *vocab_, encoder_->config().max_len);
        const auto out = encoder_->encode(seq);
        const std::size_t h = out.token_reps.cols();
        for (std::size_t t = 1; t + 1 < seq.real_length(); ++t) {
            if (Vocab::is_special(seq.ids[t]) && seq.ids[t] != special::kUnk) {
                continue;
            }
            const auto d = out.token_reps.data().subspan(t * h, h);
            rows.emplace_back(d.begin(), d.end());
        }
        return rows;
    }

    // Static word vectors for WMD: the mean embedding row of a token's
    // characters, or one-hot.
    Embedder word_vectors() const {
        if (!encoder_) {
            return one_hot_;
        }
        return [this](const std::string& w) {
            const auto ids = vocab_->ids_of(w);
            const Tensor& table = encoder_->token_embedding();
            const std::size_t h = table.cols();
            std::vector<double> v(h, 0.0);
            for (auto id : ids) {
                for (std::size_t k = 0; k < h; ++k) {
                    v[k] += table.at(id, k) / static_cast<double>(ids.size());
                }
            }
            return v;
        };
    }

private:
    const model::Encoder* encoder_;
    const Vocab* vocab_;
    Embedder one_hot_;
};

// Sentence-level metrics are averaged over pairs (summed in sorted order so
// the result does not depend on line order); corpus-level metrics use the
// whole files.
inline MetricReport report(const std::vector<std::string>& gen, const std::vector<std::string>& ref,
                           const model::Encoder* encoder = nullptr, const Vocab* vocab = nullptr) {
    if (gen.size() != ref.size()) {
        throw ConfigError("generated and reference files differ in length (" + std::to_string(gen.size()) + " vs " +
                          std::to_string(ref.size()) + ")");
    }
    if (gen.empty()) {
        throw ConfigError("metric report needs at least one pair");
    }
    std::vector<Tokens> g, r;
    std::vector<std::string> words;
    for (std::size_t i = 0; i < gen.size(); ++i) {
        g.push_back(tokenize(gen[i]));
        r.push_back(tokenize(ref[i]));
        if (r.back().empty()) {
            throw ConfigError("reference line " + std::to_string(i + 1) + " is empty");
        }
        words.insert(words.end(), g.back().begin(), g.back().end());
        words.insert(words.end(), r.back().begin(), r.back().end());
    }
    const SentenceEmbedder embedder{encoder, vocab, words};
    const Embedder wv = embedder.word_vectors();

    std::vector<double> wp, wr, wf, b1, cf, gl, rb, te, wm, ep, er, ef;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto w = weighted_prf(g[i], r[i]);
        wp.push_back(w.precision);
        wr.push_back(w.recall);
        wf.push_back(w.f1);
        b1.push_back(bleu(g[i], r[i], 1));
        cf.push_back(chrf(gen[i], ref[i]));
        gl.push_back(gleu(g[i], r[i]));
        rb.push_back(ribes(g[i], r[i]));
        te.push_back(ter(g[i], r[i]));
        wm.push_back(g[i].empty() ? 0.0 : wmd_similarity(g[i], r[i], wv));
        const auto e = embed_score(embedder.contextual(gen[i], g[i]), embedder.contextual(ref[i], r[i]));
        ep.push_back(e.precision);
        er.push_back(e.recall);
        ef.push_back(e.f1);
    }
    MetricReport out;
    out.pairs = g.size();
    out.weighted = {stable_mean(wp), stable_mean(wr), stable_mean(wf)};
    out.bleu1 = stable_mean(b1);
    out.chrf = stable_mean(cf);
    out.gleu = stable_mean(gl);
    out.ribes = stable_mean(rb);
    out.ter = stable_mean(te);
    out.wmd = stable_mean(wm);
    out.embed = {stable_mean(ep), stable_mean(er), stable_mean(ef)};
    out.nist = nist(g, r);
    if (std::any_of(g.begin(), g.end(), [](const Tokens& t) { return !t.empty(); })) {
        out.entropy = entropy(g);
        out.lexical_diversity = lexical_diversity(g);
    }
    out.kl_divergence = kl_divergence(g, r);
    if (g.size() >= 2) {
        out.self_bleu2 = self_bleu(g, 2);
        out.self_bleu3 = self_bleu(g, 3);
    }
    return out;
}

// One sentence per line; a JSONL line with an "answer" field contributes that
// field (generator output), a null answer counting as an empty line.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty() && line.front() == '{') {
            const auto j = nlohmann::json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.is_object() && j.contains("answer")) {
                out.push_back(j["answer"].is_string() ? j["answer"].get<std::string>() : "");
                continue;
            }
        }
        out.push_back(line);
    }
    return out;
}

}  // namespace medkit::genmetrics
