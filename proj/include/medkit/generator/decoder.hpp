#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/kgraph/graph.hpp"
#include "medkit/log.hpp"
#include "medkit/model/training_log.hpp"
#include "medkit/model/transformer.hpp"
#include "medkit/numerics/adam.hpp"
#include "medkit/numerics/ops.hpp"
#include "medkit/text/vocab.hpp"

namespace medkit::generator {

struct DecoderConfig {
    std::size_t vocab_size = 0;
    std::size_t hidden_dim = 64;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 256;
    std::size_t context = 128;  // K
    std::size_t max_gen_len = 64;

    void validate() const {
        if (vocab_size <= special::kCount) {
            throw ConfigError("decoder vocab_size must exceed the reserved tokens");
        }
        if (hidden_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0 || context == 0) {
            throw ConfigError("decoder dimensions must be positive");
        }
        if (hidden_dim % num_heads != 0) {
            throw ConfigError("hidden_dim must be divisible by num_heads");
        }
        if (max_gen_len == 0) {
            throw ConfigError("max_gen_len must be at least 1");
        }
    }
};

inline nlohmann::json to_json(const DecoderConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
            {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},       {"context", c.context},
            {"max_gen_len", c.max_gen_len}};
}

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.context = j.at("context").get<std::size_t>();
    c.max_gen_len = j.at("max_gen_len").get<std::size_t>();
    c.validate();
    return c;
}

// Causal transformer LM over token ids with an untied output projection.
class Decoder {
public:
    Decoder(DecoderConfig config, Rng& rng) : config_{config} {
        config_.validate();
        token_embedding_ = xavier_uniform(config_.vocab_size, config_.hidden_dim, rng);
        position_embedding_ = xavier_uniform(config_.context, config_.hidden_dim, rng);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            layers_.push_back(
                model::TransformerLayer::init(config_.hidden_dim, config_.num_heads, config_.ffn_dim, rng));
        }
        out_w_ = xavier_uniform(config_.hidden_dim, config_.vocab_size, rng);
        out_b_ = zeros_param({config_.vocab_size});
    }

    const DecoderConfig& config() const { return config_; }
    Tensor& out_w() { return out_w_; }
    Tensor& out_b() { return out_b_; }
    Tensor& token_embedding() { return token_embedding_; }

    // Next-token logits for every position: [T x V]. Requires T <= K.
    Tensor logits(std::span<const TokenId> ids) const {
        if (ids.empty()) {
            throw DimensionError("decoder input is empty");
        }
        if (ids.size() > config_.context) {
            throw DimensionError("decoder input of " + std::to_string(ids.size()) + " tokens exceeds context " +
                                 std::to_string(config_.context));
        }
        for (TokenId id : ids) {
            if (id >= config_.vocab_size) {
                throw DimensionError("token id " + std::to_string(id) + " outside the vocabulary");
            }
        }
        const auto mask = model::causal_mask(ids.size());
        Tensor x = ops::add(ops::embedding(token_embedding_, ids),
                            ops::slice_rows(position_embedding_, 0, ids.size()));
        for (const auto& layer : layers_) {
            x = layer.forward(x, mask);
        }
        return ops::add(ops::matmul(x, out_w_), out_b_);
    }

    // Keeps the last K tokens of a context.
    std::span<const TokenId> window(std::span<const TokenId> context) const {
        return context.size() > config_.context ? context.last(config_.context) : context;
    }

    // Logits of the token following `context`, after sliding-window truncation.
    std::vector<double> next_logits(std::span<const TokenId> context) const {
        NoGradGuard no_grad;
        const Tensor z = logits(window(context));
        const std::size_t v = config_.vocab_size;
        const auto d = z.data();
        return {d.end() - static_cast<std::ptrdiff_t>(v), d.end()};
    }

    // Next-token distribution.
    std::vector<double> next_distribution(std::span<const TokenId> context) const {
        NoGradGuard no_grad;
        const auto z = next_logits(context);
        const Tensor p = ops::softmax(Tensor::vector(z));
        return {p.data().begin(), p.data().end()};
    }

    ParamList params() const {
        ParamList out{{"decoder.token_embedding", token_embedding_},
                      {"decoder.position_embedding", position_embedding_}};
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            append(out, layers_[l].params("decoder.layer" + std::to_string(l) + "."));
        }
        out.push_back({"decoder.out_w", out_w_});
        out.push_back({"decoder.out_b", out_b_});
        return out;
    }

private:
    DecoderConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::vector<model::TransformerLayer> layers_;
    Tensor out_w_;
    Tensor out_b_;
};

// Mean of -log p(targets[t] | inputs[..t]) over the t with selected[t] set.
inline Tensor lm_loss(const Decoder& decoder, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                      const std::vector<bool>& selected) {
    if (inputs.size() != targets.size() || selected.size() != targets.size()) {
        throw DimensionError("lm_loss: inputs, targets and mask must have equal length");
    }
    std::vector<std::size_t> rows, picked;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (selected[t]) {
            rows.push_back(t);
            picked.push_back(targets[t]);
        }
    }
    if (rows.empty()) {
        throw ConfigError("lm_loss: no target positions are selected");
    }
    return ops::cross_entropy_logits(decoder.logits(inputs), rows, picked);
}

// Next-token loss over ids: position t >= 1 is a target when loss_mask[t] is
// set. The sequence may be at most K + 1 tokens long.
inline Tensor lm_loss(const Decoder& decoder, std::span<const TokenId> ids, const std::vector<bool>& loss_mask) {
    if (ids.size() < 2) {
        throw DimensionError("lm_loss needs at least two tokens");
    }
    if (loss_mask.size() != ids.size()) {
        throw DimensionError("lm_loss: mask length does not match the sequence");
    }
    return lm_loss(decoder, ids.first(ids.size() - 1), ids.subspan(1),
                   std::vector<bool>(loss_mask.begin() + 1, loss_mask.end()));
}

inline Tensor lm_loss(const Decoder& decoder, std::span<const TokenId> ids) {
    return lm_loss(decoder, ids, std::vector<bool>(ids.size(), true));
}

// [BOS] text [EOS], cut to at most max_tokens.
inline std::vector<TokenId> lm_sequence(std::string_view text, const Vocab& vocab, std::size_t max_tokens) {
    std::vector<TokenId> ids{special::kBos};
    const auto body = vocab.ids_of(text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(special::kEos);
    if (ids.size() > max_tokens) {
        ids.resize(max_tokens);
    }
    return ids;
}

struct LmTrainConfig {
    std::size_t epochs = 10;
    double lr = 2.6e-5;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
};

struct LmOutcome {
    std::vector<double> epoch_loss;
    std::size_t skipped = 0;
    bool diverged = false;
};

struct LmExample {
    std::vector<TokenId> ids;
    std::vector<bool> loss_mask;
};

namespace detail {

inline LmOutcome train_lm(Decoder& decoder, const std::vector<LmExample>& data, const LmTrainConfig& config,
                          model::TrainingLog* history, const char* tag) {
    ParamList params = decoder.params();
    Adam opt;
    opt.add_group("decoder", config.lr, params);
    model::Snapshot good{params};
    model::TrainingLog local;
    model::TrainingLog& hist = history ? *history : local;
    Rng rng{config.seed};
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
    LmOutcome outcome;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        hist.start_epoch();
        rng.shuffle(std::span{order});
        double loss_sum = 0.0;
        std::size_t batches = 0;
        try {
            for (std::size_t start = 0; start < order.size(); start += bs) {
                const std::size_t end = std::min(order.size(), start + bs);
                std::vector<Tensor> terms;
                for (std::size_t i = start; i < end; ++i) {
                    terms.push_back(lm_loss(decoder, data[order[i]].ids, data[order[i]].loss_mask));
                }
                const Tensor loss = ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(end - start));
                opt.zero_grad();
                backward(loss);
                opt.step();
                loss_sum += loss.item();
                ++batches;
            }
        } catch (const NumericError& e) {
            log().error("{}: {} in epoch {}; restoring last good weights", tag, e.what(), epoch);
            good.restore(params);
            outcome.diverged = true;
            return outcome;
        }
        const double epoch_loss = loss_sum / static_cast<double>(batches);
        outcome.epoch_loss.push_back(epoch_loss);
        hist.end_epoch(epoch, epoch_loss, config.lr);
        good.capture(params);
        log().debug("{} epoch {} loss {:.6f}", tag, epoch, epoch_loss);
    }
    return outcome;
}

}  // namespace detail

// Knowledge injection: next-token training on background text, every
// position in the loss.
inline LmOutcome pretrain_lm(Decoder& decoder, const Vocab& vocab, const std::vector<std::string>& texts,
                             const LmTrainConfig& config, model::TrainingLog* history = nullptr) {
    std::vector<LmExample> data;
    for (const auto& t : texts) {
        auto ids = lm_sequence(t, vocab, decoder.config().context + 1);
        if (ids.size() >= 2) {
            data.push_back({ids, std::vector<bool>(ids.size(), true)});
        }
    }
    if (data.empty()) {
        throw ConfigError("knowledge corpus is empty");
    }
    return detail::train_lm(decoder, data, config, history, "pretrain_lm");
}

struct QaPair {
    std::string question;
    std::string answer;
};

struct QaOptions {
    bool use_supplement = true;      // retrieve from the graph
    std::size_t knowledge_chars = 64;  // budget for the supplement text
};

// supplement(Q, I) ++ A ++ [EOS] with the loss on A and [EOS]. Returns nullopt
// when the answer leaves no room for at least one question token.
inline std::optional<LmExample> qa_example(const QaPair& pair, const Vocab& vocab,
                                           const kgraph::KnowledgeGraph* graph, const QaOptions& options,
                                           std::size_t context) {
    const auto answer = vocab.ids_of(pair.answer);
    const std::size_t total = context + 1;
    if (answer.size() + 1 + 4 > total) {
        return std::nullopt;
    }
    const std::string info =
        options.use_supplement && graph ? kgraph::retrieve(pair.question, *graph, options.knowledge_chars) : "";
    auto sup = kgraph::supplement(vocab.ids_of(pair.question), vocab.ids_of(info), total - answer.size() - 1);
    if (sup.q_end == sup.q_begin) {
        return std::nullopt;
    }
    LmExample ex;
    ex.ids = std::move(sup.ids);
    ex.loss_mask.assign(ex.ids.size(), false);
    ex.ids.insert(ex.ids.end(), answer.begin(), answer.end());
    ex.ids.push_back(special::kEos);
    ex.loss_mask.resize(ex.ids.size(), true);
    return ex;
}

inline LmOutcome finetune_qa(Decoder& decoder, const Vocab& vocab, const std::vector<QaPair>& pairs,
                             const kgraph::KnowledgeGraph* graph, const LmTrainConfig& config,
                             const QaOptions& options = {}, model::TrainingLog* history = nullptr) {
    std::vector<LmExample> data;
    std::size_t skipped = 0;
    for (const auto& p : pairs) {
        if (auto ex = qa_example(p, vocab, graph, options, decoder.config().context)) {
            data.push_back(std::move(*ex));
        } else {
            ++skipped;
        }
    }
    if (skipped) {
        log().warn("finetune_qa: skipped {} pairs that do not fit the context", skipped);
    }
    if (data.empty()) {
        throw ConfigError("no QA pair fits the decoder context");
    }
    auto outcome = detail::train_lm(decoder, data, config, history, "finetune_qa");
    outcome.skipped = skipped;
    return outcome;
}

enum class Strategy { greedy, top_k, temperature };

struct GenerateConfig {
    Strategy strategy = Strategy::greedy;
    std::size_t top_k = 5;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_gen_len;  // defaults to the decoder's
    QaOptions qa;
};

// Picks the next token from raw logits.
inline TokenId choose_token(const std::vector<double>& logits, const GenerateConfig& config, Rng& rng) {
    const std::size_t v = logits.size();
    auto argmax = [&] { return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin()); };
    switch (config.strategy) {
    case Strategy::greedy:
        return argmax();
    case Strategy::top_k: {
        if (config.top_k == 0) {
            throw ConfigError("top_k must be at least 1");
        }
        std::vector<std::size_t> idx(v);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const std::size_t k = std::min(config.top_k, v);
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::size_t a, std::size_t b) { return logits[a] > logits[b] || (logits[a] == logits[b] && a < b); });
        const double mx = logits[idx[0]];
        std::vector<double> w(k);
        double z = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            w[i] = std::exp(logits[idx[i]] - mx);
            z += w[i];
        }
        double u = rng.uniform() * z;
        for (std::size_t i = 0; i < k; ++i) {
            if (u < w[i]) {
                return idx[i];
            }
            u -= w[i];
        }
        return idx[k - 1];
    }
    case Strategy::temperature: {
        if (!(config.temperature > 0.0)) {
            throw ConfigError("temperature must be positive");
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        std::vector<double> w(v);
        double z = 0.0;
        for (std::size_t i = 0; i < v; ++i) {
            w[i] = std::exp((logits[i] - mx) / config.temperature);
            z += w[i];
        }
        double u = rng.uniform() * z;
        for (std::size_t i = 0; i < v; ++i) {
            if (u < w[i]) {
                return i;
            }
            u -= w[i];
        }
        return argmax();
    }
    }
    return argmax();
}

struct Generation {
    std::string question;
    std::string supplement;
    std::string answer;
    std::vector<TokenId> answer_ids;
};

inline nlohmann::json to_json(const Generation& g) {
    return {{"question", g.question}, {"supplement", g.supplement}, {"answer", g.answer}};
}

// Decodes after the supplemented context until [EOS] or max_gen_len tokens.
inline Generation generate(const Decoder& decoder, const Vocab& vocab, std::string_view question,
                           const kgraph::KnowledgeGraph* graph, const GenerateConfig& config = {}) {
    Generation g;
    g.question = std::string(question);
    if (config.qa.use_supplement && graph) {
        g.supplement = kgraph::retrieve(question, *graph, config.qa.knowledge_chars);
    }
    auto context = kgraph::supplement(vocab.ids_of(question), vocab.ids_of(g.supplement), decoder.config().context).ids;
    Rng rng{config.seed};
    const std::size_t limit = config.max_gen_len.value_or(decoder.config().max_gen_len);
    for (std::size_t step = 0; step < limit; ++step) {
        const TokenId next = choose_token(decoder.next_logits(context), config, rng);
        if (next == special::kEos) {
            break;
        }
        g.answer_ids.push_back(next);
        context.push_back(next);
    }
    g.answer = decode(g.answer_ids, vocab);
    return g;
}

// exp of the mean per-token NLL of [BOS] text [EOS] over all predicted tokens.
inline double perplexity(const Decoder& decoder, const Vocab& vocab, const std::vector<std::string>& texts) {
    if (texts.empty()) {
        throw ConfigError("perplexity needs at least one text");
    }
    NoGradGuard no_grad;
    double nll = 0.0;
    std::size_t count = 0;
    for (const auto& t : texts) {
        const auto ids = lm_sequence(t, vocab, decoder.config().context + 1);
        const double n = static_cast<double>(ids.size() - 1);
        nll += lm_loss(decoder, ids).item() * n;
        count += ids.size() - 1;
    }
    return std::exp(nll / static_cast<double>(count));
}

}  // namespace medkit::generator
