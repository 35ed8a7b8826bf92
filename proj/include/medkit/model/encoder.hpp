#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/log.hpp"
#include "medkit/model/training_log.hpp"
#include "medkit/model/transformer.hpp"
#include "medkit/numerics/adam.hpp"
#include "medkit/numerics/ops.hpp"
#include "medkit/text/vocab.hpp"

namespace medkit::model {

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t max_len = 64;
    std::size_t hidden_dim = 64;
    std::size_t num_layers = 2;
    std::size_t num_heads = 2;
    std::size_t ffn_dim = 256;
    double mask_rate = 0.15;

    void validate() const {
        if (vocab_size <= special::kCount) {
            throw ConfigError("encoder vocab_size must exceed the reserved tokens");
        }
        if (max_len < 3 || hidden_dim == 0 || num_layers == 0 || num_heads == 0 || ffn_dim == 0) {
            throw ConfigError("encoder dimensions must be positive (max_len >= 3)");
        }
        if (hidden_dim % num_heads != 0) {
            throw ConfigError("hidden_dim must be divisible by num_heads");
        }
        if (!(mask_rate > 0.0 && mask_rate < 1.0)) {
            throw ConfigError("mask_rate must lie strictly between 0 and 1");
        }
    }
};

inline nlohmann::json to_json(const EncoderConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"max_len", c.max_len},     {"hidden_dim", c.hidden_dim},
            {"num_layers", c.num_layers}, {"num_heads", c.num_heads}, {"ffn_dim", c.ffn_dim},
            {"mask_rate", c.mask_rate}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_len = j.at("max_len").get<std::size_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    c.num_layers = j.at("num_layers").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
    c.mask_rate = j.at("mask_rate").get<double>();
    c.validate();
    return c;
}

struct EncoderOutput {
    Tensor cls_vector;  // [H]
    Tensor token_reps;  // [T x H]
};

// Transformer encoder with learned absolute positions and a masked-LM head
// whose output projection is tied to the token embedding table.
class Encoder {
public:
    Encoder(EncoderConfig config, Rng& rng) : config_{config} {
        config_.validate();
        token_embedding_ = xavier_uniform(config_.vocab_size, config_.hidden_dim, rng);
        position_embedding_ = xavier_uniform(config_.max_len, config_.hidden_dim, rng);
        for (std::size_t l = 0; l < config_.num_layers; ++l) {
            layers_.push_back(
                TransformerLayer::init(config_.hidden_dim, config_.num_heads, config_.ffn_dim, rng));
        }
        mlm_bias_ = zeros_param({config_.vocab_size});
    }

    const EncoderConfig& config() const { return config_; }
    const std::vector<TransformerLayer>& layers() const { return layers_; }
    Tensor& token_embedding() { return token_embedding_; }
    Tensor& position_embedding() { return position_embedding_; }
    Tensor& mlm_bias() { return mlm_bias_; }
    const Tensor& token_embedding() const { return token_embedding_; }

    // Token embedding plus position embedding: [T x H].
    Tensor embed(const TokenSequence& tokens) const {
        if (tokens.size() > config_.max_len) {
            throw DimensionError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                                 std::to_string(config_.max_len));
        }
        if (tokens.size() == 0) {
            throw DimensionError("cannot embed an empty sequence");
        }
        const Tensor tok = ops::embedding(token_embedding_, tokens.ids);
        const Tensor pos = ops::slice_rows(position_embedding_, 0, tokens.size());
        return ops::add(tok, pos);
    }

    EncoderOutput encode(const TokenSequence& tokens) const {
        const AttentionMask mask = key_padding_mask(tokens.attention_mask);
        Tensor x = embed(tokens);
        for (const auto& layer : layers_) {
            x = layer.forward(x, mask);
        }
        return {ops::row(x, 0), x};
    }

    // Vocabulary logits for the selected positions of token_reps: [P x V].
    Tensor mlm_logits(const Tensor& token_reps, const std::vector<std::size_t>& positions) const {
        std::vector<Tensor> rows;
        for (std::size_t p : positions) {
            rows.push_back(ops::row(token_reps, p));
        }
        const Tensor picked = ops::stack_rows(rows);
        return ops::add(ops::matmul(picked, ops::transpose(token_embedding_)), mlm_bias_);
    }

    // Backbone parameters (used by the classifier's encoder group).
    ParamList backbone_params() const {
        ParamList out{{"encoder.token_embedding", token_embedding_},
                      {"encoder.position_embedding", position_embedding_}};
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            append(out, layers_[l].params("encoder.layer" + std::to_string(l) + "."));
        }
        return out;
    }

    ParamList params() const {
        ParamList out = backbone_params();
        out.push_back({"encoder.mlm_bias", mlm_bias_});
        return out;
    }

private:
    EncoderConfig config_;
    Tensor token_embedding_;
    Tensor position_embedding_;
    std::vector<TransformerLayer> layers_;
    Tensor mlm_bias_;
};

enum class Corruption { masked, random_token, unchanged };

struct MaskedSequence {
    TokenSequence corrupted;
    std::vector<std::size_t> positions;
    std::vector<TokenId> original_ids;
    std::vector<Corruption> kinds;
};

// Selects each real, non-special position with probability `rate`; a selected
// position becomes [MASK] 80% of the time, a random ordinary token 10%, and
// stays unchanged 10%.
inline MaskedSequence mask_tokens(const TokenSequence& tokens, double rate, std::size_t vocab_size, Rng& rng) {
    if (!(rate > 0.0 && rate < 1.0)) {
        throw ConfigError("mask rate must lie strictly between 0 and 1");
    }
    MaskedSequence out;
    out.corrupted = tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!tokens.attention_mask[i] || Vocab::is_special(tokens.ids[i])) {
            continue;
        }
        if (rng.uniform() >= rate) {
            continue;
        }
        out.positions.push_back(i);
        out.original_ids.push_back(tokens.ids[i]);
        const double r = rng.uniform();
        if (r < 0.8) {
            out.corrupted.ids[i] = special::kMask;
            out.kinds.push_back(Corruption::masked);
        } else if (r < 0.9) {
            out.corrupted.ids[i] = special::kCount + rng.below(vocab_size - special::kCount);
            out.kinds.push_back(Corruption::random_token);
        } else {
            out.kinds.push_back(Corruption::unchanged);
        }
    }
    return out;
}

// Mean negative log-likelihood of the original tokens over all masked
// positions of the batch. Returns nullopt (and warns) when nothing is masked.
inline std::optional<Tensor> mlm_loss(const Encoder& encoder, const std::vector<MaskedSequence>& batch) {
    std::vector<Tensor> sums;
    std::size_t total = 0;
    for (const auto& item : batch) {
        if (item.positions.empty()) {
            continue;
        }
        const auto out = encoder.encode(item.corrupted);
        const Tensor logits = encoder.mlm_logits(out.token_reps, item.positions);
        std::vector<std::size_t> rows(item.positions.size());
        for (std::size_t k = 0; k < rows.size(); ++k) {
            rows[k] = k;
        }
        const double count = static_cast<double>(rows.size());
        sums.push_back(ops::scale(ops::cross_entropy_logits(logits, rows, item.original_ids), count));
        total += rows.size();
    }
    if (total == 0) {
        log().warn("mlm_loss: batch has no masked positions; skipped");
        return std::nullopt;
    }
    return ops::scale(ops::add_n(sums), 1.0 / static_cast<double>(total));
}

struct PretrainConfig {
    std::size_t epochs = 50;
    double lr = 5e-5;
    std::size_t batch_size = 8;
    std::uint64_t seed = 0;
};

struct TrainOutcome {
    std::vector<double> epoch_loss;
    bool diverged = false;
    std::size_t skipped = 0;
};

// Masked-LM pre-training: each epoch reshuffles, re-masks and steps Adam once
// per batch. A non-finite loss rolls back to the end of the last good epoch
// and stops.
inline TrainOutcome pretrain(Encoder& encoder, const Vocab& vocab, const std::vector<std::string>& texts,
                             const PretrainConfig& config, TrainingLog* history = nullptr) {
    if (texts.empty()) {
        throw ConfigError("pre-training corpus is empty");
    }
    std::vector<TokenSequence> encoded;
    for (const auto& t : texts) {
        encoded.push_back(encode(t, vocab, encoder.config().max_len));
    }
    ParamList params = encoder.params();
    Adam opt;
    opt.add_group("encoder", config.lr, params);
    Rng rng{config.seed};
    Snapshot good{params};
    TrainingLog local;
    TrainingLog& hist = history ? *history : local;
    TrainOutcome outcome;
    std::vector<std::size_t> order(encoded.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        hist.start_epoch();
        rng.shuffle(std::span{order});
        double loss_sum = 0.0;
        std::size_t batches = 0;
        try {
            for (std::size_t start = 0; start < order.size(); start += bs) {
                std::vector<MaskedSequence> batch;
                for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
                    batch.push_back(
                        mask_tokens(encoded[order[k]], encoder.config().mask_rate, vocab.size(), rng));
                }
                auto loss = mlm_loss(encoder, batch);
                if (!loss) {
                    ++outcome.skipped;
                    continue;
                }
                opt.zero_grad();
                backward(*loss);
                opt.step();
                loss_sum += loss->item();
                ++batches;
            }
        } catch (const NumericError& e) {
            log().error("pretrain: {} in epoch {}; restoring last good weights", e.what(), epoch);
            good.restore(params);
            outcome.diverged = true;
            return outcome;
        }
        const double epoch_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        outcome.epoch_loss.push_back(epoch_loss);
        hist.end_epoch(epoch, epoch_loss, config.lr);
        good.capture(params);
        log().debug("pretrain epoch {} loss {:.6f}", epoch, epoch_loss);
    }
    return outcome;
}

}  // namespace medkit::model
