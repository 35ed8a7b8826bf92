#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/model/encoder.hpp"
#include "medkit/numerics/ops.hpp"
#include "medkit/numerics/params.hpp"

namespace medkit::triage {

// One direction of one LSTM layer. Gate columns are ordered i, f, g, o.
struct LstmCell {
    Tensor w_input;   // [in x 4h]
    Tensor w_hidden;  // [h x 4h]
    Tensor bias;      // [4h]

    static LstmCell init(std::size_t in, std::size_t hidden, Rng& rng) {
        return {xavier_uniform(in, 4 * hidden, rng), xavier_uniform(hidden, 4 * hidden, rng),
                zeros_param({4 * hidden})};
    }

    std::size_t hidden() const { return w_hidden.dim(0); }

    // Runs over `inputs` in the given order; returns every hidden state.
    std::vector<Tensor> run(const std::vector<Tensor>& inputs) const {
        const std::size_t h = hidden();
        Tensor state = Tensor::zeros({h});
        Tensor cell = Tensor::zeros({h});
        std::vector<Tensor> out;
        out.reserve(inputs.size());
        for (const auto& x : inputs) {
            const Tensor gates = ops::add(ops::add(ops::matmul(x, w_input), ops::matmul(state, w_hidden)), bias);
            const Tensor i = ops::sigmoid(ops::slice(gates, 0, h));
            const Tensor f = ops::sigmoid(ops::slice(gates, h, 2 * h));
            const Tensor g = ops::tanh(ops::slice(gates, 2 * h, 3 * h));
            const Tensor o = ops::sigmoid(ops::slice(gates, 3 * h, 4 * h));
            cell = ops::add(ops::mul(f, cell), ops::mul(i, g));
            state = ops::mul(o, ops::tanh(cell));
            out.push_back(state);
        }
        return out;
    }

    ParamList params(const std::string& prefix) const {
        return {{prefix + "w_input", w_input}, {prefix + "w_hidden", w_hidden}, {prefix + "bias", bias}};
    }
};

// Stacked bidirectional LSTM; layer k > 0 reads the concatenated forward and
// backward states of layer k-1.
struct BiLstm {
    std::vector<LstmCell> forward;
    std::vector<LstmCell> backward;

    static BiLstm init(std::size_t in, std::size_t hidden, std::size_t layers, Rng& rng) {
        BiLstm b;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t width = l == 0 ? in : 2 * hidden;
            b.forward.push_back(LstmCell::init(width, hidden, rng));
            b.backward.push_back(LstmCell::init(width, hidden, rng));
        }
        return b;
    }

    std::size_t hidden() const { return forward.front().hidden(); }

    ParamList params(const std::string& prefix) const {
        ParamList out;
        for (std::size_t l = 0; l < forward.size(); ++l) {
            append(out, forward[l].params(prefix + "l" + std::to_string(l) + ".fwd."));
            append(out, backward[l].params(prefix + "l" + std::to_string(l) + ".bwd."));
        }
        return out;
    }
};

// Runs the BiLSTM over the real (mask=true) rows of token_reps and returns
// [final forward state ; final backward state], length 2h.
inline Tensor bilstm(const Tensor& token_reps, const std::vector<bool>& mask, const BiLstm& net) {
    if (mask.size() != token_reps.rows()) {
        throw DimensionError("bilstm: mask length does not match the token rows");
    }
    std::vector<Tensor> inputs;
    for (std::size_t t = 0; t < mask.size(); ++t) {
        if (mask[t]) {
            inputs.push_back(ops::row(token_reps, t));
        }
    }
    if (inputs.empty()) {
        throw DimensionError("bilstm: sequence has no real tokens");
    }
    Tensor last_fwd, first_bwd;
    for (std::size_t l = 0; l < net.forward.size(); ++l) {
        auto fwd = net.forward[l].run(inputs);
        std::vector<Tensor> reversed(inputs.rbegin(), inputs.rend());
        auto bwd = net.backward[l].run(reversed);
        std::reverse(bwd.begin(), bwd.end());
        last_fwd = fwd.back();
        first_bwd = bwd.front();
        if (l + 1 < net.forward.size()) {
            for (std::size_t t = 0; t < inputs.size(); ++t) {
                inputs[t] = ops::concat({fwd[t], bwd[t]});
            }
        }
    }
    return ops::concat({last_fwd, first_bwd});
}

// [H ; cls]
inline Tensor fuse(const Tensor& h, const Tensor& cls) {
    if (h.rank() != 1 || cls.rank() != 1 || h.size() != 2 * cls.size()) {
        throw DimensionError("fuse expects H of length 2k and cls of length k, got " + shape_str(h.shape()) +
                             " and " + shape_str(cls.shape()));
    }
    return ops::concat({h, cls});
}

// Dendritic stack: D0 = M, Dl = (D{l-1} * D{l-1}) W_l with W_l of shape
// [d_in x d_out]. Returns the last D.
inline Tensor dendrite(const Tensor& m, const std::vector<Tensor>& weights) {
    Tensor d = m;
    for (const auto& w : weights) {
        d = ops::matmul(ops::square(d), w);
    }
    return d;
}

// softmax(D W_F + b_F)
inline Tensor classify(const Tensor& d, const Tensor& w_f, const Tensor& b_f) {
    return ops::softmax(ops::add(ops::matmul(d, w_f), b_f));
}

struct TriageConfig {
    std::size_t num_labels = 0;
    std::size_t num_lstm_layers = 2;
    std::size_t num_dd_layers = 3;
    bool use_bilstm = true;
    bool use_cls = true;
    bool use_dd = true;

    void validate() const {
        if (num_labels < 2) {
            throw ConfigError("triage needs at least two labels");
        }
        if (!use_bilstm && !use_cls) {
            throw ConfigError("disabling both the BiLSTM and the CLS vector leaves no features");
        }
        if (use_bilstm && num_lstm_layers == 0) {
            throw ConfigError("num_lstm_layers must be positive");
        }
        if (use_dd && num_dd_layers == 0) {
            throw ConfigError("num_dd_layers must be positive when the dendritic layer is on");
        }
    }
};

inline nlohmann::json to_json(const TriageConfig& c) {
    return {{"num_labels", c.num_labels}, {"num_lstm_layers", c.num_lstm_layers},
            {"num_dd_layers", c.num_dd_layers}, {"use_bilstm", c.use_bilstm},
            {"use_cls", c.use_cls}, {"use_dd", c.use_dd}};
}

inline TriageConfig triage_config_from_json(const nlohmann::json& j) {
    TriageConfig c;
    c.num_labels = j.at("num_labels").get<std::size_t>();
    c.num_lstm_layers = j.at("num_lstm_layers").get<std::size_t>();
    c.num_dd_layers = j.at("num_dd_layers").get<std::size_t>();
    c.use_bilstm = j.at("use_bilstm").get<bool>();
    c.use_cls = j.at("use_cls").get<bool>();
    c.use_dd = j.at("use_dd").get<bool>();
    c.validate();
    return c;
}

// BiLSTM + CLS fusion + dendritic stack + dense softmax on top of the encoder
// hidden size k_h.
class TriageHead {
public:
    TriageHead(std::size_t hidden, TriageConfig config, Rng& rng) : hidden_{hidden}, config_{config} {
        config_.validate();
        if (config_.use_bilstm) {
            lstm_ = BiLstm::init(hidden, hidden, config_.num_lstm_layers, rng);
        }
        std::size_t width = (config_.use_bilstm ? 2 * hidden : 0) + (config_.use_cls ? hidden : 0);
        if (config_.use_dd) {
            for (std::size_t l = 0; l < config_.num_dd_layers; ++l) {
                dd_.push_back(xavier_uniform(width, hidden, rng));
                width = hidden;
            }
        }
        w_f_ = xavier_uniform(width, config_.num_labels, rng);
        b_f_ = zeros_param({config_.num_labels});
    }

    const TriageConfig& config() const { return config_; }
    std::size_t fused_width() const {
        return (config_.use_bilstm ? 2 * hidden_ : 0) + (config_.use_cls ? hidden_ : 0);
    }
    std::vector<Tensor>& dd_weights() { return dd_; }
    Tensor& w_f() { return w_f_; }
    Tensor& b_f() { return b_f_; }

    // Pre-softmax scores [k_l].
    Tensor logits(const model::EncoderOutput& enc, const std::vector<bool>& mask) const {
        Tensor m;
        if (config_.use_bilstm && config_.use_cls) {
            m = fuse(bilstm(enc.token_reps, mask, lstm_), enc.cls_vector);
        } else if (config_.use_bilstm) {
            m = bilstm(enc.token_reps, mask, lstm_);
        } else {
            m = enc.cls_vector;
        }
        const Tensor d = config_.use_dd ? dendrite(m, dd_) : m;
        return ops::add(ops::matmul(d, w_f_), b_f_);
    }

    ParamList params() const {
        ParamList out;
        if (config_.use_bilstm) {
            append(out, lstm_.params("head.lstm."));
        }
        for (std::size_t l = 0; l < dd_.size(); ++l) {
            out.push_back({"head.dd" + std::to_string(l), dd_[l]});
        }
        out.push_back({"head.w_f", w_f_});
        out.push_back({"head.b_f", b_f_});
        return out;
    }

private:
    std::size_t hidden_;
    TriageConfig config_;
    BiLstm lstm_;
    std::vector<Tensor> dd_;
    Tensor w_f_;
    Tensor b_f_;
};

// Encoder plus triage head.
class TriageModel {
public:
    TriageModel(model::EncoderConfig encoder_config, TriageConfig head_config, Rng& rng)
        : encoder_{encoder_config, rng}, head_{encoder_config.hidden_dim, head_config, rng} {}

    model::Encoder& encoder() { return encoder_; }
    const model::Encoder& encoder() const { return encoder_; }
    TriageHead& head() { return head_; }
    const TriageHead& head() const { return head_; }

    Tensor logits(const TokenSequence& tokens) const {
        return head_.logits(encoder_.encode(tokens), tokens.attention_mask);
    }

    Tensor probabilities(const TokenSequence& tokens) const { return ops::softmax(logits(tokens)); }

    std::size_t predict(const TokenSequence& tokens) const {
        NoGradGuard no_grad;
        const Tensor z = logits(tokens);
        return static_cast<std::size_t>(std::max_element(z.data().begin(), z.data().end()) - z.data().begin());
    }

    // Cross-entropy of the gold label.
    Tensor loss(const TokenSequence& tokens, std::size_t label) const {
        const std::size_t row = 0;
        return ops::cross_entropy_logits(logits(tokens), std::span{&row, 1}, std::span{&label, 1});
    }

    ParamList encoder_params() const { return encoder_.backbone_params(); }
    ParamList head_params() const { return head_.params(); }
    ParamList params() const {
        ParamList out = encoder_params();
        append(out, head_params());
        return out;
    }

private:
    model::Encoder encoder_;
    TriageHead head_;
};

}  // namespace medkit::triage
