#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "medkit/numerics/ops.hpp"
#include "medkit/numerics/params.hpp"

namespace medkit::model {

// Row-major [T x T] table: allowed[i*T + j] != 0 when query i may attend key j.
using AttentionMask = std::vector<std::uint8_t>;

// Queries attend every real key; padded keys are excluded.
inline AttentionMask key_padding_mask(const std::vector<bool>& real) {
    const std::size_t t = real.size();
    AttentionMask m(t * t, 0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
            m[i * t + j] = real[j] ? 1 : 0;
        }
    }
    return m;
}

// Position i attends positions 0..i.
inline AttentionMask causal_mask(std::size_t t) {
    AttentionMask m(t * t, 0);
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            m[i * t + j] = 1;
        }
    }
    return m;
}

// Attention probabilities softmax(Q K^T / sqrt(d)) for one head, d being the
// per-head width.
inline Tensor attention_weights(const Tensor& x, const Tensor& wq, const Tensor& wk, const AttentionMask& mask) {
    const Tensor q = ops::matmul(x, wq);
    const Tensor k = ops::matmul(x, wk);
    const double scale = 1.0 / std::sqrt(static_cast<double>(wq.dim(1)));
    return ops::masked_softmax(ops::scale(ops::matmul(q, ops::transpose(k)), scale), mask);
}

// One scaled dot-product attention head over x: [T x H] -> [T x d].
inline Tensor attention_head(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                             const AttentionMask& mask) {
    return ops::matmul(attention_weights(x, wq, wk, mask), ops::matmul(x, wv));
}

// Post-norm transformer block: multi-head attention + residual + LayerNorm,
// then a GELU feed-forward + residual + LayerNorm.
struct TransformerLayer {
    std::size_t heads = 1;
    Tensor wq, wk, wv;  // [H x H]; head h owns columns [h*d, (h+1)*d)
    Tensor wo, bo;
    Tensor ln1_gain, ln1_bias;
    Tensor w1, b1, w2, b2;
    Tensor ln2_gain, ln2_bias;

    static TransformerLayer init(std::size_t hidden, std::size_t heads, std::size_t ffn, Rng& rng) {
        TransformerLayer l;
        l.heads = heads;
        l.wq = xavier_uniform(hidden, hidden, rng);
        l.wk = xavier_uniform(hidden, hidden, rng);
        l.wv = xavier_uniform(hidden, hidden, rng);
        l.wo = xavier_uniform(hidden, hidden, rng);
        l.bo = zeros_param({hidden});
        l.ln1_gain = ones_param(hidden);
        l.ln1_bias = zeros_param({hidden});
        l.w1 = xavier_uniform(hidden, ffn, rng);
        l.b1 = zeros_param({ffn});
        l.w2 = xavier_uniform(ffn, hidden, rng);
        l.b2 = zeros_param({hidden});
        l.ln2_gain = ones_param(hidden);
        l.ln2_bias = zeros_param({hidden});
        return l;
    }

    std::size_t head_dim() const { return wq.dim(1) / heads; }

    // Concatenated head outputs projected back to H (before the residual).
    Tensor self_attention(const Tensor& x, const AttentionMask& mask) const {
        const std::size_t d = head_dim();
        std::vector<Tensor> outs;
        for (std::size_t h = 0; h < heads; ++h) {
            outs.push_back(attention_head(x, ops::slice_cols(wq, h * d, (h + 1) * d),
                                          ops::slice_cols(wk, h * d, (h + 1) * d),
                                          ops::slice_cols(wv, h * d, (h + 1) * d), mask));
        }
        const Tensor joined = heads == 1 ? outs.front() : ops::concat(outs, 1);
        return ops::add(ops::matmul(joined, wo), bo);
    }

    Tensor forward(const Tensor& x, const AttentionMask& mask) const {
        const Tensor attended = ops::layer_norm(ops::add(x, self_attention(x, mask)), ln1_gain, ln1_bias);
        const Tensor hidden = ops::gelu(ops::add(ops::matmul(attended, w1), b1));
        const Tensor ff = ops::add(ops::matmul(hidden, w2), b2);
        return ops::layer_norm(ops::add(attended, ff), ln2_gain, ln2_bias);
    }

    ParamList params(const std::string& prefix) const {
        return {{prefix + "wq", wq},         {prefix + "wk", wk},         {prefix + "wv", wv},
                {prefix + "wo", wo},         {prefix + "bo", bo},         {prefix + "ln1.gain", ln1_gain},
                {prefix + "ln1.bias", ln1_bias}, {prefix + "w1", w1},     {prefix + "b1", b1},
                {prefix + "w2", w2},         {prefix + "b2", b2},         {prefix + "ln2.gain", ln2_gain},
                {prefix + "ln2.bias", ln2_bias}};
    }
};

}  // namespace medkit::model
