#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "medkit/model/encoder.hpp"
#include "medkit/numerics/gradcheck.hpp"

namespace {

using medkit::Rng;
using medkit::Tensor;
using medkit::TokenSequence;
using medkit::Vocab;
namespace model = medkit::model;
namespace ops = medkit::ops;

const std::vector<std::string> kTexts{"头痛发热怎么办", "孩子咳嗽有痰", "胃痛吃什么药", "膝盖扭伤肿胀"};

struct Fixture {
    Vocab vocab = Vocab::build(kTexts);
    model::EncoderConfig config;
    Fixture(std::size_t max_len = 12, std::size_t hidden = 8, std::size_t layers = 2, std::size_t heads = 2) {
        config.vocab_size = vocab.size();
        config.max_len = max_len;
        config.hidden_dim = hidden;
        config.num_layers = layers;
        config.num_heads = heads;
        config.ffn_dim = 2 * hidden;
    }
};

void expect_near(std::span<const double> a, std::span<const double> b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
    }
}

TEST(EncoderConfigTest, RejectsIndivisibleHeads) {
    Fixture f;
    f.config.num_heads = 3;
    EXPECT_THROW(f.config.validate(), medkit::ConfigError);
    f.config.num_heads = 2;
    f.config.mask_rate = 1.0;
    EXPECT_THROW(f.config.validate(), medkit::ConfigError);
}

TEST(Embed, ZeroTokenTableLeavesPositionRows) {
    Fixture f;
    Rng rng{1};
    model::Encoder enc{f.config, rng};
    for (auto& v : enc.token_embedding().mutable_data()) v = 0.0;
    auto seq = medkit::encode("头痛", f.vocab, 6);
    auto x = enc.embed(seq);
    auto pos = enc.position_embedding().data();
    expect_near(x.data(), pos.subspan(0, x.size()), 0.0);
}

TEST(Embed, AllPadRowsAreDefinedAndDeterministic) {
    Fixture f;
    Rng rng{1};
    model::Encoder enc{f.config, rng};
    TokenSequence seq{std::vector<medkit::TokenId>(5, 0), std::vector<bool>(5, false), 0};
    auto a = enc.embed(seq);
    auto b = enc.embed(seq);
    expect_near(a.data(), b.data(), 0.0);
    const auto h = f.config.hidden_dim;
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t j = 0; j < h; ++j) {
            EXPECT_DOUBLE_EQ(a.at(r, j), enc.token_embedding().at(0, j) + enc.position_embedding().at(r, j));
        }
    }
}

TEST(Embed, TooLongSequenceThrows) {
    Fixture f(6);
    Rng rng{1};
    model::Encoder enc{f.config, rng};
    auto seq = medkit::encode("头痛发热怎么办", f.vocab, 7);
    EXPECT_THROW(enc.embed(seq), medkit::DimensionError);
}

TEST(AttentionHead, SingleRealTokenReturnsItsValueRow) {
    Rng rng{2};
    auto x = Tensor{{3, 4}, {0.3, -1, 2, 0.5, 1, 1, 1, 1, -2, 0, 3, 1}};
    auto wq = medkit::xavier_uniform(4, 2, rng);
    auto wk = medkit::xavier_uniform(4, 2, rng);
    auto wv = medkit::xavier_uniform(4, 2, rng);
    auto mask = model::key_padding_mask({false, true, false});
    auto out = model::attention_head(x, wq, wk, wv, mask);
    auto v = ops::matmul(x, wv);
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_NEAR(out.at(r, 0), v.at(1, 0), 1e-12);
        EXPECT_NEAR(out.at(r, 1), v.at(1, 1), 1e-12);
    }
}

TEST(AttentionHead, IdenticalKeysGiveMeanOfValues) {
    auto x = Tensor::matrix({{1, 2}, {3, 4}, {5, 6}});
    auto wq = Tensor::matrix({{1, 0}, {0, 1}});
    auto wk = Tensor::matrix({{0, 0}, {0, 0}});
    auto wv = Tensor::matrix({{1, 0}, {0, 1}});
    auto out = model::attention_head(x, wq, wk, wv, model::key_padding_mask({true, true, true}));
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_NEAR(out.at(r, 0), 3.0, 1e-12);
        EXPECT_NEAR(out.at(r, 1), 4.0, 1e-12);
    }
}

TEST(AttentionHead, TwoTokenHandArithmetic) {
    auto x = Tensor::matrix({{1, 0}, {0, 1}});
    auto eye = Tensor::matrix({{1, 0}, {0, 1}});
    auto wv = Tensor::matrix({{1, 2}, {3, 4}});
    auto out = model::attention_head(x, eye, eye, wv, model::key_padding_mask({true, true}));
    // scores = I / sqrt(2); row 0 weights (e^s, 1)/(e^s + 1), row 1 mirrored.
    const double s = 1.0 / std::sqrt(2.0);
    const double p = std::exp(s) / (std::exp(s) + 1.0);
    EXPECT_NEAR(out.at(0, 0), p * 1 + (1 - p) * 3, 1e-12);
    EXPECT_NEAR(out.at(0, 1), p * 2 + (1 - p) * 4, 1e-12);
    EXPECT_NEAR(out.at(1, 0), (1 - p) * 1 + p * 3, 1e-12);
    EXPECT_NEAR(out.at(1, 1), (1 - p) * 2 + p * 4, 1e-12);
}

TEST(AttentionHead, AllPaddedRowFallsBackToPositionZero) {
    auto x = Tensor::matrix({{1, 2}, {3, 4}});
    auto eye = Tensor::matrix({{1, 0}, {0, 1}});
    auto out = model::attention_head(x, eye, eye, eye, model::key_padding_mask({false, false}));
    EXPECT_NEAR(out.at(1, 0), 1.0, 0.0);
    EXPECT_NEAR(out.at(1, 1), 2.0, 0.0);
}

TEST(AttentionWeights, RowsAreDistributionsOverRealKeys) {
    Rng rng{3};
    std::vector<bool> real{true, true, true, false, false};
    auto x = Tensor{{5, 4}, std::vector<double>(20)};
    for (auto& v : x.mutable_data()) v = rng.uniform(-2, 2);
    auto w = model::attention_weights(x, medkit::xavier_uniform(4, 2, rng), medkit::xavier_uniform(4, 2, rng),
                                      model::key_padding_mask(real));
    for (std::size_t r = 0; r < 5; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
            if (!real[c]) EXPECT_EQ(w.at(r, c), 0.0);
            s += w.at(r, c);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(EncoderLayer, ZeroAttentionReducesToLayerNormOfInput) {
    Rng rng{4};
    auto layer = model::TransformerLayer::init(4, 2, 8, rng);
    for (auto& v : layer.wo.mutable_data()) v = 0.0;
    auto x = Tensor{{3, 4}, {0.3, -1, 2, 0.5, 1, 0, 1, 2, -2, 0, 3, 1}};
    auto mask = model::key_padding_mask({true, true, true});
    auto first = ops::layer_norm(ops::add(x, layer.self_attention(x, mask)), layer.ln1_gain, layer.ln1_bias);
    auto expected = ops::layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    expect_near(first.data(), expected.data(), 1e-12);
}

TEST(EncoderLayer, ShapePreservedAndGradientCheck) {
    Rng rng{5};
    auto layer = model::TransformerLayer::init(4, 2, 8, rng);
    auto x = Tensor{{3, 4}, {0.3, -1, 2, 0.5, 1, 0, 1, 2, -2, 0, 3, 1}, true};
    auto mask = model::key_padding_mask({true, true, false});
    auto y = layer.forward(x, mask);
    EXPECT_EQ(y.shape(), x.shape());
    auto weights = Tensor{{3, 4}, std::vector<double>(12)};
    for (auto& v : weights.mutable_data()) v = rng.uniform(-1, 1);
    auto loss = [&] { return ops::sum(ops::mul(layer.forward(x, mask), weights)); };
    auto params = medkit::tensors_of(layer.params(""));
    params.push_back(x);
    EXPECT_LT(medkit::grad_check(loss, params), 1e-4);
}

TEST(Encode, OutputShapes) {
    Fixture f;
    Rng rng{6};
    model::Encoder enc{f.config, rng};
    auto out = enc.encode(medkit::encode("头痛发热", f.vocab, f.config.max_len));
    EXPECT_EQ(out.cls_vector.shape(), (medkit::Shape{f.config.hidden_dim}));
    EXPECT_EQ(out.token_reps.shape(), (medkit::Shape{f.config.max_len, f.config.hidden_dim}));
}

TEST(Encode, InvariantToPadContent) {
    Fixture f;
    Rng rng{7};
    model::Encoder enc{f.config, rng};
    auto seq = medkit::encode("头痛发热", f.vocab, f.config.max_len);
    auto base = enc.encode(seq);
    const std::size_t real = seq.real_length();
    Rng pick{8};
    for (int trial = 0; trial < 10; ++trial) {
        auto altered = seq;
        for (std::size_t i = real; i < altered.size(); ++i) {
            altered.ids[i] = pick.below(f.vocab.size());
        }
        // Also permute the pad ids among themselves.
        pick.shuffle(std::span{altered.ids}.subspan(real));
        auto out = enc.encode(altered);
        expect_near(out.cls_vector.data(), base.cls_vector.data(), 1e-9);
        expect_near(out.token_reps.data().subspan(0, real * f.config.hidden_dim),
                    base.token_reps.data().subspan(0, real * f.config.hidden_dim), 1e-9);
    }
}

TEST(Encode, DifferentInputsGiveDifferentCls) {
    Fixture f;
    Rng rng{9};
    model::Encoder enc{f.config, rng};
    auto a = enc.encode(medkit::encode("头痛发热", f.vocab, f.config.max_len)).cls_vector;
    auto b = enc.encode(medkit::encode("孩子咳嗽", f.vocab, f.config.max_len)).cls_vector;
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
    EXPECT_GT(diff, 1e-6);
}

TEST(MaskTokens, TinyRateMasksNothing) {
    Fixture f;
    Rng rng{10};
    auto seq = medkit::encode("头痛发热怎么办", f.vocab, 12);
    auto m = model::mask_tokens(seq, 1e-12, f.vocab.size(), rng);
    EXPECT_TRUE(m.positions.empty());
    EXPECT_EQ(m.corrupted.ids, seq.ids);
}

TEST(MaskTokens, NeverTouchesSpecialOrPaddedPositions) {
    Fixture f;
    Rng rng{11};
    auto seq = medkit::encode("头痛", f.vocab, 8);
    for (int i = 0; i < 200; ++i) {
        auto m = model::mask_tokens(seq, 0.9, f.vocab.size(), rng);
        for (auto p : m.positions) {
            EXPECT_TRUE(p == 1 || p == 2);
        }
    }
}

TEST(MaskTokens, SameSeedSameCorruption) {
    Fixture f;
    auto seq = medkit::encode("头痛发热怎么办", f.vocab, 12);
    Rng a{12}, b{12};
    auto x = model::mask_tokens(seq, 0.5, f.vocab.size(), a);
    auto y = model::mask_tokens(seq, 0.5, f.vocab.size(), b);
    EXPECT_EQ(x.corrupted.ids, y.corrupted.ids);
    EXPECT_EQ(x.positions, y.positions);
}

TEST(MaskTokens, SelectionRateAndCorruptionSplit) {
    Fixture f;
    Rng rng{13};
    std::string text(98, 'x');
    Vocab v = Vocab::build({"abcdefghijklmnopqrstuvwxyz"});
    text.assign(98, 'a');
    auto seq = medkit::encode(text, v, 100);
    std::size_t eligible = 0, selected = 0, masked = 0, random = 0, kept = 0;
    while (eligible < 100000) {
        auto m = model::mask_tokens(seq, 0.15, v.size(), rng);
        eligible += 98;
        selected += m.positions.size();
        for (auto k : m.kinds) {
            (k == model::Corruption::masked ? masked : k == model::Corruption::random_token ? random : kept)++;
        }
    }
    const double rate = static_cast<double>(selected) / static_cast<double>(eligible);
    EXPECT_GE(rate, 0.14);
    EXPECT_LE(rate, 0.16);
    EXPECT_NEAR(static_cast<double>(masked) / selected, 0.8, 0.02);
    EXPECT_NEAR(static_cast<double>(random) / selected, 0.1, 0.02);
    EXPECT_NEAR(static_cast<double>(kept) / selected, 0.1, 0.02);
}

model::MaskedSequence fixed_mask(const Fixture& f, const std::string& text, std::vector<std::size_t> positions) {
    model::MaskedSequence m;
    m.corrupted = medkit::encode(text, f.vocab, f.config.max_len);
    for (auto p : positions) {
        m.positions.push_back(p);
        m.original_ids.push_back(m.corrupted.ids[p]);
        m.corrupted.ids[p] = medkit::special::kMask;
        m.kinds.push_back(model::Corruption::masked);
    }
    return m;
}

TEST(MlmLoss, UniformModelGivesLogV) {
    Fixture f;
    Rng rng{14};
    model::Encoder enc{f.config, rng};
    for (auto& v : enc.token_embedding().mutable_data()) v = 0.0;
    auto loss = model::mlm_loss(enc, {fixed_mask(f, "头痛发热", {1, 3}), fixed_mask(f, "孩子咳嗽", {2})});
    ASSERT_TRUE(loss);
    EXPECT_NEAR(loss->item(), std::log(static_cast<double>(f.vocab.size())), 1e-12);
}

TEST(MlmLoss, ConfidentCorrectModelGivesZero) {
    Fixture f;
    Rng rng{15};
    model::Encoder enc{f.config, rng};
    auto item = fixed_mask(f, "头痛发热", {2});
    enc.mlm_bias().mutable_data()[item.original_ids[0]] = 1e3;
    auto loss = model::mlm_loss(enc, {item});
    ASSERT_TRUE(loss);
    EXPECT_LT(loss->item(), 1e-12);
}

TEST(MlmLoss, NothingMaskedIsSkipped) {
    Fixture f;
    Rng rng{16};
    model::Encoder enc{f.config, rng};
    EXPECT_FALSE(model::mlm_loss(enc, {fixed_mask(f, "头痛", {})}).has_value());
}

TEST(MlmLoss, FullEncoderGradientCheck) {
    Fixture f(8, 8, 2, 2);
    Rng rng{17};
    model::Encoder enc{f.config, rng};
    std::vector<model::MaskedSequence> batch{fixed_mask(f, "头痛发热", {1, 3}), fixed_mask(f, "咳嗽有痰", {2})};
    auto loss = [&] { return *model::mlm_loss(enc, batch); };
    EXPECT_LT(medkit::grad_check(loss, medkit::tensors_of(enc.params())), 1e-4);
}

TEST(Pretrain, LossHalvesOnTinyFixtureAndIsReproducible) {
    auto run = [] {
        Fixture f(12, 32, 1, 2);
        Rng rng{18};
        model::Encoder enc{f.config, rng};
        model::PretrainConfig cfg;
        cfg.epochs = 50;
        cfg.lr = 1e-2;
        cfg.batch_size = 1;
        cfg.seed = 3;
        auto outcome = model::pretrain(enc, f.vocab, kTexts, cfg);
        return outcome.epoch_loss;
    };
    auto losses = run();
    ASSERT_EQ(losses.size(), 50u);
    // Few masked tokens per epoch make single epochs noisy; compare 5-epoch means.
    const double initial = std::accumulate(losses.begin(), losses.begin() + 5, 0.0) / 5.0;
    const double final = std::accumulate(losses.end() - 5, losses.end(), 0.0) / 5.0;
    EXPECT_LT(final, 0.5 * initial);
    EXPECT_EQ(losses, run());
}

TEST(Pretrain, LearningRateRecordedInLog) {
    Fixture f(12, 8, 1, 1);
    Rng rng{19};
    model::Encoder enc{f.config, rng};
    model::TrainingLog history;
    model::PretrainConfig cfg;
    cfg.epochs = 2;
    model::pretrain(enc, f.vocab, kTexts, cfg, &history);
    ASSERT_EQ(history.records().size(), 2u);
    EXPECT_EQ(history.records()[0].lr, 5e-5);
}

TEST(Pretrain, EmptyCorpusThrows) {
    Fixture f;
    Rng rng{20};
    model::Encoder enc{f.config, rng};
    EXPECT_THROW(model::pretrain(enc, f.vocab, {}, {}), medkit::ConfigError);
}

}  // namespace
