#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "medkit/generator/decoder.hpp"
#include "medkit/numerics/gradcheck.hpp"

namespace {

using medkit::Rng;
using medkit::Tensor;
using medkit::TokenId;
using medkit::Vocab;
namespace gen = medkit::generator;
namespace kg = medkit::kgraph;
namespace special = medkit::special;

const std::vector<gen::QaPair> kQa{
    {"头痛发热怎么办", "多喝水注意休息"},   {"孩子咳嗽有痰", "可以拍背排痰"},   {"胃痛反酸", "少吃辛辣的食物"},
    {"膝盖扭伤肿胀", "先冰敷再热敷"},     {"失眠睡不着", "规律作息少熬夜"},   {"血压有点高", "低盐饮食按时服药"},
    {"皮肤起湿疹很痒", "注意保湿别抓挠"}, {"拉肚子好几次", "及时补液清淡饮食"},
};

const std::vector<std::string> kBackground{
    "感冒常见症状有发热咳嗽流涕", "高血压患者应低盐饮食", "糖尿病需要监测血糖",   "骨折后需要固定",
    "湿疹患者注意保湿",           "腹泻时要及时补液",     "失眠应规律作息",       "哮喘要远离过敏原",
    "胃炎患者少吃辛辣",           "发热可以物理降温",
};

Vocab fixture_vocab() {
    std::vector<std::string> all = kBackground;
    for (const auto& p : kQa) {
        all.push_back(p.question);
        all.push_back(p.answer);
    }
    return Vocab::build(all);
}

gen::DecoderConfig small(const Vocab& v, std::size_t hidden = 8, std::size_t context = 16) {
    gen::DecoderConfig c;
    c.vocab_size = v.size();
    c.hidden_dim = hidden;
    c.num_layers = 1;
    c.num_heads = 2;
    c.ffn_dim = 2 * hidden;
    c.context = context;
    c.max_gen_len = 24;
    return c;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t n, std::size_t v) {
    std::vector<TokenId> ids(n);
    for (auto& id : ids) id = rng.below(v);
    return ids;
}

TEST(DecoderConfigTest, Validation) {
    auto v = fixture_vocab();
    auto c = small(v);
    c.max_gen_len = 0;
    EXPECT_THROW(c.validate(), medkit::ConfigError);
    c = small(v);
    c.num_heads = 3;
    EXPECT_THROW(c.validate(), medkit::ConfigError);
}

TEST(Decoder, FutureEditsLeaveEarlierPositionsBitIdentical) {
    auto v = fixture_vocab();
    Rng rng{1};
    gen::Decoder d{small(v, 8, 12), rng};
    for (int trial = 0; trial < 50; ++trial) {
        auto ids = random_ids(rng, 12, v.size());
        const std::size_t j = 1 + rng.below(11);
        const Tensor a = d.logits(ids);
        ids[j] = (ids[j] + 1 + rng.below(v.size() - 1)) % v.size();
        const Tensor b = d.logits(ids);
        for (std::size_t i = 0; i < j; ++i) {
            for (std::size_t k = 0; k < v.size(); ++k) ASSERT_EQ(a.at(i, k), b.at(i, k)) << "row " << i;
        }
    }
}

TEST(Decoder, ZeroHeadIsUniform) {
    auto v = fixture_vocab();
    Rng rng{2};
    gen::Decoder d{small(v), rng};
    for (auto& x : d.out_w().mutable_data()) x = 0.0;
    const auto p = d.next_distribution(std::vector<TokenId>{special::kBos, 10, 11});
    for (double x : p) EXPECT_DOUBLE_EQ(x, 1.0 / static_cast<double>(v.size()));
}

TEST(Decoder, SlidingWindowKeepsLastK) {
    auto v = fixture_vocab();
    Rng rng{3};
    gen::Decoder d{small(v, 8, 6), rng};
    auto ids = random_ids(rng, 15, v.size());
    const auto w = d.window(ids);
    ASSERT_EQ(w.size(), 6u);
    EXPECT_EQ(w.data(), ids.data() + 9);
    const std::vector<TokenId> tail(ids.end() - 6, ids.end());
    EXPECT_EQ(d.next_logits(ids), d.next_logits(tail));
    EXPECT_THROW(d.logits(ids), medkit::DimensionError);
}

TEST(Decoder, GradientCheck) {
    auto v = fixture_vocab();
    Rng rng{4};
    gen::Decoder d{small(v, 4, 8), rng};
    const auto ids = random_ids(rng, 7, v.size());
    const double err =
        medkit::grad_check([&] { return gen::lm_loss(d, ids); }, medkit::tensors_of(d.params()));
    EXPECT_LT(err, 1e-4);
}

TEST(LmLoss, UniformModelGivesLogV) {
    auto v = fixture_vocab();
    Rng rng{5};
    gen::Decoder d{small(v), rng};
    for (auto& x : d.out_w().mutable_data()) x = 0.0;
    const auto ids = random_ids(rng, 9, v.size());
    EXPECT_NEAR(gen::lm_loss(d, ids).item(), std::log(double(v.size())), 1e-12);
}

TEST(LmLoss, ConfidentCorrectModelNearZero) {
    auto v = fixture_vocab();
    Rng rng{6};
    gen::Decoder d{small(v), rng};
    for (auto& x : d.out_w().mutable_data()) x = 0.0;
    d.out_b().mutable_data()[12] = 60.0;
    const std::vector<TokenId> ids(6, 12);
    EXPECT_LT(gen::lm_loss(d, ids).item(), 1e-20);
}

TEST(LmLoss, RejectsDegenerateInputs) {
    auto v = fixture_vocab();
    Rng rng{7};
    gen::Decoder d{small(v), rng};
    EXPECT_THROW(gen::lm_loss(d, std::vector<TokenId>{5}), medkit::DimensionError);
    EXPECT_THROW(gen::lm_loss(d, std::vector<TokenId>{5, 9, 10}, {true, false, false}), medkit::ConfigError);
}

std::vector<double> loss_and_grads(const gen::Decoder& d, const std::vector<TokenId>& inputs,
                                   const std::vector<TokenId>& targets, const std::vector<bool>& selected) {
    auto params = d.params();
    medkit::zero_grads(params);
    const Tensor loss = gen::lm_loss(d, inputs, targets, selected);
    medkit::backward(loss);
    std::vector<double> flat{loss.item()};
    for (const auto& p : params) flat.insert(flat.end(), p.tensor.grad().begin(), p.tensor.grad().end());
    return flat;
}

TEST(LmLoss, QuestionTargetEditsLeaveGradientsBitIdentical) {
    auto v = fixture_vocab();
    Rng rng{8};
    gen::Decoder d{small(v, 8, 32), rng};
    for (const auto& pair : kQa) {
        auto ex = gen::qa_example(pair, v, nullptr, {}, d.config().context);
        ASSERT_TRUE(ex);
        const std::vector<TokenId> inputs(ex->ids.begin(), ex->ids.end() - 1);
        std::vector<TokenId> targets(ex->ids.begin() + 1, ex->ids.end());
        const std::vector<bool> selected(ex->loss_mask.begin() + 1, ex->loss_mask.end());
        const auto base = loss_and_grads(d, inputs, targets, selected);
        for (std::size_t t = 0; t < targets.size(); ++t) {
            if (!selected[t]) targets[t] = rng.below(v.size());
        }
        EXPECT_EQ(loss_and_grads(d, inputs, targets, selected), base);
        // Editing an answer target does move the gradients.
        const auto last = targets.size() - 1;
        targets[last] = (targets[last] + 1) % v.size();
        EXPECT_NE(loss_and_grads(d, inputs, targets, selected), base);
    }
}

TEST(QaExample, LayoutAndMask) {
    auto v = fixture_vocab();
    auto g = []() {
        std::istringstream in(R"({"head":"头痛","relation":"就诊科室","tail":"神经内科"})");
        return kg::load_triples(in);
    }();
    auto ex = gen::qa_example(kQa[0], v, &g, {}, 64);
    ASSERT_TRUE(ex);
    EXPECT_EQ(ex->ids.front(), special::kBos);
    EXPECT_EQ(ex->ids.back(), special::kEos);
    const std::size_t answer_len = medkit::utf8::length(kQa[0].answer);
    std::size_t in_loss = 0;
    for (bool b : ex->loss_mask) in_loss += b;
    EXPECT_EQ(in_loss, answer_len + 1);
    for (std::size_t t = ex->ids.size() - answer_len - 1; t < ex->ids.size(); ++t) EXPECT_TRUE(ex->loss_mask[t]);
    // The supplement text made it into the context.
    EXPECT_GT(ex->ids.size(), 2 + medkit::utf8::length(kQa[0].question) + 1 + answer_len + 1);
    EXPECT_FALSE(gen::qa_example({"问题", std::string(80, 'a')}, v, nullptr, {}, 16));
}

TEST(PretrainLm, LossDropsAndIsReproducible) {
    auto v = fixture_vocab();
    gen::LmTrainConfig cfg;
    cfg.epochs = 100;
    cfg.lr = 1e-2;
    cfg.batch_size = 2;
    cfg.seed = 3;
    auto run = [&] {
        Rng rng{11};
        gen::Decoder d{small(v, 16, 20), rng};
        auto out = gen::pretrain_lm(d, v, kBackground, cfg);
        return std::make_pair(out, gen::perplexity(d, v, kBackground));
    };
    auto [a, ppl_a] = run();
    auto [b, ppl_b] = run();
    ASSERT_FALSE(a.diverged);
    EXPECT_LT(a.epoch_loss.back(), 0.3 * a.epoch_loss.front());
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
    EXPECT_EQ(ppl_a, ppl_b);
}

TEST(PretrainLm, EmptyCorpusRejected) {
    auto v = fixture_vocab();
    Rng rng{1};
    gen::Decoder d{small(v), rng};
    EXPECT_THROW(gen::pretrain_lm(d, v, {}, {}), medkit::ConfigError);
}

TEST(Perplexity, UniformModelEqualsVocabSize) {
    auto v = fixture_vocab();
    Rng rng{12};
    gen::Decoder d{small(v, 8, 24), rng};
    for (auto& x : d.out_w().mutable_data()) x = 0.0;
    EXPECT_NEAR(gen::perplexity(d, v, kBackground), double(v.size()), 1e-9);
}

TEST(Perplexity, FallsDuringTraining) {
    auto v = fixture_vocab();
    Rng rng{13};
    gen::Decoder d{small(v, 16, 20), rng};
    gen::LmTrainConfig cfg;
    cfg.epochs = 10;
    cfg.lr = 1e-2;
    cfg.batch_size = 2;
    double prev = gen::perplexity(d, v, kBackground);
    for (int round = 0; round < 3; ++round) {
        cfg.seed = static_cast<std::uint64_t>(round);
        gen::pretrain_lm(d, v, kBackground, cfg);
        const double now = gen::perplexity(d, v, kBackground);
        EXPECT_LT(now, prev);
        prev = now;
    }
}

TEST(ChooseToken, GreedyAndLowTemperatureAgree) {
    Rng rng{14};
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> z(12);
        for (auto& x : z) x = rng.normal(0.0, 3.0);
        gen::GenerateConfig greedy;
        gen::GenerateConfig cold;
        cold.strategy = gen::Strategy::temperature;
        cold.temperature = 1e-6;
        EXPECT_EQ(gen::choose_token(z, greedy, rng), gen::choose_token(z, cold, rng));
        gen::GenerateConfig top1;
        top1.strategy = gen::Strategy::top_k;
        top1.top_k = 1;
        EXPECT_EQ(gen::choose_token(z, greedy, rng), gen::choose_token(z, top1, rng));
    }
}

TEST(ChooseToken, TopKNeverLeavesTheTopK) {
    Rng rng{15};
    const std::vector<double> z{0.1, 3.0, -1.0, 2.5, 2.9, 0.0};
    gen::GenerateConfig c;
    c.strategy = gen::Strategy::top_k;
    c.top_k = 3;
    std::vector<std::size_t> seen(z.size(), 0);
    for (int i = 0; i < 2000; ++i) ++seen[gen::choose_token(z, c, rng)];
    EXPECT_EQ(seen[0] + seen[2] + seen[5], 0u);
    EXPECT_GT(seen[1], 0u);
    EXPECT_GT(seen[3], 0u);
    EXPECT_GT(seen[4], 0u);
    c.top_k = 0;
    EXPECT_THROW(gen::choose_token(z, c, rng), medkit::ConfigError);
}

TEST(Generate, GreedyIsPureAndLengthCapped) {
    auto v = fixture_vocab();
    Rng rng{16};
    gen::Decoder d{small(v, 8, 32), rng};
    auto a = gen::generate(d, v, "头痛发热", nullptr);
    auto b = gen::generate(d, v, "头痛发热", nullptr);
    EXPECT_EQ(a.answer_ids, b.answer_ids);
    gen::GenerateConfig one;
    one.max_gen_len = 1;
    EXPECT_LE(gen::generate(d, v, "头痛发热", nullptr, one).answer_ids.size(), 1u);
    gen::GenerateConfig hot;
    hot.strategy = gen::Strategy::temperature;
    hot.temperature = 2.0;
    hot.seed = 5;
    EXPECT_EQ(gen::generate(d, v, "头痛", nullptr, hot).answer_ids,
              gen::generate(d, v, "头痛", nullptr, hot).answer_ids);
}

gen::LmTrainConfig qa_config() {
    gen::LmTrainConfig cfg;
    cfg.epochs = 150;
    cfg.lr = 5e-3;
    cfg.batch_size = 1;
    cfg.seed = 2;
    return cfg;
}

std::size_t reproduced(const gen::Decoder& d, const Vocab& v, const kg::KnowledgeGraph* g) {
    std::size_t hits = 0;
    for (const auto& p : kQa) hits += gen::generate(d, v, p.question, g).answer == p.answer;
    return hits;
}

TEST(FinetuneQa, MemorizesEightPairs) {
    auto v = fixture_vocab();
    auto g = kg::load_triples(std::filesystem::path{MEDKIT_DATA} / "kg_demo.jsonl");
    Rng rng{17};
    gen::Decoder d{small(v, 32, 64), rng};
    auto out = gen::finetune_qa(d, v, kQa, &g, qa_config());
    ASSERT_FALSE(out.diverged);
    EXPECT_EQ(out.skipped, 0u);
    EXPECT_GE(reproduced(d, v, &g), 7u);
}

TEST(FinetuneQa, TrainsWithoutRetrieval) {
    auto v = fixture_vocab();
    Rng rng{18};
    gen::Decoder d{small(v, 16, 32), rng};
    auto cfg = qa_config();
    cfg.epochs = 20;
    gen::QaOptions no_input;
    no_input.use_supplement = false;
    auto out = gen::finetune_qa(d, v, kQa, nullptr, cfg, no_input);
    EXPECT_LT(out.epoch_loss.back(), out.epoch_loss.front());
}

TEST(FinetuneQa, CountsSkippedPairs) {
    auto v = fixture_vocab();
    Rng rng{19};
    gen::Decoder d{small(v, 8, 12), rng};
    std::vector<gen::QaPair> pairs{kQa[0], {"头痛", "多喝水注意休息多喝水注意休息"}};
    auto cfg = qa_config();
    cfg.epochs = 1;
    auto out = gen::finetune_qa(d, v, pairs, nullptr, cfg);
    EXPECT_EQ(out.skipped, 1u);
}

}  // namespace
