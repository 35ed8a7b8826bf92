#include <set>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "medkit/corpus/dialogue.hpp"

namespace {

namespace corpus = medkit::corpus;
using corpus::DialogueSample;

const std::string kFixture = std::string(MEDKIT_FIXTURES) + "/corpus_20.jsonl";

DialogueSample qa(std::string q, std::optional<std::string> a, std::optional<std::string> label = std::nullopt) {
    DialogueSample s;
    s.question = std::move(q);
    s.answer = std::move(a);
    s.label_coarse = std::move(label);
    return s;
}

TEST(Ingest, ValidThreeLines) {
    std::istringstream in(
        R"({"question":"q1","answer":"a","label_coarse":"A","label_fine":null,"age":3,"gender":"M"})"
        "\n"
        R"({"question":"q2","answer":null,"label_coarse":null,"label_fine":"x","age":null,"gender":"F"})"
        "\n"
        R"({"question":"q3"})"
        "\n");
    auto r = corpus::ingest(in);
    EXPECT_EQ(r.samples.size(), 3u);
    EXPECT_TRUE(r.rejects.empty());
    EXPECT_EQ(r.samples[0].age, 3);
    EXPECT_EQ(r.samples[1].gender, corpus::Gender::female);
    EXPECT_FALSE(r.samples[1].answer.has_value());
}

TEST(Ingest, MalformedLineIsReportedWithLineNumber) {
    std::istringstream in(R"({"question":"a"})"
                          "\n"
                          R"({"question":"b"})"
                          "\n"
                          "{not json\n"
                          R"({"question":"c"})"
                          "\n");
    auto r = corpus::ingest(in);
    EXPECT_EQ(r.samples.size(), 3u);
    ASSERT_EQ(r.rejects.size(), 1u);
    EXPECT_EQ(r.rejects[0].line, 3u);
}

TEST(Ingest, SchemaViolationsAreRejects) {
    std::istringstream in(R"({"question":"a","gender":"X"})"
                          "\n"
                          R"({"question":"b","age":-4})"
                          "\n"
                          R"({"question":"c"})"
                          "\n"
                          R"({"question":"d"})"
                          "\n");
    auto r = corpus::ingest(in);
    EXPECT_EQ(r.samples.size(), 2u);
    EXPECT_EQ(r.rejects.size(), 2u);
}

TEST(Ingest, EmptyFileGivesEmptyDataset) {
    std::istringstream in("");
    auto r = corpus::ingest(in);
    EXPECT_TRUE(r.samples.empty());
}

TEST(Ingest, MostlyMalformedIsAFormatError) {
    std::istringstream in("x\ny\n{\"question\":\"a\"}\n");
    EXPECT_THROW(corpus::ingest(in), medkit::FormatError);
}

TEST(Ingest, MissingFileIsAnIoError) {
    EXPECT_THROW(corpus::ingest(std::filesystem::path("/nonexistent/file.jsonl")), medkit::IoError);
}

TEST(Clean, NineCharacterQuestionRemoved) {
    auto r = corpus::clean({qa("一二三四五六七八九", "一二三四五六七八九十")});
    EXPECT_TRUE(r.kept.empty());
    ASSERT_EQ(r.removed.size(), 1u);
}

TEST(Clean, ExactlyTenCharactersKept) {
    auto r = corpus::clean({qa("一二三四五六七八九十", "一二三四五六七八九十")});
    EXPECT_EQ(r.kept.size(), 1u);
}

TEST(Clean, MissingAnswerRemovedInQaMode) {
    auto r = corpus::clean({qa("一二三四五六七八九十", std::nullopt)});
    EXPECT_TRUE(r.kept.empty());
    auto triage = corpus::clean({qa("一二三四五六七八九十", std::nullopt)}, {.require_answer = false});
    EXPECT_EQ(triage.kept.size(), 1u);
}

TEST(Clean, Idempotent) {
    auto data = corpus::ingest(std::filesystem::path(kFixture)).samples;
    auto once = corpus::clean(data).kept;
    auto twice = corpus::clean(once).kept;
    EXPECT_EQ(once, twice);
}

TEST(Stats, HandMeanOfThreeQuestions) {
    auto st = corpus::stats({qa("一二三四五六七八九十", std::nullopt), qa("一二三四五六七八九十一二", std::nullopt),
                             qa("一二三四五六七八九十一二三四", std::nullopt)},
                            {});
    EXPECT_DOUBLE_EQ(st.avg_question_length, 12.0);
    EXPECT_EQ(st.total_count, 3u);
    EXPECT_EQ(st.train_count, 3u);
}

TEST(Stats, FixtureMatchesHandCounts) {
    auto data = corpus::ingest(std::filesystem::path(kFixture)).samples;
    auto kept = corpus::clean(data).kept;
    std::vector<bool> is_test(kept.size(), false);
    is_test[0] = is_test[1] = true;
    auto st = corpus::stats(kept, is_test);
    EXPECT_EQ(st.total_count, 14u);
    EXPECT_EQ(st.train_count, 12u);
    EXPECT_EQ(st.test_count, 2u);
    EXPECT_NEAR(st.avg_question_length, 202.0 / 14.0, 1e-9);
    EXPECT_NEAR(st.avg_answer_length, 201.0 / 14.0, 1e-9);
    EXPECT_EQ(st.category_count, 4u);
    EXPECT_EQ(st.category_histogram.at("内科"), 6u);
    EXPECT_EQ(st.category_histogram.at("儿科"), 2u);
    EXPECT_EQ(st.age_histogram.at("30-39"), 4u);
    EXPECT_EQ(st.age_histogram.at("0-9"), 2u);
    EXPECT_EQ(st.male_count, 6u);
    EXPECT_EQ(st.female_count, 7u);
}

std::vector<DialogueSample> labeled(std::size_t n_a, std::size_t n_b) {
    std::vector<DialogueSample> out;
    for (std::size_t i = 0; i < n_a + n_b; ++i) {
        out.push_back(qa("sample number " + std::to_string(i), "answer text here", i < n_a ? "A" : "B"));
    }
    return out;
}

TEST(SplitTest, HundredSamplesGive85And15) {
    std::vector<DialogueSample> data;
    for (int i = 0; i < 100; ++i) {
        data.push_back(qa("question " + std::to_string(i), std::nullopt));
    }
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto s = corpus::split(data, 0.15, seed);
        EXPECT_EQ(s.train.size(), 85u);
        EXPECT_EQ(s.test.size(), 15u);
    }
}

TEST(SplitTest, SameSeedSameSplit) {
    auto data = labeled(30, 20);
    EXPECT_EQ(corpus::split(data, 0.2, 9).is_test, corpus::split(data, 0.2, 9).is_test);
}

TEST(SplitTest, StratifiedTwoClassFixture) {
    auto s = corpus::split(labeled(10, 10), 0.15, 4);
    std::size_t a = 0, b = 0;
    for (const auto& x : s.test) {
        (*x.label_coarse == "A" ? a : b)++;
    }
    EXPECT_GE(a, 1u);
    EXPECT_LE(a, 2u);
    EXPECT_GE(b, 1u);
    EXPECT_LE(b, 2u);
    EXPECT_EQ(s.test.size(), 3u);
}

TEST(SplitTest, SingletonClassStaysInTrain) {
    auto data = labeled(10, 1);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto s = corpus::split(data, 0.5, seed);
        for (const auto& x : s.test) {
            EXPECT_EQ(*x.label_coarse, "A");
        }
    }
}

TEST(SplitTest, PartitionsTheInput) {
    auto data = labeled(13, 7);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto s = corpus::split(data, 0.3, seed);
        std::multiset<std::string> all, parts;
        for (const auto& x : data) all.insert(x.question);
        for (const auto& x : s.train) parts.insert(x.question);
        for (const auto& x : s.test) parts.insert(x.question);
        EXPECT_EQ(all, parts);
        EXPECT_EQ(s.train.size() + s.test.size(), data.size());
    }
}

TEST(SplitTest, FractionOutOfRangeThrows) {
    EXPECT_THROW(corpus::split(labeled(2, 2), 0.0, 1), medkit::ConfigError);
    EXPECT_THROW(corpus::split(labeled(2, 2), 1.0, 1), medkit::ConfigError);
}

TEST(SplitTest, PaperScaleProportion) {
    // 373,686 + 65,944 = 439,630
    EXPECT_EQ(corpus::test_size(439630, 0.15), 65944u);
}

std::vector<DialogueSample> with_counts(std::initializer_list<std::pair<const char*, int>> counts) {
    std::vector<DialogueSample> out;
    for (auto [label, n] : counts) {
        for (int i = 0; i < n; ++i) {
            out.push_back(qa("q", std::nullopt, label));
        }
    }
    return out;
}

TEST(SmallSample, DropsHighDataCategories) {
    auto r = corpus::make_small_sample(with_counts({{"A", 100}, {"B", 5}, {"C", 3}}), 10);
    EXPECT_EQ(r.samples.size(), 8u);
    EXPECT_EQ(r.categories, (std::vector<std::string>{"B", "C"}));
}

TEST(SmallSample, InfiniteThresholdIsIdentity) {
    auto data = with_counts({{"A", 100}, {"B", 5}});
    auto r = corpus::make_small_sample(data, std::numeric_limits<std::size_t>::max());
    EXPECT_EQ(r.samples, data);
}

TEST(SmallSample, ZeroThresholdThrows) {
    EXPECT_THROW(corpus::make_small_sample(with_counts({{"A", 3}}), 0), medkit::ConfigError);
}

TEST(SmallSample, DefaultThresholdIsTwiceMedian) {
    EXPECT_EQ(corpus::default_small_sample_threshold(with_counts({{"A", 100}, {"B", 5}, {"C", 3}}),
                                                     corpus::Granularity::coarse),
              10u);
}

}  // namespace
