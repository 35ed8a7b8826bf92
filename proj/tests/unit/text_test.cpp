#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "medkit/numerics/rng.hpp"
#include "medkit/text/vocab.hpp"

namespace {

using medkit::EncodeMode;
using medkit::Vocab;
namespace special = medkit::special;

TEST(Utf8, DecodesAndEncodesChinese) {
    const std::string s = "头痛a怎么办";
    auto cps = medkit::utf8::decode(s);
    EXPECT_EQ(cps.size(), 6u);
    EXPECT_EQ(medkit::utf8::encode(cps), s);
    EXPECT_EQ(medkit::utf8::length(s), 6u);
}

TEST(Utf8, InvalidBytesBecomeReplacementCharacters) {
    auto cps = medkit::utf8::decode(std::string("a\xff") + "b");
    ASSERT_EQ(cps.size(), 3u);
    EXPECT_EQ(cps[1], U'�');
}

TEST(BuildVocab, CountsCharacters) {
    auto v = Vocab::build({"aab"}, 1);
    EXPECT_EQ(v.size(), 9u);
    EXPECT_EQ(v.token(7), "a");
    EXPECT_EQ(v.token(8), "b");
}

TEST(BuildVocab, MinFrequencyExcludes) {
    auto v = Vocab::build({"aab"}, 3);
    EXPECT_EQ(v.size(), special::kCount);
}

TEST(BuildVocab, DeterministicOrderingFrequencyThenCodePoint) {
    auto a = Vocab::build({"cbbaa", "dc"}, 1);
    auto b = Vocab::build({"cbbaa", "dc"}, 1);
    EXPECT_EQ(a, b);
    // a:2 b:2 c:2 d:1 -> a, b, c by code point, then d
    EXPECT_EQ(a.token(7), "a");
    EXPECT_EQ(a.token(9), "c");
    EXPECT_EQ(a.token(10), "d");
}

TEST(BuildVocab, EmptyCorpusThrows) { EXPECT_THROW(Vocab::build({}, 1), medkit::ConfigError); }

TEST(Encode, EmptyInputEncoderMode) {
    auto v = Vocab::build({"ab"});
    auto seq = medkit::encode("", v, 5);
    EXPECT_EQ(seq.ids, (std::vector<medkit::TokenId>{special::kCls, special::kSep, 0, 0, 0}));
    EXPECT_EQ(seq.attention_mask, (std::vector<bool>{true, true, false, false, false}));
}

TEST(Encode, TruncatesToMaxLen) {
    auto v = Vocab::build({"ab"});
    auto seq = medkit::encode("ab", v, 3);
    EXPECT_EQ(seq.ids, (std::vector<medkit::TokenId>{special::kCls, v.id_of(U'a'), special::kSep}));
    EXPECT_EQ(seq.original_length, 2u);
}

TEST(Encode, DecoderModeUsesBosEosWithoutPadding) {
    auto v = Vocab::build({"ab"});
    auto seq = medkit::encode("ba", v, 10, EncodeMode::decoder);
    EXPECT_EQ(seq.ids, (std::vector<medkit::TokenId>{special::kBos, v.id_of(U'b'), v.id_of(U'a'), special::kEos}));
}

TEST(Encode, UnknownCharactersMapToUnk) {
    auto v = Vocab::build({"ab"});
    auto seq = medkit::encode("az", v, 6);
    EXPECT_EQ(seq.ids[2], special::kUnk);
}

TEST(Encode, MaxLenBelowThreeIsRejected) {
    auto v = Vocab::build({"ab"});
    EXPECT_THROW(medkit::encode("a", v, 2), medkit::ConfigError);
}

TEST(Decode, Examples) {
    auto v = Vocab::build({"ab"});
    const auto a = v.id_of(U'a');
    const auto b = v.id_of(U'b');
    std::vector<medkit::TokenId> x{special::kCls, a, b, special::kSep, special::kPad};
    EXPECT_EQ(medkit::decode(x, v), "ab");
    std::vector<medkit::TokenId> y{special::kBos, a, special::kEos, b};
    EXPECT_EQ(medkit::decode(y, v), "a");
    EXPECT_EQ(medkit::decode(std::vector<medkit::TokenId>{}, v), "");
    std::vector<medkit::TokenId> bad{99};
    EXPECT_THROW(medkit::decode(bad, v), medkit::ConfigError);
}

// Round trip and length contracts on random in-vocabulary strings.
TEST(EncodeProperty, RoundTripAndLengthContracts) {
    const std::u32string alphabet = U"头痛发热咳嗽怎么办医生孩子abc";
    auto v = Vocab::build({medkit::utf8::encode(alphabet)});
    medkit::Rng rng{17};
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t max_len = 3 + rng.below(20);
        const std::size_t len = rng.below(30);
        std::u32string s;
        for (std::size_t i = 0; i < len; ++i) {
            s.push_back(alphabet[rng.below(alphabet.size())]);
        }
        const auto text = medkit::utf8::encode(s);
        auto enc = medkit::encode(text, v, max_len);
        ASSERT_EQ(enc.ids.size(), max_len);
        ASSERT_EQ(enc.attention_mask.size(), max_len);
        auto dec = medkit::encode(text, v, max_len, EncodeMode::decoder);
        ASSERT_LE(dec.ids.size(), max_len);
        if (len < max_len - 2) {
            EXPECT_EQ(medkit::decode(enc.ids, v), text);
            EXPECT_EQ(medkit::decode(dec.ids, v), text);
        }
    }
}

TEST(VocabFile, SaveLoadRoundTripIncludingEscapes) {
    auto v = Vocab::build({"头痛\n\\a\tb"});
    const auto path = std::filesystem::temp_directory_path() / "medkit_vocab_test.txt";
    v.save(path);
    auto loaded = Vocab::load(path);
    EXPECT_EQ(loaded, v);
    std::filesystem::remove(path);
}

TEST(VocabFile, RejectsMissingHeader) {
    const auto path = std::filesystem::temp_directory_path() / "medkit_vocab_bad.txt";
    {
        std::ofstream os(path);
        os << "a\nb\n";
    }
    EXPECT_THROW(Vocab::load(path), medkit::FormatError);
    std::filesystem::remove(path);
}

}  // namespace
