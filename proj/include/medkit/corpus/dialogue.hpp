#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/log.hpp"
#include "medkit/numerics/rng.hpp"
#include "medkit/text/utf8.hpp"

namespace medkit::corpus {

enum class Gender { male, female };

struct DialogueSample {
    std::string question;
    std::optional<std::string> answer;
    std::optional<std::string> label_coarse;
    std::optional<std::string> label_fine;
    std::optional<int> age;
    std::optional<Gender> gender;

    bool operator==(const DialogueSample&) const = default;
};

enum class Granularity { coarse, fine };

inline const std::optional<std::string>& label_of(const DialogueSample& s, Granularity g) {
    return g == Granularity::coarse ? s.label_coarse : s.label_fine;
}

inline nlohmann::json to_json(const DialogueSample& s) {
    auto opt = [](const auto& v) -> nlohmann::json { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["question"] = s.question;
    j["answer"] = opt(s.answer);
    j["label_coarse"] = opt(s.label_coarse);
    j["label_fine"] = opt(s.label_fine);
    j["age"] = opt(s.age);
    j["gender"] = s.gender ? nlohmann::json(*s.gender == Gender::male ? "M" : "F") : nlohmann::json(nullptr);
    return j;
}

// Throws FormatError with a human-readable reason.
inline DialogueSample from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw FormatError("line is not a JSON object");
    }
    auto opt_string = [&](const char* key) -> std::optional<std::string> {
        if (!j.contains(key) || j[key].is_null()) {
            return std::nullopt;
        }
        if (!j[key].is_string()) {
            throw FormatError(std::string("field '") + key + "' must be a string or null");
        }
        return j[key].get<std::string>();
    };
    DialogueSample s;
    if (!j.contains("question") || !(j["question"].is_string() || j["question"].is_null())) {
        throw FormatError("field 'question' missing or not a string");
    }
    s.question = j["question"].is_null() ? std::string{} : j["question"].get<std::string>();
    s.answer = opt_string("answer");
    s.label_coarse = opt_string("label_coarse");
    s.label_fine = opt_string("label_fine");
    if (j.contains("age") && !j["age"].is_null()) {
        if (!j["age"].is_number_integer() || j["age"].get<long long>() < 0) {
            throw FormatError("field 'age' must be a non-negative integer or null");
        }
        s.age = static_cast<int>(j["age"].get<long long>());
    }
    if (auto g = opt_string("gender")) {
        if (*g == "M") {
            s.gender = Gender::male;
        } else if (*g == "F") {
            s.gender = Gender::female;
        } else {
            throw FormatError("field 'gender' must be \"M\", \"F\" or null");
        }
    }
    return s;
}

struct Reject {
    std::size_t line = 0;  // 1-based
    std::string reason;
};

struct IngestResult {
    std::vector<DialogueSample> samples;
    std::vector<Reject> rejects;
};

// Reads one JSON object per line. Blank lines are skipped; malformed lines are
// reported. More than half the non-blank lines malformed is a format error.
inline IngestResult ingest(std::istream& in) {
    IngestResult out;
    std::string line;
    std::size_t lineno = 0;
    std::size_t nonblank = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        ++nonblank;
        try {
            out.samples.push_back(from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            out.rejects.push_back({lineno, std::string("invalid JSON: ") + e.what()});
        } catch (const FormatError& e) {
            out.rejects.push_back({lineno, e.what()});
        }
    }
    if (nonblank == 0) {
        log().warn("ingest: input has no records");
    }
    if (nonblank > 0 && out.rejects.size() * 2 > nonblank) {
        throw FormatError("more than half of the lines are malformed (" + std::to_string(out.rejects.size()) +
                          " of " + std::to_string(nonblank) + ")");
    }
    return out;
}

inline IngestResult ingest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    return ingest(in);
}

inline void write_jsonl(std::ostream& os, const std::vector<DialogueSample>& samples) {
    for (const auto& s : samples) {
        os << to_json(s).dump() << '\n';
    }
}

inline void write_rejects(std::ostream& os, const std::vector<Reject>& rejects) {
    for (const auto& r : rejects) {
        os << nlohmann::json{{"line", r.line}, {"reason", r.reason}}.dump() << '\n';
    }
}

// Fields shorter than this many characters are dropped by clean().
inline constexpr std::size_t kMinFieldChars = 10;

struct CleanOptions {
    // QA mode: an answer is required and its length is checked too.
    bool require_answer = true;
};

struct Removal {
    std::size_t index = 0;  // position in the input
    std::string reason;
};

struct CleanResult {
    std::vector<DialogueSample> kept;
    std::vector<Removal> removed;
};

inline CleanResult clean(const std::vector<DialogueSample>& samples, CleanOptions options = {}) {
    CleanResult out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        std::string reason;
        if (s.question.empty()) {
            reason = "missing question";
        } else if (options.require_answer && (!s.answer || s.answer->empty())) {
            reason = "missing answer";
        } else if (utf8::length(s.question) < kMinFieldChars) {
            reason = "question shorter than 10 characters";
        } else if (options.require_answer && utf8::length(*s.answer) < kMinFieldChars) {
            reason = "answer shorter than 10 characters";
        }
        if (reason.empty()) {
            out.kept.push_back(s);
        } else {
            out.removed.push_back({i, std::move(reason)});
        }
    }
    return out;
}

struct DatasetStats {
    std::size_t total_count = 0;
    std::size_t train_count = 0;
    std::size_t test_count = 0;
    double avg_question_length = 0.0;
    double avg_answer_length = 0.0;
    std::size_t category_count = 0;
    std::map<std::string, std::size_t> category_histogram;
    std::map<std::string, std::size_t> age_histogram;
    std::size_t male_count = 0;
    std::size_t female_count = 0;
};

// Decade bucket label for the age histogram, e.g. 37 -> "30-39".
inline std::string age_bucket(int age) {
    const int lo = (age / 10) * 10;
    return std::to_string(lo) + "-" + std::to_string(lo + 9);
}

// `is_test[i]` marks sample i as belonging to the test split; an empty vector
// means everything counts as training data.
inline DatasetStats stats(const std::vector<DialogueSample>& samples, const std::vector<bool>& is_test,
                          Granularity granularity = Granularity::coarse) {
    if (!is_test.empty() && is_test.size() != samples.size()) {
        throw ConfigError("split assignment length does not match the dataset");
    }
    DatasetStats st;
    st.total_count = samples.size();
    std::size_t q_chars = 0;
    std::size_t a_chars = 0;
    std::size_t answers = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (!is_test.empty() && is_test[i]) {
            ++st.test_count;
        } else {
            ++st.train_count;
        }
        q_chars += utf8::length(s.question);
        if (s.answer) {
            a_chars += utf8::length(*s.answer);
            ++answers;
        }
        if (const auto& label = label_of(s, granularity)) {
            ++st.category_histogram[*label];
        }
        if (s.age) {
            ++st.age_histogram[age_bucket(*s.age)];
        }
        if (s.gender) {
            ++(*s.gender == Gender::male ? st.male_count : st.female_count);
        }
    }
    st.category_count = st.category_histogram.size();
    if (!samples.empty()) {
        st.avg_question_length = static_cast<double>(q_chars) / static_cast<double>(samples.size());
    }
    if (answers > 0) {
        st.avg_answer_length = static_cast<double>(a_chars) / static_cast<double>(answers);
    }
    return st;
}

inline nlohmann::json to_json(const DatasetStats& st) {
    return {{"total_count", st.total_count},
            {"train_count", st.train_count},
            {"test_count", st.test_count},
            {"avg_question_length", st.avg_question_length},
            {"avg_answer_length", st.avg_answer_length},
            {"category_count", st.category_count},
            {"category_histogram", st.category_histogram},
            {"age_histogram", st.age_histogram},
            {"gender_counts", {{"M", st.male_count}, {"F", st.female_count}}}};
}

struct Split {
    std::vector<DialogueSample> train;
    std::vector<DialogueSample> test;
    std::vector<bool> is_test;  // aligned with the input order
};

// Test-set size for n samples: floor(n * fraction), guarded against the
// representation error of products such as 100 * 0.15.
inline std::size_t test_size(std::size_t n, double fraction) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction + 1e-9));
}

// Seeded shuffle split. When every sample carries a label of the requested
// granularity the split is stratified: the test quota is shared across classes
// by largest remainder, so each class lands within one sample of its
// proportional share. Singleton classes stay in train.
inline Split split(const std::vector<DialogueSample>& samples, double test_fraction, std::uint64_t seed,
                   Granularity granularity = Granularity::coarse) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("test fraction must lie strictly between 0 and 1");
    }
    Rng rng{seed};
    const std::size_t n = samples.size();
    std::vector<bool> is_test(n, false);
    const bool labeled = n > 0 && std::all_of(samples.begin(), samples.end(), [&](const auto& s) {
                             return label_of(s, granularity).has_value();
                         });
    if (!labeled) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        rng.shuffle(std::span{order});
        for (std::size_t k = 0; k < test_size(n, test_fraction); ++k) {
            is_test[order[k]] = true;
        }
    } else {
        std::map<std::string, std::vector<std::size_t>> by_class;
        for (std::size_t i = 0; i < n; ++i) {
            by_class[*label_of(samples[i], granularity)].push_back(i);
        }
        std::vector<std::pair<std::string, std::vector<std::size_t>>> eligible;
        std::size_t eligible_n = 0;
        for (auto& [label, idx] : by_class) {
            if (idx.size() < 2) {
                log().warn("split: class '{}' has a single sample; it stays in train", label);
                continue;
            }
            eligible_n += idx.size();
            eligible.emplace_back(label, idx);
        }
        const std::size_t quota = std::min(test_size(n, test_fraction), eligible_n);
        std::vector<std::size_t> alloc(eligible.size());
        std::vector<std::pair<double, std::size_t>> remainders;
        std::size_t assigned = 0;
        for (std::size_t c = 0; c < eligible.size(); ++c) {
            const double share = static_cast<double>(quota) * static_cast<double>(eligible[c].second.size()) /
                                 static_cast<double>(eligible_n);
            alloc[c] = static_cast<std::size_t>(std::floor(share));
            // Never empty a class's training side.
            alloc[c] = std::min(alloc[c], eligible[c].second.size() - 1);
            assigned += alloc[c];
            remainders.emplace_back(share - std::floor(share), c);
        }
        std::stable_sort(remainders.begin(), remainders.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        for (std::size_t k = 0; assigned < quota && k < remainders.size(); ++k) {
            const std::size_t c = remainders[k].second;
            if (alloc[c] + 1 < eligible[c].second.size()) {
                ++alloc[c];
                ++assigned;
            }
        }
        for (std::size_t c = 0; c < eligible.size(); ++c) {
            auto idx = eligible[c].second;
            rng.shuffle(std::span{idx});
            for (std::size_t k = 0; k < alloc[c]; ++k) {
                is_test[idx[k]] = true;
            }
        }
    }
    Split out;
    out.is_test = is_test;
    for (std::size_t i = 0; i < n; ++i) {
        (is_test[i] ? out.test : out.train).push_back(samples[i]);
    }
    return out;
}

struct SmallSample {
    std::vector<DialogueSample> samples;
    std::vector<std::string> categories;
};

inline std::map<std::string, std::size_t> class_counts(const std::vector<DialogueSample>& samples,
                                                       Granularity granularity) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : samples) {
        if (const auto& l = label_of(s, granularity)) {
            ++counts[*l];
        }
    }
    return counts;
}

// Twice the median class size; the default cut for make_small_sample.
inline std::size_t default_small_sample_threshold(const std::vector<DialogueSample>& samples,
                                                  Granularity granularity) {
    auto counts = class_counts(samples, granularity);
    if (counts.empty()) {
        throw ConfigError("no labeled samples");
    }
    std::vector<std::size_t> sizes;
    for (const auto& [_, c] : counts) {
        sizes.push_back(c);
    }
    std::sort(sizes.begin(), sizes.end());
    const std::size_t m = sizes.size();
    const double median = m % 2 ? static_cast<double>(sizes[m / 2])
                                : (static_cast<double>(sizes[m / 2 - 1]) + static_cast<double>(sizes[m / 2])) / 2.0;
    return static_cast<std::size_t>(std::floor(2.0 * median));
}

// Drops every category with more than `threshold` samples.
inline SmallSample make_small_sample(const std::vector<DialogueSample>& samples, std::size_t threshold,
                                     Granularity granularity = Granularity::coarse) {
    const auto counts = class_counts(samples, granularity);
    SmallSample out;
    for (const auto& [label, c] : counts) {
        if (c <= threshold) {
            out.categories.push_back(label);
        }
    }
    if (out.categories.empty()) {
        throw ConfigError("small-sample threshold " + std::to_string(threshold) + " removes every category");
    }
    const std::set<std::string> keep(out.categories.begin(), out.categories.end());
    for (const auto& s : samples) {
        const auto& l = label_of(s, granularity);
        if (l && keep.contains(*l)) {
            out.samples.push_back(s);
        }
    }
    return out;
}

}  // namespace medkit::corpus
