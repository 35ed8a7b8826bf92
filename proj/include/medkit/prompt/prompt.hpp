#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/errors.hpp"
#include "medkit/log.hpp"
#include "medkit/model/encoder.hpp"
#include "medkit/model/training_log.hpp"
#include "medkit/numerics/adam.hpp"

namespace medkit::prompt {

inline constexpr std::string_view kDefaultTemplate = "{question}这属于{mask}科";

// Template text with one "{question}" and one "{mask}" placeholder; the mask
// placeholder expands to `slots` [MASK] tokens.
class PromptTemplate {
public:
    PromptTemplate(std::string_view text, std::size_t slots) : slots_{slots} {
        if (slots == 0) {
            throw ConfigError("prompt template needs at least one mask slot");
        }
        const auto q = text.find("{question}");
        const auto m = text.find("{mask}");
        if (q == std::string_view::npos || m == std::string_view::npos ||
            text.find("{question}", q + 1) != std::string_view::npos ||
            text.find("{mask}", m + 1) != std::string_view::npos) {
            throw ConfigError("prompt template must contain exactly one {question} and one {mask}");
        }
        question_first_ = q < m;
        const std::size_t first = std::min(q, m);
        const std::size_t first_len = question_first_ ? 10 : 6;
        const std::size_t second = std::max(q, m);
        before_ = std::string(text.substr(0, first));
        between_ = std::string(text.substr(first + first_len, second - first - first_len));
        after_ = std::string(text.substr(second + (question_first_ ? 6 : 10)));
        text_ = std::string(text);
    }

    std::size_t slots() const { return slots_; }
    const std::string& text() const { return text_; }
    const std::string& before() const { return before_; }
    const std::string& between() const { return between_; }
    const std::string& after() const { return after_; }
    bool question_first() const { return question_first_; }

private:
    std::string text_, before_, between_, after_;
    std::size_t slots_;
    bool question_first_ = true;
};

// Label -> token ids, right-padded with [PAD] to a shared length. Labels are
// kept in lexicographic order.
class Verbalizer {
public:
    Verbalizer(const std::map<std::string, std::string>& surfaces, const Vocab& vocab) {
        if (surfaces.empty()) {
            throw ConfigError("verbalizer is empty");
        }
        for (const auto& [label, surface] : surfaces) {
            auto ids = vocab.ids_of(surface);
            if (ids.empty()) {
                throw ConfigError("verbalizer surface for '" + label + "' is empty");
            }
            if (std::count(ids.begin(), ids.end(), special::kUnk)) {
                log().warn("verbalizer: '{}' contains characters outside the vocabulary", surface);
            }
            labels_.push_back(label);
            ids_.push_back(std::move(ids));
            true_length_.push_back(ids_.back().size());
            slots_ = std::max(slots_, ids_.back().size());
        }
        for (auto& ids : ids_) {
            ids.resize(slots_, special::kPad);
        }
        if (std::set(ids_.begin(), ids_.end()).size() != ids_.size()) {
            throw ConfigError("verbalizer maps distinct labels to the same tokens");
        }
    }

    static Verbalizer load(const std::filesystem::path& path, const Vocab& vocab) {
        std::ifstream in(path);
        if (!in) {
            throw IoError("cannot read verbalizer " + path.string());
        }
        try {
            return Verbalizer{nlohmann::json::parse(in).get<std::map<std::string, std::string>>(), vocab};
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("verbalizer " + path.string() + ": " + e.what());
        }
    }

    std::size_t size() const { return labels_.size(); }
    std::size_t slots() const { return slots_; }
    const std::vector<std::string>& labels() const { return labels_; }
    const std::vector<TokenId>& ids(std::size_t k) const { return ids_.at(k); }
    std::size_t true_length(std::size_t k) const { return true_length_.at(k); }

    std::size_t index_of(const std::string& label) const {
        const auto it = std::lower_bound(labels_.begin(), labels_.end(), label);
        if (it == labels_.end() || *it != label) {
            throw ConfigError("label '" + label + "' is not in the verbalizer");
        }
        return static_cast<std::size_t>(it - labels_.begin());
    }

private:
    std::vector<std::string> labels_;
    std::vector<std::vector<TokenId>> ids_;
    std::vector<std::size_t> true_length_;
    std::size_t slots_ = 0;
};

struct PromptInput {
    TokenSequence tokens;
    std::vector<std::size_t> mask_positions;
};

// [CLS] before Q between MASK... after [SEP], padded to max_len. The question
// is truncated first when the whole does not fit.
inline PromptInput build_prompt(std::string_view question, const PromptTemplate& tmpl, const Vocab& vocab,
                                std::size_t max_len) {
    if (question.empty()) {
        throw ConfigError("prompt question is empty");
    }
    const auto before = vocab.ids_of(tmpl.before());
    const auto between = vocab.ids_of(tmpl.between());
    const auto after = vocab.ids_of(tmpl.after());
    const std::size_t fixed = 2 + before.size() + between.size() + after.size() + tmpl.slots();
    if (fixed > max_len) {
        throw ConfigError("prompt template needs " + std::to_string(fixed) + " tokens but max_len is " +
                          std::to_string(max_len));
    }
    auto q = vocab.ids_of(question);
    PromptInput out;
    out.tokens.original_length = q.size();
    q.resize(std::min(q.size(), max_len - fixed));
    auto& ids = out.tokens.ids;
    ids.push_back(special::kCls);
    ids.insert(ids.end(), before.begin(), before.end());
    auto put_masks = [&] {
        for (std::size_t s = 0; s < tmpl.slots(); ++s) {
            out.mask_positions.push_back(ids.size());
            ids.push_back(special::kMask);
        }
    };
    if (tmpl.question_first()) {
        ids.insert(ids.end(), q.begin(), q.end());
        ids.insert(ids.end(), between.begin(), between.end());
        put_masks();
    } else {
        put_masks();
        ids.insert(ids.end(), between.begin(), between.end());
        ids.insert(ids.end(), q.begin(), q.end());
    }
    ids.insert(ids.end(), after.begin(), after.end());
    ids.push_back(special::kSep);
    out.tokens.attention_mask.assign(ids.size(), true);
    ids.resize(max_len, special::kPad);
    out.tokens.attention_mask.resize(max_len, false);
    return out;
}

// Log-probabilities [slots x V] at the mask positions, from one forward pass.
inline Tensor slot_log_probs(const model::Encoder& encoder, const PromptInput& input) {
    const auto out = encoder.encode(input.tokens);
    return ops::log_softmax(encoder.mlm_logits(out.token_reps, input.mask_positions));
}

// Per-label sum of slot log-probabilities, in verbalizer order. Pad slots
// count unless include_pad is false.
inline std::vector<double> score_labels(const Tensor& log_probs, const Verbalizer& verbalizer,
                                        bool include_pad = true) {
    if (log_probs.rows() != verbalizer.slots()) {
        throw DimensionError("score_labels: " + std::to_string(log_probs.rows()) + " slots vs verbalizer " +
                             std::to_string(verbalizer.slots()));
    }
    std::vector<double> scores(verbalizer.size(), 0.0);
    for (std::size_t k = 0; k < verbalizer.size(); ++k) {
        const auto& ids = verbalizer.ids(k);
        const std::size_t used = include_pad ? ids.size() : verbalizer.true_length(k);
        for (std::size_t s = 0; s < used; ++s) {
            scores[k] += log_probs.at(s, ids[s]);
        }
    }
    return scores;
}

inline std::vector<double> score_labels(const model::Encoder& encoder, const PromptInput& input,
                                        const Verbalizer& verbalizer, bool include_pad = true) {
    NoGradGuard no_grad;
    return score_labels(slot_log_probs(encoder, input), verbalizer, include_pad);
}

// Index of the best score; ties go to the earliest (lexicographically
// smallest) label.
inline std::size_t best_label(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < scores.size(); ++k) {
        if (scores[k] > scores[best]) {
            best = k;
        }
    }
    return best;
}

inline std::string predict(const model::Encoder& encoder, std::string_view question, const PromptTemplate& tmpl,
                           const Verbalizer& verbalizer, const Vocab& vocab, bool include_pad = true) {
    const auto input = build_prompt(question, tmpl, vocab, encoder.config().max_len);
    return verbalizer.labels()[best_label(score_labels(encoder, input, verbalizer, include_pad))];
}

struct PromptExample {
    PromptInput input;
    std::size_t label = 0;  // verbalizer index
};

inline std::vector<PromptExample> make_examples(const std::vector<std::string>& questions,
                                                const std::vector<std::string>& labels, const PromptTemplate& tmpl,
                                                const Verbalizer& verbalizer, const Vocab& vocab,
                                                std::size_t max_len) {
    if (questions.size() != labels.size()) {
        throw ConfigError("prompt examples need one label per question");
    }
    if (tmpl.slots() != verbalizer.slots()) {
        throw ConfigError("template has " + std::to_string(tmpl.slots()) + " mask slots but the verbalizer needs " +
                          std::to_string(verbalizer.slots()));
    }
    std::vector<PromptExample> out;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        out.push_back({build_prompt(questions[i], tmpl, vocab, max_len), verbalizer.index_of(labels[i])});
    }
    return out;
}

// Cross-entropy of the label tokens at the mask slots, summed over slots.
inline Tensor prompt_loss(const model::Encoder& encoder, const PromptExample& ex, const Verbalizer& verbalizer,
                          bool include_pad = true) {
    const auto out = encoder.encode(ex.input.tokens);
    const Tensor logits = encoder.mlm_logits(out.token_reps, ex.input.mask_positions);
    const auto& ids = verbalizer.ids(ex.label);
    const std::size_t used = include_pad ? ids.size() : verbalizer.true_length(ex.label);
    std::vector<std::size_t> rows(used);
    for (std::size_t s = 0; s < used; ++s) {
        rows[s] = s;
    }
    const std::vector<std::size_t> targets(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(used));
    return ops::scale(ops::cross_entropy_logits(logits, rows, targets), static_cast<double>(used));
}

struct PromptTrainConfig {
    std::size_t epochs = 20;
    double lr = 2e-5;
    std::size_t batch_size = 8;
    bool include_pad = true;
    std::uint64_t seed = 0;
};

struct PromptOutcome {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;
    nlohmann::json optimizer_state;
    bool diverged = false;
};

inline double accuracy(const model::Encoder& encoder, const std::vector<PromptExample>& data,
                       const Verbalizer& verbalizer, bool include_pad = true) {
    std::size_t hits = 0;
    for (const auto& ex : data) {
        hits += best_label(score_labels(encoder, ex.input, verbalizer, include_pad)) == ex.label;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Fine-tunes the whole encoder (MLM head included) on the mask-slot loss,
// averaged over the samples of each batch.
inline PromptOutcome train_prompt(model::Encoder& encoder, const std::vector<PromptExample>& data,
                                  const Verbalizer& verbalizer, const PromptTrainConfig& config,
                                  model::TrainingLog* history = nullptr, bool stop_at_perfect = false) {
    if (data.empty()) {
        throw ConfigError("prompt training set is empty");
    }
    ParamList params = encoder.params();
    Adam opt;
    opt.add_group("encoder", config.lr, params);
    model::Snapshot good{params};
    model::TrainingLog local;
    model::TrainingLog& hist = history ? *history : local;
    Rng rng{config.seed};
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
    PromptOutcome outcome;
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
                    terms.push_back(prompt_loss(encoder, data[order[i]], verbalizer, config.include_pad));
                }
                const Tensor loss = ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(end - start));
                opt.zero_grad();
                backward(loss);
                opt.step();
                loss_sum += loss.item();
                ++batches;
            }
        } catch (const NumericError& e) {
            log().error("train_prompt: {} in epoch {}; restoring last good weights", e.what(), epoch);
            good.restore(params);
            outcome.diverged = true;
            break;
        }
        const double epoch_loss = loss_sum / static_cast<double>(batches);
        const double acc = accuracy(encoder, data, verbalizer, config.include_pad);
        outcome.epoch_loss.push_back(epoch_loss);
        outcome.epoch_accuracy.push_back(acc);
        hist.end_epoch(epoch, epoch_loss, config.lr);
        good.capture(params);
        log().debug("prompt epoch {} loss {:.6f} acc {:.4f}", epoch, epoch_loss, acc);
        if (stop_at_perfect && acc == 1.0) {
            break;
        }
    }
    outcome.optimizer_state = opt.state_dump();
    return outcome;
}

}  // namespace medkit::prompt
