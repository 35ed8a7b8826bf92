#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/corpus/dialogue.hpp"
#include "medkit/errors.hpp"
#include "medkit/log.hpp"
#include "medkit/model/training_log.hpp"
#include "medkit/numerics/adam.hpp"
#include "medkit/triage/head.hpp"

namespace medkit::triage {

// Fixed label string <-> id assignment. Ids follow sorted label order unless
// loaded from a file.
class LabelMap {
public:
    LabelMap() = default;

    static LabelMap from_labels(const std::vector<std::string>& labels) {
        LabelMap m;
        std::set<std::string> sorted(labels.begin(), labels.end());
        for (const auto& l : sorted) {
            m.ids_.emplace(l, m.names_.size());
            m.names_.push_back(l);
        }
        return m;
    }

    static LabelMap from_samples(const std::vector<corpus::DialogueSample>& samples, corpus::Granularity g) {
        std::vector<std::string> labels;
        for (const auto& s : samples) {
            if (const auto& l = corpus::label_of(s, g)) {
                labels.push_back(*l);
            }
        }
        return from_labels(labels);
    }

    std::size_t size() const { return names_.size(); }
    const std::string& name(std::size_t id) const { return names_.at(id); }
    const std::vector<std::string>& names() const { return names_; }
    bool contains(const std::string& label) const { return ids_.contains(label); }

    std::size_t id_of(const std::string& label) const {
        const auto it = ids_.find(label);
        if (it == ids_.end()) {
            throw ConfigError("label '" + label + "' is not in the label set");
        }
        return it->second;
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [label, id] : ids_) {
            j[label] = id;
        }
        return j;
    }

    static LabelMap from_json(const nlohmann::json& j) {
        if (!j.is_object()) {
            throw FormatError("label map must be a JSON object");
        }
        std::vector<std::string> names(j.size());
        for (const auto& [label, id] : j.items()) {
            const auto k = id.get<std::size_t>();
            if (k >= names.size() || !names[k].empty()) {
                throw FormatError("label map ids must be a permutation of 0..n-1");
            }
            names[k] = label;
        }
        LabelMap m;
        for (std::size_t k = 0; k < names.size(); ++k) {
            m.ids_.emplace(names[k], k);
        }
        m.names_ = std::move(names);
        return m;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) {
            throw IoError("cannot write label map " + path.string());
        }
        out << to_json().dump(2) << '\n';
    }

    static LabelMap load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) {
            throw IoError("cannot read label map " + path.string());
        }
        try {
            return from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("label map " + path.string() + ": " + e.what());
        }
    }

private:
    std::map<std::string, std::size_t> ids_;
    std::vector<std::string> names_;
};

struct Example {
    TokenSequence tokens;
    std::size_t label = 0;
};

// Encodes questions and maps labels; an unlabeled sample or a label outside
// the map is an error.
inline std::vector<Example> make_examples(const std::vector<corpus::DialogueSample>& samples, const Vocab& vocab,
                                          const LabelMap& labels, corpus::Granularity g, std::size_t max_len) {
    std::vector<Example> out;
    out.reserve(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& label = corpus::label_of(samples[i], g);
        if (!label) {
            throw ConfigError("sample " + std::to_string(i) + " has no label at the requested granularity");
        }
        out.push_back({encode(samples[i].question, vocab, max_len), labels.id_of(*label)});
    }
    return out;
}

struct ClsMetrics {
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    // confusion[gold][pred]
    std::vector<std::vector<std::size_t>> confusion;
};

inline nlohmann::json to_json(const ClsMetrics& m) {
    return {{"accuracy", m.accuracy},
            {"macro_precision", m.macro_precision},
            {"macro_recall", m.macro_recall},
            {"macro_f1", m.macro_f1},
            {"confusion", m.confusion}};
}

// Macro averages run over the classes that occur in gold.
inline ClsMetrics evaluate(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& gold,
                           std::size_t num_classes = 0) {
    if (predictions.empty() || predictions.size() != gold.size()) {
        throw ConfigError("evaluate needs equal-length, non-empty prediction and gold lists");
    }
    std::size_t k = num_classes;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        k = std::max({k, gold[i] + 1, predictions[i] + 1});
    }
    ClsMetrics m;
    m.confusion.assign(k, std::vector<std::size_t>(k, 0));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        ++m.confusion[gold[i]][predictions[i]];
        correct += gold[i] == predictions[i];
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
    std::size_t present = 0;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t support = 0;
        std::size_t predicted = 0;
        for (std::size_t j = 0; j < k; ++j) {
            support += m.confusion[c][j];
            predicted += m.confusion[j][c];
        }
        if (support == 0) {
            continue;
        }
        ++present;
        const double tp = static_cast<double>(m.confusion[c][c]);
        const double p = predicted ? tp / static_cast<double>(predicted) : 0.0;
        const double r = tp / static_cast<double>(support);
        m.macro_precision += p;
        m.macro_recall += r;
        m.macro_f1 += p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    }
    m.macro_precision /= static_cast<double>(present);
    m.macro_recall /= static_cast<double>(present);
    m.macro_f1 /= static_cast<double>(present);
    return m;
}

inline std::vector<std::size_t> predict_all(const TriageModel& model, const std::vector<Example>& data) {
    std::vector<std::size_t> out;
    out.reserve(data.size());
    for (const auto& ex : data) {
        out.push_back(model.predict(ex.tokens));
    }
    return out;
}

inline ClsMetrics evaluate(const TriageModel& model, const std::vector<Example>& data) {
    std::vector<std::size_t> gold;
    for (const auto& ex : data) {
        gold.push_back(ex.label);
    }
    return evaluate(predict_all(model, data), gold, model.head().config().num_labels);
}

struct SupervisedConfig {
    std::size_t epochs = 50;
    double encoder_lr = 5e-5;
    double head_lr = 2e-4;
    std::size_t batch_size = 8;
    bool freeze_encoder = false;
    std::uint64_t seed = 0;
};

struct SupervisedOutcome {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_accuracy;  // train accuracy after each epoch
    nlohmann::json optimizer_state;
    bool diverged = false;
};

// Joint fine-tuning with an "encoder" and a "head" Adam group. Stops early
// once train accuracy reaches 1 when `stop_at_perfect` is set.
inline SupervisedOutcome train_supervised(TriageModel& model, const std::vector<Example>& data,
                                          const SupervisedConfig& config, model::TrainingLog* history = nullptr,
                                          bool stop_at_perfect = false) {
    if (data.empty()) {
        throw ConfigError("training set is empty");
    }
    const std::size_t k = model.head().config().num_labels;
    for (const auto& ex : data) {
        if (ex.label >= k) {
            throw ConfigError("label id " + std::to_string(ex.label) + " outside the label set");
        }
    }
    ParamList enc = model.encoder_params();
    ParamList head = model.head_params();
    Adam opt;
    if (!config.freeze_encoder) {
        opt.add_group("encoder", config.encoder_lr, enc);
    }
    opt.add_group("head", config.head_lr, head);
    ParamList all = model.params();
    model::Snapshot good{all};
    model::TrainingLog local;
    model::TrainingLog& hist = history ? *history : local;
    Rng rng{config.seed};
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
    SupervisedOutcome outcome;
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
                    terms.push_back(model.loss(data[order[i]].tokens, data[order[i]].label));
                }
                const Tensor loss = ops::scale(ops::add_n(terms), 1.0 / static_cast<double>(end - start));
                opt.zero_grad();
                zero_grads(enc);
                backward(loss);
                opt.step();
                loss_sum += loss.item();
                ++batches;
            }
        } catch (const NumericError& e) {
            log().error("train_supervised: {} in epoch {}; restoring last good weights", e.what(), epoch);
            good.restore(all);
            outcome.diverged = true;
            break;
        }
        const double epoch_loss = loss_sum / static_cast<double>(batches);
        const double acc = evaluate(model, data).accuracy;
        outcome.epoch_loss.push_back(epoch_loss);
        outcome.epoch_accuracy.push_back(acc);
        hist.end_epoch(epoch, epoch_loss, config.head_lr);
        good.capture(all);
        log().debug("triage epoch {} loss {:.6f} acc {:.4f}", epoch, epoch_loss, acc);
        if (stop_at_perfect && acc == 1.0) {
            break;
        }
    }
    outcome.optimizer_state = opt.state_dump();
    return outcome;
}

}  // namespace medkit::triage
