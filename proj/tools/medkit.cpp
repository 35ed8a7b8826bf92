#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "artifacts.hpp"
#include "medkit/corpus/dialogue.hpp"
#include "medkit/errors.hpp"
#include "medkit/generator/decoder.hpp"
#include "medkit/genmetrics/report.hpp"
#include "medkit/kgraph/graph.hpp"
#include "medkit/log.hpp"
#include "medkit/model/encoder.hpp"
#include "medkit/model/training_log.hpp"
#include "medkit/prompt/prompt.hpp"
#include "medkit/triage/head.hpp"
#include "medkit/triage/train.hpp"

namespace {

using namespace medkit;
using namespace medkit::cli;

struct Context {
    fs::path out;
    std::uint64_t seed = 0;
};

using Action = std::function<int()>;

struct Command {
    const char* name;
    const char* summary;
    bool seeded;
    std::function<Action(CLI::App&, Context&)> setup;
};

// Options shared by several commands.

struct EncoderArch {
    std::size_t max_len = 128;
    std::size_t hidden_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t ffn_dim = 256;
    double mask_rate = 0.15;

    void add(CLI::App& app) {
        app.add_option("--max-len", max_len, "Encoder sequence length (architecture options are ignored with --encoder)")->capture_default_str();
        app.add_option("--hidden-dim", hidden_dim, "Hidden size")->capture_default_str();
        app.add_option("--layers", layers, "Transformer layers")->capture_default_str();
        app.add_option("--heads", heads, "Attention heads")->capture_default_str();
        app.add_option("--ffn-dim", ffn_dim, "Feed-forward width")->capture_default_str();
        app.add_option("--mask-rate", mask_rate, "MLM selection rate")->capture_default_str();
    }

    model::EncoderConfig config(std::size_t vocab_size) const {
        model::EncoderConfig c{vocab_size, max_len, hidden_dim, layers, heads, ffn_dim, mask_rate};
        c.validate();
        return c;
    }
};

struct DecoderArch {
    std::size_t hidden_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 2;
    std::size_t ffn_dim = 256;
    std::size_t context = 128;
    std::size_t max_gen_len = 64;

    void add(CLI::App& app) {
        app.add_option("--hidden-dim", hidden_dim, "Hidden size")->capture_default_str();
        app.add_option("--layers", layers, "Transformer layers")->capture_default_str();
        app.add_option("--heads", heads, "Attention heads")->capture_default_str();
        app.add_option("--ffn-dim", ffn_dim, "Feed-forward width")->capture_default_str();
        app.add_option("--context", context, "Context window K (architecture options are ignored with --init)")->capture_default_str();
        app.add_option("--max-gen-len", max_gen_len, "Default generation limit")->capture_default_str();
    }

    generator::DecoderConfig config(std::size_t vocab_size) const {
        generator::DecoderConfig c{vocab_size, hidden_dim, layers, heads, ffn_dim, context, max_gen_len};
        c.validate();
        return c;
    }
};

struct Decoding {
    std::string strategy = "greedy";
    std::size_t top_k = 5;
    double temperature = 1.0;
    std::size_t max_gen_len = 0;

    void add(CLI::App& app) {
        app.add_option("--strategy", strategy, "greedy | top-k | temperature")
            ->check(CLI::IsMember({"greedy", "top-k", "temperature"}))
            ->capture_default_str();
        app.add_option("--top-k", top_k, "Candidates kept by top-k sampling")->capture_default_str();
        app.add_option("--temperature", temperature, "Sampling temperature")->capture_default_str();
        app.add_option("--max-gen-len", max_gen_len, "Generation limit (0: the model's default)")
            ->capture_default_str();
    }

    generator::GenerateConfig config(const json& meta) const {
        if (top_k == 0 || !(temperature > 0.0)) {
            throw ConfigError("top-k must be positive and temperature greater than 0");
        }
        generator::GenerateConfig g;
        g.strategy = strategy == "greedy"  ? generator::Strategy::greedy
                     : strategy == "top-k" ? generator::Strategy::top_k
                                           : generator::Strategy::temperature;
        g.top_k = top_k;
        g.temperature = temperature;
        if (max_gen_len > 0) {
            g.max_gen_len = max_gen_len;
        }
        g.qa.use_supplement = meta.value("use_supplement", true);
        g.qa.knowledge_chars = meta.value("knowledge_chars", std::size_t{64});
        return g;
    }
};

// Classification needs a question and a label at the chosen granularity.
void drop_unlabeled(std::vector<corpus::DialogueSample>& samples, corpus::Granularity g) {
    const auto n =
        std::erase_if(samples, [&](const auto& s) { return s.question.empty() || !corpus::label_of(s, g); });
    if (n) {
        log().warn("skipped {} samples without a question or a label at this granularity", n);
    }
    if (samples.empty()) {
        throw ConfigError("no labeled samples");
    }
}

std::vector<std::string> questions_of(const std::vector<corpus::DialogueSample>& samples) {
    std::vector<std::string> out;
    for (const auto& s : samples) {
        out.push_back(s.question);
    }
    return out;
}

void write_samples(const fs::path& path, const std::vector<corpus::DialogueSample>& samples) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    corpus::write_jsonl(out, samples);
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

// ---------------------------------------------------------------- data ops

Action setup_stats(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in, test, granularity = "coarse";
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Dialogue JSONL (train part when --test is given)")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--test", o->test, "Optional test-split JSONL")->check(CLI::ExistingFile);
    app.add_option("--granularity", o->granularity, "coarse | fine")->capture_default_str();
    return [o, &ctx] {
        auto samples = read_samples(o->in);
        std::vector<bool> is_test;
        if (!o->test.empty()) {
            is_test.assign(samples.size(), false);
            const auto test = read_samples(o->test);
            samples.insert(samples.end(), test.begin(), test.end());
            is_test.resize(samples.size(), true);
        }
        const json j = corpus::to_json(corpus::stats(samples, is_test, parse_granularity(o->granularity)));
        write_json(ctx.out / "stats.json", j);
        print(j);
        return 0;
    };
}

Action setup_clean(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in, mode = "qa";
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Dialogue JSONL")->required()->check(CLI::ExistingFile);
    app.add_option("--mode", o->mode, "qa (answer required) | triage (question only)")
        ->check(CLI::IsMember({"qa", "triage"}))
        ->capture_default_str();
    return [o, &ctx] {
        const auto in = corpus::ingest(fs::path{o->in});
        const auto r = corpus::clean(in.samples, {.require_answer = o->mode == "qa"});
        write_samples(ctx.out / "clean.jsonl", r.kept);
        std::vector<json> removed;
        for (const auto& rm : r.removed) {
            removed.push_back({{"index", rm.index}, {"question", in.samples[rm.index].question}, {"reason", rm.reason}});
        }
        write_jsonl(ctx.out / "removed.jsonl", removed);
        {
            std::ofstream rej(ctx.out / "rejects.jsonl");
            corpus::write_rejects(rej, in.rejects);
        }
        const json summary{{"parsed", in.samples.size()},
                           {"malformed", in.rejects.size()},
                           {"kept", r.kept.size()},
                           {"removed", r.removed.size()}};
        write_json(ctx.out / "summary.json", summary);
        print(summary);
        return 0;
    };
}

Action setup_split(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in, granularity = "coarse";
        double test_fraction = 0.15;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Dialogue JSONL")->required()->check(CLI::ExistingFile);
    app.add_option("--test-fraction", o->test_fraction, "Share of samples held out")->capture_default_str();
    app.add_option("--granularity", o->granularity, "Label used for stratification")->capture_default_str();
    return [o, &ctx] {
        const auto samples = read_samples(o->in);
        const auto s = corpus::split(samples, o->test_fraction, ctx.seed, parse_granularity(o->granularity));
        write_samples(ctx.out / "train.jsonl", s.train);
        write_samples(ctx.out / "test.jsonl", s.test);
        const json summary{{"train", s.train.size()}, {"test", s.test.size()}};
        write_json(ctx.out / "summary.json", summary);
        print(summary);
        return 0;
    };
}

Action setup_small_sample(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in, granularity = "coarse";
        std::size_t threshold = 0;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Dialogue JSONL")->required()->check(CLI::ExistingFile);
    app.add_option("--threshold", o->threshold, "Drop categories above this size (0: twice the median)")
        ->capture_default_str();
    app.add_option("--granularity", o->granularity, "coarse | fine")->capture_default_str();
    return [o, &ctx] {
        const auto g = parse_granularity(o->granularity);
        const auto samples = read_samples(o->in);
        const std::size_t threshold = o->threshold ? o->threshold : corpus::default_small_sample_threshold(samples, g);
        const auto ss = corpus::make_small_sample(samples, threshold, g);
        write_samples(ctx.out / "small.jsonl", ss.samples);
        const json summary{{"threshold", threshold}, {"samples", ss.samples.size()}, {"categories", ss.categories}};
        write_json(ctx.out / "summary.json", summary);
        print(summary);
        return 0;
    };
}

// ---------------------------------------------------------------- encoder

Action setup_pretrain_encoder(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in;
        std::size_t min_freq = 1;
        EncoderArch arch;
        model::PretrainConfig train;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Dialogue JSONL (questions and answers are used)")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--min-freq", o->min_freq, "Minimum character frequency for the vocabulary")
        ->capture_default_str();
    o->arch.add(app);
    app.add_option("--epochs", o->train.epochs, "Epochs")->capture_default_str();
    app.add_option("--lr", o->train.lr, "Learning rate")->capture_default_str();
    app.add_option("--batch-size", o->train.batch_size, "Batch size")->capture_default_str();
    return [o, &ctx] {
        std::vector<std::string> texts;
        for (const auto& s : read_samples(o->in)) {
            texts.push_back(s.question);
            if (s.answer && !s.answer->empty()) {
                texts.push_back(*s.answer);
            }
        }
        const Vocab vocab = Vocab::build(texts, o->min_freq);
        Rng rng{ctx.seed};
        model::Encoder encoder{o->arch.config(vocab.size()), rng};
        auto cfg = o->train;
        cfg.seed = ctx.seed + 1;
        model::TrainingLog history{ctx.out / "train_log.csv"};
        const auto outcome = model::pretrain(encoder, vocab, texts, cfg, &history);
        save_encoder(ctx.out, vocab, encoder);
        write_json(ctx.out / "metrics.json", {{"epoch_loss", outcome.epoch_loss},
                                              {"skipped_batches", outcome.skipped},
                                              {"diverged", outcome.diverged},
                                              {"parameter_count", parameter_count(encoder.params())},
                                              {"vocab_size", vocab.size()}});
        return outcome.diverged ? 2 : 0;
    };
}

// ---------------------------------------------------------------- triage

Action setup_train_triage(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string train, encoder, granularity = "coarse";
        EncoderArch arch;
        std::size_t lstm_layers = 2, dd_layers = 3;
        bool no_dd = false, no_bilstm = false, no_cls = false;
        triage::SupervisedConfig fit;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--train", o->train, "Labeled dialogue JSONL")->required()->check(CLI::ExistingFile);
    app.add_option("--encoder", o->encoder, "Pre-trained encoder directory (else a fresh encoder)")
        ->check(CLI::ExistingDirectory);
    app.add_option("--granularity", o->granularity, "coarse | fine")->capture_default_str();
    o->arch.add(app);
    app.add_option("--lstm-layers", o->lstm_layers, "BiLSTM depth")->capture_default_str();
    app.add_option("--dd-layers", o->dd_layers, "Dendritic depth")->capture_default_str();
    app.add_flag("--no-dd", o->no_dd, "Ablation: drop the dendritic layers");
    app.add_flag("--no-bilstm", o->no_bilstm, "Ablation: drop the BiLSTM features");
    app.add_flag("--no-cls-fusion", o->no_cls, "Ablation: drop the CLS vector from the fused features");
    app.add_option("--epochs", o->fit.epochs, "Epochs")->capture_default_str();
    app.add_option("--encoder-lr", o->fit.encoder_lr, "Encoder group learning rate")->capture_default_str();
    app.add_option("--head-lr", o->fit.head_lr, "Head group learning rate")->capture_default_str();
    app.add_option("--batch-size", o->fit.batch_size, "Batch size")->capture_default_str();
    app.add_flag("--freeze-encoder", o->fit.freeze_encoder, "Train the head only");
    return [o, &ctx] {
        TriageBundle b;
        b.granularity = parse_granularity(o->granularity);
        auto samples = read_samples(o->train);
        drop_unlabeled(samples, b.granularity);
        b.labels = triage::LabelMap::from_samples(samples, b.granularity);

        std::optional<EncoderBundle> pre;
        model::EncoderConfig enc_cfg;
        if (!o->encoder.empty()) {
            pre = load_encoder(o->encoder);
            b.vocab = pre->vocab;
            enc_cfg = pre->encoder->config();
        } else {
            b.vocab = Vocab::build(questions_of(samples));
            enc_cfg = o->arch.config(b.vocab.size());
        }
        triage::TriageConfig head_cfg{b.labels.size(), o->lstm_layers, o->dd_layers,
                                      !o->no_bilstm,   !o->no_cls,      !o->no_dd};
        head_cfg.validate();
        Rng rng{ctx.seed};
        b.model = std::make_unique<triage::TriageModel>(enc_cfg, head_cfg, rng);
        if (pre) {
            ParamList backbone = b.model->encoder_params();
            checkpoint::restore(fs::path{o->encoder} / "encoder.bin", backbone);
        }
        const auto data = triage::make_examples(samples, b.vocab, b.labels, b.granularity, enc_cfg.max_len);
        auto fit = o->fit;
        fit.seed = ctx.seed + 1;
        model::TrainingLog history{ctx.out / "train_log.csv"};
        const auto outcome = triage::train_supervised(*b.model, data, fit, &history);
        const auto metrics = triage::evaluate(*b.model, data);
        save_triage(ctx.out, b);
        write_json(ctx.out / "metrics.json",
                   {{"train", triage::to_json(metrics)},
                    {"epoch_loss", outcome.epoch_loss},
                    {"epoch_accuracy", outcome.epoch_accuracy},
                    {"optimizer", outcome.optimizer_state},
                    {"diverged", outcome.diverged},
                    {"parameter_count", parameter_count(b.model->params())},
                    {"head_parameter_count", parameter_count(b.model->head_params())},
                    {"features",
                     {{"bilstm", head_cfg.use_bilstm},
                      {"cls", head_cfg.use_cls},
                      {"dd_layers", head_cfg.use_dd ? head_cfg.num_dd_layers : 0},
                      {"fused_width", b.model->head().fused_width()}}}});
        return outcome.diverged ? 2 : 0;
    };
}

Action setup_eval_triage(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string model, test;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--model", o->model, "train-triage output directory")->required()->check(CLI::ExistingDirectory);
    app.add_option("--test", o->test, "Labeled dialogue JSONL")->required()->check(CLI::ExistingFile);
    return [o, &ctx] {
        const auto b = load_triage(o->model);
        auto samples = read_samples(o->test);
        drop_unlabeled(samples, b.granularity);
        const auto unseen = std::erase_if(samples, [&](const auto& s) {
            return !b.labels.contains(*corpus::label_of(s, b.granularity));
        });
        if (unseen) {
            log().warn("skipped {} samples whose label was not seen in training", unseen);
        }
        const auto data =
            triage::make_examples(samples, b.vocab, b.labels, b.granularity, b.model->encoder().config().max_len);
        if (data.empty()) {
            throw ConfigError("no evaluable samples in " + o->test);
        }
        const auto pred = triage::predict_all(*b.model, data);
        std::vector<std::size_t> gold;
        std::vector<json> rows;
        for (std::size_t i = 0; i < data.size(); ++i) {
            gold.push_back(data[i].label);
            rows.push_back({{"question", samples[i].question},
                            {"gold", b.labels.name(data[i].label)},
                            {"predicted", b.labels.name(pred[i])}});
        }
        const json m = triage::to_json(triage::evaluate(pred, gold, b.labels.size()));
        write_jsonl(ctx.out / "predictions.jsonl", rows);
        write_json(ctx.out / "metrics.json", m);
        print(m);
        return 0;
    };
}

// ---------------------------------------------------------------- prompt

// Default surface for a label: the label itself, minus the template's fixed
// text after the mask when the label ends with it ("内科" + "科" -> "内").
std::map<std::string, std::string> default_surfaces(const std::vector<std::string>& labels,
                                                    const std::string& tmpl) {
    const auto m = tmpl.find("{mask}");
    const std::string after = m == std::string::npos ? "" : tmpl.substr(m + 6);
    std::map<std::string, std::string> out;
    for (const auto& l : labels) {
        const bool strip = !after.empty() && l.size() > after.size() && l.ends_with(after);
        out[l] = strip ? l.substr(0, l.size() - after.size()) : l;
    }
    return out;
}

Action setup_train_prompt(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string train, encoder, verbalizer, granularity = "coarse";
        std::string tmpl{prompt::kDefaultTemplate};
        EncoderArch arch;
        bool exclude_pad = false;
        prompt::PromptTrainConfig fit;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--train", o->train, "Labeled dialogue JSONL")->required()->check(CLI::ExistingFile);
    app.add_option("--encoder", o->encoder, "Pre-trained encoder directory (else a fresh encoder)")
        ->check(CLI::ExistingDirectory);
    app.add_option("--verbalizer", o->verbalizer, "JSON object label -> surface text")->check(CLI::ExistingFile);
    app.add_option("--template", o->tmpl, "Prompt with {question} and {mask}")->capture_default_str();
    app.add_option("--granularity", o->granularity, "coarse | fine")->capture_default_str();
    o->arch.add(app);
    app.add_flag("--exclude-pad", o->exclude_pad, "Do not score [PAD] verbalizer slots");
    app.add_option("--epochs", o->fit.epochs, "Epochs")->capture_default_str();
    app.add_option("--lr", o->fit.lr, "Learning rate")->capture_default_str();
    app.add_option("--batch-size", o->fit.batch_size, "Batch size")->capture_default_str();
    return [o, &ctx] {
        const auto g = parse_granularity(o->granularity);
        auto samples = read_samples(o->train);
        drop_unlabeled(samples, g);
        std::vector<std::string> labels;
        for (const auto& s : samples) {
            labels.push_back(*corpus::label_of(s, g));
        }
        const auto surfaces =
            o->verbalizer.empty()
                ? default_surfaces(triage::LabelMap::from_labels(labels).names(), o->tmpl)
                : read_json(o->verbalizer).get<std::map<std::string, std::string>>();

        Vocab vocab;
        std::unique_ptr<model::Encoder> encoder;
        if (!o->encoder.empty()) {
            auto pre = load_encoder(o->encoder);
            vocab = std::move(pre.vocab);
            encoder = std::move(pre.encoder);
        } else {
            auto texts = questions_of(samples);
            texts.push_back(o->tmpl);
            for (const auto& [_, s] : surfaces) {
                texts.push_back(s);
            }
            vocab = Vocab::build(texts);
            Rng rng{ctx.seed};
            encoder = std::make_unique<model::Encoder>(o->arch.config(vocab.size()), rng);
        }
        const prompt::Verbalizer verb{surfaces, vocab};
        const prompt::PromptTemplate tmpl{o->tmpl, verb.slots()};
        const auto data =
            prompt::make_examples(questions_of(samples), labels, tmpl, verb, vocab, encoder->config().max_len);
        auto fit = o->fit;
        fit.include_pad = !o->exclude_pad;
        fit.seed = ctx.seed + 1;
        model::TrainingLog history{ctx.out / "train_log.csv"};
        const auto outcome = prompt::train_prompt(*encoder, data, verb, fit, &history);
        save_encoder(ctx.out, vocab, *encoder);
        write_json(ctx.out / "verbalizer.json", surfaces);
        write_json(ctx.out / "prompt.json",
                   {{"template", o->tmpl}, {"include_pad", fit.include_pad}, {"granularity", o->granularity}});
        write_json(ctx.out / "metrics.json",
                   {{"train_accuracy", prompt::accuracy(*encoder, data, verb, fit.include_pad)},
                    {"epoch_loss", outcome.epoch_loss},
                    {"epoch_accuracy", outcome.epoch_accuracy},
                    {"optimizer", outcome.optimizer_state},
                    {"diverged", outcome.diverged},
                    {"slots", verb.slots()}});
        return outcome.diverged ? 2 : 0;
    };
}

Action setup_eval_prompt(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string model, test;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--model", o->model, "train-prompt output directory")->required()->check(CLI::ExistingDirectory);
    app.add_option("--test", o->test, "Labeled dialogue JSONL")->required()->check(CLI::ExistingFile);
    return [o, &ctx] {
        const fs::path dir{o->model};
        const auto b = load_encoder(dir);
        const json meta = read_json(dir / "prompt.json");
        const prompt::Verbalizer verb{read_json(dir / "verbalizer.json").get<std::map<std::string, std::string>>(),
                                      b.vocab};
        const prompt::PromptTemplate tmpl{meta.at("template").get<std::string>(), verb.slots()};
        const bool include_pad = meta.at("include_pad").get<bool>();
        const auto g = parse_granularity(meta.at("granularity").get<std::string>());
        auto samples = read_samples(o->test);
        drop_unlabeled(samples, g);
        const std::set<std::string> known(verb.labels().begin(), verb.labels().end());
        const auto unseen = std::erase_if(samples, [&](const auto& s) { return !known.contains(*corpus::label_of(s, g)); });
        if (unseen) {
            log().warn("skipped {} samples whose label is not in the verbalizer", unseen);
        }
        if (samples.empty()) {
            throw ConfigError("no evaluable samples in " + o->test);
        }
        std::vector<std::size_t> pred, gold;
        std::vector<json> rows;
        for (const auto& s : samples) {
            const auto input = prompt::build_prompt(s.question, tmpl, b.vocab, b.encoder->config().max_len);
            pred.push_back(prompt::best_label(prompt::score_labels(*b.encoder, input, verb, include_pad)));
            gold.push_back(verb.index_of(*corpus::label_of(s, g)));
            rows.push_back({{"question", s.question},
                            {"gold", verb.labels()[gold.back()]},
                            {"predicted", verb.labels()[pred.back()]}});
        }
        const json m = triage::to_json(triage::evaluate(pred, gold, verb.size()));
        write_jsonl(ctx.out / "predictions.jsonl", rows);
        write_json(ctx.out / "metrics.json", m);
        print(m);
        return 0;
    };
}

// ---------------------------------------------------------------- generator

Action setup_pretrain_lm(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string in, qa;
        DecoderArch arch;
        generator::LmTrainConfig fit;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--in", o->in, "Background text: plain lines, triple JSONL or dialogue JSONL")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--qa", o->qa, "Dialogue JSONL whose characters join the vocabulary")->check(CLI::ExistingFile);
    o->arch.add(app);
    app.add_option("--epochs", o->fit.epochs, "Epochs")->capture_default_str();
    app.add_option("--lr", o->fit.lr, "Learning rate")->capture_default_str();
    app.add_option("--batch-size", o->fit.batch_size, "Batch size")->capture_default_str();
    return [o, &ctx] {
        const auto texts = read_background(o->in);
        if (texts.empty()) {
            throw ConfigError(o->in + " holds no background text");
        }
        auto vocab_texts = texts;
        if (!o->qa.empty()) {
            for (const auto& p : qa_pairs(read_samples(o->qa))) {
                vocab_texts.push_back(p.question);
                vocab_texts.push_back(p.answer);
            }
        }
        const Vocab vocab = Vocab::build(vocab_texts);
        Rng rng{ctx.seed};
        generator::Decoder decoder{o->arch.config(vocab.size()), rng};
        auto fit = o->fit;
        fit.seed = ctx.seed + 1;
        model::TrainingLog history{ctx.out / "train_log.csv"};
        const auto outcome = generator::pretrain_lm(decoder, vocab, texts, fit, &history);
        save_decoder(ctx.out, vocab, decoder);
        write_json(ctx.out / "metrics.json",
                   {{"epoch_loss", outcome.epoch_loss},
                    {"diverged", outcome.diverged},
                    {"perplexity", generator::perplexity(decoder, vocab, texts)},
                    {"parameter_count", parameter_count(decoder.params())},
                    {"input_layout", layout_of(generator::lm_sequence(texts.front(), vocab,
                                                                      decoder.config().context + 1))}});
        return outcome.diverged ? 2 : 0;
    };
}

Action setup_train_gen(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string train, graph, knowledge, init;
        bool no_knowledge = false, no_supplement = false;
        std::size_t knowledge_chars = 64, knowledge_epochs = 10;
        DecoderArch arch;
        generator::LmTrainConfig fit;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--train", o->train, "Dialogue JSONL with answers")->required()->check(CLI::ExistingFile);
    app.add_option("--graph", o->graph, "Knowledge-graph triples JSONL")->check(CLI::ExistingFile);
    app.add_option("--knowledge", o->knowledge, "Background text for knowledge injection (default: the graph)")
        ->check(CLI::ExistingFile);
    app.add_option("--init", o->init, "pretrain-lm output directory to start from")->check(CLI::ExistingDirectory);
    app.add_flag("--no-knowledge", o->no_knowledge, "Ablation: skip knowledge injection");
    app.add_flag("--no-input-supplement", o->no_supplement, "Ablation: no graph text in the input");
    app.add_option("--knowledge-chars", o->knowledge_chars, "Character budget of the supplement")
        ->capture_default_str();
    app.add_option("--knowledge-epochs", o->knowledge_epochs, "Knowledge injection epochs")->capture_default_str();
    o->arch.add(app);
    app.add_option("--epochs", o->fit.epochs, "QA fine-tuning epochs")->capture_default_str();
    app.add_option("--lr", o->fit.lr, "Learning rate")->capture_default_str();
    app.add_option("--batch-size", o->fit.batch_size, "Batch size")->capture_default_str();
    return [o, &ctx] {
        if (o->no_knowledge && !o->init.empty()) {
            throw ConfigError("--no-knowledge conflicts with --init, which already carries injected knowledge");
        }
        const auto pairs = qa_pairs(read_samples(o->train));
        std::optional<kgraph::KnowledgeGraph> graph;
        if (!o->graph.empty()) {
            graph = kgraph::load_triples(fs::path{o->graph});
        }
        std::vector<std::string> background;
        if (!o->no_knowledge && o->init.empty()) {
            if (!o->knowledge.empty()) {
                background = read_background(o->knowledge);
            } else if (graph) {
                for (const auto& t : graph->triples()) {
                    background.push_back(kgraph::serialize(t));
                }
            } else {
                log().warn("no background text or graph; knowledge injection skipped");
            }
        }

        Vocab vocab;
        std::unique_ptr<generator::Decoder> decoder;
        if (!o->init.empty()) {
            auto b = load_decoder(o->init);
            vocab = std::move(b.vocab);
            decoder = std::move(b.decoder);
        } else {
            std::vector<std::string> texts = background;
            for (const auto& p : pairs) {
                texts.push_back(p.question);
                texts.push_back(p.answer);
            }
            if (graph) {
                for (const auto& t : graph->triples()) {
                    texts.push_back(kgraph::serialize(t));
                }
            }
            vocab = Vocab::build(texts);
            Rng rng{ctx.seed};
            decoder = std::make_unique<generator::Decoder>(o->arch.config(vocab.size()), rng);
        }

        json stages = json::array();
        json layouts = json::object();
        json metrics;
        bool diverged = false;
        if (!o->init.empty()) {
            stages.push_back("knowledge_injection");
            metrics["knowledge_source"] = o->init;
        } else if (!background.empty()) {
            generator::LmTrainConfig kfit = o->fit;
            kfit.epochs = o->knowledge_epochs;
            kfit.seed = ctx.seed + 1;
            model::TrainingLog klog{ctx.out / "knowledge_log.csv"};
            const auto k = generator::pretrain_lm(*decoder, vocab, background, kfit, &klog);
            stages.push_back("knowledge_injection");
            layouts["knowledge_injection"] =
                layout_of(generator::lm_sequence(background.front(), vocab, decoder->config().context + 1));
            metrics["knowledge_epoch_loss"] = k.epoch_loss;
            diverged = k.diverged;
        }

        const generator::QaOptions qa{!o->no_supplement, o->knowledge_chars};
        const kgraph::KnowledgeGraph* gp = graph ? &*graph : nullptr;
        std::size_t supplemented = 0;
        std::string qa_layout;
        for (const auto& p : pairs) {
            const auto ex = generator::qa_example(p, vocab, gp, qa, decoder->config().context);
            if (!ex) {
                continue;
            }
            const bool has_info = qa.use_supplement && gp && !kgraph::retrieve(p.question, *gp, qa.knowledge_chars).empty();
            supplemented += has_info;
            if (qa_layout.empty() || (has_info && supplemented == 1)) {
                qa_layout = layout_of(ex->ids);
            }
        }
        if (!diverged) {
            generator::LmTrainConfig qfit = o->fit;
            qfit.seed = ctx.seed + 2;
            model::TrainingLog qlog{ctx.out / "train_log.csv"};
            const auto q = generator::finetune_qa(*decoder, vocab, pairs, gp, qfit, qa, &qlog);
            stages.push_back("qa_finetune");
            layouts["qa_finetune"] = qa_layout;
            metrics["qa_epoch_loss"] = q.epoch_loss;
            metrics["skipped_pairs"] = q.skipped;
            diverged = q.diverged;
        }
        metrics["diverged"] = diverged;
        metrics["parameter_count"] = parameter_count(decoder->params());
        save_decoder(ctx.out, vocab, *decoder);
        write_json(ctx.out / "gen.json", {{"use_supplement", qa.use_supplement},
                                          {"knowledge_chars", qa.knowledge_chars},
                                          {"stages", stages},
                                          {"input_layouts", layouts},
                                          {"supplemented_examples", supplemented}});
        write_json(ctx.out / "metrics.json", metrics);
        return diverged ? 2 : 0;
    };
}

Action setup_eval_gen(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string model, test, graph, encoder;
        Decoding decoding;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--model", o->model, "train-gen output directory")->required()->check(CLI::ExistingDirectory);
    app.add_option("--test", o->test, "Dialogue JSONL with reference answers")->required()->check(CLI::ExistingFile);
    app.add_option("--graph", o->graph, "Knowledge-graph triples JSONL")->check(CLI::ExistingFile);
    app.add_option("--encoder", o->encoder, "Encoder directory for embedding metrics (else one-hot)")
        ->check(CLI::ExistingDirectory);
    o->decoding.add(app);
    return [o, &ctx] {
        const auto b = load_decoder(o->model);
        auto gcfg = o->decoding.config(b.meta);
        std::optional<kgraph::KnowledgeGraph> graph;
        if (!o->graph.empty()) {
            graph = kgraph::load_triples(fs::path{o->graph});
        }
        const auto pairs = qa_pairs(read_samples(o->test));
        std::vector<std::string> gens, refs;
        std::vector<json> rows;
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            gcfg.seed = ctx.seed + i;
            const auto g = generator::generate(*b.decoder, b.vocab, pairs[i].question, graph ? &*graph : nullptr, gcfg);
            gens.push_back(g.answer);
            refs.push_back(pairs[i].answer);
            json row = generator::to_json(g);
            row["reference"] = pairs[i].answer;
            rows.push_back(row);
        }
        std::optional<EncoderBundle> enc;
        if (!o->encoder.empty()) {
            enc = load_encoder(o->encoder);
        }
        json m = genmetrics::to_json(
            genmetrics::report(gens, refs, enc ? enc->encoder.get() : nullptr, enc ? &enc->vocab : nullptr));
        m["reference_perplexity"] = generator::perplexity(*b.decoder, b.vocab, refs);
        write_jsonl(ctx.out / "generations.jsonl", rows);
        write_json(ctx.out / "metrics.json", m);
        print(m);
        return 0;
    };
}

Action setup_metrics(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string gen, ref, encoder;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--gen", o->gen, "Generated text, one per line (or JSONL with \"answer\")")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--ref", o->ref, "Reference text, line-aligned with --gen")->required()->check(CLI::ExistingFile);
    app.add_option("--encoder", o->encoder, "Encoder directory for embedding metrics (else one-hot)")
        ->check(CLI::ExistingDirectory);
    return [o, &ctx] {
        std::optional<EncoderBundle> enc;
        if (!o->encoder.empty()) {
            enc = load_encoder(o->encoder);
        }
        const json m = genmetrics::to_json(genmetrics::report(genmetrics::read_lines(o->gen),
                                                              genmetrics::read_lines(o->ref),
                                                              enc ? enc->encoder.get() : nullptr,
                                                              enc ? &enc->vocab : nullptr));
        write_json(ctx.out / "metrics.json", m);
        print(m);
        return 0;
    };
}

Action setup_chat(CLI::App& app, Context& ctx) {
    struct Opts {
        std::string model, graph;
        Decoding decoding;
    };
    auto o = std::make_shared<Opts>();
    app.add_option("--model,--ckpt", o->model, "train-gen output directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    app.add_option("--graph", o->graph, "Knowledge-graph triples JSONL")->check(CLI::ExistingFile);
    o->decoding.add(app);
    return [o, &ctx] {
        const auto b = load_decoder(o->model);
        auto gcfg = o->decoding.config(b.meta);
        std::optional<kgraph::KnowledgeGraph> graph;
        if (!o->graph.empty()) {
            graph = kgraph::load_triples(fs::path{o->graph});
        }
        std::ofstream transcript(ctx.out / "transcript.jsonl");
        std::string line;
        std::uint64_t turn = 0;
        while (std::getline(std::cin, line)) {
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (line.empty()) {
                continue;
            }
            gcfg.seed = ctx.seed + turn++;
            const auto g = generator::generate(*b.decoder, b.vocab, line, graph ? &*graph : nullptr, gcfg);
            std::cout << "supplement: " << g.supplement << '\n' << "answer: " << g.answer << std::endl;
            transcript << generator::to_json(g).dump() << '\n';
        }
        return 0;
    };
}

const std::vector<Command>& commands() {
    static const std::vector<Command> all{
        {"stats", "Dataset statistics", false, setup_stats},
        {"clean", "Drop entries with missing or short fields", false, setup_clean},
        {"split", "Seeded, stratified train/test split", true, setup_split},
        {"small-sample", "Keep only low-frequency categories", false, setup_small_sample},
        {"pretrain-encoder", "Masked-LM pre-training of the encoder", true, setup_pretrain_encoder},
        {"train-triage", "Supervised triage classifier", true, setup_train_triage},
        {"eval-triage", "Evaluate a triage classifier", false, setup_eval_triage},
        {"train-prompt", "Prompt-learning triage classifier", true, setup_train_prompt},
        {"eval-prompt", "Evaluate a prompt classifier", false, setup_eval_prompt},
        {"pretrain-lm", "Knowledge injection for the generator", true, setup_pretrain_lm},
        {"train-gen", "Knowledge injection plus QA fine-tuning", true, setup_train_gen},
        {"eval-gen", "Generate answers and score them", true, setup_eval_gen},
        {"metrics", "Score generated text against references", false, setup_metrics},
        {"chat", "Answer questions read from stdin", true, setup_chat},
    };
    return all;
}

void usage(std::ostream& os) {
    os << "usage: medkit <command> [options]   (medkit <command> --help for details)\n\ncommands:\n";
    for (const auto& c : commands()) {
        os << "  " << c.name << std::string(20 - std::string(c.name).size(), ' ') << c.summary << '\n';
    }
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        usage(std::cerr);
        return 1;
    }
    const std::string name = argv[1];
    if (name == "-h" || name == "--help") {
        usage(std::cout);
        return 0;
    }
    const auto it = std::find_if(commands().begin(), commands().end(), [&](const auto& c) { return name == c.name; });
    if (it == commands().end()) {
        std::cerr << "unknown command '" << name << "'\n";
        usage(std::cerr);
        return 1;
    }

    CLI::App app{it->summary, "medkit " + name};
    app.set_config("--config", "", "key = value file using the long option names; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    Context ctx;
    app.add_option("--out", ctx.out, "Output directory")->required();
    if (it->seeded) {
        app.add_option("--seed", ctx.seed, "Seed for all randomness")->capture_default_str();
    }
    const Action action = it->setup(app, ctx);
    try {
        app.parse(argc - 1, argv + 1);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        fs::create_directories(ctx.out);
        std::ofstream resolved(ctx.out / "config.txt");
        resolved << app.config_to_str(true, false);
        resolved.close();
        return action();
    } catch (const medkit::ConfigError& e) {
        log().error("{}", e.what());
        return 1;
    } catch (const medkit::FormatError& e) {
        log().error("{}", e.what());
        return 1;
    } catch (const nlohmann::json::exception& e) {
        log().error("{}", e.what());
        return 1;
    } catch (const std::exception& e) {
        log().error("{}", e.what());
        return 2;
    }
}
