#pragma once

// Model directories written and read by the medkit subcommands.

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "medkit/corpus/dialogue.hpp"
#include "medkit/errors.hpp"
#include "medkit/generator/decoder.hpp"
#include "medkit/kgraph/graph.hpp"
#include "medkit/model/encoder.hpp"
#include "medkit/numerics/checkpoint.hpp"
#include "medkit/prompt/prompt.hpp"
#include "medkit/text/vocab.hpp"
#include "medkit/triage/train.hpp"

namespace medkit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    for (const auto& r : rows) {
        out << r.dump() << '\n';
    }
}

inline corpus::Granularity parse_granularity(const std::string& g) {
    if (g == "coarse") {
        return corpus::Granularity::coarse;
    }
    if (g == "fine") {
        return corpus::Granularity::fine;
    }
    throw ConfigError("granularity must be coarse or fine, got '" + g + "'");
}

// Dialogue samples from a JSONL file; malformed lines are logged and skipped.
inline std::vector<corpus::DialogueSample> read_samples(const fs::path& path) {
    auto in = corpus::ingest(path);
    for (const auto& r : in.rejects) {
        log().warn("{}:{}: {}", path.string(), r.line, r.reason);
    }
    return std::move(in.samples);
}

// Background text for knowledge injection: plain lines, triples ({head,
// relation, tail}) or dialogues ({question, answer}).
inline std::vector<std::string> read_background(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (line.front() == '{') {
            const auto j = json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.is_object()) {
                if (j.contains("head") && j.contains("relation") && j.contains("tail")) {
                    out.push_back(kgraph::serialize({j["head"].get<std::string>(), j["relation"].get<std::string>(),
                                                     j["tail"].get<std::string>()}));
                    continue;
                }
                if (j.contains("question")) {
                    std::string t = j["question"].get<std::string>();
                    if (j.contains("answer") && j["answer"].is_string()) {
                        t += j["answer"].get<std::string>();
                    }
                    out.push_back(t);
                    continue;
                }
            }
        }
        out.push_back(line);
    }
    return out;
}

inline std::vector<generator::QaPair> qa_pairs(const std::vector<corpus::DialogueSample>& samples) {
    std::vector<generator::QaPair> out;
    for (const auto& s : samples) {
        if (s.answer && !s.answer->empty()) {
            out.push_back({s.question, *s.answer});
        }
    }
    if (out.empty()) {
        throw ConfigError("no question/answer pairs in the input");
    }
    return out;
}

// --- encoder directory: vocab.txt, encoder.json, encoder.bin ---

struct EncoderBundle {
    Vocab vocab;
    std::unique_ptr<model::Encoder> encoder;
};

inline void save_encoder(const fs::path& dir, const Vocab& vocab, const model::Encoder& encoder) {
    vocab.save(dir / "vocab.txt");
    write_json(dir / "encoder.json", model::to_json(encoder.config()));
    checkpoint::save(dir / "encoder.bin", encoder.params());
}

inline EncoderBundle load_encoder(const fs::path& dir) {
    EncoderBundle b;
    b.vocab = Vocab::load(dir / "vocab.txt");
    const auto cfg = model::encoder_config_from_json(read_json(dir / "encoder.json"));
    Rng rng{0};
    b.encoder = std::make_unique<model::Encoder>(cfg, rng);
    ParamList params = b.encoder->params();
    checkpoint::restore(dir / "encoder.bin", params);
    return b;
}

// --- triage directory: vocab.txt, model.json, model.bin, labels.json ---

struct TriageBundle {
    Vocab vocab;
    triage::LabelMap labels;
    corpus::Granularity granularity = corpus::Granularity::coarse;
    std::unique_ptr<triage::TriageModel> model;
};

inline void save_triage(const fs::path& dir, const TriageBundle& b) {
    b.vocab.save(dir / "vocab.txt");
    b.labels.save(dir / "labels.json");
    write_json(dir / "model.json",
               {{"encoder", model::to_json(b.model->encoder().config())},
                {"triage", triage::to_json(b.model->head().config())},
                {"granularity", b.granularity == corpus::Granularity::coarse ? "coarse" : "fine"}});
    checkpoint::save(dir / "model.bin", b.model->params());
}

inline TriageBundle load_triage(const fs::path& dir) {
    TriageBundle b;
    b.vocab = Vocab::load(dir / "vocab.txt");
    b.labels = triage::LabelMap::load(dir / "labels.json");
    const json j = read_json(dir / "model.json");
    b.granularity = parse_granularity(j.at("granularity").get<std::string>());
    Rng rng{0};
    b.model = std::make_unique<triage::TriageModel>(model::encoder_config_from_json(j.at("encoder")),
                                                    triage::triage_config_from_json(j.at("triage")), rng);
    ParamList params = b.model->params();
    checkpoint::restore(dir / "model.bin", params);
    return b;
}

// --- decoder directory: vocab.txt, decoder.json, decoder.bin ---

struct DecoderBundle {
    Vocab vocab;
    std::unique_ptr<generator::Decoder> decoder;
    json meta;  // gen.json when present
};

inline void save_decoder(const fs::path& dir, const Vocab& vocab, const generator::Decoder& decoder) {
    vocab.save(dir / "vocab.txt");
    write_json(dir / "decoder.json", generator::to_json(decoder.config()));
    checkpoint::save(dir / "decoder.bin", decoder.params());
}

inline DecoderBundle load_decoder(const fs::path& dir) {
    DecoderBundle b;
    b.vocab = Vocab::load(dir / "vocab.txt");
    Rng rng{0};
    b.decoder = std::make_unique<generator::Decoder>(
        generator::decoder_config_from_json(read_json(dir / "decoder.json")), rng);
    ParamList params = b.decoder->params();
    checkpoint::restore(dir / "decoder.bin", params);
    if (fs::exists(dir / "gen.json")) {
        b.meta = read_json(dir / "gen.json");
    }
    return b;
}

// Token layout of a training sequence: special tokens by name, runs of
// ordinary tokens as "*".
inline std::string layout_of(const std::vector<TokenId>& ids) {
    std::string out;
    bool in_run = false;
    for (auto id : ids) {
        if (Vocab::is_special(id)) {
            out += (out.empty() ? "" : " ") + std::string(special::kNames[id]);
            in_run = false;
        } else if (!in_run) {
            out += out.empty() ? "*" : " *";
            in_run = true;
        }
    }
    return out;
}

}  // namespace medkit::cli
