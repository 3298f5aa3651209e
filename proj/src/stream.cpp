#include "duplexforge/stream.hpp"

#include <algorithm>
#include <fstream>

#include "json.hpp"

namespace duplexforge {

using ordered_json = nlohmann::ordered_json;

std::string alignment_mode_name(AlignmentMode m) {
    return m == AlignmentMode::word ? "word" : "utterance";
}

AlignmentMode alignment_mode_from_name(const std::string& name) {
    if (name == "word") return AlignmentMode::word;
    if (name == "utterance") return AlignmentMode::utterance;
    throw std::invalid_argument("unknown alignment mode: " + name);
}

std::string loss_mode_name(LossMode m) { return m == LossMode::s ? "s" : "s_u"; }

LossMode loss_mode_from_name(const std::string& name) {
    if (name == "s") return LossMode::s;
    if (name == "s_u" || name == "s/u") return LossMode::s_u;
    throw std::invalid_argument("unknown loss mode: " + name);
}

uint32_t user_head_bits(const CodebookLayout& layout) {
    return (1u << layout.n_codebooks) - 1u;
}

uint32_t sys_head_bits(const CodebookLayout& layout) {
    return user_head_bits(layout) << layout.n_codebooks;
}

uint32_t text_head_bit(const CodebookLayout& layout) {
    return 1u << (2 * layout.n_codebooks);
}

uint32_t mask_bits_for_mode(LossMode mode, const CodebookLayout& layout) {
    uint32_t bits = sys_head_bits(layout) | text_head_bit(layout);
    if (mode == LossMode::s_u) bits |= user_head_bits(layout);
    return bits;
}

std::string render_prompt(const std::string& narrative, const std::string& system_name,
                          const std::string& other_name, const BehaviorSpec& behavior) {
    std::string out;
    out += "Generate a dialogue between you (" + system_name + ") and another speaker (" +
           other_name +
           ") based on the given narrative. Follow the specific behavior instructions for you.\n";
    out += "\n";
    out += "Narrative:\n";
    out += "- " + narrative + "\n";
    out += "\n";
    out += "Your behaviors:\n";
    out += "- backchannels: " + std::to_string(behavior.backchannels) + "\n";
    out += "- interruptions: " + std::to_string(behavior.interruptions) + "\n";
    out += std::string("- starts the dialogue: ") + (behavior.starts ? "True" : "False") + "\n";
    out += "\n";
    out += "Ensure that the dialogue reflects the behaviours of you.";
    return out;
}

int64_t grid_frames(const Dialogue& d, const CodebookLayout& layout) {
    int64_t frames = 0;
    for (const Utterance& u : d.utterances) {
        for (const WordSpan& w : u.words) {
            frames = std::max(frames, frame_end_of_time(w.end_s, layout.frame_rate_hz));
        }
    }
    return frames;
}

namespace {

struct PlacedWord {
    size_t utterance_index;
    size_t word_index;
    int64_t onset_frame;
    std::vector<int32_t> tokens;
};

std::vector<PlacedWord> system_words(const Dialogue& d, const std::string& system_speaker,
                                     Vocabulary& vocab, const CodebookLayout& layout) {
    std::vector<PlacedWord> words;
    for (size_t ui = 0; ui < d.utterances.size(); ++ui) {
        const Utterance& u = d.utterances[ui];
        if (u.speaker != system_speaker) continue;
        for (size_t wi = 0; wi < u.words.size(); ++wi) {
            PlacedWord pw;
            pw.utterance_index = ui;
            pw.word_index = wi;
            pw.onset_frame = frame_of_time(u.words[wi].start_s, layout.frame_rate_hz);
            pw.tokens = vocab.tokenize(u.words[wi].text);
            words.push_back(std::move(pw));
        }
    }
    return words;
}

}  // namespace

TextStream align_text(const Dialogue& d, const std::string& system_speaker, AlignmentMode mode,
                      Vocabulary& vocab, const CodebookLayout& layout) {
    int64_t total = grid_frames(d, layout);
    TextStream stream;
    stream.tokens.assign(static_cast<size_t>(total), kPadToken);

    if (mode == AlignmentMode::word) {
        std::vector<PlacedWord> words = system_words(d, system_speaker, vocab, layout);
        for (size_t i = 0; i < words.size(); ++i) {
            int64_t limit = (i + 1 < words.size()) ? words[i + 1].onset_frame : total;
            const PlacedWord& pw = words[i];
            if (pw.onset_frame + static_cast<int64_t>(pw.tokens.size()) > limit) {
                throw StreamError("token overflow at utterances[" +
                                  std::to_string(pw.utterance_index) + "].words[" +
                                  std::to_string(pw.word_index) + "]: " +
                                  std::to_string(pw.tokens.size()) +
                                  " tokens do not fit before the next onset");
            }
            for (size_t j = 0; j < pw.tokens.size(); ++j) {
                stream.tokens[static_cast<size_t>(pw.onset_frame) + j] = pw.tokens[j];
            }
        }
    } else {
        struct PlacedUtterance {
            size_t index;
            int64_t onset_frame;
            std::vector<int32_t> tokens;
        };
        std::vector<PlacedUtterance> utts;
        for (size_t ui = 0; ui < d.utterances.size(); ++ui) {
            const Utterance& u = d.utterances[ui];
            if (u.speaker != system_speaker) continue;
            PlacedUtterance pu;
            pu.index = ui;
            pu.onset_frame = frame_of_time(u.start_s(), layout.frame_rate_hz);
            for (const WordSpan& w : u.words) {
                for (int32_t tok : vocab.tokenize(w.text)) pu.tokens.push_back(tok);
            }
            utts.push_back(std::move(pu));
        }
        for (size_t i = 0; i < utts.size(); ++i) {
            int64_t limit = (i + 1 < utts.size()) ? utts[i + 1].onset_frame : total;
            const PlacedUtterance& pu = utts[i];
            if (pu.onset_frame + static_cast<int64_t>(pu.tokens.size()) > limit) {
                throw StreamError("token overflow at utterances[" + std::to_string(pu.index) +
                                  "]: " + std::to_string(pu.tokens.size()) +
                                  " tokens do not fit before the next utterance");
            }
            for (size_t j = 0; j < pu.tokens.size(); ++j) {
                stream.tokens[static_cast<size_t>(pu.onset_frame) + j] = pu.tokens[j];
            }
        }
    }
    return stream;
}

void apply_audio_delay(std::vector<DauFrame>& user_frames, std::vector<DauFrame>& sys_frames,
                       TextStream& sys_text, int delay, const CodebookLayout& layout) {
    if (delay < 0 || delay > 2) {
        throw std::invalid_argument("audio delay must be 0, 1 or 2");
    }
    if (delay == 0) return;
    DauFrame sil = silence_frame(layout);
    user_frames.insert(user_frames.begin(), static_cast<size_t>(delay), sil);
    sys_frames.insert(sys_frames.begin(), static_cast<size_t>(delay), sil);
    sys_text.tokens.insert(sys_text.tokens.end(), static_cast<size_t>(delay), kPadToken);
}

TextStream insert_behavior_tokens(TextStream sys_text, const Dialogue& d,
                                  const std::string& system_speaker,
                                  const CodebookLayout& layout) {
    const int64_t total = static_cast<int64_t>(sys_text.tokens.size());
    for (size_t ui = 0; ui < d.utterances.size(); ++ui) {
        const Utterance& u = d.utterances[ui];
        if (u.speaker != system_speaker) continue;
        if (!u.is_backchannel && !u.is_interruption) continue;
        int32_t marker = u.is_backchannel ? kBcToken : kIntToken;
        int64_t onset = frame_of_time(u.start_s(), layout.frame_rate_hz);
        if (onset > 0 && sys_text.tokens[static_cast<size_t>(onset - 1)] == kPadToken) {
            sys_text.tokens[static_cast<size_t>(onset - 1)] = marker;
            continue;
        }
        // Occupied (or no frame before): take the onset frame and push the
        // contiguous token run starting there one frame to the right.
        int64_t run_end = onset;
        while (run_end < total && sys_text.tokens[static_cast<size_t>(run_end)] != kPadToken) {
            ++run_end;
        }
        if (run_end >= total) {
            throw StreamError("token overflow after shift at utterances[" + std::to_string(ui) +
                              "]: no room to place behavior token");
        }
        for (int64_t p = run_end; p > onset; --p) {
            sys_text.tokens[static_cast<size_t>(p)] = sys_text.tokens[static_cast<size_t>(p - 1)];
        }
        sys_text.tokens[static_cast<size_t>(onset)] = marker;
    }
    return sys_text;
}

int32_t word_symbol(const std::string& word_text) {
    return static_cast<int32_t>(fnv1a64(word_text) % (kSymbolAlphabetSize - 1)) + 1;
}

SymbolTrack speaker_track(const Dialogue& d, const std::string& speaker,
                          const CodebookLayout& layout) {
    SymbolTrack track;
    track.frame_duration_s = layout.frame_duration_s();
    track.symbols.assign(static_cast<size_t>(grid_frames(d, layout)), kSilenceSymbol);
    for (const Utterance& u : d.utterances) {
        if (u.speaker != speaker) continue;
        for (const WordSpan& w : u.words) {
            int32_t sym = word_symbol(w.text);
            int64_t first = frame_of_time(w.start_s, layout.frame_rate_hz);
            int64_t last = std::max(frame_end_of_time(w.end_s, layout.frame_rate_hz), first + 1);
            for (int64_t f = first; f < last; ++f) {
                track.symbols[static_cast<size_t>(f)] = sym;
            }
        }
    }
    return track;
}

TrainingExample assemble_example(const Dialogue& d, const std::string& system_speaker,
                                 const StreamConfig& cfg, const CodebookLayout& layout,
                                 Vocabulary& vocab) {
    TrainingExample ex;
    ex.dialogue_id = d.id;
    ex.system_speaker = system_speaker;
    ex.config = cfg;
    ex.layout = layout;

    const std::string& other = d.other_speaker(system_speaker);
    std::string prompt = render_prompt(d.narrative, system_speaker, other,
                                       d.behavior.at(system_speaker));
    ex.prefix.prompt_tokens = vocab.tokenize(prompt);
    auto ref = d.speaker_ref.find(system_speaker);
    ex.prefix.speaker_slot = ref != d.speaker_ref.end() ? ref->second : system_speaker;

    ex.user_frames = track_to_frames(speaker_track(d, other, layout), layout);
    ex.sys_frames = track_to_frames(speaker_track(d, system_speaker, layout), layout);
    ex.sys_text = align_text(d, system_speaker, cfg.alignment, vocab, layout);
    if (cfg.behavior_tokens) {
        ex.sys_text = insert_behavior_tokens(std::move(ex.sys_text), d, system_speaker, layout);
    }
    apply_audio_delay(ex.user_frames, ex.sys_frames, ex.sys_text, cfg.audio_delay_frames, layout);

    size_t total = ex.total_length();
    if (total > cfg.max_sequence_length) {
        throw StreamError("sequence overflow for dialogue \"" + d.id + "\": length " +
                          std::to_string(total) + " exceeds " +
                          std::to_string(cfg.max_sequence_length) + "; truncation to " +
                          std::to_string(cfg.max_sequence_length - ex.prefix_length()) +
                          " frames required");
    }
    uint32_t frame_bits = mask_bits_for_mode(cfg.loss_mode, layout);
    ex.loss_mask.assign(total, 0u);
    for (size_t p = ex.prefix_length(); p < total; ++p) {
        ex.loss_mask[p] = frame_bits;
    }
    return ex;
}

std::vector<int32_t> strip_padding(const std::vector<int32_t>& tokens) {
    std::vector<int32_t> out;
    out.reserve(tokens.size());
    for (int32_t t : tokens) {
        if (t != kPadToken && t != kBcToken && t != kIntToken && t != kEosToken) {
            out.push_back(t);
        }
    }
    return out;
}

std::vector<int32_t> strip_padding(const TextStream& stream) {
    return strip_padding(stream.tokens);
}

namespace {

constexpr char kBinaryMagic[6] = {'D', 'F', 'E', 'X', '1', '\n'};

ordered_json frames_to_json(const std::vector<DauFrame>& frames) {
    ordered_json arr = ordered_json::array();
    for (const DauFrame& f : frames) arr.push_back(f.codes);
    return arr;
}

std::vector<DauFrame> frames_from_json(const ordered_json& arr) {
    std::vector<DauFrame> frames;
    for (const auto& row : arr) {
        DauFrame f;
        f.codes = row.get<std::vector<int32_t>>();
        frames.push_back(std::move(f));
    }
    return frames;
}

ordered_json example_to_json(const TrainingExample& ex) {
    ordered_json j;
    j["schema"] = kCorpusSchema;
    j["dialogue_id"] = ex.dialogue_id;
    j["system_speaker"] = ex.system_speaker;
    j["speaker_slot"] = ex.prefix.speaker_slot;
    j["prompt_tokens"] = ex.prefix.prompt_tokens;
    j["user_frames"] = frames_to_json(ex.user_frames);
    j["sys_frames"] = frames_to_json(ex.sys_frames);
    j["sys_text"] = ex.sys_text.tokens;
    j["loss_mask"] = ex.loss_mask;
    j["config"] = ordered_json{
        {"alignment", alignment_mode_name(ex.config.alignment)},
        {"audio_delay_frames", ex.config.audio_delay_frames},
        {"behavior_tokens", ex.config.behavior_tokens},
        {"loss_mode", loss_mode_name(ex.config.loss_mode)},
        {"max_sequence_length", ex.config.max_sequence_length},
    };
    j["layout"] = ordered_json{
        {"kind", layout_kind_name(ex.layout.kind)},
        {"n_codebooks", ex.layout.n_codebooks},
        {"codebook_size", ex.layout.codebook_size},
        {"frame_rate_hz", ex.layout.frame_rate_hz},
    };
    return j;
}

TrainingExample example_from_json(const ordered_json& j) {
    TrainingExample ex;
    ex.dialogue_id = j.at("dialogue_id").get<std::string>();
    ex.system_speaker = j.at("system_speaker").get<std::string>();
    ex.prefix.speaker_slot = j.at("speaker_slot").get<std::string>();
    ex.prefix.prompt_tokens = j.at("prompt_tokens").get<std::vector<int32_t>>();
    ex.user_frames = frames_from_json(j.at("user_frames"));
    ex.sys_frames = frames_from_json(j.at("sys_frames"));
    ex.sys_text.tokens = j.at("sys_text").get<std::vector<int32_t>>();
    ex.loss_mask = j.at("loss_mask").get<std::vector<uint32_t>>();
    const auto& jc = j.at("config");
    ex.config.alignment = alignment_mode_from_name(jc.at("alignment").get<std::string>());
    ex.config.audio_delay_frames = jc.at("audio_delay_frames").get<int>();
    ex.config.behavior_tokens = jc.at("behavior_tokens").get<bool>();
    ex.config.loss_mode = loss_mode_from_name(jc.at("loss_mode").get<std::string>());
    ex.config.max_sequence_length = jc.at("max_sequence_length").get<size_t>();
    const auto& jl = j.at("layout");
    ex.layout.kind = layout_kind_from_name(jl.at("kind").get<std::string>());
    ex.layout.n_codebooks = jl.at("n_codebooks").get<int>();
    ex.layout.codebook_size = jl.at("codebook_size").get<int>();
    ex.layout.frame_rate_hz = jl.at("frame_rate_hz").get<double>();
    return ex;
}

}  // namespace

void save_examples(const std::string& path, const std::vector<TrainingExample>& examples,
                   ExampleFileFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write example file: " + path);
    }
    if (format == ExampleFileFormat::jsonl) {
        for (const TrainingExample& ex : examples) {
            out << example_to_json(ex).dump() << '\n';
        }
        return;
    }
    out.write(kBinaryMagic, sizeof(kBinaryMagic));
    for (const TrainingExample& ex : examples) {
        std::vector<uint8_t> payload = ordered_json::to_msgpack(example_to_json(ex));
        uint64_t len = payload.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
    }
}

std::vector<TrainingExample> load_examples(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open example file: " + path);
    }
    std::vector<TrainingExample> examples;
    char magic[sizeof(kBinaryMagic)] = {};
    in.read(magic, sizeof(magic));
    if (in.gcount() == sizeof(magic) && std::equal(magic, magic + sizeof(magic), kBinaryMagic)) {
        uint64_t len = 0;
        while (in.read(reinterpret_cast<char*>(&len), sizeof(len))) {
            std::vector<uint8_t> payload(len);
            if (!in.read(reinterpret_cast<char*>(payload.data()),
                         static_cast<std::streamsize>(len))) {
                throw std::runtime_error("truncated example record in " + path);
            }
            examples.push_back(example_from_json(ordered_json::from_msgpack(payload)));
        }
        return examples;
    }
    in.clear();
    in.seekg(0);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            examples.push_back(example_from_json(ordered_json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("example file " + path + " line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
    }
    return examples;
}

}  // namespace duplexforge
