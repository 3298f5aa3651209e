#include "duplexforge/duplex.hpp"

#include <fstream>

#include "json.hpp"

namespace duplexforge {

using ordered_json = nlohmann::ordered_json;

double Timeline::speech_seconds() const {
    double total = 0.0;
    for (const Segment& s : segments) total += s.duration();
    return total;
}

double Timeline::end_time() const {
    return segments.empty() ? 0.0 : segments.back().end_s;
}

ModelAgent::ModelAgent(std::shared_ptr<const Model> model, InstructionPrefix prefix,
                       SamplingParams sampling, uint64_t seed, int max_context)
    : model_(std::move(model)),
      prefix_(std::move(prefix)),
      sampling_(sampling),
      seed_(seed),
      max_context_(max_context) {
    if (prefix_.prompt_tokens.empty()) {
        throw std::invalid_argument("instruction prefix must have prompt tokens");
    }
    reset();
}

void ModelAgent::reset() {
    state_ = std::make_unique<SequenceState>(*model_);
    rng_ = std::make_unique<Rng>(seed_);
    prev_heard_ = silence_frame(model_->cfg.layout);
    started_ = false;

    state_->feed(model_->params.speaker_proj * model_->reference_vector(prefix_.speaker_slot));
    for (int32_t tok : prefix_.prompt_tokens) {
        state_->feed(model_->params.text_embed.row(tok).transpose());
    }
}

SampledStep ModelAgent::step(const DauFrame& heard) {
    if (state_->position() + 1 > static_cast<size_t>(max_context_)) {
        throw std::length_error("inference context overflow");
    }
    if (started_) {
        // Embed the previous frame triple; its user slot carries what was
        // heard one step before that (u_t = other agent's frame at t-1).
        state_->feed(embed_frames(*model_, prev_heard_, last_.sys_frame, last_.text_token));
    }
    prev_heard_ = heard;
    last_ = sample_step(state_->logits(), sampling_, *rng_, model_->cfg.layout);
    started_ = true;
    return last_;
}

ScriptedAgent::ScriptedAgent(ScriptedBehavior behavior, CodebookLayout layout)
    : behavior_(behavior), layout_(layout) {}

void ScriptedAgent::reset() { t_ = 0; }

SampledStep ScriptedAgent::step(const DauFrame& heard) {
    SampledStep out;
    auto ov = overrides_.find(t_);
    if (ov != overrides_.end()) {
        out.sys_frame = ov->second;
    } else if (behavior_.echo) {
        std::optional<int32_t> sym = decode_frame(heard, layout_);
        bool voiced = !(sym.has_value() && *sym == kSilenceSymbol);
        out.sys_frame = voiced ? encode_symbol(behavior_.symbol, layout_)
                               : silence_frame(layout_);
    } else {
        bool speaking = t_ >= behavior_.wait_frames &&
                        t_ < behavior_.wait_frames + behavior_.speak_frames;
        out.sys_frame =
            speaking ? encode_symbol(behavior_.symbol, layout_) : silence_frame(layout_);
    }
    out.text_token = kPadToken;
    ++t_;
    return out;
}

void ScriptedAgent::override_frame(int step, DauFrame frame) {
    overrides_[step] = std::move(frame);
}

ConversationRecord converse(Agent& a, Agent& b, size_t n_frames, const CodebookLayout& layout) {
    if (n_frames < 1) throw std::invalid_argument("n_frames must be >= 1");
    a.reset();
    b.reset();
    ConversationRecord rec;
    rec.n_frames = n_frames;
    rec.layout = layout;
    DauFrame sil = silence_frame(layout);
    for (size_t t = 0; t < n_frames; ++t) {
        const DauFrame& heard_a = t == 0 ? sil : rec.agents[1].frames[t - 1];
        const DauFrame& heard_b = t == 0 ? sil : rec.agents[0].frames[t - 1];
        SampledStep sa = a.step(heard_a);
        SampledStep sb = b.step(heard_b);
        rec.agents[0].frames.push_back(std::move(sa.sys_frame));
        rec.agents[0].text.push_back(sa.text_token);
        rec.agents[1].frames.push_back(std::move(sb.sys_frame));
        rec.agents[1].text.push_back(sb.text_token);
    }
    return rec;
}

std::array<Timeline, 2> record_to_timelines(const ConversationRecord& rec,
                                            const CodebookLayout& layout) {
    std::array<Timeline, 2> out;
    double dt = layout.frame_duration_s();
    for (size_t ai = 0; ai < 2; ++ai) {
        const auto& frames = rec.agents[ai].frames;
        size_t t = 0;
        while (t < frames.size()) {
            std::optional<int32_t> sym = decode_frame(frames[t], layout);
            bool voiced = !(sym.has_value() && *sym == kSilenceSymbol);
            if (!voiced) {
                ++t;
                continue;
            }
            size_t start = t;
            while (t < frames.size()) {
                std::optional<int32_t> s = decode_frame(frames[t], layout);
                if (s.has_value() && *s == kSilenceSymbol) break;
                ++t;
            }
            out[ai].segments.push_back(
                {static_cast<double>(start) * dt, static_cast<double>(t) * dt});
        }
    }
    return out;
}

std::string first_speaker_name(FirstSpeaker f) {
    switch (f) {
        case FirstSpeaker::a: return "a";
        case FirstSpeaker::b: return "b";
        case FirstSpeaker::tie: return "tie";
        case FirstSpeaker::none: return "none";
    }
    return "none";
}

FirstSpeaker first_speaker(const Timeline& a, const Timeline& b) {
    if (a.empty() && b.empty()) return FirstSpeaker::none;
    if (a.empty()) return FirstSpeaker::b;
    if (b.empty()) return FirstSpeaker::a;
    double sa = a.segments.front().start_s;
    double sb = b.segments.front().start_s;
    if (sa < sb) return FirstSpeaker::a;
    if (sb < sa) return FirstSpeaker::b;
    return FirstSpeaker::tie;
}

namespace {

ordered_json transcript_to_json(const AgentTranscript& a) {
    ordered_json j;
    j["speaker"] = a.speaker;
    j["speaker_slot"] = a.speaker_slot;
    j["prompted_starts"] = a.prompted_starts;
    j["prompted_backchannels"] = a.prompted_backchannels;
    j["prompted_interruptions"] = a.prompted_interruptions;
    j["seed"] = a.seed;
    ordered_json frames = ordered_json::array();
    for (const DauFrame& f : a.frames) frames.push_back(f.codes);
    j["frames"] = std::move(frames);
    j["text"] = a.text;
    return j;
}

AgentTranscript transcript_from_json(const ordered_json& j) {
    AgentTranscript a;
    a.speaker = j.at("speaker").get<std::string>();
    a.speaker_slot = j.at("speaker_slot").get<std::string>();
    a.prompted_starts = j.at("prompted_starts").get<bool>();
    a.prompted_backchannels = j.at("prompted_backchannels").get<int>();
    a.prompted_interruptions = j.at("prompted_interruptions").get<int>();
    a.seed = j.at("seed").get<uint64_t>();
    for (const auto& row : j.at("frames")) {
        DauFrame f;
        f.codes = row.get<std::vector<int32_t>>();
        a.frames.push_back(std::move(f));
    }
    a.text = j.at("text").get<std::vector<int32_t>>();
    return a;
}

}  // namespace

std::string conversation_to_json_line(const ConversationRecord& rec) {
    ordered_json j;
    j["schema"] = kCorpusSchema;
    j["dialogue_id"] = rec.dialogue_id;
    j["seed"] = rec.seed;
    j["n_frames"] = rec.n_frames;
    j["sampling"] = ordered_json{
        {"temperature", rec.sampling.temperature},
        {"top_k", rec.sampling.top_k},
        {"top_p", rec.sampling.top_p},
    };
    j["layout"] = ordered_json{
        {"kind", layout_kind_name(rec.layout.kind)},
        {"n_codebooks", rec.layout.n_codebooks},
        {"codebook_size", rec.layout.codebook_size},
        {"frame_rate_hz", rec.layout.frame_rate_hz},
    };
    j["agents"] = ordered_json::array(
        {transcript_to_json(rec.agents[0]), transcript_to_json(rec.agents[1])});
    return j.dump();
}

ConversationRecord conversation_from_json_line(const std::string& line, size_t line_no) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("conversation line " + std::to_string(line_no) + ": " + e.what());
    }
    ConversationRecord rec;
    rec.dialogue_id = j.at("dialogue_id").get<std::string>();
    rec.seed = j.at("seed").get<uint64_t>();
    rec.n_frames = j.at("n_frames").get<size_t>();
    rec.sampling.temperature = j.at("sampling").at("temperature").get<double>();
    rec.sampling.top_k = j.at("sampling").at("top_k").get<int>();
    rec.sampling.top_p = j.at("sampling").at("top_p").get<double>();
    const auto& jl = j.at("layout");
    rec.layout.kind = layout_kind_from_name(jl.at("kind").get<std::string>());
    rec.layout.n_codebooks = jl.at("n_codebooks").get<int>();
    rec.layout.codebook_size = jl.at("codebook_size").get<int>();
    rec.layout.frame_rate_hz = jl.at("frame_rate_hz").get<double>();
    rec.agents[0] = transcript_from_json(j.at("agents").at(0));
    rec.agents[1] = transcript_from_json(j.at("agents").at(1));
    return rec;
}

void save_conversations(const std::string& path, const std::vector<ConversationRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write conversations file: " + path);
    for (const ConversationRecord& rec : records) {
        out << conversation_to_json_line(rec) << '\n';
    }
}

std::vector<ConversationRecord> load_conversations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open conversations file: " + path);
    std::vector<ConversationRecord> records;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        records.push_back(conversation_from_json_line(line, line_no));
    }
    return records;
}

}  // namespace duplexforge
