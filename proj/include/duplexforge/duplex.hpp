#pragma once

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "duplexforge/codec.hpp"
#include "duplexforge/model.hpp"
#include "duplexforge/timeline.hpp"

namespace duplexforge {

// Lockstep participant. step() is called once per frame; `heard` is the
// other agent's system frame from the previous step (silence at t=0).
class Agent {
  public:
    virtual ~Agent() = default;
    virtual void reset() = 0;
    virtual SampledStep step(const DauFrame& heard) = 0;
};

class ModelAgent : public Agent {
  public:
    ModelAgent(std::shared_ptr<const Model> model, InstructionPrefix prefix,
               SamplingParams sampling, uint64_t seed, int max_context = 1024);

    void reset() override;
    SampledStep step(const DauFrame& heard) override;

    size_t prefix_length() const { return prefix_.length(); }

  private:
    std::shared_ptr<const Model> model_;
    InstructionPrefix prefix_;
    SamplingParams sampling_;
    uint64_t seed_;
    int max_context_;

    std::unique_ptr<SequenceState> state_;
    std::unique_ptr<Rng> rng_;
    DauFrame prev_heard_;
    SampledStep last_;
    bool started_ = false;
};

// Deterministic rule-based agent for harness tests. Speaks `symbol` for
// speak_frames steps after wait_frames; in echo mode it instead mirrors
// whatever it heard on the previous step. Frame overrides force specific
// outputs at given steps (perturbation tests).
struct ScriptedBehavior {
    int wait_frames = 0;
    int speak_frames = 0;
    int32_t symbol = 1;
    bool echo = false;
};

class ScriptedAgent : public Agent {
  public:
    ScriptedAgent(ScriptedBehavior behavior, CodebookLayout layout);

    void reset() override;
    SampledStep step(const DauFrame& heard) override;

    void override_frame(int step, DauFrame frame);

  private:
    ScriptedBehavior behavior_;
    CodebookLayout layout_;
    std::map<int, DauFrame> overrides_;
    int t_ = 0;
};

struct AgentTranscript {
    std::string speaker;
    std::string speaker_slot;
    bool prompted_starts = false;
    int prompted_backchannels = 0;
    int prompted_interruptions = 0;
    uint64_t seed = 0;
    std::vector<DauFrame> frames;
    std::vector<int32_t> text;
};

struct ConversationRecord {
    std::string dialogue_id;
    uint64_t seed = 0;
    size_t n_frames = 0;
    SamplingParams sampling;
    CodebookLayout layout;
    std::array<AgentTranscript, 2> agents;
};

ConversationRecord converse(Agent& a, Agent& b, size_t n_frames, const CodebookLayout& layout);

std::array<Timeline, 2> record_to_timelines(const ConversationRecord& rec,
                                            const CodebookLayout& layout);

enum class FirstSpeaker { a, b, tie, none };

std::string first_speaker_name(FirstSpeaker f);
FirstSpeaker first_speaker(const Timeline& a, const Timeline& b);

void save_conversations(const std::string& path, const std::vector<ConversationRecord>& records);
std::vector<ConversationRecord> load_conversations(const std::string& path);
std::string conversation_to_json_line(const ConversationRecord& rec);
ConversationRecord conversation_from_json_line(const std::string& line, size_t line_no = 1);

}  // namespace duplexforge
