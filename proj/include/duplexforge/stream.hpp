#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duplexforge/codec.hpp"
#include "duplexforge/dialogue.hpp"
#include "duplexforge/vocab.hpp"

namespace duplexforge {

struct TextStream {
    std::vector<int32_t> tokens;

    size_t size() const { return tokens.size(); }
    bool operator==(const TextStream&) const = default;
};

enum class AlignmentMode { word, utterance };
enum class LossMode { s, s_u };

std::string alignment_mode_name(AlignmentMode m);
AlignmentMode alignment_mode_from_name(const std::string& name);
std::string loss_mode_name(LossMode m);
LossMode loss_mode_from_name(const std::string& name);

struct StreamConfig {
    AlignmentMode alignment = AlignmentMode::word;
    int audio_delay_frames = 2;  // 0, 1 or 2
    bool behavior_tokens = false;
    LossMode loss_mode = LossMode::s_u;
    size_t max_sequence_length = 2048;
};

struct InstructionPrefix {
    std::string speaker_slot;  // reference-embedding id, always position 0
    std::vector<int32_t> prompt_tokens;

    size_t length() const { return 1 + prompt_tokens.size(); }
};

// Head bit order within a loss-mask word: user DAU heads [0, n),
// system DAU heads [n, 2n), text head at bit 2n.
inline int dau_head_count(const CodebookLayout& layout) { return 2 * layout.n_codebooks; }
inline int head_count(const CodebookLayout& layout) { return 2 * layout.n_codebooks + 1; }
uint32_t user_head_bits(const CodebookLayout& layout);
uint32_t sys_head_bits(const CodebookLayout& layout);
uint32_t text_head_bit(const CodebookLayout& layout);
uint32_t mask_bits_for_mode(LossMode mode, const CodebookLayout& layout);

struct TrainingExample {
    std::string dialogue_id;
    std::string system_speaker;
    InstructionPrefix prefix;
    std::vector<DauFrame> user_frames;
    std::vector<DauFrame> sys_frames;
    TextStream sys_text;
    std::vector<uint32_t> loss_mask;  // one bit word per position, prefix included
    StreamConfig config;
    CodebookLayout layout;

    size_t prefix_length() const { return prefix.length(); }
    size_t n_frames() const { return user_frames.size(); }
    size_t total_length() const { return prefix_length() + n_frames(); }
};

struct StreamError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string render_prompt(const std::string& narrative, const std::string& system_name,
                          const std::string& other_name, const BehaviorSpec& behavior);

// Number of frames covering every word of both speakers.
int64_t grid_frames(const Dialogue& d, const CodebookLayout& layout);

TextStream align_text(const Dialogue& d, const std::string& system_speaker, AlignmentMode mode,
                      Vocabulary& vocab, const CodebookLayout& layout);

void apply_audio_delay(std::vector<DauFrame>& user_frames, std::vector<DauFrame>& sys_frames,
                       TextStream& sys_text, int delay, const CodebookLayout& layout);

TextStream insert_behavior_tokens(TextStream sys_text, const Dialogue& d,
                                  const std::string& system_speaker,
                                  const CodebookLayout& layout);

// Voiced-frame symbol for a word, stable across runs.
int32_t word_symbol(const std::string& word_text);

SymbolTrack speaker_track(const Dialogue& d, const std::string& speaker,
                          const CodebookLayout& layout);

TrainingExample assemble_example(const Dialogue& d, const std::string& system_speaker,
                                 const StreamConfig& cfg, const CodebookLayout& layout,
                                 Vocabulary& vocab);

std::vector<int32_t> strip_padding(const TextStream& stream);
std::vector<int32_t> strip_padding(const std::vector<int32_t>& tokens);

enum class ExampleFileFormat { jsonl, binary };

void save_examples(const std::string& path, const std::vector<TrainingExample>& examples,
                   ExampleFileFormat format);
std::vector<TrainingExample> load_examples(const std::string& path);

}  // namespace duplexforge
