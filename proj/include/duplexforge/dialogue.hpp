#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace duplexforge {

inline constexpr const char* kCorpusSchema = "duplex-forge/1";

struct WordSpan {
    std::string text;
    double start_s = 0.0;
    double end_s = 0.0;
};

struct Utterance {
    std::string speaker;
    std::vector<WordSpan> words;
    bool is_backchannel = false;
    bool is_interruption = false;

    double start_s() const { return words.empty() ? 0.0 : words.front().start_s; }
    double end_s() const { return words.empty() ? 0.0 : words.back().end_s; }
};

struct BehaviorSpec {
    int backchannels = 0;
    int interruptions = 0;
    bool starts = false;
};

struct Dialogue {
    std::string id;
    std::string narrative;
    std::array<std::string, 2> speakers;
    std::map<std::string, BehaviorSpec> behavior;
    std::vector<Utterance> utterances;
    std::map<std::string, std::string> speaker_ref;

    const std::string& other_speaker(const std::string& speaker) const;
};

struct Violation {
    std::string path;
    std::string message;
};

struct ValidationReport {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

ValidationReport validate_dialogue(const Dialogue& d);

// Parse/IO failures carry the 1-based line number and the field path.
struct CorpusError : std::runtime_error {
    CorpusError(size_t line, const std::string& path, const std::string& message);
    size_t line;
    std::string path;
};

std::vector<Dialogue> parse_corpus(std::istream& in);
std::vector<Dialogue> load_corpus(const std::string& path);
void write_corpus(std::ostream& out, const std::vector<Dialogue>& dialogues);
void save_corpus(const std::string& path, const std::vector<Dialogue>& dialogues);

std::string dialogue_to_json_line(const Dialogue& d);
Dialogue dialogue_from_json_line(const std::string& line, size_t line_no = 1);

struct SpeakerStats {
    int utterances = 0;
    int backchannels = 0;
    int interruptions = 0;
    double speech_s = 0.0;
};

struct DialogueStats {
    std::map<std::string, SpeakerStats> per_speaker;
    double duration_s = 0.0;
};

DialogueStats dialogue_stats(const Dialogue& d);

}  // namespace duplexforge
