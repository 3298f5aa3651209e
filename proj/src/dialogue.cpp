#include "duplexforge/dialogue.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace duplexforge {

using ordered_json = nlohmann::ordered_json;

const std::string& Dialogue::other_speaker(const std::string& speaker) const {
    if (speaker == speakers[0]) return speakers[1];
    if (speaker == speakers[1]) return speakers[0];
    throw std::invalid_argument("speaker '" + speaker + "' not part of dialogue " + id);
}

CorpusError::CorpusError(size_t line_, const std::string& path_, const std::string& message)
    : std::runtime_error("line " + std::to_string(line_) + ": " + path_ +
                         (path_.empty() ? "" : ": ") + message),
      line(line_),
      path(path_) {}

namespace {

void check_word(const WordSpan& w, const std::string& path, ValidationReport& report) {
    if (w.text.empty()) {
        report.violations.push_back({path + ".text", "word text is empty"});
    }
    if (!(w.end_s > w.start_s)) {
        report.violations.push_back({path, "end_s must be > start_s"});
    }
    if (w.start_s < 0.0) {
        report.violations.push_back({path + ".start_s", "start_s must be >= 0"});
    }
}

}  // namespace

ValidationReport validate_dialogue(const Dialogue& d) {
    ValidationReport report;
    if (d.id.empty()) {
        report.violations.push_back({"id", "dialogue id is empty"});
    }
    if (d.speakers[0].empty() || d.speakers[1].empty() || d.speakers[0] == d.speakers[1]) {
        report.violations.push_back({"speakers", "exactly two distinct speakers required"});
    }
    for (const auto& s : d.speakers) {
        auto it = d.behavior.find(s);
        if (it == d.behavior.end()) {
            report.violations.push_back({"behavior." + s, "missing behavior spec"});
            continue;
        }
        if (it->second.backchannels < 0 || it->second.interruptions < 0) {
            report.violations.push_back({"behavior." + s, "counts must be non-negative"});
        }
    }
    for (const auto& [speaker, _] : d.behavior) {
        if (speaker != d.speakers[0] && speaker != d.speakers[1]) {
            report.violations.push_back({"behavior." + speaker, "unknown speaker"});
        }
    }

    double prev_start = -1.0;
    std::map<std::string, double> last_end;
    for (size_t ui = 0; ui < d.utterances.size(); ++ui) {
        const Utterance& u = d.utterances[ui];
        std::string upath = "utterances[" + std::to_string(ui) + "]";
        if (u.speaker != d.speakers[0] && u.speaker != d.speakers[1]) {
            report.violations.push_back({upath + ".speaker", "speaker not in dialogue"});
        }
        if (u.is_backchannel && u.is_interruption) {
            report.violations.push_back({upath, "flag exclusivity: both BC and interruption set"});
        }
        if (u.words.empty()) {
            report.violations.push_back({upath + ".words", "utterance has no words"});
            continue;
        }
        for (size_t wi = 0; wi < u.words.size(); ++wi) {
            check_word(u.words[wi], upath + ".words[" + std::to_string(wi) + "]", report);
            if (wi > 0 && u.words[wi].start_s < u.words[wi - 1].end_s) {
                report.violations.push_back(
                    {upath + ".words[" + std::to_string(wi) + "]",
                     "word spans must be ordered and non-overlapping"});
            }
        }
        if (u.start_s() < prev_start) {
            report.violations.push_back({upath, "utterance start times must be non-decreasing"});
        }
        prev_start = std::max(prev_start, u.start_s());
        auto it = last_end.find(u.speaker);
        if (it != last_end.end() && u.start_s() < it->second) {
            report.violations.push_back({upath, "same-speaker overlap"});
        }
        double& e = last_end[u.speaker];
        e = std::max(e, u.end_s());
    }
    return report;
}

namespace {

ordered_json behavior_to_json(const BehaviorSpec& b) {
    return ordered_json{
        {"backchannels", b.backchannels},
        {"interruptions", b.interruptions},
        {"starts", b.starts},
    };
}

ordered_json dialogue_to_json(const Dialogue& d) {
    ordered_json j;
    j["schema"] = kCorpusSchema;
    j["id"] = d.id;
    j["narrative"] = d.narrative;
    j["speakers"] = {d.speakers[0], d.speakers[1]};
    ordered_json beh;
    for (const auto& s : d.speakers) {
        auto it = d.behavior.find(s);
        if (it != d.behavior.end()) beh[s] = behavior_to_json(it->second);
    }
    j["behavior"] = std::move(beh);
    ordered_json utts = ordered_json::array();
    for (const Utterance& u : d.utterances) {
        ordered_json ju;
        ju["speaker"] = u.speaker;
        ju["is_backchannel"] = u.is_backchannel;
        ju["is_interruption"] = u.is_interruption;
        ordered_json words = ordered_json::array();
        for (const WordSpan& w : u.words) {
            words.push_back(ordered_json{
                {"text", w.text}, {"start_s", w.start_s}, {"end_s", w.end_s}});
        }
        ju["words"] = std::move(words);
        utts.push_back(std::move(ju));
    }
    j["utterances"] = std::move(utts);
    if (!d.speaker_ref.empty()) {
        ordered_json refs;
        for (const auto& [k, v] : d.speaker_ref) refs[k] = v;
        j["speaker_ref"] = std::move(refs);
    }
    return j;
}

template <typename T>
T require_field(const ordered_json& j, const std::string& key, size_t line,
                const std::string& path) {
    if (!j.contains(key)) {
        throw CorpusError(line, path.empty() ? key : path + "." + key, "missing field");
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw CorpusError(line, path.empty() ? key : path + "." + key, e.what());
    }
}

Dialogue dialogue_from_json(const ordered_json& j, size_t line) {
    Dialogue d;
    std::string schema = require_field<std::string>(j, "schema", line, "");
    if (schema != kCorpusSchema) {
        throw CorpusError(line, "schema",
                          "expected \"" + std::string(kCorpusSchema) + "\", got \"" + schema + "\"");
    }
    d.id = require_field<std::string>(j, "id", line, "");
    d.narrative = require_field<std::string>(j, "narrative", line, "");
    auto speakers = require_field<std::vector<std::string>>(j, "speakers", line, "");
    if (speakers.size() != 2) {
        throw CorpusError(line, "speakers", "expected exactly 2 speakers");
    }
    d.speakers = {speakers[0], speakers[1]};
    const auto& beh = j.contains("behavior") ? j.at("behavior") : ordered_json::object();
    for (auto it = beh.begin(); it != beh.end(); ++it) {
        BehaviorSpec b;
        b.backchannels = require_field<int>(it.value(), "backchannels", line, "behavior." + it.key());
        b.interruptions =
            require_field<int>(it.value(), "interruptions", line, "behavior." + it.key());
        b.starts = require_field<bool>(it.value(), "starts", line, "behavior." + it.key());
        d.behavior[it.key()] = b;
    }
    const auto& utts = j.contains("utterances") ? j.at("utterances") : ordered_json::array();
    for (size_t ui = 0; ui < utts.size(); ++ui) {
        const auto& ju = utts.at(ui);
        std::string upath = "utterances[" + std::to_string(ui) + "]";
        Utterance u;
        u.speaker = require_field<std::string>(ju, "speaker", line, upath);
        u.is_backchannel = ju.value("is_backchannel", false);
        u.is_interruption = ju.value("is_interruption", false);
        if (!ju.contains("words")) {
            throw CorpusError(line, upath + ".words", "missing field");
        }
        const auto& words = ju.at("words");
        for (size_t wi = 0; wi < words.size(); ++wi) {
            std::string wpath = upath + ".words[" + std::to_string(wi) + "]";
            WordSpan w;
            w.text = require_field<std::string>(words.at(wi), "text", line, wpath);
            w.start_s = require_field<double>(words.at(wi), "start_s", line, wpath);
            w.end_s = require_field<double>(words.at(wi), "end_s", line, wpath);
            u.words.push_back(std::move(w));
        }
        d.utterances.push_back(std::move(u));
    }
    if (j.contains("speaker_ref")) {
        for (auto it = j.at("speaker_ref").begin(); it != j.at("speaker_ref").end(); ++it) {
            d.speaker_ref[it.key()] = it.value().get<std::string>();
        }
    }
    return d;
}

}  // namespace

std::string dialogue_to_json_line(const Dialogue& d) {
    return dialogue_to_json(d).dump();
}

Dialogue dialogue_from_json_line(const std::string& line, size_t line_no) {
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw CorpusError(line_no, "", e.what());
    }
    Dialogue d = dialogue_from_json(j, line_no);
    ValidationReport report = validate_dialogue(d);
    if (!report.ok()) {
        const Violation& v = report.violations.front();
        throw CorpusError(line_no, v.path, v.message);
    }
    return d;
}

std::vector<Dialogue> parse_corpus(std::istream& in) {
    std::vector<Dialogue> dialogues;
    std::set<std::string> seen_ids;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Dialogue d = dialogue_from_json_line(line, line_no);
        if (!seen_ids.insert(d.id).second) {
            throw CorpusError(line_no, "id", "duplicate dialogue id \"" + d.id + "\"");
        }
        dialogues.push_back(std::move(d));
    }
    return dialogues;
}

std::vector<Dialogue> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open corpus file: " + path);
    }
    return parse_corpus(in);
}

void write_corpus(std::ostream& out, const std::vector<Dialogue>& dialogues) {
    for (const Dialogue& d : dialogues) {
        out << dialogue_to_json_line(d) << '\n';
    }
}

void save_corpus(const std::string& path, const std::vector<Dialogue>& dialogues) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write corpus file: " + path);
    }
    write_corpus(out, dialogues);
}

DialogueStats dialogue_stats(const Dialogue& d) {
    DialogueStats stats;
    for (const auto& s : d.speakers) stats.per_speaker[s];

    std::map<std::string, std::vector<std::pair<double, double>>> spans;
    for (const Utterance& u : d.utterances) {
        SpeakerStats& ss = stats.per_speaker[u.speaker];
        ss.utterances += 1;
        if (u.is_backchannel) ss.backchannels += 1;
        if (u.is_interruption) ss.interruptions += 1;
        for (const WordSpan& w : u.words) {
            spans[u.speaker].emplace_back(w.start_s, w.end_s);
            stats.duration_s = std::max(stats.duration_s, w.end_s);
        }
    }
    for (auto& [speaker, intervals] : spans) {
        std::sort(intervals.begin(), intervals.end());
        double total = 0.0, cur_start = 0.0, cur_end = -1.0;
        for (const auto& [s, e] : intervals) {
            if (cur_end < 0.0) {
                cur_start = s;
                cur_end = e;
            } else if (s <= cur_end) {
                cur_end = std::max(cur_end, e);
            } else {
                total += cur_end - cur_start;
                cur_start = s;
                cur_end = e;
            }
        }
        if (cur_end >= 0.0) total += cur_end - cur_start;
        stats.per_speaker[speaker].speech_s = total;
    }
    return stats;
}

}  // namespace duplexforge
