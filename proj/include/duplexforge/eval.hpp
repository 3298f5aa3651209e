#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "duplexforge/dialogue.hpp"
#include "duplexforge/duplex.hpp"
#include "duplexforge/timeline.hpp"

namespace duplexforge {

struct DetectorParams {
    double split_threshold_s = 0.565;
    double interruption_threshold_s = 0.405;
    double overlap_tolerance_s = 0.435;
    double bc_max_duration_s = 1.0;
};

struct SpeechEvent {
    Segment segment;  // the classified utterance
    Segment trigger;  // the opposing utterance that made it qualify
};

struct TurnTakingDurations {
    double ipu_s = 0.0;
    double pause_s = 0.0;
    double gap_s = 0.0;
    double overlap_s = 0.0;
    double duration_s = 0.0;

    double per_minute(double cumulative_s) const {
        return duration_s > 0.0 ? cumulative_s * 60.0 / duration_s : 0.0;
    }
};

struct EventReport {
    std::array<std::vector<SpeechEvent>, 2> backchannels;
    std::array<std::vector<SpeechEvent>, 2> interruptions;
    TurnTakingDurations durations;
};

Timeline merge_words(const std::vector<Segment>& spans, double split_threshold_s);
Timeline merge_words(const std::vector<WordSpan>& words, double split_threshold_s);

// Classifies each merged utterance at most once; backchannel wins over
// interruption, the earliest qualifying opposing utterance is the trigger.
EventReport detect_events(const Timeline& a, const Timeline& b, const DetectorParams& params);

// duration_s = 0 derives the total duration from the latest segment end.
TurnTakingDurations turn_taking(const Timeline& a, const Timeline& b,
                                double ipu_silence_threshold_s = 0.2, double duration_s = 0.0);

double speaking_time_diff(const Timeline& a, const Timeline& b);

struct StartOutcome {
    FirstSpeaker first = FirstSpeaker::none;
    bool a_starts = false;
    bool b_starts = false;
};

double correct_start_rate(const std::vector<StartOutcome>& outcomes);

struct CorrelationResult {
    double r = 0.0;
    double p = 1.0;
    size_t n = 0;
};

// Exact two-sided p from the null density of r for sample size n,
// integrated numerically to <= 1e-9 absolute error.
CorrelationResult pearson_exact(const std::vector<double>& x, const std::vector<double>& y);

double wer(const std::vector<int32_t>& reference, const std::vector<int32_t>& hypothesis);
double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis);

struct SpeakerSimilarity {
    double mean_cos = 0.0;
    double drift = 0.0;
};

SpeakerSimilarity speaker_similarity(const Eigen::VectorXd& reference,
                                     const std::vector<Eigen::VectorXd>& segments);

// Per-speaker flattened word spans and merged timelines of a corpus dialogue.
std::map<std::string, std::vector<Segment>> speaker_word_spans(const Dialogue& d);
std::map<std::string, Timeline> merged_speaker_timelines(const Dialogue& d,
                                                         double split_threshold_s);

// Sum over dialogues and speakers of missing + extra BC and interruption
// counts against the ground-truth flags.
long long detector_objective(const std::vector<Dialogue>& corpus, const DetectorParams& params);

struct GridRange {
    double lo = 0.0;
    double hi = 0.0;
};

struct GridSearchSpec {
    GridRange split{0.20, 0.90};
    GridRange interruption{0.10, 0.70};
    GridRange overlap{0.05, 0.50};
    double step = 0.005;
    double bc_max_duration_s = 1.0;
};

struct PerDialogueStats {
    double mean_missing_bc = 0.0, std_missing_bc = 0.0;
    double mean_extra_bc = 0.0, std_extra_bc = 0.0;
    double mean_missing_int = 0.0, std_missing_int = 0.0;
    double mean_extra_int = 0.0, std_extra_int = 0.0;
};

struct GridSearchResult {
    DetectorParams best;
    long long best_objective = 0;
    size_t configs_scanned = 0;
    PerDialogueStats stats;  // at the best configuration
};

// Exhaustive scan over the three ranges; ties break toward the
// lexicographically smaller (split, interruption, overlap) triple.
// workers = 0 picks the hardware concurrency.
GridSearchResult grid_search(const std::vector<Dialogue>& corpus, const GridSearchSpec& spec,
                             int workers = 0);

size_t grid_axis_count(const GridRange& range, double step);

}  // namespace duplexforge
