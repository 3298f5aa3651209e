#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "duplexforge/dialogue.hpp"
#include "duplexforge/duplex.hpp"
#include "duplexforge/eval.hpp"
#include "duplexforge/model.hpp"
#include "duplexforge/vocab.hpp"

namespace duplexforge {

// Desk-scale speaker embedder: a deterministic unit reference vector per
// speaker id, segment vectors = reference + seeded noise.
Eigen::VectorXd synthetic_reference_embedding(const std::string& speaker_id, int dim);
Eigen::VectorXd synthetic_segment_embedding(const std::string& speaker_id, int dim,
                                            uint64_t seed, size_t segment_index,
                                            double noise);

// Decoded audio as word-level symbol tokens: maximal constant-symbol runs
// between silences, mismatch frames mapped to -1.
std::vector<int32_t> audio_symbol_tokens(const std::vector<DauFrame>& frames,
                                         const CodebookLayout& layout);
// Text stream as symbol tokens after special-token removal.
std::vector<int32_t> text_symbol_tokens(const std::vector<int32_t>& text_tokens,
                                        const Vocabulary& vocab);

struct EvalOptions {
    DetectorParams detector;
    double ipu_silence_threshold_s = 0.2;
    int speaker_embed_dim = 16;
    double embed_noise = 0.1;
    size_t max_sampled_segments = 8;
    // Optional external judge; the column renders n/a when unset.
    std::function<double(const std::string& narrative, const std::string& transcript)>
        narrative_judge;
    const Model* ppl_model = nullptr;
    const std::vector<TrainingExample>* ppl_examples = nullptr;
};

struct EvalReport {
    size_t n_conversations = 0;
    bool has_ppl = false;
    double ppl_dau = 0.0;
    double ppl_text = 0.0;
    bool has_wer = false;
    double wer_audio_text = 0.0;
    double speaking_diff_s = 0.0;
    double correct_start_pct = 0.0;
    bool has_speaker_sim = false;
    double spk_sim = 0.0;
    double spk_drift = 0.0;
    bool has_narrative = false;
    double narrative_score = 0.0;
    bool has_bc_corr = false;
    CorrelationResult bc_corr;
    bool has_int_corr = false;
    CorrelationResult int_corr;
    double ipu_per_min = 0.0;
    double pause_per_min = 0.0;
    double gap_per_min = 0.0;
    double overlap_per_min = 0.0;
};

EvalReport evaluate_run(const std::vector<ConversationRecord>& records,
                        const std::vector<Dialogue>& prompts, const Vocabulary& vocab,
                        const EvalOptions& opts);

// Plain-text tables mirroring the three report layouts. Passing nullptr
// renders only the frozen topline rows (fixtures mode).
std::string render_general_table(const EvalReport* report);
std::string render_instruction_table(const EvalReport* report);
std::string render_turntaking_table(const EvalReport* report);

std::string general_table_csv(const EvalReport* report);
std::string instruction_table_csv(const EvalReport* report);
std::string turntaking_table_csv(const EvalReport* report);

}  // namespace duplexforge
