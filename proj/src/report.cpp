#include "duplexforge/report.hpp"

#include <cmath>
#include <cstdio>
#include <unordered_map>

#include "duplexforge/stream.hpp"

namespace duplexforge {

Eigen::VectorXd synthetic_reference_embedding(const std::string& speaker_id, int dim) {
    Rng rng(fnv1a64(speaker_id) ^ 0xc2b2ae3d27d4eb4full);
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v(i) = rng.normal();
    double n = v.norm();
    if (n > 0.0) v /= n;
    return v;
}

Eigen::VectorXd synthetic_segment_embedding(const std::string& speaker_id, int dim,
                                            uint64_t seed, size_t segment_index, double noise) {
    Eigen::VectorXd v = synthetic_reference_embedding(speaker_id, dim);
    Rng rng(mix_seed(fnv1a64(speaker_id) ^ seed, segment_index));
    for (int i = 0; i < dim; ++i) v(i) += noise * rng.normal();
    double n = v.norm();
    if (n > 0.0) v /= n;
    return v;
}

std::vector<int32_t> audio_symbol_tokens(const std::vector<DauFrame>& frames,
                                         const CodebookLayout& layout) {
    std::vector<int32_t> tokens;
    bool in_run = false;
    int32_t run_symbol = 0;
    for (const DauFrame& f : frames) {
        std::optional<int32_t> sym = decode_frame(f, layout);
        if (sym.has_value() && *sym == kSilenceSymbol) {
            in_run = false;
            continue;
        }
        int32_t s = sym.has_value() ? *sym : -1;
        if (!in_run || s != run_symbol) {
            tokens.push_back(s);
            run_symbol = s;
            in_run = true;
        }
    }
    return tokens;
}

std::vector<int32_t> text_symbol_tokens(const std::vector<int32_t>& text_tokens,
                                        const Vocabulary& vocab) {
    std::vector<int32_t> out;
    for (int32_t tok : strip_padding(text_tokens)) {
        out.push_back(word_symbol(vocab.token_of(tok)));
    }
    return out;
}

EvalReport evaluate_run(const std::vector<ConversationRecord>& records,
                        const std::vector<Dialogue>& prompts, const Vocabulary& vocab,
                        const EvalOptions& opts) {
    if (records.empty()) throw std::invalid_argument("no conversations to evaluate");

    std::unordered_map<std::string, const Dialogue*> by_id;
    for (const Dialogue& d : prompts) by_id[d.id] = &d;

    EvalReport report;
    report.n_conversations = records.size();

    std::vector<StartOutcome> starts;
    std::vector<double> prompted_bc, detected_bc, prompted_int, detected_int;
    std::vector<double> wers, narrative_scores;
    double diff_sum = 0.0;
    double total_ipu = 0.0, total_pause = 0.0, total_gap = 0.0, total_overlap = 0.0;
    double total_duration = 0.0;
    double sim_sum = 0.0, drift_sum = 0.0;
    size_t sim_count = 0;

    for (const ConversationRecord& rec : records) {
        auto it = by_id.find(rec.dialogue_id);
        if (it == by_id.end()) {
            throw std::invalid_argument("prompts file has no dialogue \"" + rec.dialogue_id +
                                        "\"");
        }
        const Dialogue& dialogue = *it->second;

        auto raw = record_to_timelines(rec, rec.layout);
        double duration = static_cast<double>(rec.n_frames) * rec.layout.frame_duration_s();

        StartOutcome outcome;
        outcome.first = first_speaker(raw[0], raw[1]);
        outcome.a_starts = rec.agents[0].prompted_starts;
        outcome.b_starts = rec.agents[1].prompted_starts;
        starts.push_back(outcome);

        diff_sum += speaking_time_diff(raw[0], raw[1]);

        TurnTakingDurations tt =
            turn_taking(raw[0], raw[1], opts.ipu_silence_threshold_s, duration);
        total_ipu += tt.ipu_s;
        total_pause += tt.pause_s;
        total_gap += tt.gap_s;
        total_overlap += tt.overlap_s;
        total_duration += duration;

        Timeline merged_a, merged_b;
        {
            merged_a = merge_words(raw[0].segments, opts.detector.split_threshold_s);
            merged_b = merge_words(raw[1].segments, opts.detector.split_threshold_s);
        }
        EventReport events = detect_events(merged_a, merged_b, opts.detector);
        for (size_t ai = 0; ai < 2; ++ai) {
            prompted_bc.push_back(rec.agents[ai].prompted_backchannels);
            detected_bc.push_back(static_cast<double>(events.backchannels[ai].size()));
            prompted_int.push_back(rec.agents[ai].prompted_interruptions);
            detected_int.push_back(static_cast<double>(events.interruptions[ai].size()));
        }

        for (size_t ai = 0; ai < 2; ++ai) {
            std::vector<int32_t> hyp = audio_symbol_tokens(rec.agents[ai].frames, rec.layout);
            std::vector<int32_t> ref = text_symbol_tokens(rec.agents[ai].text, vocab);
            if (!ref.empty()) {
                wers.push_back(wer(ref, hyp));
            }
        }

        for (size_t ai = 0; ai < 2; ++ai) {
            const Timeline& merged = ai == 0 ? merged_a : merged_b;
            if (merged.empty()) continue;
            const std::string& slot = rec.agents[ai].speaker_slot;
            Eigen::VectorXd ref = synthetic_reference_embedding(slot, opts.speaker_embed_dim);
            std::vector<Eigen::VectorXd> segs;
            size_t take = std::min(opts.max_sampled_segments, merged.segments.size());
            for (size_t si = 0; si < take; ++si) {
                segs.push_back(synthetic_segment_embedding(slot, opts.speaker_embed_dim,
                                                           rec.seed + ai, si,
                                                           opts.embed_noise));
            }
            SpeakerSimilarity sim = speaker_similarity(ref, segs);
            sim_sum += sim.mean_cos;
            drift_sum += sim.drift;
            ++sim_count;
        }

        if (opts.narrative_judge) {
            std::string transcript;
            for (size_t ai = 0; ai < 2; ++ai) {
                transcript += rec.agents[ai].speaker + ": " +
                              vocab.detokenize(strip_padding(rec.agents[ai].text)) + "\n";
            }
            narrative_scores.push_back(opts.narrative_judge(dialogue.narrative, transcript));
        }
    }

    report.correct_start_pct = correct_start_rate(starts);
    report.speaking_diff_s = diff_sum / static_cast<double>(records.size());
    if (!wers.empty()) {
        report.has_wer = true;
        double s = 0.0;
        for (double w : wers) s += w;
        report.wer_audio_text = s / static_cast<double>(wers.size());
    }
    if (sim_count > 0) {
        report.has_speaker_sim = true;
        report.spk_sim = sim_sum / static_cast<double>(sim_count);
        report.spk_drift = drift_sum / static_cast<double>(sim_count);
    }
    if (!narrative_scores.empty()) {
        report.has_narrative = true;
        double s = 0.0;
        for (double v : narrative_scores) s += v;
        report.narrative_score = s / static_cast<double>(narrative_scores.size());
    }
    try {
        report.bc_corr = pearson_exact(prompted_bc, detected_bc);
        report.has_bc_corr = true;
    } catch (const std::invalid_argument&) {
        report.has_bc_corr = false;
    }
    try {
        report.int_corr = pearson_exact(prompted_int, detected_int);
        report.has_int_corr = true;
    } catch (const std::invalid_argument&) {
        report.has_int_corr = false;
    }
    if (total_duration > 0.0) {
        report.ipu_per_min = total_ipu * 60.0 / total_duration;
        report.pause_per_min = total_pause * 60.0 / total_duration;
        report.gap_per_min = total_gap * 60.0 / total_duration;
        report.overlap_per_min = total_overlap * 60.0 / total_duration;
    }
    if (opts.ppl_model && opts.ppl_examples && !opts.ppl_examples->empty()) {
        report.ppl_dau = perplexity(*opts.ppl_model, *opts.ppl_examples, HeadGroup::dau);
        report.ppl_text = perplexity(*opts.ppl_model, *opts.ppl_examples, HeadGroup::text);
        report.has_ppl = true;
    }
    return report;
}

namespace {

std::string fmt(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

std::string format_table(const std::vector<std::vector<std::string>>& rows) {
    std::vector<size_t> widths;
    for (const auto& row : rows) {
        if (widths.size() < row.size()) widths.resize(row.size(), 0);
        for (size_t c = 0; c < row.size(); ++c) {
            widths[c] = std::max(widths[c], row[c].size());
        }
    }
    std::string out;
    for (const auto& row : rows) {
        std::string line;
        for (size_t c = 0; c < row.size(); ++c) {
            line += row[c];
            if (c + 1 < row.size()) {
                line.append(widths[c] - row[c].size() + 2, ' ');
            }
        }
        out += line;
        out += '\n';
    }
    return out;
}

std::string join_csv(const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    for (const auto& row : rows) {
        for (size_t c = 0; c < row.size(); ++c) {
            if (c > 0) out += ',';
            out += row[c];
        }
        out += '\n';
    }
    return out;
}

std::vector<std::vector<std::string>> general_rows(const EvalReport* report) {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"Model", "PPL DSU", "PPL Text", "UTMOS", "WER %", "Speaking Diff (s)"});
    rows.push_back({"Behaviour-SD Dialogues Testset", "-", "-", "3.78", "4.5", "15.44"});
    if (report) {
        rows.push_back({"ours (computed)",
                        report->has_ppl ? fmt(report->ppl_dau, 2) : "n/a",
                        report->has_ppl ? fmt(report->ppl_text, 2) : "n/a",
                        "n/a",
                        report->has_wer ? fmt(report->wer_audio_text, 2) : "n/a",
                        fmt(report->speaking_diff_s, 2)});
    }
    return rows;
}

std::vector<std::vector<std::string>> instruction_rows(const EvalReport* report) {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"Model", "Correct Start %", "Spk. Sim.", "Spk. Drift", "Narrative",
                    "BC Corr.", "Inter. Corr."});
    rows.push_back({"Behaviour-SD Dialogues Testset", "100.00", "0.62", "0.62", "4.04", "0.92",
                    "0.74"});
    rows.push_back({"Lower Baseline", "50.0", "0.35", "0.75", "1.26", "-", "-"});
    if (report) {
        rows.push_back({"ours (computed)",
                        fmt(report->correct_start_pct, 2),
                        report->has_speaker_sim ? fmt(report->spk_sim, 2) : "n/a",
                        report->has_speaker_sim ? fmt(report->spk_drift, 2) : "n/a",
                        report->has_narrative ? fmt(report->narrative_score, 2) : "n/a",
                        report->has_bc_corr ? fmt(report->bc_corr.r, 2) : "n/a",
                        report->has_int_corr ? fmt(report->int_corr.r, 2) : "n/a"});
    }
    return rows;
}

std::vector<std::vector<std::string>> turntaking_rows(const EvalReport* report) {
    std::vector<std::vector<std::string>> rows;
    rows.push_back({"Model", "IPU", "Pause", "Gap", "Overl."});
    rows.push_back({"Ours (best)", "59.3s", "10.4s", "3.0s", "5.4s"});
    rows.push_back({"Ground Truth (Beh.-SD)", "55.8s", "10.8s", "3.8s", "3.0s"});
    if (report) {
        rows.push_back({"ours (computed)", fmt(report->ipu_per_min, 1) + "s",
                        fmt(report->pause_per_min, 1) + "s", fmt(report->gap_per_min, 1) + "s",
                        fmt(report->overlap_per_min, 1) + "s"});
    }
    return rows;
}

}  // namespace

std::string render_general_table(const EvalReport* report) {
    return format_table(general_rows(report));
}

std::string render_instruction_table(const EvalReport* report) {
    return format_table(instruction_rows(report));
}

std::string render_turntaking_table(const EvalReport* report) {
    return format_table(turntaking_rows(report));
}

std::string general_table_csv(const EvalReport* report) { return join_csv(general_rows(report)); }

std::string instruction_table_csv(const EvalReport* report) {
    return join_csv(instruction_rows(report));
}

std::string turntaking_table_csv(const EvalReport* report) {
    return join_csv(turntaking_rows(report));
}

}  // namespace duplexforge
