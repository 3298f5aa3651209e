#include "duplexforge/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <thread>

namespace duplexforge {

Timeline merge_words(const std::vector<Segment>& spans, double split_threshold_s) {
    Timeline out;
    for (const Segment& s : spans) {
        if (!out.segments.empty() && s.start_s - out.segments.back().end_s < split_threshold_s) {
            out.segments.back().end_s = std::max(out.segments.back().end_s, s.end_s);
        } else {
            out.segments.push_back(s);
        }
    }
    return out;
}

Timeline merge_words(const std::vector<WordSpan>& words, double split_threshold_s) {
    std::vector<Segment> spans;
    spans.reserve(words.size());
    for (const WordSpan& w : words) spans.push_back({w.start_s, w.end_s});
    return merge_words(spans, split_threshold_s);
}

EventReport detect_events(const Timeline& a, const Timeline& b, const DetectorParams& params) {
    EventReport report;
    for (size_t side = 0; side < 2; ++side) {
        const Timeline& own = side == 0 ? a : b;
        const Timeline& opp = side == 0 ? b : a;
        for (const Segment& u : own.segments) {
            bool classified = false;
            if (u.duration() <= params.bc_max_duration_s) {
                for (const Segment& v : opp.segments) {
                    if (v.end_s > u.end_s &&
                        u.start_s >= v.start_s - params.overlap_tolerance_s &&
                        u.end_s <= v.end_s + params.overlap_tolerance_s) {
                        report.backchannels[side].push_back({u, v});
                        classified = true;
                        break;
                    }
                }
            }
            if (classified) continue;
            for (const Segment& v : opp.segments) {
                if (v.start_s < u.start_s &&
                    u.start_s < v.end_s - params.interruption_threshold_s &&
                    u.end_s > v.end_s) {
                    report.interruptions[side].push_back({u, v});
                    break;
                }
            }
        }
    }
    return report;
}

namespace {

std::vector<Segment> merge_gaps_below(const std::vector<Segment>& segments, double threshold) {
    std::vector<Segment> out;
    for (const Segment& s : segments) {
        if (!out.empty() && s.start_s - out.back().end_s < threshold) {
            out.back().end_s = std::max(out.back().end_s, s.end_s);
        } else {
            out.push_back(s);
        }
    }
    return out;
}

double overlap_seconds(const std::vector<Segment>& a, const std::vector<Segment>& b) {
    double total = 0.0;
    size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        double lo = std::max(a[i].start_s, b[j].start_s);
        double hi = std::min(a[i].end_s, b[j].end_s);
        if (hi > lo) total += hi - lo;
        if (a[i].end_s < b[j].end_s) {
            ++i;
        } else {
            ++j;
        }
    }
    return total;
}

}  // namespace

TurnTakingDurations turn_taking(const Timeline& a, const Timeline& b,
                                double ipu_silence_threshold_s, double duration_s) {
    TurnTakingDurations d;
    d.duration_s = duration_s > 0.0 ? duration_s : std::max(a.end_time(), b.end_time());

    struct Ipu {
        Segment seg;
        int speaker;
    };
    std::vector<Ipu> ipus;
    for (const Segment& s : merge_gaps_below(a.segments, ipu_silence_threshold_s)) {
        ipus.push_back({s, 0});
        d.ipu_s += s.duration();
    }
    for (const Segment& s : merge_gaps_below(b.segments, ipu_silence_threshold_s)) {
        ipus.push_back({s, 1});
        d.ipu_s += s.duration();
    }
    std::sort(ipus.begin(), ipus.end(), [](const Ipu& x, const Ipu& y) {
        if (x.seg.start_s != y.seg.start_s) return x.seg.start_s < y.seg.start_s;
        if (x.seg.end_s != y.seg.end_s) return x.seg.end_s < y.seg.end_s;
        return x.speaker < y.speaker;
    });

    // Silence between globally consecutive IPUs: a pause when the floor
    // stays with the same speaker, a gap when it switches.
    if (!ipus.empty()) {
        double running_end = ipus[0].seg.end_s;
        int running_speaker = ipus[0].speaker;
        for (size_t k = 1; k < ipus.size(); ++k) {
            double silence = ipus[k].seg.start_s - running_end;
            if (silence > 0.0) {
                if (ipus[k].speaker == running_speaker) {
                    d.pause_s += silence;
                } else {
                    d.gap_s += silence;
                }
            }
            if (ipus[k].seg.end_s > running_end) {
                running_end = ipus[k].seg.end_s;
                running_speaker = ipus[k].speaker;
            }
        }
    }

    d.overlap_s = overlap_seconds(a.segments, b.segments);
    return d;
}

double speaking_time_diff(const Timeline& a, const Timeline& b) {
    return std::abs(a.speech_seconds() - b.speech_seconds());
}

double correct_start_rate(const std::vector<StartOutcome>& outcomes) {
    if (outcomes.empty()) throw std::invalid_argument("no conversations to score");
    size_t correct = 0;
    for (const StartOutcome& o : outcomes) {
        bool ok = false;
        if (o.a_starts && o.b_starts) {
            ok = o.first == FirstSpeaker::tie;
        } else if (o.a_starts) {
            ok = o.first == FirstSpeaker::a;
        } else if (o.b_starts) {
            ok = o.first == FirstSpeaker::b;
        } else {
            ok = o.first == FirstSpeaker::none;
        }
        if (ok) ++correct;
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(outcomes.size());
}

namespace {

double adaptive_simpson(const std::function<double(double)>& f, double lo, double hi, double fl,
                        double fm, double fh, double whole, double tol, int depth) {
    double mid = 0.5 * (lo + hi);
    double lm = 0.5 * (lo + mid);
    double rm = 0.5 * (mid + hi);
    double flm = f(lm);
    double frm = f(rm);
    double left = (mid - lo) / 6.0 * (fl + 4.0 * flm + fm);
    double right = (hi - mid) / 6.0 * (fm + 4.0 * frm + fh);
    if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol) {
        return left + right + (left + right - whole) / 15.0;
    }
    return adaptive_simpson(f, lo, mid, fl, flm, fm, left, tol * 0.5, depth - 1) +
           adaptive_simpson(f, mid, hi, fm, frm, fh, right, tol * 0.5, depth - 1);
}

double integrate(const std::function<double(double)>& f, double lo, double hi, double tol) {
    if (hi <= lo) return 0.0;
    double fl = f(lo);
    double fh = f(hi);
    double fm = f(0.5 * (lo + hi));
    double whole = (hi - lo) / 6.0 * (fl + 4.0 * fm + fh);
    return adaptive_simpson(f, lo, hi, fl, fm, fh, whole, tol, 48);
}

// Two-sided tail mass of the null distribution of r for sample size n.
// Substituting r = sin(theta) turns the Beta-shaped density
// (1-r^2)^((n-4)/2) / B(1/2, (n-2)/2) into cos(theta)^(n-3), which is
// smooth at both ends.
double exact_p_value(double r, size_t n) {
    double abs_r = std::min(std::abs(r), 1.0);
    if (abs_r >= 1.0) return 0.0;
    double nn = static_cast<double>(n);
    double log_beta = std::lgamma(0.5) + std::lgamma((nn - 2.0) / 2.0) -
                      std::lgamma((nn - 1.0) / 2.0);
    double theta0 = std::asin(abs_r);
    double power = nn - 3.0;
    double integral = integrate(
        [power](double theta) { return std::pow(std::cos(theta), power); }, theta0, M_PI / 2.0,
        1e-13);
    double p = 2.0 * integral / std::exp(log_beta);
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace

CorrelationResult pearson_exact(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::invalid_argument("pearson: size mismatch");
    size_t n = x.size();
    if (n < 3) throw std::invalid_argument("pearson: need at least 3 samples");
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx;
        double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx <= 0.0 || syy <= 0.0) {
        throw std::invalid_argument("pearson: zero variance input is degenerate");
    }
    CorrelationResult result;
    result.n = n;
    result.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    result.p = exact_p_value(result.r, n);
    return result;
}

namespace {

template <typename Token>
double wer_impl(const std::vector<Token>& reference, const std::vector<Token>& hypothesis) {
    if (reference.empty()) throw std::invalid_argument("wer: empty reference");
    size_t nref = reference.size();
    size_t nhyp = hypothesis.size();
    std::vector<size_t> prev(nhyp + 1), cur(nhyp + 1);
    for (size_t j = 0; j <= nhyp; ++j) prev[j] = j;
    for (size_t i = 1; i <= nref; ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= nhyp; ++j) {
            size_t sub = prev[j - 1] + (reference[i - 1] == hypothesis[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return 100.0 * static_cast<double>(prev[nhyp]) / static_cast<double>(nref);
}

}  // namespace

double wer(const std::vector<int32_t>& reference, const std::vector<int32_t>& hypothesis) {
    return wer_impl(reference, hypothesis);
}

double wer(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
    return wer_impl(reference, hypothesis);
}

SpeakerSimilarity speaker_similarity(const Eigen::VectorXd& reference,
                                     const std::vector<Eigen::VectorXd>& segments) {
    if (segments.empty()) throw std::invalid_argument("speaker_similarity: no segments");
    auto cosine = [](const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
        if (u.size() != v.size()) {
            throw std::invalid_argument("speaker_similarity: dimension mismatch");
        }
        double nu = u.norm(), nv = v.norm();
        if (nu == 0.0 || nv == 0.0) {
            throw std::invalid_argument("speaker_similarity: zero vector");
        }
        return u.dot(v) / (nu * nv);
    };
    SpeakerSimilarity out;
    for (const auto& seg : segments) out.mean_cos += cosine(reference, seg);
    out.mean_cos /= static_cast<double>(segments.size());
    out.drift = 1.0 - cosine(segments.front(), segments.back());
    return out;
}

std::map<std::string, std::vector<Segment>> speaker_word_spans(const Dialogue& d) {
    std::map<std::string, std::vector<Segment>> spans;
    for (const auto& s : d.speakers) spans[s];
    for (const Utterance& u : d.utterances) {
        for (const WordSpan& w : u.words) {
            spans[u.speaker].push_back({w.start_s, w.end_s});
        }
    }
    for (auto& [_, v] : spans) {
        std::sort(v.begin(), v.end(),
                  [](const Segment& x, const Segment& y) { return x.start_s < y.start_s; });
    }
    return spans;
}

std::map<std::string, Timeline> merged_speaker_timelines(const Dialogue& d,
                                                         double split_threshold_s) {
    std::map<std::string, Timeline> out;
    for (auto& [speaker, spans] : speaker_word_spans(d)) {
        out[speaker] = merge_words(spans, split_threshold_s);
    }
    return out;
}

namespace {

struct GroundTruth {
    int bc[2] = {0, 0};
    int inter[2] = {0, 0};
};

GroundTruth ground_truth_counts(const Dialogue& d) {
    GroundTruth gt;
    for (const Utterance& u : d.utterances) {
        int side = u.speaker == d.speakers[0] ? 0 : 1;
        if (u.is_backchannel) gt.bc[side] += 1;
        if (u.is_interruption) gt.inter[side] += 1;
    }
    return gt;
}

struct DialogueCounts {
    int det_bc[2] = {0, 0};
    int det_int[2] = {0, 0};
};

long long counts_to_objective(const DialogueCounts& det, const GroundTruth& gt,
                              PerDialogueStats* acc = nullptr, double* row = nullptr) {
    long long obj = 0;
    double missing_bc = 0, extra_bc = 0, missing_int = 0, extra_int = 0;
    for (int s = 0; s < 2; ++s) {
        missing_bc += std::max(0, gt.bc[s] - det.det_bc[s]);
        extra_bc += std::max(0, det.det_bc[s] - gt.bc[s]);
        missing_int += std::max(0, gt.inter[s] - det.det_int[s]);
        extra_int += std::max(0, det.det_int[s] - gt.inter[s]);
    }
    obj = static_cast<long long>(missing_bc + extra_bc + missing_int + extra_int);
    if (row) {
        row[0] = missing_bc;
        row[1] = extra_bc;
        row[2] = missing_int;
        row[3] = extra_int;
    }
    (void)acc;
    return obj;
}

}  // namespace

long long detector_objective(const std::vector<Dialogue>& corpus, const DetectorParams& params) {
    long long objective = 0;
    for (const Dialogue& d : corpus) {
        auto timelines = merged_speaker_timelines(d, params.split_threshold_s);
        EventReport report = detect_events(timelines.at(d.speakers[0]),
                                           timelines.at(d.speakers[1]), params);
        GroundTruth gt = ground_truth_counts(d);
        DialogueCounts det;
        for (int s = 0; s < 2; ++s) {
            det.det_bc[s] = static_cast<int>(report.backchannels[static_cast<size_t>(s)].size());
            det.det_int[s] = static_cast<int>(report.interruptions[static_cast<size_t>(s)].size());
        }
        objective += counts_to_objective(det, gt);
    }
    return objective;
}

size_t grid_axis_count(const GridRange& range, double step) {
    return static_cast<size_t>(std::llround((range.hi - range.lo) / step)) + 1;
}

namespace {

// Per merged segment, the thresholds at which it classifies:
// a segment is a BC at tolerance tol iff bc_req <= tol, and an
// interruption at threshold theta iff it is not a BC and theta < int_max.
// Both derive directly from the detect_events predicate and are monotone
// in the thresholds.
struct SegmentReq {
    int side = 0;
    double bc_req = std::numeric_limits<double>::infinity();
    double int_max = -std::numeric_limits<double>::infinity();
};

struct PreparedDialogue {
    std::vector<SegmentReq> segments;
    GroundTruth gt;
};

PreparedDialogue prepare_dialogue(const Dialogue& d, double split, double bc_max) {
    PreparedDialogue prep;
    prep.gt = ground_truth_counts(d);
    auto timelines = merged_speaker_timelines(d, split);
    const Timeline* tl[2] = {&timelines.at(d.speakers[0]), &timelines.at(d.speakers[1])};
    for (int side = 0; side < 2; ++side) {
        const Timeline& own = *tl[side];
        const Timeline& opp = *tl[1 - side];
        for (const Segment& u : own.segments) {
            SegmentReq req;
            req.side = side;
            if (u.duration() <= bc_max) {
                for (const Segment& v : opp.segments) {
                    if (v.end_s <= u.end_s) continue;
                    double need = std::max({v.start_s - u.start_s, u.end_s - v.end_s, 0.0});
                    req.bc_req = std::min(req.bc_req, need);
                }
            }
            for (const Segment& v : opp.segments) {
                if (v.start_s < u.start_s && u.end_s > v.end_s) {
                    req.int_max = std::max(req.int_max, v.end_s - u.start_s);
                }
            }
            prep.segments.push_back(req);
        }
    }
    return prep;
}

}  // namespace

GridSearchResult grid_search(const std::vector<Dialogue>& corpus, const GridSearchSpec& spec,
                             int workers) {
    if (corpus.empty()) throw std::invalid_argument("grid_search: empty corpus");
    size_t n_split = grid_axis_count(spec.split, spec.step);
    size_t n_int = grid_axis_count(spec.interruption, spec.step);
    size_t n_tol = grid_axis_count(spec.overlap, spec.step);

    if (workers <= 0) {
        workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    }

    struct Best {
        long long objective = std::numeric_limits<long long>::max();
        size_t si = 0, ii = 0, ti = 0;
    };

    auto better = [](const Best& x, const Best& y) {
        if (x.objective != y.objective) return x.objective < y.objective;
        if (x.si != y.si) return x.si < y.si;
        if (x.ii != y.ii) return x.ii < y.ii;
        return x.ti < y.ti;
    };

    std::vector<Best> results(static_cast<size_t>(workers));
    std::atomic<size_t> next_split{0};

    auto run_worker = [&](size_t wi) {
        Best local;
        for (;;) {
            size_t si = next_split.fetch_add(1);
            if (si >= n_split) break;
            double split = spec.split.lo + static_cast<double>(si) * spec.step;
            std::vector<PreparedDialogue> prepared;
            prepared.reserve(corpus.size());
            for (const Dialogue& d : corpus) {
                prepared.push_back(prepare_dialogue(d, split, spec.bc_max_duration_s));
            }
            for (size_t ii = 0; ii < n_int; ++ii) {
                double theta = spec.interruption.lo + static_cast<double>(ii) * spec.step;
                for (size_t ti = 0; ti < n_tol; ++ti) {
                    double tol = spec.overlap.lo + static_cast<double>(ti) * spec.step;
                    long long objective = 0;
                    for (const PreparedDialogue& prep : prepared) {
                        DialogueCounts det;
                        for (const SegmentReq& req : prep.segments) {
                            if (req.bc_req <= tol) {
                                det.det_bc[req.side] += 1;
                            } else if (theta < req.int_max) {
                                det.det_int[req.side] += 1;
                            }
                        }
                        objective += counts_to_objective(det, prep.gt);
                    }
                    Best cand{objective, si, ii, ti};
                    if (better(cand, local)) local = cand;
                }
            }
        }
        results[wi] = local;
    };

    if (workers == 1) {
        run_worker(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back(run_worker, static_cast<size_t>(w));
        }
        for (auto& t : pool) t.join();
    }

    Best best;
    for (const Best& r : results) {
        if (better(r, best)) best = r;
    }

    GridSearchResult out;
    out.best.split_threshold_s = spec.split.lo + static_cast<double>(best.si) * spec.step;
    out.best.interruption_threshold_s =
        spec.interruption.lo + static_cast<double>(best.ii) * spec.step;
    out.best.overlap_tolerance_s = spec.overlap.lo + static_cast<double>(best.ti) * spec.step;
    out.best.bc_max_duration_s = spec.bc_max_duration_s;
    out.best_objective = best.objective;
    out.configs_scanned = n_split * n_int * n_tol;

    // Missing/extra statistics per dialogue at the winning configuration.
    std::vector<std::array<double, 4>> rows;
    for (const Dialogue& d : corpus) {
        auto timelines = merged_speaker_timelines(d, out.best.split_threshold_s);
        EventReport report = detect_events(timelines.at(d.speakers[0]),
                                           timelines.at(d.speakers[1]), out.best);
        GroundTruth gt = ground_truth_counts(d);
        DialogueCounts det;
        for (int s = 0; s < 2; ++s) {
            det.det_bc[s] = static_cast<int>(report.backchannels[static_cast<size_t>(s)].size());
            det.det_int[s] = static_cast<int>(report.interruptions[static_cast<size_t>(s)].size());
        }
        std::array<double, 4> row{};
        counts_to_objective(det, gt, nullptr, row.data());
        rows.push_back(row);
    }
    auto mean_std = [&](int col, double& mean, double& sd) {
        mean = 0.0;
        for (const auto& r : rows) mean += r[static_cast<size_t>(col)];
        mean /= static_cast<double>(rows.size());
        sd = 0.0;
        for (const auto& r : rows) {
            double dlt = r[static_cast<size_t>(col)] - mean;
            sd += dlt * dlt;
        }
        sd = std::sqrt(sd / static_cast<double>(rows.size()));
    };
    mean_std(0, out.stats.mean_missing_bc, out.stats.std_missing_bc);
    mean_std(1, out.stats.mean_extra_bc, out.stats.std_extra_bc);
    mean_std(2, out.stats.mean_missing_int, out.stats.std_missing_int);
    mean_std(3, out.stats.mean_extra_int, out.stats.std_extra_int);
    return out;
}

}  // namespace duplexforge
