#include "duplexforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace duplexforge {

using ordered_json = nlohmann::ordered_json;

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void validate_model_config(const ModelConfig& cfg) {
    if (cfg.hidden < 4) throw std::invalid_argument("hidden size must be >= 4");
    if (cfg.context_length < 1 || cfg.context_length > 2048) {
        throw std::invalid_argument("context_length must be in [1, 2048]");
    }
    if (cfg.n_layers < 0) throw std::invalid_argument("n_layers must be >= 0");
    if (cfg.layout.n_codebooks < 1 || cfg.layout.codebook_size < 2) {
        throw std::invalid_argument("invalid codebook layout");
    }
    if (cfg.text_vocab_size < kNumReservedTokens) {
        throw std::invalid_argument("text vocab too small");
    }
    if (cfg.speaker_ref_dim < 1) throw std::invalid_argument("speaker_ref_dim must be >= 1");
}

void ParamSet::setZero() {
    for (auto& t : dau_embed) t.setZero();
    text_embed.setZero();
    speaker_proj.setZero();
    for (auto& t : wx) t.setZero();
    for (auto& t : wh) t.setZero();
    for (auto& t : bh) t.setZero();
    for (auto& t : heads) t.setZero();
    text_head.setZero();
}

ParamSet make_params(const ModelConfig& cfg) {
    ParamSet p;
    int n = cfg.layout.n_codebooks;
    int d = cfg.hidden;
    p.dau_embed.assign(static_cast<size_t>(2 * n),
                       Eigen::MatrixXd::Zero(cfg.layout.codebook_size, d));
    p.text_embed = Eigen::MatrixXd::Zero(cfg.text_vocab_size, d);
    p.speaker_proj = Eigen::MatrixXd::Zero(d, cfg.speaker_ref_dim);
    p.wx.assign(static_cast<size_t>(cfg.n_layers), Eigen::MatrixXd::Zero(d, d));
    p.wh.assign(static_cast<size_t>(cfg.n_layers), Eigen::MatrixXd::Zero(d, d));
    p.bh.assign(static_cast<size_t>(cfg.n_layers), Eigen::VectorXd::Zero(d));
    p.heads.assign(static_cast<size_t>(2 * n),
                   Eigen::MatrixXd::Zero(cfg.layout.codebook_size, d));
    p.text_head = Eigen::MatrixXd::Zero(cfg.text_vocab_size, d);
    return p;
}

void for_each_tensor(ParamSet& p,
                     const std::function<void(const std::string&, double*, size_t)>& fn) {
    for (size_t i = 0; i < p.dau_embed.size(); ++i) {
        fn("dau_embed[" + std::to_string(i) + "]", p.dau_embed[i].data(),
           static_cast<size_t>(p.dau_embed[i].size()));
    }
    fn("text_embed", p.text_embed.data(), static_cast<size_t>(p.text_embed.size()));
    fn("speaker_proj", p.speaker_proj.data(), static_cast<size_t>(p.speaker_proj.size()));
    for (size_t l = 0; l < p.wx.size(); ++l) {
        fn("wx[" + std::to_string(l) + "]", p.wx[l].data(), static_cast<size_t>(p.wx[l].size()));
        fn("wh[" + std::to_string(l) + "]", p.wh[l].data(), static_cast<size_t>(p.wh[l].size()));
        fn("bh[" + std::to_string(l) + "]", p.bh[l].data(), static_cast<size_t>(p.bh[l].size()));
    }
    for (size_t k = 0; k < p.heads.size(); ++k) {
        fn("heads[" + std::to_string(k) + "]", p.heads[k].data(),
           static_cast<size_t>(p.heads[k].size()));
    }
    fn("text_head", p.text_head.data(), static_cast<size_t>(p.text_head.size()));
}

Model Model::init(const ModelConfig& cfg) {
    validate_model_config(cfg);
    Model m;
    m.cfg = cfg;
    m.params = make_params(cfg);
    Rng rng(mix_seed(cfg.seed, 0));

    double emb_scale = 0.25;
    double rec_scale = 0.5 / std::sqrt(static_cast<double>(cfg.hidden));
    for (auto& t : m.params.dau_embed) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = emb_scale * rng.normal();
    }
    for (Eigen::Index i = 0; i < m.params.text_embed.size(); ++i) {
        m.params.text_embed.data()[i] = emb_scale * rng.normal();
    }
    for (Eigen::Index i = 0; i < m.params.speaker_proj.size(); ++i) {
        m.params.speaker_proj.data()[i] = emb_scale * rng.normal();
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& wx = m.params.wx[static_cast<size_t>(l)];
        auto& wh = m.params.wh[static_cast<size_t>(l)];
        for (Eigen::Index i = 0; i < wx.size(); ++i) wx.data()[i] = rec_scale * rng.normal();
        for (Eigen::Index i = 0; i < wh.size(); ++i) wh.data()[i] = rec_scale * rng.normal();
    }
    // Heads start at zero: a fresh model predicts the uniform distribution.
    return m;
}

Eigen::VectorXd Model::reference_vector(const std::string& id) const {
    auto it = reference_overrides_.find(id);
    if (it != reference_overrides_.end()) return it->second;
    Rng rng(fnv1a64(id) ^ 0x9e3779b97f4a7c15ull);
    Eigen::VectorXd v(cfg.speaker_ref_dim);
    for (int i = 0; i < cfg.speaker_ref_dim; ++i) v(i) = rng.normal();
    double norm = v.norm();
    if (norm > 0.0) v /= norm;
    return v;
}

void Model::set_reference_vector(const std::string& id, Eigen::VectorXd v) {
    if (v.size() != cfg.speaker_ref_dim) {
        throw std::invalid_argument("reference vector dimension mismatch");
    }
    reference_overrides_[id] = std::move(v);
}

Eigen::VectorXd embed_frames(const Model& m, const DauFrame& user_frame,
                             const DauFrame& sys_frame, int32_t sys_text_token) {
    const auto& layout = m.cfg.layout;
    auto check = [&](const DauFrame& f) {
        if (f.codes.size() != static_cast<size_t>(layout.n_codebooks)) {
            throw std::out_of_range("frame width does not match layout");
        }
        for (int32_t c : f.codes) {
            if (c < 0 || c >= layout.codebook_size) {
                throw std::out_of_range("code out of range: " + std::to_string(c));
            }
        }
    };
    check(user_frame);
    check(sys_frame);
    if (sys_text_token < 0 || sys_text_token >= m.cfg.text_vocab_size) {
        throw std::out_of_range("text token out of range: " + std::to_string(sys_text_token));
    }
    Eigen::VectorXd x = Eigen::VectorXd::Zero(m.cfg.hidden);
    for (int i = 0; i < layout.n_codebooks; ++i) {
        x += m.params.dau_embed[static_cast<size_t>(m.user_table(i))]
                 .row(user_frame.codes[static_cast<size_t>(i)])
                 .transpose();
        x += m.params.dau_embed[static_cast<size_t>(m.sys_table(i))]
                 .row(sys_frame.codes[static_cast<size_t>(i)])
                 .transpose();
    }
    x += m.params.text_embed.row(sys_text_token).transpose();
    return x;
}

Eigen::VectorXd embed_example_position(const Model& m, const TrainingExample& ex, size_t p) {
    size_t prefix_len = ex.prefix_length();
    if (p == 0) {
        return m.params.speaker_proj * m.reference_vector(ex.prefix.speaker_slot);
    }
    if (p < prefix_len) {
        int32_t tok = ex.prefix.prompt_tokens[p - 1];
        if (tok < 0 || tok >= m.cfg.text_vocab_size) {
            throw std::out_of_range("prompt token out of range: " + std::to_string(tok));
        }
        return m.params.text_embed.row(tok).transpose();
    }
    size_t t = p - prefix_len;
    return embed_frames(m, ex.user_frames[t], ex.sys_frames[t], ex.sys_text.tokens[t]);
}

SequenceState::SequenceState(const Model& m) : model_(&m) {
    hidden_.assign(static_cast<size_t>(m.cfg.n_layers), Eigen::VectorXd::Zero(m.cfg.hidden));
}

void SequenceState::feed(const Eigen::VectorXd& x) {
    if (position_ >= static_cast<size_t>(model_->cfg.context_length)) {
        throw std::length_error("context overflow at position " + std::to_string(position_));
    }
    input_ = x;
    const Eigen::VectorXd* below = &input_;
    for (int l = 0; l < model_->cfg.n_layers; ++l) {
        auto& h = hidden_[static_cast<size_t>(l)];
        Eigen::VectorXd a = model_->params.wx[static_cast<size_t>(l)] * (*below) +
                            model_->params.wh[static_cast<size_t>(l)] * h +
                            model_->params.bh[static_cast<size_t>(l)];
        h = a.array().tanh().matrix();
        below = &h;
    }
    ++position_;
}

const Eigen::VectorXd& SequenceState::top_hidden() const {
    if (position_ == 0) throw std::logic_error("no position fed yet");
    return model_->cfg.n_layers > 0 ? hidden_.back() : input_;
}

StepLogits SequenceState::logits() const {
    const Eigen::VectorXd& top = top_hidden();
    StepLogits out;
    out.dau.reserve(model_->params.heads.size());
    for (const auto& w : model_->params.heads) {
        out.dau.push_back(w * top);
    }
    out.text = model_->params.text_head * top;
    return out;
}

StepLogits forward(const Model& m, const TrainingExample& ex, size_t t) {
    if (t >= ex.total_length()) {
        throw std::out_of_range("forward position beyond example length");
    }
    SequenceState state(m);
    for (size_t p = 0; p <= t; ++p) {
        state.feed(embed_example_position(m, ex, p));
    }
    return state.logits();
}

namespace {

// Kahan-compensated sum; keeps finite-difference checks clean.
struct CompensatedSum {
    double sum = 0.0;
    double comp = 0.0;
    void add(double v) {
        double y = v - comp;
        double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

double cross_entropy(const Eigen::VectorXd& z, int32_t target, Eigen::VectorXd* dz) {
    double zmax = z.maxCoeff();
    double sumexp = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) sumexp += std::exp(z(i) - zmax);
    double lse = zmax + std::log(sumexp);
    if (dz) {
        *dz = ((z.array() - zmax).exp() / sumexp).matrix();
        (*dz)(target) -= 1.0;
    }
    return lse - z(target);
}

double loss_impl(const Model& m, const TrainingExample& ex, ParamSet* grads) {
    const auto& layout = ex.layout;
    if (layout.n_codebooks != m.cfg.layout.n_codebooks ||
        layout.codebook_size != m.cfg.layout.codebook_size) {
        throw std::invalid_argument("example layout does not match model layout");
    }
    const size_t total = ex.total_length();
    const size_t prefix_len = ex.prefix_length();
    if (total > static_cast<size_t>(m.cfg.context_length)) {
        throw std::length_error("context overflow: example length " + std::to_string(total));
    }
    if (ex.loss_mask.size() != total) {
        throw std::invalid_argument("loss mask length does not match example");
    }
    const int n = layout.n_codebooks;
    const uint32_t all_bits = (1u << (2 * n + 1)) - 1u;

    size_t active_terms = 0;
    for (size_t p = 0; p + 1 < total; ++p) {
        active_terms += static_cast<size_t>(__builtin_popcount(ex.loss_mask[p] & all_bits));
    }
    if (active_terms == 0) {
        throw std::invalid_argument("empty loss mask");
    }
    const double inv_m = 1.0 / static_cast<double>(active_terms);

    // Forward pass, keeping the trace for backprop.
    std::vector<Eigen::VectorXd> xs(total);
    std::vector<std::vector<Eigen::VectorXd>> hs(static_cast<size_t>(m.cfg.n_layers));
    for (auto& layer : hs) layer.resize(total);
    for (size_t p = 0; p < total; ++p) {
        xs[p] = embed_example_position(m, ex, p);
        const Eigen::VectorXd* below = &xs[p];
        for (int l = 0; l < m.cfg.n_layers; ++l) {
            Eigen::VectorXd a = m.params.wx[static_cast<size_t>(l)] * (*below) +
                                m.params.bh[static_cast<size_t>(l)];
            if (p > 0) a += m.params.wh[static_cast<size_t>(l)] * hs[static_cast<size_t>(l)][p - 1];
            hs[static_cast<size_t>(l)][p] = a.array().tanh().matrix();
            below = &hs[static_cast<size_t>(l)][p];
        }
    }
    auto top_of = [&](size_t p) -> const Eigen::VectorXd& {
        return m.cfg.n_layers > 0 ? hs.back()[p] : xs[p];
    };

    CompensatedSum loss;
    std::vector<Eigen::VectorXd> dtop;
    if (grads) dtop.assign(total, Eigen::VectorXd());

    Eigen::VectorXd dz;
    for (size_t p = 0; p + 1 < total; ++p) {
        uint32_t bits = ex.loss_mask[p] & all_bits;
        if (bits == 0) continue;
        size_t t_next = p + 1 - prefix_len;  // active positions are post-prefix
        const Eigen::VectorXd& top = top_of(p);
        for (int k = 0; k < 2 * n; ++k) {
            if (!(bits & (1u << k))) continue;
            int32_t target = k < n ? ex.user_frames[t_next].codes[static_cast<size_t>(k)]
                                   : ex.sys_frames[t_next].codes[static_cast<size_t>(k - n)];
            Eigen::VectorXd z = m.params.heads[static_cast<size_t>(k)] * top;
            loss.add(cross_entropy(z, target, grads ? &dz : nullptr));
            if (grads) {
                dz *= inv_m;
                grads->heads[static_cast<size_t>(k)] += dz * top.transpose();
                if (dtop[p].size() == 0) dtop[p] = Eigen::VectorXd::Zero(m.cfg.hidden);
                dtop[p] += m.params.heads[static_cast<size_t>(k)].transpose() * dz;
            }
        }
        if (bits & (1u << (2 * n))) {
            int32_t target = ex.sys_text.tokens[t_next];
            Eigen::VectorXd z = m.params.text_head * top;
            loss.add(cross_entropy(z, target, grads ? &dz : nullptr));
            if (grads) {
                dz *= inv_m;
                grads->text_head += dz * top.transpose();
                if (dtop[p].size() == 0) dtop[p] = Eigen::VectorXd::Zero(m.cfg.hidden);
                dtop[p] += m.params.text_head.transpose() * dz;
            }
        }
    }

    if (!grads) {
        return loss.sum * inv_m;
    }

    // Stop-gradient on the user-side embedding tables when the example
    // trains no user head (system-only loss).
    bool train_user_tables = false;
    for (size_t p = 0; p < total; ++p) {
        if (ex.loss_mask[p] & user_head_bits(layout)) {
            train_user_tables = true;
            break;
        }
    }

    const int layers = m.cfg.n_layers;
    std::vector<Eigen::VectorXd> dx(total);
    if (layers == 0) {
        for (size_t p = 0; p < total; ++p) {
            dx[p] = dtop[p].size() > 0 ? dtop[p] : Eigen::VectorXd::Zero(m.cfg.hidden);
        }
    } else {
        std::vector<std::vector<Eigen::VectorXd>> dh(static_cast<size_t>(layers));
        for (auto& layer : dh) layer.assign(total, Eigen::VectorXd());
        auto ensure = [&](Eigen::VectorXd& v) {
            if (v.size() == 0) v = Eigen::VectorXd::Zero(m.cfg.hidden);
        };
        for (size_t p = 0; p < total; ++p) {
            if (dtop[p].size() > 0) dh[static_cast<size_t>(layers - 1)][p] = dtop[p];
        }
        for (size_t pi = total; pi-- > 0;) {
            for (int l = layers - 1; l >= 0; --l) {
                Eigen::VectorXd& g = dh[static_cast<size_t>(l)][pi];
                if (g.size() == 0) {
                    if (l == 0) dx[pi] = Eigen::VectorXd::Zero(m.cfg.hidden);
                    continue;
                }
                const Eigen::VectorXd& h = hs[static_cast<size_t>(l)][pi];
                Eigen::VectorXd da =
                    (g.array() * (1.0 - h.array().square())).matrix();
                const Eigen::VectorXd& below =
                    l > 0 ? hs[static_cast<size_t>(l - 1)][pi] : xs[pi];
                grads->wx[static_cast<size_t>(l)] += da * below.transpose();
                grads->bh[static_cast<size_t>(l)] += da;
                if (pi > 0) {
                    grads->wh[static_cast<size_t>(l)] +=
                        da * hs[static_cast<size_t>(l)][pi - 1].transpose();
                    ensure(dh[static_cast<size_t>(l)][pi - 1]);
                    dh[static_cast<size_t>(l)][pi - 1] +=
                        m.params.wh[static_cast<size_t>(l)].transpose() * da;
                }
                Eigen::VectorXd dbelow = m.params.wx[static_cast<size_t>(l)].transpose() * da;
                if (l > 0) {
                    ensure(dh[static_cast<size_t>(l - 1)][pi]);
                    dh[static_cast<size_t>(l - 1)][pi] += dbelow;
                } else {
                    dx[pi] = std::move(dbelow);
                }
            }
        }
    }

    // Scatter input gradients into the embedding tables.
    for (size_t p = 0; p < total; ++p) {
        const Eigen::VectorXd& g = dx[p];
        if (g.size() == 0 || g.isZero(0.0)) continue;
        if (p == 0) {
            grads->speaker_proj +=
                g * m.reference_vector(ex.prefix.speaker_slot).transpose();
            continue;
        }
        if (p < prefix_len) {
            grads->text_embed.row(ex.prefix.prompt_tokens[p - 1]) += g.transpose();
            continue;
        }
        size_t t = p - prefix_len;
        for (int i = 0; i < n; ++i) {
            if (train_user_tables) {
                grads->dau_embed[static_cast<size_t>(m.user_table(i))]
                    .row(ex.user_frames[t].codes[static_cast<size_t>(i)]) += g.transpose();
            }
            grads->dau_embed[static_cast<size_t>(m.sys_table(i))]
                .row(ex.sys_frames[t].codes[static_cast<size_t>(i)]) += g.transpose();
        }
        grads->text_embed.row(ex.sys_text.tokens[t]) += g.transpose();
    }
    return loss.sum * inv_m;
}

}  // namespace

double masked_loss(const Model& m, const TrainingExample& ex) {
    return loss_impl(m, ex, nullptr);
}

double masked_loss_backward(const Model& m, const TrainingExample& ex, ParamSet& grads) {
    return loss_impl(m, ex, &grads);
}

GradCheckResult grad_check(Model& m, const TrainingExample& ex, double eps, size_t min_params,
                           uint64_t seed) {
    ParamSet grads = make_params(m.cfg);
    masked_loss_backward(m, ex, grads);

    struct Span {
        std::string name;
        double* param;
        double* grad;
        size_t count;
    };
    std::vector<Span> spans;
    std::vector<std::pair<double*, size_t>> grad_ptrs;
    for_each_tensor(grads, [&](const std::string&, double* ptr, size_t count) {
        grad_ptrs.emplace_back(ptr, count);
    });
    size_t gi = 0;
    for_each_tensor(m.params, [&](const std::string& name, double* ptr, size_t count) {
        spans.push_back({name, ptr, grad_ptrs[gi].first, count});
        ++gi;
    });

    Rng rng(seed);
    std::vector<std::pair<size_t, size_t>> picks;  // (span index, offset)
    for (size_t si = 0; si < spans.size(); ++si) {
        size_t take = std::min<size_t>(2, spans[si].count);
        for (size_t j = 0; j < take; ++j) {
            picks.emplace_back(si, rng.below(spans[si].count));
        }
    }
    size_t total_params = 0;
    for (const Span& s : spans) total_params += s.count;
    while (picks.size() < min_params) {
        size_t flat = rng.below(total_params);
        for (size_t si = 0; si < spans.size(); ++si) {
            if (flat < spans[si].count) {
                picks.emplace_back(si, flat);
                break;
            }
            flat -= spans[si].count;
        }
    }

    GradCheckResult result;
    for (const auto& [si, off] : picks) {
        double* slot = spans[si].param + off;
        double saved = *slot;
        *slot = saved + eps;
        double up = masked_loss(m, ex);
        *slot = saved - eps;
        double down = masked_loss(m, ex);
        *slot = saved;
        double fd = (up - down) / (2.0 * eps);
        double analytic = *(spans[si].grad + off);
        double denom = std::max({std::abs(analytic), std::abs(fd), 1e-10});
        double rel = (std::abs(analytic) < 1e-12 && std::abs(fd) < 1e-12)
                         ? 0.0
                         : std::abs(analytic - fd) / denom;
        result.max_rel_error = std::max(result.max_rel_error, rel);
        ++result.checked;
    }
    return result;
}

int32_t sample_index(const Eigen::VectorXd& logits, const SamplingParams& params, Rng& rng) {
    const int size = static_cast<int>(logits.size());
    if (size == 0) throw std::invalid_argument("empty logits");
    if (params.temperature <= 0.0) throw std::invalid_argument("temperature must be > 0");
    if (params.top_k < 1) throw std::invalid_argument("top_k must be >= 1");
    int top_k = std::min(params.top_k, size);

    std::vector<int> idx(static_cast<size_t>(size));
    std::iota(idx.begin(), idx.end(), 0);
    auto by_logit = [&](int a, int b) {
        if (logits(a) != logits(b)) return logits(a) > logits(b);
        return a < b;  // ties resolve to the lower index
    };
    if (top_k < size) {
        std::partial_sort(idx.begin(), idx.begin() + top_k, idx.end(), by_logit);
        idx.resize(static_cast<size_t>(top_k));
    } else {
        std::sort(idx.begin(), idx.end(), by_logit);
    }

    double max_scaled = logits(idx[0]) / params.temperature;
    std::vector<double> weights(idx.size());
    double sum = 0.0;
    for (size_t j = 0; j < idx.size(); ++j) {
        weights[j] = std::exp(logits(idx[j]) / params.temperature - max_scaled);
        sum += weights[j];
    }
    size_t keep = idx.size();
    if (params.top_p < 1.0) {
        double target = params.top_p * sum;
        double cum = 0.0;
        for (size_t j = 0; j < idx.size(); ++j) {
            cum += weights[j];
            if (cum >= target - 1e-12) {
                keep = j + 1;
                break;
            }
        }
    }
    double total = 0.0;
    for (size_t j = 0; j < keep; ++j) total += weights[j];
    double u = rng.uniform() * total;
    double acc = 0.0;
    for (size_t j = 0; j < keep; ++j) {
        acc += weights[j];
        if (u < acc) return idx[j];
    }
    return idx[keep - 1];
}

SampledStep sample_step(const StepLogits& logits, const SamplingParams& params, Rng& rng,
                        const CodebookLayout& layout) {
    SampledStep out;
    out.sys_frame.codes.resize(static_cast<size_t>(layout.n_codebooks));
    for (int i = 0; i < layout.n_codebooks; ++i) {
        const auto& z = logits.dau[static_cast<size_t>(layout.n_codebooks + i)];
        out.sys_frame.codes[static_cast<size_t>(i)] = sample_index(z, params, rng);
    }
    out.text_token = sample_index(logits.text, params, rng);
    return out;
}

namespace {

void zip_tensors(ParamSet& a, ParamSet& b,
                 const std::function<void(double*, double*, size_t)>& fn) {
    std::vector<std::pair<double*, size_t>> bs;
    for_each_tensor(b, [&](const std::string&, double* ptr, size_t n) { bs.emplace_back(ptr, n); });
    size_t i = 0;
    for_each_tensor(a, [&](const std::string&, double* ptr, size_t n) {
        fn(ptr, bs[i].first, n);
        ++i;
    });
}

}  // namespace

TrainResult train(Model& m, const std::vector<TrainingExample>& examples,
                  const TrainOptions& opts) {
    if (examples.empty()) throw std::invalid_argument("no training examples");
    if (opts.accumulation < 1) throw std::invalid_argument("accumulation must be >= 1");

    TrainResult result;
    ParamSet grads = make_params(m.cfg);
    size_t cursor = static_cast<size_t>(m.trained_steps) *
                    static_cast<size_t>(opts.accumulation) % examples.size();
    for (int64_t step = 0; step < opts.steps; ++step) {
        grads.setZero();
        double loss_sum = 0.0;
        for (int j = 0; j < opts.accumulation; ++j) {
            loss_sum += masked_loss_backward(m, examples[cursor], grads);
            cursor = (cursor + 1) % examples.size();
        }
        double batch_loss = loss_sum / opts.accumulation;
        if (!std::isfinite(batch_loss)) {
            throw std::runtime_error("training diverged: loss is not finite at step " +
                                     std::to_string(m.trained_steps + 1));
        }
        double inv_k = 1.0 / opts.accumulation;
        double sq_norm = 0.0;
        for_each_tensor(grads, [&](const std::string&, double* ptr, size_t n) {
            for (size_t i = 0; i < n; ++i) {
                ptr[i] *= inv_k;
                sq_norm += ptr[i] * ptr[i];
            }
        });
        double norm = std::sqrt(sq_norm);
        double scale = (opts.grad_clip > 0.0 && norm > opts.grad_clip)
                           ? opts.grad_clip / norm
                           : 1.0;
        zip_tensors(m.params, grads, [&](double* p, double* g, size_t n) {
            for (size_t i = 0; i < n; ++i) p[i] -= opts.lr * scale * g[i];
        });
        m.trained_steps += 1;
        result.loss_curve.emplace_back(m.trained_steps, batch_loss);
    }
    return result;
}

double perplexity(const Model& m, const std::vector<TrainingExample>& examples, HeadGroup group) {
    if (examples.empty()) throw std::invalid_argument("no examples");
    CompensatedSum ce;
    size_t terms = 0;
    for (const TrainingExample& ex : examples) {
        const auto& layout = ex.layout;
        const int n = layout.n_codebooks;
        const size_t total = ex.total_length();
        const size_t prefix_len = ex.prefix_length();
        uint32_t group_bits = group == HeadGroup::dau
                                  ? (user_head_bits(layout) | sys_head_bits(layout))
                                  : text_head_bit(layout);
        SequenceState state(m);
        for (size_t p = 0; p + 1 < total; ++p) {
            state.feed(embed_example_position(m, ex, p));
            uint32_t bits = ex.loss_mask[p] & group_bits;
            if (bits == 0) continue;
            size_t t_next = p + 1 - prefix_len;
            const Eigen::VectorXd& top = state.top_hidden();
            for (int k = 0; k < 2 * n; ++k) {
                if (!(bits & (1u << k))) continue;
                int32_t target = k < n ? ex.user_frames[t_next].codes[static_cast<size_t>(k)]
                                       : ex.sys_frames[t_next].codes[static_cast<size_t>(k - n)];
                Eigen::VectorXd z = m.params.heads[static_cast<size_t>(k)] * top;
                ce.add(cross_entropy(z, target, nullptr));
                ++terms;
            }
            if (bits & (1u << (2 * n))) {
                Eigen::VectorXd z = m.params.text_head * top;
                ce.add(cross_entropy(z, ex.sys_text.tokens[t_next], nullptr));
                ++terms;
            }
        }
    }
    if (terms == 0) throw std::invalid_argument("empty loss mask for perplexity");
    return std::exp(ce.sum / static_cast<double>(terms));
}

namespace {

constexpr char kCheckpointMagic[8] = {'D', 'F', 'C', 'K', 'P', 'T', '1', '\n'};

}  // namespace

void save_checkpoint(const std::string& path, const Model& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));

    ordered_json header;
    header["hidden"] = m.cfg.hidden;
    header["context_length"] = m.cfg.context_length;
    header["n_layers"] = m.cfg.n_layers;
    header["layout"] = ordered_json{
        {"kind", layout_kind_name(m.cfg.layout.kind)},
        {"n_codebooks", m.cfg.layout.n_codebooks},
        {"codebook_size", m.cfg.layout.codebook_size},
        {"frame_rate_hz", m.cfg.layout.frame_rate_hz},
    };
    header["text_vocab_size"] = m.cfg.text_vocab_size;
    header["speaker_ref_dim"] = m.cfg.speaker_ref_dim;
    header["seed"] = m.cfg.seed;
    header["trained_steps"] = m.trained_steps;
    header["vocab_tokens"] = m.vocab_tokens;
    ordered_json refs = ordered_json::object();
    for (const auto& [id, v] : m.reference_overrides_) {
        refs[id] = std::vector<double>(v.data(), v.data() + v.size());
    }
    header["reference_overrides"] = std::move(refs);

    std::vector<uint8_t> blob = ordered_json::to_msgpack(header);
    uint64_t blob_len = blob.size();
    out.write(reinterpret_cast<const char*>(&blob_len), sizeof(blob_len));
    out.write(reinterpret_cast<const char*>(blob.data()),
              static_cast<std::streamsize>(blob.size()));

    for_each_tensor(const_cast<ParamSet&>(m.params),
                    [&](const std::string&, double* ptr, size_t n) {
                        uint64_t count = n;
                        out.write(reinterpret_cast<const char*>(&count), sizeof(count));
                        out.write(reinterpret_cast<const char*>(ptr),
                                  static_cast<std::streamsize>(n * sizeof(double)));
                    });
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[sizeof(kCheckpointMagic)] = {};
    in.read(magic, sizeof(magic));
    if (in.gcount() != sizeof(magic) ||
        !std::equal(magic, magic + sizeof(magic), kCheckpointMagic)) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    uint64_t blob_len = 0;
    in.read(reinterpret_cast<char*>(&blob_len), sizeof(blob_len));
    std::vector<uint8_t> blob(blob_len);
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_len));
    ordered_json header = ordered_json::from_msgpack(blob);

    ModelConfig cfg;
    cfg.hidden = header.at("hidden").get<int>();
    cfg.context_length = header.at("context_length").get<int>();
    cfg.n_layers = header.at("n_layers").get<int>();
    const auto& jl = header.at("layout");
    cfg.layout.kind = layout_kind_from_name(jl.at("kind").get<std::string>());
    cfg.layout.n_codebooks = jl.at("n_codebooks").get<int>();
    cfg.layout.codebook_size = jl.at("codebook_size").get<int>();
    cfg.layout.frame_rate_hz = jl.at("frame_rate_hz").get<double>();
    cfg.text_vocab_size = header.at("text_vocab_size").get<int>();
    cfg.speaker_ref_dim = header.at("speaker_ref_dim").get<int>();
    cfg.seed = header.at("seed").get<uint64_t>();

    Model m;
    m.cfg = cfg;
    m.params = make_params(cfg);
    m.trained_steps = header.at("trained_steps").get<int64_t>();
    m.vocab_tokens = header.at("vocab_tokens").get<std::vector<std::string>>();
    for (auto it = header.at("reference_overrides").begin();
         it != header.at("reference_overrides").end(); ++it) {
        auto vals = it.value().get<std::vector<double>>();
        Eigen::VectorXd v(static_cast<Eigen::Index>(vals.size()));
        std::copy(vals.begin(), vals.end(), v.data());
        m.reference_overrides_[it.key()] = std::move(v);
    }

    for_each_tensor(m.params, [&](const std::string& name, double* ptr, size_t n) {
        uint64_t count = 0;
        in.read(reinterpret_cast<char*>(&count), sizeof(count));
        if (count != n) {
            throw std::runtime_error("checkpoint tensor size mismatch for " + name);
        }
        in.read(reinterpret_cast<char*>(ptr), static_cast<std::streamsize>(n * sizeof(double)));
    });
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return m;
}

void save_loss_curve(const std::string& path, const TrainResult& result) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write loss curve: " + path);
    out << "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : result.loss_curve) {
        std::snprintf(buf, sizeof(buf), "%lld,%.17g\n", static_cast<long long>(step), loss);
        out << buf;
    }
}

}  // namespace duplexforge
