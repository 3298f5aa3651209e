#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "duplexforge/codec.hpp"
#include "duplexforge/stream.hpp"

namespace duplexforge {

// mt19937_64 with hand-rolled output mapping so draws are identical
// across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
    double normal();
    size_t below(size_t n) { return static_cast<size_t>(gen_() % n); }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

uint64_t mix_seed(uint64_t seed, uint64_t stream);

struct ModelConfig {
    int hidden = 64;
    int context_length = 2048;
    int n_layers = 1;
    CodebookLayout layout = default_layout(LayoutKind::independent);
    int text_vocab_size = 256;
    int speaker_ref_dim = 16;
    uint64_t seed = 0;
};

void validate_model_config(const ModelConfig& cfg);

struct StepLogits {
    std::vector<Eigen::VectorXd> dau;  // 2n heads, user first then system
    Eigen::VectorXd text;
};

// Parameter tensors; same shape as the model, used for gradients.
struct ParamSet {
    std::vector<Eigen::MatrixXd> dau_embed;  // 2n tables, codebook_size x d
    Eigen::MatrixXd text_embed;              // vocab x d, shared with the prompt
    Eigen::MatrixXd speaker_proj;            // d x ref_dim
    std::vector<Eigen::MatrixXd> wx, wh;     // n_layers, d x d
    std::vector<Eigen::VectorXd> bh;         // n_layers, d
    std::vector<Eigen::MatrixXd> heads;      // 2n heads, codebook_size x d
    Eigen::MatrixXd text_head;               // vocab x d

    void setZero();
};

ParamSet make_params(const ModelConfig& cfg);

// Visits every tensor as a flat double span in a fixed order.
void for_each_tensor(ParamSet& p,
                     const std::function<void(const std::string&, double*, size_t)>& fn);

class Model {
  public:
    static Model init(const ModelConfig& cfg);

    ModelConfig cfg;
    ParamSet params;
    int64_t trained_steps = 0;
    std::vector<std::string> vocab_tokens;  // snapshot for self-contained inference

    int user_table(int codebook) const { return codebook; }
    int sys_table(int codebook) const { return cfg.layout.n_codebooks + codebook; }

    // Reference-embedding slot: ids resolve to a deterministic synthetic
    // vector unless an external one was supplied via set_reference_vector.
    Eigen::VectorXd reference_vector(const std::string& id) const;
    void set_reference_vector(const std::string& id, Eigen::VectorXd v);
    const std::map<std::string, Eigen::VectorXd>& reference_overrides() const {
        return reference_overrides_;
    }

  private:
    std::map<std::string, Eigen::VectorXd> reference_overrides_;
    friend void save_checkpoint(const std::string&, const Model&);
    friend Model load_checkpoint(const std::string&);
};

Eigen::VectorXd embed_frames(const Model& m, const DauFrame& user_frame,
                             const DauFrame& sys_frame, int32_t sys_text_token);
Eigen::VectorXd embed_example_position(const Model& m, const TrainingExample& ex, size_t p);

// Recurrent state fed one position at a time; logits computed on demand.
class SequenceState {
  public:
    explicit SequenceState(const Model& m);

    void feed(const Eigen::VectorXd& x);
    size_t position() const { return position_; }
    const Eigen::VectorXd& top_hidden() const;
    StepLogits logits() const;

  private:
    const Model* model_;
    Eigen::VectorXd input_;
    std::vector<Eigen::VectorXd> hidden_;  // per layer
    size_t position_ = 0;
};

StepLogits forward(const Model& m, const TrainingExample& ex, size_t t);

double masked_loss(const Model& m, const TrainingExample& ex);
double masked_loss_backward(const Model& m, const TrainingExample& ex, ParamSet& grads);

struct GradCheckResult {
    double max_rel_error = 0.0;
    size_t checked = 0;
};

GradCheckResult grad_check(Model& m, const TrainingExample& ex, double eps = 1e-5,
                           size_t min_params = 100, uint64_t seed = 1);

struct SamplingParams {
    double temperature = 0.9;
    int top_k = 40;
    double top_p = 1.0;
};

int32_t sample_index(const Eigen::VectorXd& logits, const SamplingParams& params, Rng& rng);

struct SampledStep {
    DauFrame sys_frame;
    int32_t text_token = 0;
};

// Samples the system DAU heads and the text head; user heads are inputs.
SampledStep sample_step(const StepLogits& logits, const SamplingParams& params, Rng& rng,
                        const CodebookLayout& layout);

struct TrainOptions {
    int64_t steps = 100;
    double lr = 5e-5;
    int accumulation = 8;
    double grad_clip = 1.0;
};

struct TrainResult {
    std::vector<std::pair<int64_t, double>> loss_curve;  // (step, batch loss)
};

TrainResult train(Model& m, const std::vector<TrainingExample>& examples,
                  const TrainOptions& opts);

enum class HeadGroup { dau, text };

double perplexity(const Model& m, const std::vector<TrainingExample>& examples, HeadGroup group);

void save_checkpoint(const std::string& path, const Model& m);
Model load_checkpoint(const std::string& path);

void save_loss_curve(const std::string& path, const TrainResult& result);

}  // namespace duplexforge
