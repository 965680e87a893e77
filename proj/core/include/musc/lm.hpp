#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "musc/common.hpp"
#include "musc/optim.hpp"
#include "musc/vocab.hpp"

namespace musc::lm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int vocab_size = 0;
  int embed_dim = 128;
  int n_layers = 2;
  int n_heads = 4;
  int context_len = 256;
  std::uint64_t seed = 0;
  double init_std = 0.02;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct TensorInfo {
  std::string name;
  int rows;
  int cols;
  std::size_t offset;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Training metadata carried alongside the parameters in a checkpoint.
struct CheckpointMeta {
  std::int64_t step = 0;
  std::string rng_state;
  std::string dataset_hash;
  std::string note;
};

class Tape;

// Pre-LayerNorm causal transformer with learned positional embeddings and an
// untied output head. All parameters live in one flat buffer, so gradients,
// optimizer state and checkpoints are plain vectors in the same layout.
class PolicyModel {
 public:
  explicit PolicyModel(const ModelConfig& cfg);

  const ModelConfig& config() const noexcept { return cfg_; }
  std::size_t num_parameters() const noexcept { return params_.size(); }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }

  // Content hash of config and parameters.
  std::string checkpoint_id() const;

  CheckpointMeta meta;

  // Row t is the log distribution of the token that follows position t.
  Matrix forward_logprobs(std::span<const TokenId> tokens) const;

  // Same as forward_logprobs but records activations for backward().
  Matrix forward(std::span<const TokenId> tokens, Tape& tape) const;

  // Accumulates d(loss)/d(params) into `grad` given d(loss)/d(log-probs)
  // for every row produced by forward().
  void backward(const Tape& tape, const Matrix& dlogprobs, std::span<double> grad) const;

  void save(const std::string& dir) const;
  static PolicyModel load(const std::string& dir);

 private:
  friend class Decoder;
  Eigen::Map<const Matrix> weight(std::size_t index) const;
  Eigen::Map<Matrix> grad_view(std::span<double> grad, std::size_t index) const;

  ModelConfig cfg_;
  std::vector<TensorInfo> tensors_;
  std::vector<double> params_;
};

// Activations recorded by PolicyModel::forward.
class Tape {
 public:
  struct Layer {
    Matrix x_in, ln1_hat, ln1_out, qkv, attn_out, x_mid, ln2_hat, ln2_out, fc_pre,
        fc_act;
    Vector ln1_rstd, ln2_rstd;
    std::vector<Matrix> probs;  // per head, T x T
  };
  std::vector<TokenId> tokens;
  std::vector<Layer> layers;
  Matrix x_final, lnf_hat, lnf_out, logprobs;
  Vector lnf_rstd;
};

// Incremental inference with a per-layer key/value cache.
class Decoder {
 public:
  explicit Decoder(const PolicyModel& model);

  // Appends `token` and returns the log distribution of the next token.
  Vector push(TokenId token);
  int position() const noexcept { return pos_; }

 private:
  const PolicyModel& model_;
  std::vector<Matrix> keys_, values_;
  int pos_ = 0;
};

// Frozen copy; exposes only const access to the wrapped model.
class ReferenceModel {
 public:
  explicit ReferenceModel(PolicyModel model) : model_(std::move(model)) {}
  const PolicyModel& model() const noexcept { return model_; }

 private:
  PolicyModel model_;
};

ReferenceModel clone_frozen(const PolicyModel& model);

struct SequenceLogprob {
  double total = 0.0;
  std::vector<double> per_token;
};

// log p(y | x) restricted to response positions.
SequenceLogprob sequence_logprob(const PolicyModel& model, std::span<const TokenId> x,
                                 std::span<const TokenId> y);

// Log distributions at each response position: row j is p(. | x, y_<j).
Matrix response_distributions(const PolicyModel& model, std::span<const TokenId> x,
                              std::span<const TokenId> y);

struct SampleOptions {
  double temperature = 1.0;
  bool greedy = false;
  int max_len = 16;
  TokenId stop_token = Vocabulary::kEos;
  // Tokens that may be emitted; empty means the whole vocabulary.
  std::vector<TokenId> allowed;
};

// Draws a continuation of `prefix`; the stop token, when drawn, is the last
// element of the result.
std::vector<TokenId> sample(const PolicyModel& model, std::span<const TokenId> prefix,
                            Rng& rng, const SampleOptions& opts);

// One supervised example: the loss covers `target` tokens only.
struct SequenceExample {
  std::vector<TokenId> prompt;
  std::vector<TokenId> target;
};

struct SftConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-3;
  Schedule schedule = Schedule::kCosine;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  std::int64_t max_steps = -1;  // -1: run all epochs
};

struct SftResult {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t step)
      : Error(what), step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

// Minimizes mean token NLL of targets given prompts. Throws DivergenceError
// (parameters restored to the last finite step) if the loss turns NaN/Inf.
SftResult sft_train(PolicyModel& model, const std::vector<SequenceExample>& corpus,
                    const SftConfig& cfg,
                    const std::function<void(std::int64_t, double)>& on_step = {});

// Mean NLL over targets of `examples`, no gradient.
double mean_nll(const PolicyModel& model, const std::vector<SequenceExample>& examples);

// Gradient of sum_t g[t] * log p(target_t | ...) for one example, accumulated
// into `grad`. Returns the per-token log-probs of the target.
std::vector<double> accumulate_target_gradient(const PolicyModel& model,
                                               const SequenceExample& ex,
                                               std::span<const double> dlogp,
                                               std::span<double> grad);

// Per-token log-probs of `ex.target` plus the tape to backprop them later.
struct ScoredExample {
  Tape tape;
  std::vector<double> logp;
  std::vector<TokenId> targets;
  std::size_t first_row = 0;
};
ScoredExample score_with_tape(const PolicyModel& model, const SequenceExample& ex);
void backprop_target(const PolicyModel& model, const ScoredExample& scored,
                     std::span<const double> dlogp, std::span<double> grad);

}  // namespace musc::lm
