#pragma once

#include <span>
#include <string>
#include <vector>

#include "musc/datagen.hpp"
#include "musc/lm.hpp"

namespace musc::conf {

enum class Metric { kEntropy, kPerplexity, kPmi, kKldiv };
Metric parse_metric(const std::string& name);
std::string metric_name(Metric m);

struct CalibrationConfig {
  double gamma = 2.0;
  double epsilon = 1e-6;
  Metric metric = Metric::kEntropy;
  bool calibrated = true;

  void validate() const;
};

enum class Role { kChosen, kRejected };

struct TokenScoreProfile {
  std::vector<double> values_own;
  std::vector<double> values_cross;
  Metric metric = Metric::kEntropy;
  std::string model_checkpoint_id;
};

// -sum p log p (nats) of a distribution given as log-probabilities.
double entropy(std::span<const double> logprobs);
// KL(p || q) for distributions given as log-probabilities.
double kl_divergence(std::span<const double> logp, std::span<const double> logq);

// All scores below take the conditioning prefix `x` and the scored response
// tokens `y` (letters followed by the end marker) and return one value per
// element of y.

// Entropy of p(. | x, y_<t); independent of the realized y_t.
std::vector<double> token_entropy(const lm::PolicyModel& model, std::span<const TokenId> x,
                                  std::span<const TokenId> y);
// 1 / p(y_t | x, y_<t)
std::vector<double> perplexity_score(const lm::PolicyModel& model,
                                     std::span<const TokenId> x, std::span<const TokenId> y);
// exp(-PMI_t), PMI_t = log p(y_t | x, y_<t) - log p(y_t | <ins></ins>, y_<t)
std::vector<double> pmi_score(const lm::PolicyModel& model, std::span<const TokenId> x,
                              std::span<const TokenId> y);
// KL(p(. | x_w, y_<t) || p(. | x_l, y_<t))
std::vector<double> kldiv_score(const lm::PolicyModel& model, std::span<const TokenId> x_w,
                                std::span<const TokenId> x_l, std::span<const TokenId> y);

// Uncertainty score under `metric` (entropy, perplexity or pmi).
std::vector<double> uncertainty(Metric metric, const lm::PolicyModel& model,
                                std::span<const TokenId> x, std::span<const TokenId> y);

// chosen:   r_t = min(gamma, u_w / u_l)
// rejected: r_t = min(gamma, u_l / u_w)
// Both scores are floored at epsilon so weights stay in (0, gamma].
std::vector<double> calibrate(std::span<const double> u_w, std::span<const double> u_l,
                              Role role, const CalibrationConfig& cfg);

// Ratio before the cap (for the reciprocity property).
std::vector<double> raw_ratio(std::span<const double> u_w, std::span<const double> u_l,
                              Role role, const CalibrationConfig& cfg);

// r_t = min(gamma, u_own_t / mean(u_own)); the "no calibration" ablation.
std::vector<double> self_normalize(std::span<const double> u_own,
                                   const CalibrationConfig& cfg);

// rejected: min(gamma, 1 + d_t); chosen: 1 / (1 + d_t).
std::vector<double> kldiv_weights(std::span<const double> d, Role role,
                                  const CalibrationConfig& cfg);

// Scores both responses of `pair` with the frozen reference model and stores
// the resulting weights. The chosen response is teacher-forced under the
// chosen and the rejected instruction, and likewise for the rejected one.
data::PreferencePair attach_weights(const data::PreferencePair& pair,
                                    const lm::PolicyModel& reference,
                                    const Vocabulary& vocab, const CalibrationConfig& cfg);

// Aligned text table of tokens and weights for both responses of a pair.
std::string render_weights(const data::PreferencePair& pair, const Vocabulary& vocab);

}  // namespace musc::conf
