#pragma once

#include <string>
#include <vector>

namespace musc::loss {

enum class Method { kDpo, kTdpo, kSimpo, kIpo };

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct LossConfig {
  Method method = Method::kTdpo;
  double beta = 0.2;
  double gamma_simpo = 1.0;
  double sft_mix = 0.1;
  bool use_weights = true;

  // Per-method beta defaults: 0.2 (dpo, tdpo), 3.0 (simpo), 1.0 (ipo).
  static double default_beta(Method m);
  static LossConfig defaults_for(Method m);
  void validate() const;
};

// Response-position log-probs of one preference pair. Weight vectors may be
// empty, meaning uniform weights of 1.
struct PairLogps {
  std::vector<double> policy_chosen;
  std::vector<double> ref_chosen;
  std::vector<double> policy_rejected;
  std::vector<double> ref_rejected;
  std::vector<double> weights_chosen;
  std::vector<double> weights_rejected;

  std::size_t chosen_len() const noexcept { return policy_chosen.size(); }
  std::size_t rejected_len() const noexcept { return policy_rejected.size(); }
};

// d(loss)/d(policy log-prob) per response token.
struct PolicyGrad {
  std::vector<double> chosen;
  std::vector<double> rejected;
};

struct LossValue {
  double loss = 0.0;
  double margin = 0.0;
  double chosen_reward = 0.0;
  double rejected_reward = 0.0;
  PolicyGrad grad;
};

LossValue dpo_loss(const PairLogps& p, double beta);
LossValue tdpo_loss(const PairLogps& p, double beta);
LossValue simpo_loss(const PairLogps& p, double beta, double gamma);
LossValue ipo_loss(const PairLogps& p, double beta);
LossValue sft_loss(const PairLogps& p);

struct TotalLoss {
  double loss = 0.0;
  double margin = 0.0;
  double chosen_reward = 0.0;
  double rejected_reward = 0.0;
  double method_component = 0.0;
  double sft_component = 0.0;
  PolicyGrad grad;
};

// method loss + sft_mix * sft loss. use_weights=false ignores any weights.
TotalLoss total_loss(const PairLogps& p, const LossConfig& cfg);

// sigma(beta * sum l_w - beta * sum l_l) with uniform weights.
double token_bt_probability(const PairLogps& p, double beta);

}  // namespace musc::loss
