#include "musc/losses.hpp"

#include <cmath>
#include <span>

#include "musc/common.hpp"

namespace musc::loss {

Method parse_method(const std::string& name) {
  if (name == "dpo") return Method::kDpo;
  if (name == "tdpo") return Method::kTdpo;
  if (name == "simpo") return Method::kSimpo;
  if (name == "ipo") return Method::kIpo;
  throw ConfigError("unknown loss method '" + name + "' (expected dpo|tdpo|simpo|ipo)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::kDpo: return "dpo";
    case Method::kTdpo: return "tdpo";
    case Method::kSimpo: return "simpo";
    case Method::kIpo: return "ipo";
  }
  return "unknown";
}

double LossConfig::default_beta(Method m) {
  switch (m) {
    case Method::kDpo:
    case Method::kTdpo: return 0.2;
    case Method::kSimpo: return 3.0;
    case Method::kIpo: return 1.0;
  }
  return 0.2;
}

LossConfig LossConfig::defaults_for(Method m) {
  LossConfig cfg;
  cfg.method = m;
  cfg.beta = default_beta(m);
  return cfg;
}

void LossConfig::validate() const {
  if (!(beta > 0)) throw ConfigError("loss.beta must be > 0");
  if (!(sft_mix >= 0)) throw ConfigError("loss.sft_mix must be >= 0");
}

namespace {

void check_shapes(const PairLogps& p, bool need_ref) {
  if (need_ref && (p.ref_chosen.size() != p.policy_chosen.size() ||
                   p.ref_rejected.size() != p.policy_rejected.size())) {
    throw Error("reference log-probs missing or length-mismatched");
  }
  if (!p.weights_chosen.empty() && p.weights_chosen.size() != p.policy_chosen.size()) {
    throw Error("chosen weights length mismatch");
  }
  if (!p.weights_rejected.empty() &&
      p.weights_rejected.size() != p.policy_rejected.size()) {
    throw Error("rejected weights length mismatch");
  }
}

double weight_at(const std::vector<double>& w, std::size_t t) {
  return w.empty() ? 1.0 : w[t];
}

// sum_t w_t (policy_t - ref_t)
double weighted_ratio_sum(const std::vector<double>& policy, const std::vector<double>& ref,
                          const std::vector<double>& w) {
  CompensatedAccumulator acc;
  for (std::size_t t = 0; t < policy.size(); ++t) {
    acc.add(weight_at(w, t) * (policy[t] - ref[t]));
  }
  return acc.value();
}

// Shared by dpo/tdpo: loss = -log sigma(beta*(A_w - A_l)) where A = sum w*l.
LossValue weighted_dpo(const PairLogps& p, double beta, const std::vector<double>& ww,
                       const std::vector<double>& wl) {
  LossValue out;
  const double a_w = weighted_ratio_sum(p.policy_chosen, p.ref_chosen, ww);
  const double a_l = weighted_ratio_sum(p.policy_rejected, p.ref_rejected, wl);
  out.chosen_reward = beta * a_w;
  out.rejected_reward = beta * a_l;
  const double z = beta * (a_w - a_l);
  out.margin = z;
  out.loss = -log_sigmoid(z);
  const double dz = -sigmoid(-z);  // dL/dz
  out.grad.chosen.resize(p.chosen_len());
  out.grad.rejected.resize(p.rejected_len());
  for (std::size_t t = 0; t < p.chosen_len(); ++t) {
    out.grad.chosen[t] = dz * beta * weight_at(ww, t);
  }
  for (std::size_t t = 0; t < p.rejected_len(); ++t) {
    out.grad.rejected[t] = -dz * beta * weight_at(wl, t);
  }
  return out;
}

}  // namespace

LossValue dpo_loss(const PairLogps& p, double beta) {
  check_shapes(p, true);
  return weighted_dpo(p, beta, {}, {});
}

LossValue tdpo_loss(const PairLogps& p, double beta) {
  check_shapes(p, true);
  return weighted_dpo(p, beta, p.weights_chosen, p.weights_rejected);
}

LossValue simpo_loss(const PairLogps& p, double beta, double gamma) {
  check_shapes(p, false);
  auto weighted_mean = [](const std::vector<double>& lp, const std::vector<double>& w,
                          double& wsum) {
    CompensatedAccumulator num, den;
    for (std::size_t t = 0; t < lp.size(); ++t) {
      num.add(weight_at(w, t) * lp[t]);
      den.add(weight_at(w, t));
    }
    wsum = den.value();
    if (!(wsum > 0)) throw Error("simpo_loss: weights sum to zero");
    return num.value() / wsum;
  };
  double sw = 0.0, sl = 0.0;
  const double s_w = weighted_mean(p.policy_chosen, p.weights_chosen, sw);
  const double s_l = weighted_mean(p.policy_rejected, p.weights_rejected, sl);
  LossValue out;
  out.chosen_reward = beta * s_w;
  out.rejected_reward = beta * s_l;
  out.margin = beta * (s_w - s_l);
  const double z = out.margin - gamma;
  out.loss = -log_sigmoid(z);
  const double dz = -sigmoid(-z);
  out.grad.chosen.resize(p.chosen_len());
  out.grad.rejected.resize(p.rejected_len());
  for (std::size_t t = 0; t < p.chosen_len(); ++t) {
    out.grad.chosen[t] = dz * beta * weight_at(p.weights_chosen, t) / sw;
  }
  for (std::size_t t = 0; t < p.rejected_len(); ++t) {
    out.grad.rejected[t] = -dz * beta * weight_at(p.weights_rejected, t) / sl;
  }
  return out;
}

LossValue ipo_loss(const PairLogps& p, double beta) {
  check_shapes(p, true);
  const double a_w = weighted_ratio_sum(p.policy_chosen, p.ref_chosen, p.weights_chosen);
  const double a_l =
      weighted_ratio_sum(p.policy_rejected, p.ref_rejected, p.weights_rejected);
  LossValue out;
  out.chosen_reward = a_w;
  out.rejected_reward = a_l;
  const double h = a_w - a_l;
  out.margin = h;
  const double resid = h - 1.0 / (2.0 * beta);
  out.loss = resid * resid;
  out.grad.chosen.resize(p.chosen_len());
  out.grad.rejected.resize(p.rejected_len());
  for (std::size_t t = 0; t < p.chosen_len(); ++t) {
    out.grad.chosen[t] = 2.0 * resid * weight_at(p.weights_chosen, t);
  }
  for (std::size_t t = 0; t < p.rejected_len(); ++t) {
    out.grad.rejected[t] = -2.0 * resid * weight_at(p.weights_rejected, t);
  }
  return out;
}

LossValue sft_loss(const PairLogps& p) {
  if (p.policy_chosen.empty()) throw Error("sft_loss: empty chosen response");
  const double n = static_cast<double>(p.chosen_len());
  LossValue out;
  out.loss = -compensated_sum(p.policy_chosen) / n;
  out.grad.chosen.assign(p.chosen_len(), -1.0 / n);
  out.grad.rejected.assign(p.rejected_len(), 0.0);
  return out;
}

TotalLoss total_loss(const PairLogps& p, const LossConfig& cfg) {
  cfg.validate();
  const PairLogps* src = &p;
  PairLogps uniform;
  if (!cfg.use_weights) {
    uniform = p;
    uniform.weights_chosen.clear();
    uniform.weights_rejected.clear();
    src = &uniform;
  }
  LossValue m;
  switch (cfg.method) {
    case Method::kDpo: m = dpo_loss(*src, cfg.beta); break;
    case Method::kTdpo: m = tdpo_loss(*src, cfg.beta); break;
    case Method::kSimpo: m = simpo_loss(*src, cfg.beta, cfg.gamma_simpo); break;
    case Method::kIpo: m = ipo_loss(*src, cfg.beta); break;
  }
  TotalLoss out;
  out.method_component = m.loss;
  out.margin = m.margin;
  out.chosen_reward = m.chosen_reward;
  out.rejected_reward = m.rejected_reward;
  out.grad = std::move(m.grad);
  if (cfg.sft_mix > 0) {
    const LossValue s = sft_loss(*src);
    out.sft_component = s.loss;
    for (std::size_t t = 0; t < out.grad.chosen.size(); ++t) {
      out.grad.chosen[t] += cfg.sft_mix * s.grad.chosen[t];
    }
  } else if (!p.policy_chosen.empty()) {
    out.sft_component = sft_loss(*src).loss;
  }
  out.loss = out.method_component + cfg.sft_mix * out.sft_component;
  return out;
}

double token_bt_probability(const PairLogps& p, double beta) {
  check_shapes(p, true);
  const double a_w = weighted_ratio_sum(p.policy_chosen, p.ref_chosen, {});
  const double a_l = weighted_ratio_sum(p.policy_rejected, p.ref_rejected, {});
  return sigmoid(beta * (a_w - a_l));
}

}  // namespace musc::loss
