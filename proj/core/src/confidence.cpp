#include "musc/confidence.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace musc::conf {

Metric parse_metric(const std::string& name) {
  if (name == "entropy") return Metric::kEntropy;
  if (name == "perplexity") return Metric::kPerplexity;
  if (name == "pmi") return Metric::kPmi;
  if (name == "kldiv") return Metric::kKldiv;
  throw ConfigError("unknown metric '" + name + "' (expected entropy|perplexity|pmi|kldiv)");
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::kEntropy: return "entropy";
    case Metric::kPerplexity: return "perplexity";
    case Metric::kPmi: return "pmi";
    case Metric::kKldiv: return "kldiv";
  }
  return "unknown";
}

void CalibrationConfig::validate() const {
  if (!(gamma > 1)) throw ConfigError("calibration.gamma must be > 1");
  if (!(epsilon > 0)) throw ConfigError("calibration.epsilon must be > 0");
  if (!calibrated && metric == Metric::kKldiv) {
    throw ConfigError("the kldiv metric compares two instructions and has no "
                      "uncalibrated form");
  }
}

double entropy(std::span<const double> logprobs) {
  double h = 0.0;
  for (double lp : logprobs) {
    const double p = std::exp(lp);
    if (p > 0) h -= p * lp;
  }
  return std::max(0.0, h);
}

double kl_divergence(std::span<const double> logp, std::span<const double> logq) {
  if (logp.size() != logq.size()) throw Error("kl_divergence: size mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < logp.size(); ++i) {
    const double p = std::exp(logp[i]);
    if (p > 0) d += p * (logp[i] - logq[i]);
  }
  return std::max(0.0, d);
}

namespace {

std::span<const double> row_span(const lm::Matrix& m, Eigen::Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

}  // namespace

std::vector<double> token_entropy(const lm::PolicyModel& model, std::span<const TokenId> x,
                                  std::span<const TokenId> y) {
  const lm::Matrix d = lm::response_distributions(model, x, y);
  std::vector<double> out(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) out[t] = entropy(row_span(d, t));
  return out;
}

std::vector<double> perplexity_score(const lm::PolicyModel& model,
                                     std::span<const TokenId> x,
                                     std::span<const TokenId> y) {
  const auto lp = lm::sequence_logprob(model, x, y);
  std::vector<double> out(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) out[t] = std::exp(-lp.per_token[t]);
  return out;
}

std::vector<double> pmi_score(const lm::PolicyModel& model, std::span<const TokenId> x,
                              std::span<const TokenId> y) {
  const auto cond = lm::sequence_logprob(model, x, y);
  const auto empty = lang::empty_conditioning_prefix();
  const auto uncond = lm::sequence_logprob(model, empty, y);
  std::vector<double> out(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    out[t] = std::exp(-(cond.per_token[t] - uncond.per_token[t]));
  }
  return out;
}

std::vector<double> kldiv_score(const lm::PolicyModel& model, std::span<const TokenId> x_w,
                                std::span<const TokenId> x_l, std::span<const TokenId> y) {
  const lm::Matrix dw = lm::response_distributions(model, x_w, y);
  const lm::Matrix dl = lm::response_distributions(model, x_l, y);
  std::vector<double> out(y.size());
  for (std::size_t t = 0; t < y.size(); ++t) {
    out[t] = kl_divergence(row_span(dw, t), row_span(dl, t));
  }
  return out;
}

std::vector<double> uncertainty(Metric metric, const lm::PolicyModel& model,
                                std::span<const TokenId> x, std::span<const TokenId> y) {
  switch (metric) {
    case Metric::kEntropy: return token_entropy(model, x, y);
    case Metric::kPerplexity: return perplexity_score(model, x, y);
    case Metric::kPmi: return pmi_score(model, x, y);
    case Metric::kKldiv: break;
  }
  throw Error("kldiv is a divergence between two instructions, not an uncertainty score");
}

std::vector<double> raw_ratio(std::span<const double> u_w, std::span<const double> u_l,
                              Role role, const CalibrationConfig& cfg) {
  if (u_w.size() != u_l.size()) throw Error("calibrate: score vectors differ in length");
  std::vector<double> out(u_w.size());
  for (std::size_t t = 0; t < u_w.size(); ++t) {
    const double w = std::max(cfg.epsilon, u_w[t]);
    const double l = std::max(cfg.epsilon, u_l[t]);
    out[t] = role == Role::kChosen ? w / l : l / w;
  }
  return out;
}

std::vector<double> calibrate(std::span<const double> u_w, std::span<const double> u_l,
                              Role role, const CalibrationConfig& cfg) {
  auto out = raw_ratio(u_w, u_l, role, cfg);
  for (double& r : out) r = std::min(cfg.gamma, r);
  return out;
}

std::vector<double> self_normalize(std::span<const double> u_own,
                                   const CalibrationConfig& cfg) {
  if (u_own.empty()) return {};
  const double mean = compensated_sum(u_own) / static_cast<double>(u_own.size());
  const double denom = std::max(cfg.epsilon, mean);
  std::vector<double> out(u_own.size());
  for (std::size_t t = 0; t < u_own.size(); ++t) {
    out[t] = std::min(cfg.gamma, std::max(cfg.epsilon, u_own[t]) / denom);
  }
  return out;
}

std::vector<double> kldiv_weights(std::span<const double> d, Role role,
                                  const CalibrationConfig& cfg) {
  std::vector<double> out(d.size());
  for (std::size_t t = 0; t < d.size(); ++t) {
    const double dt = std::max(0.0, d[t]);
    out[t] = role == Role::kRejected ? std::min(cfg.gamma, 1.0 + dt)
                                     : std::min(cfg.gamma, 1.0 / (1.0 + dt));
  }
  return out;
}

data::PreferencePair attach_weights(const data::PreferencePair& pair,
                                    const lm::PolicyModel& reference,
                                    const Vocabulary& vocab, const CalibrationConfig& cfg) {
  cfg.validate();
  if (reference.config().vocab_size != vocab.size()) {
    throw Error("attach_weights: model vocabulary (" +
                std::to_string(reference.config().vocab_size) +
                ") does not match the dataset vocabulary (" + std::to_string(vocab.size()) +
                ")");
  }
  const auto x_w = lang::serialize_instruction(pair.chosen_instruction, vocab);
  const auto x_l = lang::serialize_instruction(pair.rejected_instruction, vocab);
  const auto y_w = lang::scored_tokens(pair.chosen_response);
  const auto y_l = lang::scored_tokens(pair.rejected_response);

  data::TokenWeights w;
  if (cfg.metric == Metric::kKldiv) {
    w.chosen = kldiv_weights(kldiv_score(reference, x_w, x_l, y_w), Role::kChosen, cfg);
    w.rejected = kldiv_weights(kldiv_score(reference, x_w, x_l, y_l), Role::kRejected, cfg);
  } else if (cfg.calibrated) {
    const auto cw_own = uncertainty(cfg.metric, reference, x_w, y_w);
    const auto cw_cross = uncertainty(cfg.metric, reference, x_l, y_w);
    const auto rl_own = uncertainty(cfg.metric, reference, x_l, y_l);
    const auto rl_cross = uncertainty(cfg.metric, reference, x_w, y_l);
    w.chosen = calibrate(cw_own, cw_cross, Role::kChosen, cfg);
    w.rejected = calibrate(rl_cross, rl_own, Role::kRejected, cfg);
  } else {
    w.chosen = self_normalize(uncertainty(cfg.metric, reference, x_w, y_w), cfg);
    w.rejected = self_normalize(uncertainty(cfg.metric, reference, x_l, y_l), cfg);
  }
  data::PreferencePair out = pair;
  out.weights = std::move(w);
  out.provenance.metric = metric_name(cfg.metric) + (cfg.calibrated ? "" : "-nocalib");
  out.provenance.checkpoint = reference.checkpoint_id();
  return out;
}

std::string render_weights(const data::PreferencePair& pair, const Vocabulary& vocab) {
  std::ostringstream out;
  out << "chosen:   " << vocab.render(lang::serialize_instruction(pair.chosen_instruction, vocab))
      << "\nrejected: "
      << vocab.render(lang::serialize_instruction(pair.rejected_instruction, vocab)) << "\n";
  if (!pair.weights) {
    out << "no token weights stored for this pair; run attach-weights first\n";
    return out.str();
  }
  const auto y_w = lang::scored_tokens(pair.chosen_response);
  const auto y_l = lang::scored_tokens(pair.rejected_response);
  out << std::left << std::setw(5) << "pos" << std::setw(8) << "chosen" << std::setw(10)
      << "weight" << std::setw(10) << "rejected" << "weight\n";
  const std::size_t rows = std::max(y_w.size(), y_l.size());
  out << std::fixed << std::setprecision(4);
  for (std::size_t t = 0; t < rows; ++t) {
    out << std::left << std::setw(5) << t;
    if (t < y_w.size()) {
      out << std::setw(8) << vocab.surface(y_w[t]) << std::setw(10) << pair.weights->chosen[t];
    } else {
      out << std::setw(18) << "";
    }
    if (t < y_l.size()) {
      out << std::setw(10) << vocab.surface(y_l[t]) << pair.weights->rejected[t];
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace musc::conf
