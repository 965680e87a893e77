#include "musc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace musc::train {

TrainConfig TrainConfig::paper() { return TrainConfig{}; }

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 16;
  c.lr = 5e-5;
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw ConfigError("unknown preset '" + name + "' (expected paper|desk)");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  loss.validate();
}

std::vector<PreparedPair> prepare_pairs(const std::vector<data::PreferencePair>& pairs,
                                        const Vocabulary& vocab,
                                        const lm::PolicyModel& reference,
                                        const loss::LossConfig& loss_cfg) {
  std::vector<PreparedPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    PreparedPair pp;
    const auto x = lang::serialize_instruction(p.chosen_instruction, vocab);
    pp.chosen = {x, lang::scored_tokens(p.chosen_response)};
    pp.rejected = {x, lang::scored_tokens(p.rejected_response)};
    pp.ref_chosen = lm::sequence_logprob(reference, x, pp.chosen.target).per_token;
    pp.ref_rejected = lm::sequence_logprob(reference, x, pp.rejected.target).per_token;
    if (loss_cfg.use_weights) {
      if (!p.weights) {
        throw ConfigError("pair " + std::to_string(i) +
                          " has no token weights; run attach-weights or set "
                          "loss.use_weights=false");
      }
      if (p.weights->chosen.size() != pp.chosen.target.size() ||
          p.weights->rejected.size() != pp.rejected.target.size()) {
        throw Error("pair " + std::to_string(i) + ": weight/length mismatch");
      }
      pp.weights_chosen = p.weights->chosen;
      pp.weights_rejected = p.weights->rejected;
    }
    out.push_back(std::move(pp));
  }
  return out;
}

TrainResult train(lm::PolicyModel& model, const std::vector<data::PreferencePair>& pairs,
                  const Vocabulary& vocab, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_step) {
  cfg.validate();
  if (pairs.empty()) throw Error("train: empty dataset");
  if (model.config().vocab_size != vocab.size()) {
    throw Error("train: model vocabulary (" + std::to_string(model.config().vocab_size) +
                ") does not match the dataset vocabulary (" + std::to_string(vocab.size()) +
                ")");
  }
  const lm::ReferenceModel reference = lm::clone_frozen(model);
  TrainResult result;
  result.reference_id_before = reference.model().checkpoint_id();
  const auto prepared = prepare_pairs(pairs, vocab, reference.model(), cfg.loss);

  const std::size_t n = prepared.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const auto per_epoch = static_cast<std::int64_t>((n + bs - 1) / bs);
  const std::int64_t total_steps = per_epoch * cfg.epochs;

  Rng rng(cfg.seed);
  Adam adam(model.num_parameters());
  std::vector<double> grad(model.num_parameters());
  std::vector<double> last_good(model.parameters().begin(), model.parameters().end());
  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      CompensatedAccumulator loss, chosen, rejected, sft;
      for (std::size_t i = start; i < end; ++i) {
        const auto& pp = prepared[order[i]];
        const auto sc = lm::score_with_tape(model, pp.chosen);
        const auto sr = lm::score_with_tape(model, pp.rejected);
        loss::PairLogps lp{sc.logp, pp.ref_chosen, sr.logp, pp.ref_rejected,
                           pp.weights_chosen, pp.weights_rejected};
        auto tl = loss::total_loss(lp, cfg.loss);
        loss.add(tl.loss);
        chosen.add(tl.chosen_reward);
        rejected.add(tl.rejected_reward);
        sft.add(tl.sft_component);
        for (double& g : tl.grad.chosen) g *= scale;
        for (double& g : tl.grad.rejected) g *= scale;
        lm::backprop_target(model, sc, tl.grad.chosen, grad);
        lm::backprop_target(model, sr, tl.grad.rejected, grad);
      }
      MetricsRow row;
      row.step = step;
      row.epoch = epoch;
      row.loss = loss.value() * scale;
      row.chosen_reward = chosen.value() * scale;
      row.rejected_reward = rejected.value() * scale;
      row.reward_margin = row.chosen_reward - row.rejected_reward;
      row.sft_component = sft.value() * scale;
      if (!std::isfinite(row.loss)) {
        std::copy(last_good.begin(), last_good.end(), model.parameters().begin());
        throw lm::DivergenceError("train: non-finite loss at step " + std::to_string(step) +
                                      "; parameters restored to the last finite step",
                                  step);
      }
      std::copy(model.parameters().begin(), model.parameters().end(), last_good.begin());
      if (cfg.grad_clip > 0) clip_grad_norm(grad, cfg.grad_clip);
      adam.step(model.parameters(), grad, scheduled_lr(cfg.schedule, cfg.lr, step, total_steps));
      result.metrics.push_back(row);
      if (on_step) on_step(row);
      ++step;
    }
  }
  model.meta.step += step;
  std::ostringstream rs;
  rs << rng;
  model.meta.rng_state = rs.str();
  result.reference_id_after = reference.model().checkpoint_id();
  return result;
}

void export_metrics(const std::vector<MetricsRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write metrics file '" + path + "'");
  out << kMetricsHeader << "\n";
  out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.epoch << ',' << r.loss << ',' << r.chosen_reward << ','
        << r.rejected_reward << ',' << r.reward_margin << ',' << r.sft_component << "\n";
  }
  if (!out) throw Error("error while writing metrics file '" + path + "'");
}

std::vector<MetricsRow> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read metrics file '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw SchemaError("unexpected metrics header", 1, "");
  }
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw SchemaError("expected 7 columns", lineno, "");
    try {
      MetricsRow r;
      r.step = std::stoll(cells[0]);
      r.epoch = std::stoi(cells[1]);
      r.loss = std::stod(cells[2]);
      r.chosen_reward = std::stod(cells[3]);
      r.rejected_reward = std::stod(cells[4]);
      r.reward_margin = std::stod(cells[5]);
      r.sft_component = std::stod(cells[6]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw SchemaError("non-numeric cell", lineno, "");
    }
  }
  return rows;
}

MarginTrend margin_trend(const std::vector<MetricsRow>& rows, double fraction) {
  if (rows.empty()) return {};
  const std::size_t k =
      std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(rows.size())));
  CompensatedAccumulator head, tail;
  for (std::size_t i = 0; i < k; ++i) {
    head.add(rows[i].reward_margin);
    tail.add(rows[rows.size() - k + i].reward_margin);
  }
  return {head.value() / static_cast<double>(k), tail.value() / static_cast<double>(k)};
}

void RunDir::create() const {
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw Error("cannot create run directory '" + root + "': " + ec.message());
}

void RunDir::write_snapshot(const std::string& config_json,
                            const std::string& dataset_hash) const {
  create();
  {
    std::ofstream out(config_path());
    if (!out) throw Error("cannot write '" + config_path() + "'");
    out << config_json << "\n";
  }
  std::ofstream out(dataset_hash_path());
  if (!out) throw Error("cannot write '" + dataset_hash_path() + "'");
  out << dataset_hash << "\n";
}

}  // namespace musc::train
