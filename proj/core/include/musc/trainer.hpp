#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "musc/datagen.hpp"
#include "musc/losses.hpp"
#include "musc/lm.hpp"
#include "musc/optim.hpp"

namespace musc::train {

struct TrainConfig {
  double lr = 1e-6;
  Schedule schedule = Schedule::kCosine;
  int epochs = 2;
  int batch_size = 64;
  double grad_clip = 0.0;  // <= 0: off
  std::uint64_t seed = 0;
  loss::LossConfig loss;

  // lr 1e-6 cosine, 2 epochs, batch 64.
  static TrainConfig paper();
  // Same schedule with batch 16 and lr 5e-5 for the small model.
  static TrainConfig desk();
  static TrainConfig preset(const std::string& name);

  void validate() const;
};

struct MetricsRow {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double chosen_reward = 0.0;
  double rejected_reward = 0.0;
  double reward_margin = 0.0;
  double sft_component = 0.0;

  bool operator==(const MetricsRow&) const = default;
};

struct TrainResult {
  std::vector<MetricsRow> metrics;
  std::string reference_id_before;
  std::string reference_id_after;
};

// Response tokens and reference log-probs of one pair, fixed for the run.
struct PreparedPair {
  lm::SequenceExample chosen;
  lm::SequenceExample rejected;
  std::vector<double> ref_chosen;
  std::vector<double> ref_rejected;
  std::vector<double> weights_chosen;
  std::vector<double> weights_rejected;
};

// Both responses are scored under the chosen instruction.
std::vector<PreparedPair> prepare_pairs(const std::vector<data::PreferencePair>& pairs,
                                        const Vocabulary& vocab,
                                        const lm::PolicyModel& reference,
                                        const loss::LossConfig& loss_cfg);

// Preference optimization of `model` against a frozen clone of its initial
// state. Throws lm::DivergenceError (model restored to the last finite step)
// when the batch loss turns NaN/Inf.
TrainResult train(lm::PolicyModel& model, const std::vector<data::PreferencePair>& pairs,
                  const Vocabulary& vocab, const TrainConfig& cfg,
                  const std::function<void(const MetricsRow&)>& on_step = {});

inline constexpr const char* kMetricsHeader =
    "step,epoch,loss,chosen_reward,rejected_reward,reward_margin,sft_component";

void export_metrics(const std::vector<MetricsRow>& rows, const std::string& path);
std::vector<MetricsRow> read_metrics(const std::string& path);

// Mean reward margin over the first and the last `fraction` of rows.
struct MarginTrend {
  double head = 0.0;
  double tail = 0.0;
};
MarginTrend margin_trend(const std::vector<MetricsRow>& rows, double fraction = 0.1);

// Run directory layout:
//   config.json      snapshot of the producing configuration
//   dataset.sha256   hash of the training data file
//   metrics.csv
//   checkpoint/      final (or last finite) model
struct RunDir {
  std::string root;

  std::string config_path() const { return root + "/config.json"; }
  std::string dataset_hash_path() const { return root + "/dataset.sha256"; }
  std::string metrics_path() const { return root + "/metrics.csv"; }
  std::string checkpoint_path() const { return root + "/checkpoint"; }

  void create() const;
  void write_snapshot(const std::string& config_json, const std::string& dataset_hash) const;
};

}  // namespace musc::train
