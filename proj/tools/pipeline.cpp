#include "pipeline.hpp"

#include <fstream>
#include <sstream>

namespace musc::cli {

Seeds seeds_for(std::uint64_t root) {
  return {derive_seed(root, 1), derive_seed(root, 2), derive_seed(root, 3),
          derive_seed(root, 4), derive_seed(root, 5)};
}

lm::PolicyModel init_model(const RunConfig& cfg, std::uint64_t root_seed) {
  lm::ModelConfig m = cfg.model_config();
  m.seed = seeds_for(root_seed).model;
  return lm::PolicyModel(m);
}

std::vector<lang::Instruction> heldout_instructions(const RunConfig& cfg,
                                                    const Vocabulary& vocab) {
  return data::sample_instructions(vocab, cfg.eval.n_instructions, cfg.eval.instruction_seed,
                                   cfg.eval.min_constraints, cfg.eval.max_constraints,
                                   cfg.dropout.catalog);
}

std::set<std::string> instruction_ids(const std::vector<lang::Instruction>& instructions) {
  std::set<std::string> ids;
  for (const auto& i : instructions) ids.insert(i.id);
  return ids;
}

lm::SftResult run_sft(lm::PolicyModel& model, const RunConfig& cfg, const Vocabulary& vocab,
                      std::uint64_t root_seed, const std::set<std::string>& exclude,
                      const Progress& progress) {
  const Seeds s = seeds_for(root_seed);
  const auto instructions =
      data::sample_instructions(vocab, cfg.sft.n_examples, s.sft_data, cfg.sft.min_constraints,
                                cfg.sft.max_constraints, cfg.dropout.catalog, exclude);
  const auto corpus =
      data::oracle_corpus(instructions, vocab, s.sft_data, cfg.dropout.max_response_len,
                          cfg.sft.witness);
  lm::SftConfig sc = cfg.sft.train;
  sc.seed = s.sft_order;
  std::int64_t per_epoch = (static_cast<std::int64_t>(corpus.size()) + sc.batch_size - 1) /
                           sc.batch_size;
  return lm::sft_train(model, corpus, sc, [&](std::int64_t step, double loss) {
    if (progress && (step + 1) % per_epoch == 0) {
      std::ostringstream out;
      out << "sft epoch " << (step + 1) / per_epoch << " loss " << loss;
      progress(out.str());
    }
  });
}

data::BuildResult generate_pairs(const lm::PolicyModel& model, const Vocabulary& vocab,
                                 const RunConfig& cfg, int n_pairs, std::uint64_t root_seed) {
  data::DropoutConfig d = cfg.dropout;
  d.seed = seeds_for(root_seed).pairs;
  d.threads = cfg.threads;
  return data::build_dataset_sampled(model, vocab, n_pairs, d, cfg.max_attempt_factor);
}

std::vector<data::PreferencePair> attach_all(const std::vector<data::PreferencePair>& pairs,
                                             const lm::PolicyModel& reference,
                                             const Vocabulary& vocab,
                                             const conf::CalibrationConfig& calib, int threads) {
  std::vector<data::PreferencePair> out(pairs.size());
  data::parallel_for(pairs.size(), threads, [&](std::size_t i) {
    out[i] = conf::attach_weights(pairs[i], reference, vocab, calib);
  });
  return out;
}

int overlap_count(const std::vector<data::PreferencePair>& pairs,
                  const std::set<std::string>& ids) {
  int n = 0;
  for (const auto& p : pairs) {
    n += ids.count(p.chosen_instruction.id) ? 1 : 0;
    n += ids.count(p.rejected_instruction.id) ? 1 : 0;
  }
  return n;
}

std::string rejection_histogram(const data::RejectionSummary& s) {
  std::ostringstream out;
  out << "attempted " << s.attempted << ", accepted " << s.accepted << "\n";
  for (auto r : {data::RejectReason::kTooFew, data::RejectReason::kTooMany,
                 data::RejectReason::kUnsatSource, data::RejectReason::kUnsatNoised,
                 data::RejectReason::kIdenticalResponses}) {
    const auto it = s.counts.find(r);
    out << "  " << data::reason_name(r) << ": " << (it == s.counts.end() ? 0 : it->second)
        << "\n";
  }
  return out.str();
}

std::vector<SweepRow> sweep_alpha(const RunConfig& cfg, const std::vector<double>& alphas,
                                  const std::vector<std::uint64_t>& seeds, int n_pairs,
                                  const Progress& progress, const lm::PolicyModel* start) {
  const Vocabulary vocab = cfg.make_vocab();
  const auto heldout = heldout_instructions(cfg, vocab);
  const auto held_ids = instruction_ids(heldout);
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    std::optional<lm::PolicyModel> sft_model;
    std::string sft_error;
    try {
      if (start) {
        sft_model.emplace(*start);
      } else {
        sft_model.emplace(init_model(cfg, seed));
        run_sft(*sft_model, cfg, vocab, seed, held_ids, progress);
      }
    } catch (const Error& e) {
      sft_error = std::string("sft failed: ") + e.what();
      sft_model.reset();
    }
    for (double alpha : alphas) {
      SweepRow row;
      row.alpha = alpha;
      row.seed = seed;
      if (!sft_model) {
        row.status = sft_error;
        rows.push_back(row);
        continue;
      }
      try {
        RunConfig cell = cfg;
        cell.dropout.alpha = alpha;
        auto built = generate_pairs(*sft_model, vocab, cell, n_pairs, seed);
        row.n_pairs = static_cast<int>(built.pairs.size());
        if (built.pairs.empty()) throw Error("no pairs accepted");
        auto pairs = attach_all(built.pairs, *sft_model, vocab, cell.calibration, cell.threads);
        lm::PolicyModel policy = *sft_model;
        train::TrainConfig tc = cell.train;
        tc.seed = seeds_for(seed).train;
        train::train(policy, pairs, vocab, tc);
        const auto report = eval::evaluate(policy, vocab, heldout, cell.eval.decode);
        row.csr = report.csr;
        row.isr = report.isr;
        row.psr = report.psr;
      } catch (const Error& e) {
        row.status = e.what();
      }
      if (progress) {
        std::ostringstream out;
        out << "alpha " << alpha << " seed " << seed << ": " << row.status << " isr "
            << row.isr;
        progress(out.str());
      }
      rows.push_back(row);
    }
  }
  return rows;
}

void write_sweep(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write sweep table '" + path + "'");
  out << "alpha,seed,n_pairs,csr,isr,psr,status\n";
  out.precision(6);
  for (const auto& r : rows) {
    std::string status = r.status;
    for (char& ch : status) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out << r.alpha << ',' << r.seed << ',' << r.n_pairs << ',' << r.csr << ',' << r.isr << ','
        << r.psr << ',' << status << "\n";
  }
  if (!out) throw Error("error while writing sweep table '" + path + "'");
}

}  // namespace musc::cli
