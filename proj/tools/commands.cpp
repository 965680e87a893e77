#include "commands.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "pipeline.hpp"

namespace musc::cli {

namespace fs = std::filesystem;

namespace {

void say(const std::string& line) { std::cerr << line << std::endl; }

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.validate();
    return c;
  }
  return load_run_config(path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
  if (!text.empty() && text.back() != '\n') out << "\n";
}

void write_snapshot(const std::string& out_path, const RunConfig& cfg) {
  write_text(out_path + ".config.json", to_json(cfg));
}

// Accepts a checkpoint directory or a run directory holding checkpoint/.
lm::PolicyModel load_checkpoint(const std::string& path) {
  if (fs::exists(fs::path(path) / "manifest.json")) return lm::PolicyModel::load(path);
  const auto nested = fs::path(path) / "checkpoint";
  if (fs::exists(nested / "manifest.json")) return lm::PolicyModel::load(nested.string());
  throw ConfigError("no checkpoint found at '" + path + "'");
}

void stamp(std::vector<data::PreferencePair>& pairs, const std::string& hash) {
  for (auto& p : pairs) p.provenance.config_hash = hash;
}

struct Options {
  std::string config;
  std::string out;
  std::string mode = "selfinst";
  std::string scheme;
  int n = 500;
  std::string checkpoint;
  std::string instructions;
  std::string data;
  std::string metric;
  double gamma = 0.0;
  bool no_calib = false;
  std::string method;
  bool no_weights = false;
  std::string preset;
  bool oracle = false;
  std::string report_a;
  std::string report_b;
  std::vector<double> alphas{0.1, 0.2, 0.3, 0.4, 0.5};
  int seeds = 2;
  std::size_t index = 0;
};

int cmd_gen_instructions(const Options& o) {
  const RunConfig cfg = config_or_default(o.config);
  const Vocabulary vocab = cfg.make_vocab();
  const auto held = instruction_ids(heldout_instructions(cfg, vocab));
  const auto ins = data::sample_instructions(vocab, o.n, derive_seed(cfg.seed, 17),
                                             cfg.dropout.min_constraints,
                                             cfg.dropout.max_constraints, cfg.dropout.catalog, held);
  data::write_instruction_file(ins, vocab, o.out);
  vocab.write(data::vocab_sidecar_path(o.out));
  write_snapshot(o.out, cfg);
  std::cout << "wrote " << ins.size() << " instructions to " << o.out << "\n";
  return 0;
}

int cmd_gen_data(const Options& o) {
  RunConfig cfg = config_or_default(o.config);
  if (!o.scheme.empty()) cfg.dropout.scheme = data::parse_scheme(o.scheme);
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  const std::string hash = config_hash(cfg);
  if (o.mode == "preinst-endpoint") {
    if (o.instructions.empty()) throw ConfigError("--instructions is required for preinst-endpoint");
    llm::ChatClient client(cfg.endpoint, say);
    llm::NlBuildConfig nb;
    nb.alpha = cfg.dropout.alpha;
    nb.scheme = cfg.dropout.scheme;
    nb.min_constraints = cfg.dropout.min_constraints;
    nb.max_constraints = cfg.dropout.max_constraints;
    nb.seed = seeds_for(cfg.seed).pairs;
    nb.config_hash = hash;
    const auto result = llm::build_nl_pairs(client, llm::PromptTemplateSet::defaults(),
                                            llm::read_nl_instructions(o.instructions), nb);
    llm::write_nl_dataset(result.pairs, o.out);
    write_snapshot(o.out, cfg);
    std::cout << "pairs: " << result.pairs.size() << ", failures: " << result.failures.size()
              << ", requests sent: " << client.stats().requests.load()
              << ", cache hits: " << client.stats().cache_hits.load() << "\n";
    for (const auto& f : result.failures) {
      std::cout << "  record " << f.index << ": " << f.message << "\n";
    }
    return 0;
  }
  if (o.mode != "selfinst" && o.mode != "preinst-file") {
    throw ConfigError("--mode must be selfinst, preinst-file or preinst-endpoint");
  }
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required to generate responses");
  const lm::PolicyModel model = load_checkpoint(o.checkpoint);
  const Vocabulary vocab = cfg.make_vocab();
  if (model.config().vocab_size != vocab.size()) {
    throw ConfigError("checkpoint vocabulary does not match the configured vocabulary");
  }
  data::BuildResult result;
  if (o.mode == "selfinst") {
    result = generate_pairs(model, vocab, cfg, o.n, cfg.seed);
  } else {
    if (o.instructions.empty()) throw ConfigError("--instructions is required for preinst-file");
    data::DropoutConfig d = cfg.dropout;
    d.seed = seeds_for(cfg.seed).pairs;
    d.threads = cfg.threads;
    result = data::build_dataset_from_instructions(
        model, vocab, data::read_instruction_file(o.instructions, vocab), d);
    for (auto& p : result.pairs) p.provenance.source = "preinst-file";
  }
  stamp(result.pairs, hash);
  data::write_dataset(result.pairs, vocab, o.out);
  write_snapshot(o.out, cfg);
  std::cout << "scheme " << data::scheme_name(cfg.dropout.scheme) << ", "
            << rejection_histogram(result.summary);
  return 0;
}

int cmd_attach(const Options& o) {
  RunConfig cfg = config_or_default(o.config);
  if (!o.metric.empty()) cfg.calibration.metric = conf::parse_metric(o.metric);
  if (o.gamma != 0.0) cfg.calibration.gamma = o.gamma;
  if (o.no_calib) cfg.calibration.calibrated = false;
  cfg.calibration.validate();
  const auto ds = data::read_dataset(o.data);
  const lm::PolicyModel reference = load_checkpoint(o.checkpoint);
  auto pairs = attach_all(ds.pairs, reference, ds.vocab, cfg.calibration, cfg.threads);
  stamp(pairs, config_hash(cfg));
  data::write_dataset(pairs, ds.vocab, o.out);
  write_snapshot(o.out, cfg);
  double lo = cfg.calibration.gamma, hi = 0.0;
  for (const auto& p : pairs) {
    for (const auto* v : {&p.weights->chosen, &p.weights->rejected}) {
      for (double w : *v) {
        lo = std::min(lo, w);
        hi = std::max(hi, w);
      }
    }
  }
  std::cout << "weighted " << pairs.size() << " pairs with "
            << conf::metric_name(cfg.calibration.metric)
            << (cfg.calibration.calibrated ? "" : " (uncalibrated)") << ", gamma "
            << cfg.calibration.gamma << "; weights in [" << lo << ", " << hi << "]\n";
  return 0;
}

int cmd_sft(const Options& o) {
  const RunConfig cfg = config_or_default(o.config);
  const Vocabulary vocab = cfg.make_vocab();
  const auto held = heldout_instructions(cfg, vocab);
  lm::PolicyModel model =
      o.checkpoint.empty() ? init_model(cfg, cfg.seed) : load_checkpoint(o.checkpoint);
  const auto result = run_sft(model, cfg, vocab, cfg.seed, instruction_ids(held), say);
  const train::RunDir dir{o.out};
  dir.write_snapshot(to_json(cfg), "oracle:" + config_hash(cfg));
  model.meta.note = "sft " + config_hash(cfg);
  model.meta.dataset_hash = "oracle:" + config_hash(cfg);
  model.save(dir.checkpoint_path());
  {
    std::ofstream out(dir.root + "/sft_loss.csv");
    out << "step,loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < result.step_loss.size(); ++i) {
      out << i << ',' << result.step_loss[i] << "\n";
    }
  }
  std::cout << "sft: " << result.step_loss.size() << " steps, final epoch loss "
            << result.epoch_loss.back() << "; checkpoint " << dir.checkpoint_path() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig cfg = config_or_default(o.config);
  if (!o.preset.empty()) apply_preset(cfg, o.preset);
  if (!o.method.empty()) {
    cfg.train.loss.method = loss::parse_method(o.method);
    cfg.train.loss.beta = loss::LossConfig::default_beta(cfg.train.loss.method);
  }
  if (o.no_weights) cfg.train.loss.use_weights = false;
  cfg.validate();
  const auto ds = data::read_dataset(o.data);
  lm::PolicyModel model = load_checkpoint(o.checkpoint);
  const train::RunDir dir{o.out};
  dir.write_snapshot(to_json(cfg), sha256_file_hex(o.data));
  train::TrainConfig tc = cfg.train;
  tc.seed = seeds_for(cfg.seed).train;
  std::vector<train::MetricsRow> rows;
  try {
    rows = train::train(model, ds.pairs, ds.vocab, tc, [&](const train::MetricsRow& r) {
             rows.push_back(r);
           }).metrics;
  } catch (const lm::DivergenceError&) {
    model.meta.note = "last finite step before divergence";
    model.save(dir.checkpoint_path());
    train::export_metrics(rows, dir.metrics_path());
    throw;
  }
  model.meta.dataset_hash = sha256_file_hex(o.data);
  model.meta.note = "train " + config_hash(cfg);
  model.save(dir.checkpoint_path());
  train::export_metrics(rows, dir.metrics_path());
  const auto trend = train::margin_trend(rows);
  std::cout << "train: " << rows.size() << " steps, loss " << rows.front().loss << " -> "
            << rows.back().loss << ", reward margin (first/last 10%) " << trend.head << " / "
            << trend.tail << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig cfg = config_or_default(o.config);
  const Vocabulary vocab = cfg.make_vocab();
  const auto instructions = o.instructions.empty()
                                ? heldout_instructions(cfg, vocab)
                                : data::read_instruction_file(o.instructions, vocab);
  eval::EvalReport report;
  if (o.oracle) {
    report = eval::score_responses(
        instructions, data::oracle_responses(instructions, vocab, cfg.eval.decode.seed,
                                             cfg.eval.decode.max_len));
    report.decode = cfg.eval.decode;
    report.model_id = "oracle";
  } else {
    if (o.checkpoint.empty()) throw ConfigError("--checkpoint or --oracle is required");
    eval::DecodeConfig d = cfg.eval.decode;
    d.threads = cfg.threads;
    report = eval::evaluate(load_checkpoint(o.checkpoint), vocab, instructions, d);
  }
  const std::string text = eval::summary_text(report);
  if (!o.out.empty()) {
    eval::write_report(report, o.out);
    write_text(o.out + ".txt", text);
    write_snapshot(o.out, cfg);
  }
  std::cout << text;
  return 0;
}

int cmd_compare(const Options& o) {
  const auto a = eval::read_report(o.report_a);
  const auto b = eval::read_report(o.report_b);
  const std::string text = eval::delta_text(eval::compare(a, b));
  if (!o.out.empty()) write_text(o.out, text);
  std::cout << text;
  return 0;
}

int cmd_sweep(const Options& o) {
  const RunConfig cfg = config_or_default(o.config);
  if (o.seeds < 1) throw ConfigError("--seeds must be >= 1");
  if (o.alphas.empty()) throw ConfigError("--alphas must not be empty");
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < o.seeds; ++i) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  std::optional<lm::PolicyModel> start;
  if (!o.checkpoint.empty()) start.emplace(load_checkpoint(o.checkpoint));
  const auto rows = sweep_alpha(cfg, o.alphas, seeds, o.n, say, start ? &*start : nullptr);
  write_sweep(rows, o.out);
  write_snapshot(o.out, cfg);
  std::cout << "sweep: " << rows.size() << " rows written to " << o.out << "\n";
  return 0;
}

int cmd_inspect(const Options& o) {
  const auto ds = data::read_dataset(o.data);
  if (o.index >= ds.pairs.size()) {
    throw ConfigError("--index " + std::to_string(o.index) + " is out of range (dataset has " +
                      std::to_string(ds.pairs.size()) + " pairs)");
  }
  std::cout << conf::render_weights(ds.pairs[o.index], ds.vocab);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Constraint-dropout preference data, calibrated token weights and "
               "token-weighted preference optimization on a small transformer"};
  app.require_subcommand(1);
  Options o;
  std::function<int(const Options&)> action;
  auto add = [&](const std::string& name, const std::string& help,
                 std::function<int(const Options&)> fn) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&action, fn] { action = fn; });
    return sub;
  };

  auto* gi = add("gen-instructions", "Write a token-id instruction file", cmd_gen_instructions);
  gi->add_option("--config", o.config, "Run configuration (JSON)");
  gi->add_option("--out", o.out, "Output instruction file")->required();
  gi->add_option("--n", o.n, "Number of instructions")->capture_default_str();

  auto* gd = add("gen-data", "Build a preference dataset", cmd_gen_data);
  gd->add_option("--config", o.config, "Run configuration (JSON)");
  gd->add_option("--out", o.out, "Output dataset file")->required();
  gd->add_option("--mode", o.mode, "selfinst | preinst-file | preinst-endpoint")
      ->check(CLI::IsMember({"selfinst", "preinst-file", "preinst-endpoint"}))
      ->capture_default_str();
  gd->add_option("--scheme", o.scheme, "dropout | negate | substitute (overrides config)")
      ->check(CLI::IsMember({"dropout", "negate", "substitute"}));
  gd->add_option("--n", o.n, "Target number of pairs (selfinst)")->capture_default_str();
  gd->add_option("--checkpoint", o.checkpoint, "Model that generates both responses");
  gd->add_option("--instructions", o.instructions, "Instruction file (preinst modes)");

  auto* aw = add("attach-weights", "Compute calibrated token weights", cmd_attach);
  aw->add_option("--config", o.config, "Run configuration (JSON)");
  aw->add_option("--data", o.data, "Input dataset")->required();
  aw->add_option("--checkpoint", o.checkpoint, "Reference model")->required();
  aw->add_option("--out", o.out, "Output dataset")->required();
  aw->add_option("--metric", o.metric, "entropy | perplexity | pmi | kldiv")
      ->check(CLI::IsMember({"entropy", "perplexity", "pmi", "kldiv"}));
  aw->add_option("--gamma", o.gamma, "Weight cap (default 2)");
  aw->add_flag("--no-calib", o.no_calib, "Use the uncalibrated self-normalized score");

  auto* sf = add("sft", "Supervised bootstrap on solver responses", cmd_sft);
  sf->add_option("--config", o.config, "Run configuration (JSON)");
  sf->add_option("--out", o.out, "Run directory")->required();
  sf->add_option("--checkpoint", o.checkpoint, "Start from this model instead of a fresh one");

  auto* tr = add("train", "Preference optimization", cmd_train);
  tr->add_option("--config", o.config, "Run configuration (JSON)");
  tr->add_option("--data", o.data, "Preference dataset")->required();
  tr->add_option("--checkpoint", o.checkpoint, "Initial policy (also the reference)")->required();
  tr->add_option("--out", o.out, "Run directory")->required();
  tr->add_option("--method", o.method, "dpo | tdpo | simpo | ipo (overrides config)")
      ->check(CLI::IsMember({"dpo", "tdpo", "simpo", "ipo"}));
  tr->add_flag("--no-weights", o.no_weights, "Uniform token weights");
  tr->add_option("--preset", o.preset, "paper | desk")->check(CLI::IsMember({"paper", "desk"}));

  auto* ev = add("eval", "Constraint satisfaction on held-out instructions", cmd_eval);
  ev->add_option("--config", o.config, "Run configuration (JSON)");
  ev->add_option("--checkpoint", o.checkpoint, "Model to evaluate");
  ev->add_option("--instructions", o.instructions, "Instruction file (default: held-out set)");
  ev->add_option("--out", o.out, "Report file (line-delimited JSON; .txt summary alongside)");
  ev->add_flag("--oracle", o.oracle, "Score solver responses instead of a model");

  auto* cp = add("compare", "Metric deltas between two reports (b - a)", cmd_compare);
  cp->add_option("report_a", o.report_a, "Baseline report")->required();
  cp->add_option("report_b", o.report_b, "Candidate report")->required();
  cp->add_option("--out", o.out, "Write the delta table here too");

  auto* sw = add("sweep-alpha", "Dropout-ratio sweep", cmd_sweep);
  sw->add_option("--config", o.config, "Run configuration (JSON)");
  sw->add_option("--alphas", o.alphas, "Comma-separated dropout ratios")
      ->delimiter(',')
      ->capture_default_str();
  sw->add_option("--seeds", o.seeds, "Number of seeds (config seed, +1, ...)")
      ->capture_default_str();
  sw->add_option("--n", o.n, "Pairs per cell")->capture_default_str();
  sw->add_option("--checkpoint", o.checkpoint, "Start every seed from this model (skips SFT)");
  sw->add_option("--out", o.out, "Results table (CSV)")->required();

  auto* wi = add("weights-inspect", "Show tokens with their weights", cmd_inspect);
  wi->add_option("--data", o.data, "Dataset with weights")->required();
  wi->add_option("--index", o.index, "Pair index")->capture_default_str();

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    return action(o);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
}

}  // namespace musc::cli
