#include "run_config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace musc::cli {

using json = nlohmann::ordered_json;

namespace {

// Reads keys of one JSON object and rejects any key nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("'" + name(key) + "' has the wrong type");
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = j_.find(key);
    return Section(it == j_.end() ? empty : *it, name(key));
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown configuration key '" + name(k) + "'");
    }
  }

 private:
  std::string name(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Schedule read_schedule(Section& s, Schedule current) {
  std::string name = schedule_name(current);
  s.get("schedule", name);
  return parse_schedule(name);
}

}  // namespace

lm::ModelConfig RunConfig::model_config() const {
  lm::ModelConfig m = model;
  m.vocab_size = make_vocab().size();
  return m;
}

void RunConfig::validate() const {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (vocab.letters < 2 || vocab.letters > Vocabulary::kMaxLetters) {
    throw ConfigError("vocab.letters must be in [2, " + std::to_string(Vocabulary::kMaxLetters) +
                      "]");
  }
  if (vocab.max_number < 1) throw ConfigError("vocab.max_number must be >= 1");
  model_config().validate();
  if (sft.n_examples < 1) throw ConfigError("sft.n_examples must be >= 1");
  if (sft.min_constraints < 1 || sft.max_constraints < sft.min_constraints) {
    throw ConfigError("sft constraint range is empty");
  }
  if (sft.train.epochs < 1 || sft.train.batch_size < 1 || !(sft.train.lr > 0)) {
    throw ConfigError("sft.epochs, sft.batch_size and sft.lr must be positive");
  }
  dropout.validate();
  if (max_attempt_factor < 1) throw ConfigError("dropout.max_attempt_factor must be >= 1");
  calibration.validate();
  train.validate();
  if (eval.n_instructions < 1) throw ConfigError("eval.n_instructions must be >= 1");
  if (eval.min_constraints < 1 || eval.max_constraints < eval.min_constraints) {
    throw ConfigError("eval constraint range is empty");
  }
  eval.decode.validate();
  endpoint.validate();
}

void apply_preset(RunConfig& cfg, const std::string& name) {
  const loss::LossConfig keep = cfg.train.loss;
  cfg.train = train::TrainConfig::preset(name);
  cfg.train.loss = keep;
  cfg.preset = name;
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  root.get("preset", c.preset);
  apply_preset(c, c.preset);
  root.get("seed", c.seed);
  root.get("threads", c.threads);
  {
    auto s = root.sub("vocab");
    s.get("letters", c.vocab.letters);
    s.get("max_number", c.vocab.max_number);
    s.finish();
  }
  {
    auto s = root.sub("model");
    s.get("embed_dim", c.model.embed_dim);
    s.get("n_layers", c.model.n_layers);
    s.get("n_heads", c.model.n_heads);
    s.get("context_len", c.model.context_len);
    s.get("init_std", c.model.init_std);
    s.finish();
  }
  {
    auto s = root.sub("sft");
    s.get("n_examples", c.sft.n_examples);
    s.get("min_constraints", c.sft.min_constraints);
    s.get("max_constraints", c.sft.max_constraints);
    s.get("epochs", c.sft.train.epochs);
    s.get("batch_size", c.sft.train.batch_size);
    s.get("lr", c.sft.train.lr);
    c.sft.train.schedule = read_schedule(s, c.sft.train.schedule);
    s.get("grad_clip", c.sft.train.grad_clip);
    std::string witness = data::witness_style_name(c.sft.witness);
    s.get("witness", witness);
    c.sft.witness = data::parse_witness_style(witness);
    s.finish();
  }
  {
    auto s = root.sub("dropout");
    s.get("alpha", c.dropout.alpha);
    std::string scheme = data::scheme_name(c.dropout.scheme);
    s.get("scheme", scheme);
    c.dropout.scheme = data::parse_scheme(scheme);
    s.get("min_constraints", c.dropout.min_constraints);
    s.get("max_constraints", c.dropout.max_constraints);
    s.get("temperature", c.dropout.temperature);
    s.get("max_response_len", c.dropout.max_response_len);
    s.get("max_attempt_factor", c.max_attempt_factor);
    s.finish();
  }
  {
    auto s = root.sub("catalog");
    auto& k = c.dropout.catalog;
    s.get("min_length_lo", k.min_length_lo);
    s.get("max_length_lo", k.max_length_lo);
    s.get("max_length_span", k.max_length_span);
    s.get("max_count", k.max_count);
    s.get("negative_probability", k.negative_probability);
    s.finish();
  }
  c.dropout.catalog.max_response_len = c.dropout.max_response_len;
  {
    auto s = root.sub("calibration");
    s.get("gamma", c.calibration.gamma);
    s.get("epsilon", c.calibration.epsilon);
    std::string metric = conf::metric_name(c.calibration.metric);
    s.get("metric", metric);
    c.calibration.metric = conf::parse_metric(metric);
    s.get("calibrated", c.calibration.calibrated);
    s.finish();
  }
  {
    auto s = root.sub("loss");
    auto& l = c.train.loss;
    std::string method = loss::method_name(l.method);
    s.get("method", method);
    l.method = loss::parse_method(method);
    l.beta = loss::LossConfig::default_beta(l.method);
    s.get("beta", l.beta);
    s.get("gamma_simpo", l.gamma_simpo);
    s.get("sft_mix", l.sft_mix);
    s.get("use_weights", l.use_weights);
    s.finish();
  }
  {
    auto s = root.sub("train");
    s.get("lr", c.train.lr);
    c.train.schedule = read_schedule(s, c.train.schedule);
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("grad_clip", c.train.grad_clip);
    s.finish();
  }
  {
    auto s = root.sub("eval");
    s.get("n_instructions", c.eval.n_instructions);
    s.get("min_constraints", c.eval.min_constraints);
    s.get("max_constraints", c.eval.max_constraints);
    s.get("instruction_seed", c.eval.instruction_seed);
    s.get("greedy", c.eval.decode.greedy);
    s.get("temperature", c.eval.decode.temperature);
    s.get("decode_seed", c.eval.decode.seed);
    s.get("max_len", c.eval.decode.max_len);
    s.finish();
  }
  {
    auto s = root.sub("endpoint");
    auto& e = c.endpoint;
    s.get("base_url", e.base_url);
    s.get("path", e.path);
    s.get("api_key_env", e.api_key_env);
    s.get("model", e.model);
    s.get("timeout_s", e.timeout_s);
    s.get("max_retries", e.max_retries);
    s.get("backoff_base_s", e.backoff_base_s);
    s.get("max_parallel", e.max_parallel);
    s.get("cache_dir", e.cache_dir);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read configuration file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json(const RunConfig& c) {
  json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["vocab"] = {{"letters", c.vocab.letters}, {"max_number", c.vocab.max_number}};
  j["model"] = {{"embed_dim", c.model.embed_dim},
                {"n_layers", c.model.n_layers},
                {"n_heads", c.model.n_heads},
                {"context_len", c.model.context_len},
                {"init_std", c.model.init_std}};
  j["sft"] = {{"n_examples", c.sft.n_examples},
              {"min_constraints", c.sft.min_constraints},
              {"max_constraints", c.sft.max_constraints},
              {"epochs", c.sft.train.epochs},
              {"batch_size", c.sft.train.batch_size},
              {"lr", c.sft.train.lr},
              {"schedule", schedule_name(c.sft.train.schedule)},
              {"grad_clip", c.sft.train.grad_clip},
              {"witness", data::witness_style_name(c.sft.witness)}};
  j["dropout"] = {{"alpha", c.dropout.alpha},
                  {"scheme", data::scheme_name(c.dropout.scheme)},
                  {"min_constraints", c.dropout.min_constraints},
                  {"max_constraints", c.dropout.max_constraints},
                  {"temperature", c.dropout.temperature},
                  {"max_response_len", c.dropout.max_response_len},
                  {"max_attempt_factor", c.max_attempt_factor}};
  const auto& k = c.dropout.catalog;
  j["catalog"] = {{"min_length_lo", k.min_length_lo},
                  {"max_length_lo", k.max_length_lo},
                  {"max_length_span", k.max_length_span},
                  {"max_count", k.max_count},
                  {"negative_probability", k.negative_probability}};
  j["calibration"] = {{"gamma", c.calibration.gamma},
                      {"epsilon", c.calibration.epsilon},
                      {"metric", conf::metric_name(c.calibration.metric)},
                      {"calibrated", c.calibration.calibrated}};
  const auto& l = c.train.loss;
  j["loss"] = {{"method", loss::method_name(l.method)},
               {"beta", l.beta},
               {"gamma_simpo", l.gamma_simpo},
               {"sft_mix", l.sft_mix},
               {"use_weights", l.use_weights}};
  j["train"] = {{"lr", c.train.lr},
                {"schedule", schedule_name(c.train.schedule)},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"grad_clip", c.train.grad_clip}};
  j["eval"] = {{"n_instructions", c.eval.n_instructions},
               {"min_constraints", c.eval.min_constraints},
               {"max_constraints", c.eval.max_constraints},
               {"instruction_seed", c.eval.instruction_seed},
               {"greedy", c.eval.decode.greedy},
               {"temperature", c.eval.decode.temperature},
               {"decode_seed", c.eval.decode.seed},
               {"max_len", c.eval.decode.max_len}};
  const auto& e = c.endpoint;
  j["endpoint"] = {{"base_url", e.base_url},
                   {"path", e.path},
                   {"api_key_env", e.api_key_env},
                   {"model", e.model},
                   {"timeout_s", e.timeout_s},
                   {"max_retries", e.max_retries},
                   {"backoff_base_s", e.backoff_base_s},
                   {"max_parallel", e.max_parallel},
                   {"cache_dir", e.cache_dir}};
  return j.dump(2);
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(to_json(cfg)).substr(0, 16); }

}  // namespace musc::cli
