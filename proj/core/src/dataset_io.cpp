#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "musc/datagen.hpp"

namespace musc::data {

namespace {

using Json = nlohmann::ordered_json;

constexpr const char* kRequired[] = {"chosen_ins",      "chosen_resp", "rejected_ins",
                                     "rejected_resp",   "dropped_indices", "scheme",
                                     "provenance"};

std::vector<TokenId> response_tokens(const Response& r) { return lang::scored_tokens(r); }

Json to_json(const PreferencePair& p, const Vocabulary& vocab) {
  Json j;
  j["chosen_ins"] = lang::serialize_instruction(p.chosen_instruction, vocab);
  j["chosen_resp"] = response_tokens(p.chosen_response);
  j["rejected_ins"] = lang::serialize_instruction(p.rejected_instruction, vocab);
  j["rejected_resp"] = response_tokens(p.rejected_response);
  j["dropped_indices"] = p.dropped_indices;
  j["scheme"] = scheme_name(p.scheme);
  if (p.weights) {
    j["weights_chosen"] = p.weights->chosen;
    j["weights_rejected"] = p.weights->rejected;
  }
  j["provenance"] = {{"seed", p.provenance.seed},
                     {"checkpoint", p.provenance.checkpoint},
                     {"metric", p.provenance.metric},
                     {"source", p.provenance.source},
                     {"config_hash", p.provenance.config_hash}};
  return j;
}

template <typename J>
const J& field(const J& j, const char* name, std::size_t line) {
  auto it = j.find(name);
  if (it == j.end()) throw SchemaError("missing required field", line, name);
  return *it;
}

template <typename J>
std::vector<TokenId> int_list(const J& j, const char* name, std::size_t line) {
  const auto& f = field(j, name, line);
  if (!f.is_array()) throw SchemaError("expected an integer array", line, name);
  std::vector<TokenId> out;
  for (const auto& v : f) {
    if (!v.is_number_integer()) throw SchemaError("expected an integer array", line, name);
    out.push_back(v.template get<TokenId>());
  }
  return out;
}

template <typename J>
std::vector<double> real_list(const J& j, const char* name, std::size_t line) {
  const auto& f = field(j, name, line);
  if (!f.is_array()) throw SchemaError("expected a number array", line, name);
  std::vector<double> out;
  for (const auto& v : f) {
    if (!v.is_number()) throw SchemaError("expected a number array", line, name);
    const double w = v.template get<double>();
    if (!std::isfinite(w) || w <= 0) throw SchemaError("weights must be positive", line, name);
    out.push_back(w);
  }
  return out;
}

Response parse_response(const std::vector<TokenId>& tokens, const Vocabulary& vocab,
                        std::size_t line, const char* name) {
  if (tokens.empty() || tokens.back() != Vocabulary::kEos) {
    throw SchemaError("response must end with the end marker", line, name);
  }
  Response r{std::vector<TokenId>(tokens.begin(), tokens.end() - 1)};
  for (TokenId t : r.tokens) {
    if (!vocab.is_letter(t)) throw SchemaError("response holds a non-letter token", line, name);
  }
  return r;
}

Instruction parse_ins(const std::vector<TokenId>& tokens, const Vocabulary& vocab,
                      std::size_t line, const char* name) {
  try {
    return lang::parse_instruction(tokens, vocab);
  } catch (const ParseError& e) {
    throw SchemaError(e.what(), line, name);
  }
}

template <typename J>
void check_common(const J& j, std::size_t line) {
  if (!j.is_object()) throw SchemaError("record must be a JSON object", line, "");
  for (const char* name : kRequired) field(j, name, line);
  const auto& scheme = j.at("scheme");
  if (!scheme.is_string()) throw SchemaError("expected a string", line, "scheme");
  try {
    parse_scheme(scheme.template get<std::string>());
  } catch (const ConfigError&) {
    throw SchemaError("unknown scheme", line, "scheme");
  }
  if (!j.at("provenance").is_object()) {
    throw SchemaError("expected an object", line, "provenance");
  }
  int_list(j, "dropped_indices", line);
  if (j.contains("weights_chosen") != j.contains("weights_rejected")) {
    throw SchemaError("weights_chosen and weights_rejected must appear together", line,
                      j.contains("weights_chosen") ? "weights_rejected" : "weights_chosen");
  }
}

PreferencePair from_json(const nlohmann::json& j, const Vocabulary& vocab,
                         std::size_t line) {
  check_common(j, line);
  PreferencePair p;
  p.chosen_instruction = parse_ins(int_list(j, "chosen_ins", line), vocab, line, "chosen_ins");
  p.rejected_instruction =
      parse_ins(int_list(j, "rejected_ins", line), vocab, line, "rejected_ins");
  p.chosen_response =
      parse_response(int_list(j, "chosen_resp", line), vocab, line, "chosen_resp");
  p.rejected_response =
      parse_response(int_list(j, "rejected_resp", line), vocab, line, "rejected_resp");
  p.dropped_indices = int_list(j, "dropped_indices", line);
  p.scheme = parse_scheme(j.at("scheme").get<std::string>());
  if (j.contains("weights_chosen")) {
    TokenWeights w{real_list(j, "weights_chosen", line), real_list(j, "weights_rejected", line)};
    if (w.chosen.size() != p.chosen_response.length() + 1) {
      throw SchemaError("weights length must equal response length + 1", line,
                        "weights_chosen");
    }
    if (w.rejected.size() != p.rejected_response.length() + 1) {
      throw SchemaError("weights length must equal response length + 1", line,
                        "weights_rejected");
    }
    p.weights = std::move(w);
  }
  const auto& prov = j.at("provenance");
  try {
    p.provenance.seed = prov.value("seed", std::uint64_t{0});
    p.provenance.checkpoint = prov.value("checkpoint", std::string());
    p.provenance.metric = prov.value("metric", std::string());
    p.provenance.source = prov.value("source", std::string());
    p.provenance.config_hash = prov.value("config_hash", std::string());
  } catch (const nlohmann::json::exception&) {
    throw SchemaError("malformed provenance", line, "provenance");
  }
  return p;
}

}  // namespace

std::string vocab_sidecar_path(const std::string& dataset_path) {
  return dataset_path + ".vocab";
}

void write_dataset(const std::vector<PreferencePair>& pairs, const Vocabulary& vocab,
                   const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset " + path);
  for (const auto& p : pairs) out << to_json(p, vocab).dump() << '\n';
  if (!out) throw Error("failed writing dataset " + path);
  vocab.write(vocab_sidecar_path(path));
}

Dataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read dataset " + path);
  Dataset ds{std::filesystem::exists(vocab_sidecar_path(path))
                 ? Vocabulary::read(vocab_sidecar_path(path))
                 : Vocabulary(),
             {}};
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception&) {
      throw SchemaError("invalid JSON", line, "");
    }
    ds.pairs.push_back(from_json(j, ds.vocab, line));
  }
  return ds;
}

void validate_record(const std::string& json_line, std::size_t line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_line);
  } catch (const nlohmann::json::exception&) {
    throw SchemaError("invalid JSON", line, "");
  }
  check_common(j, line);
  const bool text = field(j, "chosen_ins", line).is_string();
  if (text) {
    for (const char* name : {"chosen_ins", "chosen_resp", "rejected_ins", "rejected_resp"}) {
      if (!j.at(name).is_string()) throw SchemaError("expected a string", line, name);
    }
    if (j.contains("weights_chosen")) {
      throw SchemaError("text records carry no token weights", line, "weights_chosen");
    }
    return;
  }
  for (const char* name : {"chosen_ins", "chosen_resp", "rejected_ins", "rejected_resp"}) {
    int_list(j, name, line);
  }
  if (j.contains("weights_chosen")) {
    real_list(j, "weights_chosen", line);
    real_list(j, "weights_rejected", line);
  }
}

}  // namespace musc::data
