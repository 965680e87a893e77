#include "musc/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "musc/datagen.hpp"

namespace musc::eval {

using json = nlohmann::ordered_json;

void DecodeConfig::validate() const {
  if (!greedy && !(temperature > 0)) {
    throw ConfigError("eval.temperature must be > 0 unless greedy decoding is used");
  }
  if (max_len < 1) throw ConfigError("eval.max_len must be >= 1");
  if (threads < 1) throw ConfigError("eval.threads must be >= 1");
}

std::string instruction_set_hash(const std::vector<lang::Instruction>& instructions) {
  std::string joined;
  for (const auto& ins : instructions) {
    joined += ins.id;
    joined += '\n';
  }
  return sha256_hex(joined).substr(0, 16);
}

EvalReport score_responses(const std::vector<lang::Instruction>& instructions,
                           const std::vector<lang::Response>& responses) {
  if (instructions.size() != responses.size()) {
    throw Error("score_responses: instruction and response counts differ");
  }
  EvalReport r;
  r.n_instructions = static_cast<int>(instructions.size());
  r.instruction_hash = instruction_set_hash(instructions);
  CompensatedAccumulator csr, isr, psr;
  std::map<int, std::pair<CompensatedAccumulator, CompensatedAccumulator>> levels;
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    const auto& ins = instructions[i];
    if (ins.constraints.empty()) throw Error("score_responses: empty instruction");
    InstructionResult res{ins.id, responses[i], lang::check_all(ins, responses[i])};
    const auto sat = static_cast<double>(std::count(res.satisfied.begin(), res.satisfied.end(), true));
    const double frac = sat / static_cast<double>(res.satisfied.size());
    const double all = sat == static_cast<double>(res.satisfied.size()) ? 1.0 : 0.0;
    csr.add(frac);
    isr.add(all);
    psr.add(res.satisfied.front() ? 1.0 : 0.0);
    const int level = static_cast<int>(ins.constraints.size());
    levels[level].first.add(all);
    levels[level].second.add(frac);
    r.per_level[level].n += 1;
    r.results.push_back(std::move(res));
  }
  if (r.n_instructions > 0) {
    const double n = r.n_instructions;
    r.csr = csr.value() / n;
    r.isr = isr.value() / n;
    r.psr = psr.value() / n;
  }
  for (auto& [level, stats] : r.per_level) {
    stats.hsr = levels[level].first.value() / stats.n;
    stats.ssr = levels[level].second.value() / stats.n;
  }
  return r;
}

EvalReport evaluate(const lm::PolicyModel& model, const Vocabulary& vocab,
                    const std::vector<lang::Instruction>& instructions,
                    const DecodeConfig& decode) {
  decode.validate();
  const int ctx = model.config().context_len;
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    const auto len = lang::serialize_instruction(instructions[i], vocab).size();
    if (static_cast<int>(len) + decode.max_len + 1 > ctx) {
      throw Error("evaluate: instruction " + std::to_string(i) + " (" + std::to_string(len) +
                  " tokens) plus the response does not fit the context of " +
                  std::to_string(ctx));
    }
  }
  std::vector<lang::Response> responses(instructions.size());
  const double temperature = decode.greedy ? 0.0 : decode.temperature;
  data::parallel_for(instructions.size(), decode.threads, [&](std::size_t i) {
    Rng rng(derive_seed(decode.seed, i));
    responses[i] =
        data::generate_response(model, instructions[i], vocab, temperature, rng, decode.max_len);
  });
  EvalReport r = score_responses(instructions, responses);
  r.decode = decode;
  r.model_id = model.checkpoint_id();
  return r;
}

MetricDelta compare(const EvalReport& a, const EvalReport& b) {
  if (a.instruction_hash != b.instruction_hash) {
    throw Error("compare: reports cover different instruction sets (" + a.instruction_hash +
                " vs " + b.instruction_hash + ")");
  }
  if (a.per_level.size() != b.per_level.size()) {
    throw Error("compare: reports have different difficulty levels");
  }
  MetricDelta d;
  d.csr = b.csr - a.csr;
  d.isr = b.isr - a.isr;
  d.psr = b.psr - a.psr;
  for (const auto& [level, sa] : a.per_level) {
    const auto it = b.per_level.find(level);
    if (it == b.per_level.end() || it->second.n != sa.n) {
      throw Error("compare: level " + std::to_string(level) + " does not align");
    }
    d.per_level[level] = {it->second.hsr - sa.hsr, it->second.ssr - sa.ssr};
  }
  return d;
}

namespace {

json decode_json(const DecodeConfig& d) {
  json j;
  j["mode"] = d.greedy ? "greedy" : "temperature";
  j["temperature"] = d.temperature;
  j["seed"] = d.seed;
  j["max_len"] = d.max_len;
  return j;
}

}  // namespace

void write_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report '" + path + "'");
  json head;
  head["type"] = "summary";
  head["csr"] = report.csr;
  head["isr"] = report.isr;
  head["psr"] = report.psr;
  head["psr_definition"] = "first-constraint satisfaction";
  head["n_instructions"] = report.n_instructions;
  head["instruction_hash"] = report.instruction_hash;
  head["model"] = report.model_id;
  head["decode"] = decode_json(report.decode);
  json levels = json::array();
  for (const auto& [level, s] : report.per_level) {
    levels.push_back({{"level", level}, {"hsr", s.hsr}, {"ssr", s.ssr}, {"n", s.n}});
  }
  head["per_level"] = levels;
  out << head.dump() << "\n";
  for (std::size_t i = 0; i < report.results.size(); ++i) {
    const auto& r = report.results[i];
    json rec;
    rec["type"] = "instruction";
    rec["index"] = i;
    rec["instruction_id"] = r.instruction_id;
    rec["response"] = r.response.tokens;
    rec["satisfied"] = r.satisfied;
    out << rec.dump() << "\n";
  }
  if (!out) throw Error("error while writing report '" + path + "'");
}

EvalReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read report '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  EvalReport r;
  bool have_head = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      throw SchemaError("invalid JSON", lineno, "");
    }
    std::string field;
    try {
      field = "type";
      const std::string type = j.at("type").get<std::string>();
      if (type == "summary") {
        for (const char* f : {"csr", "isr", "psr", "n_instructions", "instruction_hash",
                              "decode", "per_level"}) {
          field = f;
          (void)j.at(f);
        }
        r.csr = j["csr"].get<double>();
        r.isr = j["isr"].get<double>();
        r.psr = j["psr"].get<double>();
        r.n_instructions = j["n_instructions"].get<int>();
        r.instruction_hash = j["instruction_hash"].get<std::string>();
        r.model_id = j.value("model", "");
        field = "decode";
        const auto& d = j["decode"];
        r.decode.greedy = d.at("mode").get<std::string>() == "greedy";
        r.decode.temperature = d.at("temperature").get<double>();
        r.decode.seed = d.at("seed").get<std::uint64_t>();
        r.decode.max_len = d.at("max_len").get<int>();
        field = "per_level";
        for (const auto& l : j["per_level"]) {
          r.per_level[l.at("level").get<int>()] = {l.at("hsr").get<double>(),
                                                   l.at("ssr").get<double>(),
                                                   l.at("n").get<int>()};
        }
        have_head = true;
      } else if (type == "instruction") {
        InstructionResult res;
        field = "instruction_id";
        res.instruction_id = j.at("instruction_id").get<std::string>();
        field = "response";
        res.response.tokens = j.at("response").get<std::vector<TokenId>>();
        field = "satisfied";
        res.satisfied = j.at("satisfied").get<std::vector<bool>>();
        r.results.push_back(std::move(res));
      } else {
        throw SchemaError("unknown record type '" + type + "'", lineno, "type");
      }
    } catch (const json::exception&) {
      throw SchemaError("missing or malformed field", lineno, field);
    }
  }
  if (!have_head) throw SchemaError("report has no summary record", lineno, "type");
  return r;
}

std::string summary_text(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "instructions: " << r.n_instructions << "  (set " << r.instruction_hash << ")\n";
  out << "decode: " << (r.decode.greedy ? "greedy" : "temperature") ;
  if (!r.decode.greedy) out << " " << r.decode.temperature;
  out << ", seed " << r.decode.seed << "\n";
  out << "CSR " << r.csr << "  ISR " << r.isr << "  PSR " << r.psr
      << "  (PSR = first-constraint satisfaction)\n";
  out << "level      n     HSR     SSR\n";
  for (const auto& [level, s] : r.per_level) {
    out << std::setw(5) << level << std::setw(7) << s.n << std::setw(8) << s.hsr
        << std::setw(8) << s.ssr << "\n";
  }
  return out.str();
}

std::string delta_text(const MetricDelta& d) {
  std::ostringstream out;
  out << std::showpos << std::fixed << std::setprecision(4);
  out << "dCSR " << d.csr << "  dISR " << d.isr << "  dPSR " << d.psr << "\n";
  out << std::noshowpos << "level    dHSR     dSSR\n" << std::showpos;
  for (const auto& [level, v] : d.per_level) {
    out << std::noshowpos << std::setw(5) << level << std::showpos << std::setw(9) << v.first
        << std::setw(9) << v.second << "\n";
  }
  return out.str();
}

}  // namespace musc::eval
