#include "musc/lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace musc::lm {

namespace {

constexpr double kLnEps = 1e-5;
constexpr int kTensorsPerLayer = 12;
constexpr int kFormatVersion = 1;

enum LayerTensor {
  kLn1G, kLn1B, kWqkv, kBqkv, kWo, kBo, kLn2G, kLn2B, kWfc, kBfc, kWproj, kBproj
};

std::size_t layer_index(int layer, LayerTensor t) {
  return 2 + static_cast<std::size_t>(layer) * kTensorsPerLayer + t;
}

void layer_norm_forward(const Matrix& x, const double* g, const double* b, Matrix& hat,
                        Vector& rstd, Matrix& out) {
  const auto rows = x.rows(), cols = x.cols();
  hat.resize(rows, cols);
  out.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[r] = rs;
    for (Eigen::Index c = 0; c < cols; ++c) {
      const double h = (x(r, c) - mean) * rs;
      hat(r, c) = h;
      out(r, c) = h * g[c] + b[c];
    }
  }
}

// dx = rstd * (dhat - mean(dhat) - hat * mean(dhat * hat)), dhat = dout * g.
Matrix layer_norm_backward(const Matrix& dout, const Matrix& hat, const Vector& rstd,
                           const double* g, double* dg, double* db) {
  const auto rows = dout.rows(), cols = dout.cols();
  Matrix dx(rows, cols);
  std::vector<double> dhat(cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mean_dhat = 0.0, mean_dhat_hat = 0.0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      dg[c] += dout(r, c) * hat(r, c);
      db[c] += dout(r, c);
      dhat[c] = dout(r, c) * g[c];
      mean_dhat += dhat[c];
      mean_dhat_hat += dhat[c] * hat(r, c);
    }
    mean_dhat /= static_cast<double>(cols);
    mean_dhat_hat /= static_cast<double>(cols);
    for (Eigen::Index c = 0; c < cols; ++c) {
      dx(r, c) = rstd[r] * (dhat[c] - mean_dhat - hat(r, c) * mean_dhat_hat);
    }
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void log_softmax_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
    m.row(r).array() -= lse;
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 4) throw ConfigError("model vocab_size must be >= 4");
  if (embed_dim < 1 || n_layers < 1 || n_heads < 1 || context_len < 2) {
    throw ConfigError("model dimensions must be positive (context_len >= 2)");
  }
  if (embed_dim % n_heads != 0) {
    throw ConfigError("model embed_dim must be divisible by n_heads");
  }
  if (!(init_std > 0)) throw ConfigError("model init_std must be positive");
}

PolicyModel::PolicyModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg.embed_dim, V = cfg.vocab_size;
  std::size_t offset = 0;
  auto add = [&](std::string name, int rows, int cols) {
    tensors_.push_back({std::move(name), rows, cols, offset});
    offset += static_cast<std::size_t>(rows) * cols;
  };
  add("tok_emb", V, d);
  add("pos_emb", cfg.context_len, d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_g", 1, d);
    add(p + "ln1_b", 1, d);
    add(p + "w_qkv", d, 3 * d);
    add(p + "b_qkv", 1, 3 * d);
    add(p + "w_o", d, d);
    add(p + "b_o", 1, d);
    add(p + "ln2_g", 1, d);
    add(p + "ln2_b", 1, d);
    add(p + "w_fc", d, 4 * d);
    add(p + "b_fc", 1, 4 * d);
    add(p + "w_proj", 4 * d, d);
    add(p + "b_proj", 1, d);
  }
  add("lnf_g", 1, d);
  add("lnf_b", 1, d);
  add("w_head", d, V);
  add("b_head", 1, V);
  params_.assign(offset, 0.0);

  Rng rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, cfg.init_std);
  const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
  for (const auto& t : tensors_) {
    const bool gain = t.name.ends_with("_g");
    const bool bias = t.name.ends_with("_b") || t.name.find(".b_") != std::string::npos ||
                      t.name == "b_head";
    const bool resid = t.name.ends_with("w_o") || t.name.ends_with("w_proj");
    for (std::size_t i = 0; i < t.size(); ++i) {
      double& p = params_[t.offset + i];
      if (gain) {
        p = 1.0;
      } else if (bias) {
        p = 0.0;
      } else {
        p = normal(rng) * (resid ? resid_scale : 1.0);
      }
    }
  }
}

Eigen::Map<const Matrix> PolicyModel::weight(std::size_t index) const {
  const auto& t = tensors_[index];
  return Eigen::Map<const Matrix>(params_.data() + t.offset, t.rows, t.cols);
}

Eigen::Map<Matrix> PolicyModel::grad_view(std::span<double> grad, std::size_t index) const {
  const auto& t = tensors_[index];
  return Eigen::Map<Matrix>(grad.data() + t.offset, t.rows, t.cols);
}

std::string PolicyModel::checkpoint_id() const {
  std::ostringstream cfg;
  cfg << cfg_.vocab_size << ',' << cfg_.embed_dim << ',' << cfg_.n_layers << ','
      << cfg_.n_heads << ',' << cfg_.context_len << ';';
  std::string bytes = cfg.str();
  bytes.append(reinterpret_cast<const char*>(params_.data()),
               params_.size() * sizeof(double));
  return "ckpt-" + sha256_hex(bytes).substr(0, 16);
}

Matrix PolicyModel::forward_logprobs(std::span<const TokenId> tokens) const {
  Tape tape;
  return forward(tokens, tape);
}

Matrix PolicyModel::forward(std::span<const TokenId> tokens, Tape& tape) const {
  const int T = static_cast<int>(tokens.size());
  const int d = cfg_.embed_dim, H = cfg_.n_heads, hd = d / H;
  if (T == 0) throw Error("forward: empty context");
  if (T > cfg_.context_len) {
    throw Error("forward: context of length " + std::to_string(T) +
                " exceeds context_len " + std::to_string(cfg_.context_len));
  }
  const auto tok_emb = weight(0);
  const auto pos_emb = weight(1);
  tape.tokens.assign(tokens.begin(), tokens.end());
  Matrix x(T, d);
  for (int t = 0; t < T; ++t) {
    const TokenId id = tokens[t];
    if (id < 0 || id >= cfg_.vocab_size) throw Error("forward: token id out of range");
    x.row(t) = tok_emb.row(id) + pos_emb.row(t);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  tape.layers.resize(cfg_.n_layers);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    auto& L = tape.layers[l];
    L.x_in = x;
    layer_norm_forward(x, weight(layer_index(l, kLn1G)).data(),
                       weight(layer_index(l, kLn1B)).data(), L.ln1_hat, L.ln1_rstd,
                       L.ln1_out);
    L.qkv = L.ln1_out * weight(layer_index(l, kWqkv));
    L.qkv.rowwise() += weight(layer_index(l, kBqkv)).row(0);
    L.attn_out.resize(T, d);
    L.probs.resize(H);
    for (int h = 0; h < H; ++h) {
      const auto q = L.qkv.middleCols(h * hd, hd);
      const auto k = L.qkv.middleCols(d + h * hd, hd);
      const auto v = L.qkv.middleCols(2 * d + h * hd, hd);
      Matrix s = (q * k.transpose()) * scale;
      Matrix& p = L.probs[h];
      p.setZero(T, T);
      for (int i = 0; i < T; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
        p.row(i).head(i + 1) /= z;
      }
      L.attn_out.middleCols(h * hd, hd) = p * v;
    }
    L.x_mid = x + L.attn_out * weight(layer_index(l, kWo));
    L.x_mid.rowwise() += weight(layer_index(l, kBo)).row(0);
    layer_norm_forward(L.x_mid, weight(layer_index(l, kLn2G)).data(),
                       weight(layer_index(l, kLn2B)).data(), L.ln2_hat, L.ln2_rstd,
                       L.ln2_out);
    L.fc_pre = L.ln2_out * weight(layer_index(l, kWfc));
    L.fc_pre.rowwise() += weight(layer_index(l, kBfc)).row(0);
    L.fc_act = L.fc_pre.unaryExpr([](double v) { return gelu(v); });
    x = L.x_mid + L.fc_act * weight(layer_index(l, kWproj));
    x.rowwise() += weight(layer_index(l, kBproj)).row(0);
  }
  const std::size_t fin = 2 + static_cast<std::size_t>(cfg_.n_layers) * kTensorsPerLayer;
  tape.x_final = x;
  layer_norm_forward(x, weight(fin).data(), weight(fin + 1).data(), tape.lnf_hat,
                     tape.lnf_rstd, tape.lnf_out);
  Matrix logits = tape.lnf_out * weight(fin + 2);
  logits.rowwise() += weight(fin + 3).row(0);
  log_softmax_rows(logits);
  tape.logprobs = logits;
  return logits;
}

void PolicyModel::backward(const Tape& tape, const Matrix& dlogprobs,
                           std::span<double> grad) const {
  if (grad.size() != params_.size()) throw Error("backward: gradient buffer size mismatch");
  const int T = static_cast<int>(tape.tokens.size());
  const int d = cfg_.embed_dim, H = cfg_.n_heads, hd = d / H;
  if (dlogprobs.rows() != T || dlogprobs.cols() != cfg_.vocab_size) {
    throw Error("backward: dlogprobs shape mismatch");
  }
  const std::size_t fin = 2 + static_cast<std::size_t>(cfg_.n_layers) * kTensorsPerLayer;

  // d logits = d logprobs - softmax * rowsum(d logprobs)
  Matrix dlogits = dlogprobs;
  for (int t = 0; t < T; ++t) {
    const double s = dlogprobs.row(t).sum();
    if (s != 0.0) dlogits.row(t) -= s * tape.logprobs.row(t).array().exp().matrix();
  }
  grad_view(grad, fin + 2).noalias() += tape.lnf_out.transpose() * dlogits;
  grad_view(grad, fin + 3).row(0) += dlogits.colwise().sum();
  Matrix dln = dlogits * weight(fin + 2).transpose();
  Matrix dx = layer_norm_backward(dln, tape.lnf_hat, tape.lnf_rstd, weight(fin).data(),
                                  grad_view(grad, fin).data(),
                                  grad_view(grad, fin + 1).data());

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const auto& L = tape.layers[l];
    // MLP branch.
    grad_view(grad, layer_index(l, kWproj)).noalias() += L.fc_act.transpose() * dx;
    grad_view(grad, layer_index(l, kBproj)).row(0) += dx.colwise().sum();
    Matrix dfc = dx * weight(layer_index(l, kWproj)).transpose();
    dfc.array() *= L.fc_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    grad_view(grad, layer_index(l, kWfc)).noalias() += L.ln2_out.transpose() * dfc;
    grad_view(grad, layer_index(l, kBfc)).row(0) += dfc.colwise().sum();
    Matrix dln2 = dfc * weight(layer_index(l, kWfc)).transpose();
    Matrix dx_mid = dx + layer_norm_backward(dln2, L.ln2_hat, L.ln2_rstd,
                                             weight(layer_index(l, kLn2G)).data(),
                                             grad_view(grad, layer_index(l, kLn2G)).data(),
                                             grad_view(grad, layer_index(l, kLn2B)).data());
    // Attention branch.
    grad_view(grad, layer_index(l, kWo)).noalias() += L.attn_out.transpose() * dx_mid;
    grad_view(grad, layer_index(l, kBo)).row(0) += dx_mid.colwise().sum();
    Matrix dattn = dx_mid * weight(layer_index(l, kWo)).transpose();
    Matrix dqkv(T, 3 * d);
    for (int h = 0; h < H; ++h) {
      const auto q = L.qkv.middleCols(h * hd, hd);
      const auto k = L.qkv.middleCols(d + h * hd, hd);
      const auto v = L.qkv.middleCols(2 * d + h * hd, hd);
      const Matrix& p = L.probs[h];
      const auto dout = dattn.middleCols(h * hd, hd);
      Matrix dp = dout * v.transpose();
      dqkv.middleCols(2 * d + h * hd, hd).noalias() = p.transpose() * dout;
      Matrix ds(T, T);
      for (int i = 0; i < T; ++i) {
        const double dot = (dp.row(i).array() * p.row(i).array()).sum();
        ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
      }
      dqkv.middleCols(h * hd, hd).noalias() = (ds * k) * scale;
      dqkv.middleCols(d + h * hd, hd).noalias() = (ds.transpose() * q) * scale;
    }
    grad_view(grad, layer_index(l, kWqkv)).noalias() += L.ln1_out.transpose() * dqkv;
    grad_view(grad, layer_index(l, kBqkv)).row(0) += dqkv.colwise().sum();
    Matrix dln1 = dqkv * weight(layer_index(l, kWqkv)).transpose();
    dx = dx_mid + layer_norm_backward(dln1, L.ln1_hat, L.ln1_rstd,
                                      weight(layer_index(l, kLn1G)).data(),
                                      grad_view(grad, layer_index(l, kLn1G)).data(),
                                      grad_view(grad, layer_index(l, kLn1B)).data());
  }
  auto dtok = grad_view(grad, 0);
  auto dpos = grad_view(grad, 1);
  for (int t = 0; t < T; ++t) {
    dtok.row(tape.tokens[t]) += dx.row(t);
    dpos.row(t) += dx.row(t);
  }
}

void PolicyModel::save(const std::string& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path bin = fs::path(dir) / "params.bin";
  {
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw Error("cannot write " + bin.string());
    out.write(reinterpret_cast<const char*>(params_.data()),
              static_cast<std::streamsize>(params_.size() * sizeof(double)));
    if (!out) throw Error("failed writing " + bin.string());
  }
  nlohmann::ordered_json m;
  m["format"] = "musc-checkpoint";
  m["version"] = kFormatVersion;
  m["checkpoint_id"] = checkpoint_id();
  m["config"] = {{"vocab_size", cfg_.vocab_size}, {"embed_dim", cfg_.embed_dim},
                 {"n_layers", cfg_.n_layers},     {"n_heads", cfg_.n_heads},
                 {"context_len", cfg_.context_len}, {"seed", cfg_.seed},
                 {"init_std", cfg_.init_std}};
  m["meta"] = {{"step", meta.step},
               {"rng_state", meta.rng_state},
               {"dataset_hash", meta.dataset_hash},
               {"note", meta.note}};
  m["scalar"] = "float64-le";
  m["num_parameters"] = params_.size();
  m["params_file"] = "params.bin";
  m["params_sha256"] = sha256_file_hex(bin.string());
  auto& ts = m["tensors"] = nlohmann::ordered_json::array();
  for (const auto& t : tensors_) {
    ts.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}, {"offset", t.offset}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw Error("cannot write manifest in " + dir);
  out << m.dump(2) << '\n';
}

PolicyModel PolicyModel::load(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw Error("checkpoint " + dir + ": missing manifest.json");
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint " + dir + ": corrupt manifest (" + e.what() + ")");
  }
  try {
    if (m.at("format") != "musc-checkpoint") throw Error("checkpoint " + dir + ": not a musc checkpoint");
    const int version = m.at("version").get<int>();
    if (version != kFormatVersion) {
      throw Error("checkpoint " + dir + ": version mismatch (file " +
                  std::to_string(version) + ", supported " +
                  std::to_string(kFormatVersion) + ")");
    }
    ModelConfig cfg;
    const auto& c = m.at("config");
    cfg.vocab_size = c.at("vocab_size");
    cfg.embed_dim = c.at("embed_dim");
    cfg.n_layers = c.at("n_layers");
    cfg.n_heads = c.at("n_heads");
    cfg.context_len = c.at("context_len");
    cfg.seed = c.at("seed");
    cfg.init_std = c.at("init_std");
    PolicyModel model(cfg);
    if (m.at("num_parameters").get<std::size_t>() != model.params_.size()) {
      throw Error("checkpoint " + dir + ": parameter count does not match config");
    }
    const fs::path bin = fs::path(dir) / m.at("params_file").get<std::string>();
    if (sha256_file_hex(bin.string()) != m.at("params_sha256").get<std::string>()) {
      throw Error("checkpoint " + dir + ": corrupt archive (parameter hash mismatch)");
    }
    std::ifstream pin(bin, std::ios::binary);
    pin.read(reinterpret_cast<char*>(model.params_.data()),
             static_cast<std::streamsize>(model.params_.size() * sizeof(double)));
    if (!pin) throw Error("checkpoint " + dir + ": truncated parameter file");
    const auto& meta = m.at("meta");
    model.meta.step = meta.at("step");
    model.meta.rng_state = meta.at("rng_state");
    model.meta.dataset_hash = meta.at("dataset_hash");
    model.meta.note = meta.at("note");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint " + dir + ": corrupt manifest (" + e.what() + ")");
  }
}

Decoder::Decoder(const PolicyModel& model) : model_(model) {
  const auto& cfg = model.config();
  keys_.assign(cfg.n_layers, Matrix(cfg.context_len, cfg.embed_dim));
  values_.assign(cfg.n_layers, Matrix(cfg.context_len, cfg.embed_dim));
}

Vector Decoder::push(TokenId token) {
  const auto& cfg = model_.config();
  const int d = cfg.embed_dim, H = cfg.n_heads, hd = d / H;
  if (pos_ >= cfg.context_len) throw Error("decoder: context_len exceeded");
  if (token < 0 || token >= cfg.vocab_size) throw Error("decoder: token id out of range");
  Matrix x = model_.weight(0).row(token) + model_.weight(1).row(pos_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix hat, out;
  Vector rstd;
  for (int l = 0; l < cfg.n_layers; ++l) {
    layer_norm_forward(x, model_.weight(layer_index(l, kLn1G)).data(),
                       model_.weight(layer_index(l, kLn1B)).data(), hat, rstd, out);
    Matrix qkv = out * model_.weight(layer_index(l, kWqkv));
    qkv += model_.weight(layer_index(l, kBqkv));
    keys_[l].row(pos_) = qkv.middleCols(d, d);
    values_[l].row(pos_) = qkv.middleCols(2 * d, d);
    Matrix attn(1, d);
    const int n = pos_ + 1;
    for (int h = 0; h < H; ++h) {
      const auto q = qkv.middleCols(h * hd, hd);
      const auto k = keys_[l].block(0, h * hd, n, hd);
      const auto v = values_[l].block(0, h * hd, n, hd);
      Matrix s = (q * k.transpose()) * scale;
      const double mx = s.maxCoeff();
      s = (s.array() - mx).exp().matrix();
      s /= s.sum();
      attn.middleCols(h * hd, hd) = s * v;
    }
    Matrix mid = x + attn * model_.weight(layer_index(l, kWo));
    mid += model_.weight(layer_index(l, kBo));
    layer_norm_forward(mid, model_.weight(layer_index(l, kLn2G)).data(),
                       model_.weight(layer_index(l, kLn2B)).data(), hat, rstd, out);
    Matrix fc = out * model_.weight(layer_index(l, kWfc));
    fc += model_.weight(layer_index(l, kBfc));
    fc = fc.unaryExpr([](double v) { return gelu(v); });
    x = mid + fc * model_.weight(layer_index(l, kWproj));
    x += model_.weight(layer_index(l, kBproj));
  }
  const std::size_t fin = 2 + static_cast<std::size_t>(cfg.n_layers) * kTensorsPerLayer;
  layer_norm_forward(x, model_.weight(fin).data(), model_.weight(fin + 1).data(), hat, rstd,
                     out);
  Matrix logits = out * model_.weight(fin + 2);
  logits += model_.weight(fin + 3);
  log_softmax_rows(logits);
  ++pos_;
  return logits.row(0).transpose();
}

ReferenceModel clone_frozen(const PolicyModel& model) { return ReferenceModel(model); }

namespace {

void check_fits(const PolicyModel& model, std::size_t x, std::size_t y) {
  if (x == 0) throw Error("conditioning prefix must be non-empty");
  if (x + y > static_cast<std::size_t>(model.config().context_len)) {
    throw Error("sequence of length " + std::to_string(x + y) + " exceeds context_len " +
                std::to_string(model.config().context_len));
  }
}

std::vector<TokenId> concat(std::span<const TokenId> x, std::span<const TokenId> y) {
  std::vector<TokenId> out(x.begin(), x.end());
  out.insert(out.end(), y.begin(), y.end());
  return out;
}

}  // namespace

SequenceLogprob sequence_logprob(const PolicyModel& model, std::span<const TokenId> x,
                                 std::span<const TokenId> y) {
  check_fits(model, x.size(), y.size());
  SequenceLogprob out;
  if (y.empty()) return out;
  const auto seq = concat(x, y);
  const Matrix lp =
      model.forward_logprobs(std::span<const TokenId>(seq).first(seq.size() - 1));
  out.per_token.resize(y.size());
  for (std::size_t j = 0; j < y.size(); ++j) {
    out.per_token[j] = lp(static_cast<Eigen::Index>(x.size() - 1 + j), y[j]);
  }
  out.total = compensated_sum(out.per_token);
  return out;
}

Matrix response_distributions(const PolicyModel& model, std::span<const TokenId> x,
                              std::span<const TokenId> y) {
  check_fits(model, x.size(), y.size());
  if (y.empty()) return Matrix(0, model.config().vocab_size);
  const auto seq = concat(x, y);
  const Matrix lp =
      model.forward_logprobs(std::span<const TokenId>(seq).first(seq.size() - 1));
  return lp.bottomRows(static_cast<Eigen::Index>(y.size()));
}

std::vector<TokenId> sample(const PolicyModel& model, std::span<const TokenId> prefix,
                            Rng& rng, const SampleOptions& opts) {
  if (prefix.empty()) throw Error("sample: empty prefix");
  if (!opts.greedy && !(opts.temperature > 0)) {
    throw Error("sample: temperature must be positive unless greedy");
  }
  const int V = model.config().vocab_size;
  std::vector<bool> allowed(V, opts.allowed.empty());
  for (TokenId t : opts.allowed) allowed.at(t) = true;

  Decoder dec(model);
  Vector lp;
  for (TokenId t : prefix) lp = dec.push(t);
  std::vector<TokenId> out;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> w(V);
  while (static_cast<int>(out.size()) < opts.max_len) {
    TokenId next = -1;
    if (opts.greedy) {
      double best = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < V; ++v) {
        if (allowed[v] && lp[v] > best) {
          best = lp[v];
          next = v;
        }
      }
    } else {
      double mx = -std::numeric_limits<double>::infinity();
      for (int v = 0; v < V; ++v) {
        if (allowed[v]) mx = std::max(mx, lp[v] / opts.temperature);
      }
      double z = 0.0;
      for (int v = 0; v < V; ++v) {
        w[v] = allowed[v] ? std::exp(lp[v] / opts.temperature - mx) : 0.0;
        z += w[v];
      }
      double u = unif(rng) * z;
      for (int v = 0; v < V; ++v) {
        if (w[v] == 0.0) continue;
        next = v;
        u -= w[v];
        if (u < 0.0) break;
      }
    }
    out.push_back(next);
    if (next == opts.stop_token) break;
    if (static_cast<int>(prefix.size() + out.size()) >= model.config().context_len) break;
    lp = dec.push(next);
  }
  return out;
}

ScoredExample score_with_tape(const PolicyModel& model, const SequenceExample& ex) {
  check_fits(model, ex.prompt.size(), ex.target.size());
  if (ex.target.empty()) throw Error("score_with_tape: empty target");
  ScoredExample s;
  const auto seq = concat(ex.prompt, ex.target);
  const Matrix lp =
      model.forward(std::span<const TokenId>(seq).first(seq.size() - 1), s.tape);
  s.first_row = ex.prompt.size() - 1;
  s.targets = ex.target;
  s.logp.resize(ex.target.size());
  for (std::size_t j = 0; j < ex.target.size(); ++j) {
    s.logp[j] = lp(static_cast<Eigen::Index>(s.first_row + j), ex.target[j]);
  }
  return s;
}

void backprop_target(const PolicyModel& model, const ScoredExample& scored,
                     std::span<const double> dlogp, std::span<double> grad) {
  if (dlogp.size() != scored.logp.size()) throw Error("backprop_target: size mismatch");
  const auto T = static_cast<Eigen::Index>(scored.tape.tokens.size());
  Matrix d = Matrix::Zero(T, model.config().vocab_size);
  for (std::size_t j = 0; j < dlogp.size(); ++j) {
    d(static_cast<Eigen::Index>(scored.first_row + j), scored.targets[j]) += dlogp[j];
  }
  model.backward(scored.tape, d, grad);
}

std::vector<double> accumulate_target_gradient(const PolicyModel& model,
                                               const SequenceExample& ex,
                                               std::span<const double> dlogp,
                                               std::span<double> grad) {
  auto scored = score_with_tape(model, ex);
  backprop_target(model, scored, dlogp, grad);
  return std::move(scored.logp);
}

double mean_nll(const PolicyModel& model, const std::vector<SequenceExample>& examples) {
  CompensatedAccumulator total;
  std::size_t count = 0;
  for (const auto& ex : examples) {
    const auto lp = sequence_logprob(model, ex.prompt, ex.target);
    total.add(-lp.total);
    count += ex.target.size();
  }
  if (count == 0) throw Error("mean_nll: no target tokens");
  return total.value() / static_cast<double>(count);
}

SftResult sft_train(PolicyModel& model, const std::vector<SequenceExample>& corpus,
                    const SftConfig& cfg,
                    const std::function<void(std::int64_t, double)>& on_step) {
  if (corpus.empty()) throw Error("sft_train: empty corpus");
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw ConfigError("sft_train: epochs and batch_size must be >= 1");
  }
  for (const auto& ex : corpus) {
    if (ex.prompt.empty() || ex.target.empty()) {
      throw Error("sft_train: examples need a prompt and a target");
    }
  }
  const std::size_t n = corpus.size();
  const std::int64_t per_epoch =
      static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
  std::int64_t total_steps = per_epoch * cfg.epochs;
  if (cfg.max_steps >= 0) total_steps = std::min(total_steps, cfg.max_steps);

  Rng rng(cfg.seed);
  Adam adam(model.num_parameters());
  std::vector<double> grad(model.num_parameters());
  std::vector<double> last_good(model.parameters().begin(), model.parameters().end());
  std::vector<std::size_t> order(n);
  SftResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    CompensatedAccumulator epoch_loss;
    std::int64_t epoch_steps = 0;
    for (std::size_t start = 0; start < n && step < total_steps; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::size_t ntok = 0;
      for (std::size_t i = start; i < end; ++i) ntok += corpus[order[i]].target.size();
      std::fill(grad.begin(), grad.end(), 0.0);
      const double g = -1.0 / static_cast<double>(ntok);
      CompensatedAccumulator loss;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = corpus[order[i]];
        const std::vector<double> dlogp(ex.target.size(), g);
        for (double lp : accumulate_target_gradient(model, ex, dlogp, grad)) loss.add(-lp);
      }
      const double batch_loss = loss.value() / static_cast<double>(ntok);
      if (!std::isfinite(batch_loss)) {
        std::copy(last_good.begin(), last_good.end(), model.parameters().begin());
        throw DivergenceError("sft_train: non-finite loss at step " + std::to_string(step) +
                                  "; parameters restored to the last finite step",
                              step);
      }
      std::copy(model.parameters().begin(), model.parameters().end(), last_good.begin());
      if (cfg.grad_clip > 0) clip_grad_norm(grad, cfg.grad_clip);
      adam.step(model.parameters(), grad,
                scheduled_lr(cfg.schedule, cfg.lr, step, total_steps));
      result.step_loss.push_back(batch_loss);
      epoch_loss.add(batch_loss);
      ++epoch_steps;
      if (on_step) on_step(step, batch_loss);
      ++step;
    }
    result.epoch_loss.push_back(epoch_loss.value() / static_cast<double>(epoch_steps));
  }
  model.meta.step += step;
  std::ostringstream rs;
  rs << rng;
  model.meta.rng_state = rs.str();
  return result;
}

}  // namespace musc::lm
