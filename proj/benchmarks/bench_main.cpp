#include <benchmark/benchmark.h>

#include "musc/confidence.hpp"
#include "musc/constraint_lang.hpp"
#include "musc/losses.hpp"
#include "musc/lm.hpp"

using namespace musc;

namespace {

lm::ModelConfig model_config(int dim) {
  lm::ModelConfig c;
  c.vocab_size = Vocabulary().size();
  c.embed_dim = dim;
  c.n_layers = 2;
  c.n_heads = 4;
  c.context_len = 64;
  c.seed = 1;
  return c;
}

std::vector<TokenId> sequence(int len) {
  const Vocabulary v;
  std::vector<TokenId> t;
  for (int i = 0; i < len; ++i) t.push_back(v.letter(i % v.num_letters()));
  return t;
}

void BM_Forward(benchmark::State& state) {
  const lm::PolicyModel model(model_config(static_cast<int>(state.range(0))));
  const auto tokens = sequence(static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(model.forward_logprobs(tokens));
}
BENCHMARK(BM_Forward)->Args({64, 32})->Args({64, 64})->Args({128, 64});

void BM_ForwardBackward(benchmark::State& state) {
  const lm::PolicyModel model(model_config(static_cast<int>(state.range(0))));
  const auto tokens = sequence(48);
  std::vector<double> grad(model.num_parameters());
  for (auto _ : state) {
    lm::Tape tape;
    const auto lp = model.forward(tokens, tape);
    lm::Matrix d = lm::Matrix::Constant(lp.rows(), lp.cols(), 1e-3);
    model.backward(tape, d, grad);
    benchmark::DoNotOptimize(grad.data());
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(64)->Arg(128);

void BM_Decode(benchmark::State& state) {
  const lm::PolicyModel model(model_config(64));
  const auto prefix = sequence(40);
  for (auto _ : state) {
    lm::Decoder dec(model);
    for (TokenId t : prefix) benchmark::DoNotOptimize(dec.push(t));
  }
}
BENCHMARK(BM_Decode);

void BM_Solve(benchmark::State& state) {
  const Vocabulary v;
  Rng rng(5);
  std::vector<std::vector<lang::AtomicConstraint>> sets;
  for (int i = 0; i < 64; ++i) {
    sets.push_back(lang::sample_constraint_set(v, rng, static_cast<int>(state.range(0)),
                                               static_cast<int>(state.range(0))));
  }
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(lang::solve(sets[i++ % sets.size()], v, rng));
  }
}
BENCHMARK(BM_Solve)->Arg(3)->Arg(10);

void BM_ExhaustiveSolve(benchmark::State& state) {
  const Vocabulary v;
  Rng rng(6);
  std::vector<std::vector<lang::AtomicConstraint>> sets;
  for (int i = 0; i < 64; ++i) sets.push_back(lang::sample_constraint_set(v, rng, 10, 10));
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(lang::exhaustive_solve(sets[i++ % sets.size()], v, 12));
  }
}
BENCHMARK(BM_ExhaustiveSolve);

void BM_TotalLoss(benchmark::State& state) {
  Rng rng(7);
  std::uniform_real_distribution<double> lp(-4.0, -0.01), w(0.1, 2.0);
  loss::PairLogps p;
  for (int i = 0; i < state.range(0); ++i) {
    p.policy_chosen.push_back(lp(rng));
    p.ref_chosen.push_back(lp(rng));
    p.weights_chosen.push_back(w(rng));
    p.policy_rejected.push_back(lp(rng));
    p.ref_rejected.push_back(lp(rng));
    p.weights_rejected.push_back(w(rng));
  }
  loss::LossConfig cfg;
  cfg.method = static_cast<loss::Method>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(loss::total_loss(p, cfg));
}
BENCHMARK(BM_TotalLoss)->Args({12, 0})->Args({12, 1})->Args({12, 2})->Args({12, 3});

void BM_Calibrate(benchmark::State& state) {
  Rng rng(8);
  std::uniform_real_distribution<double> u(0.0, 3.5);
  std::vector<double> a(13), b(13);
  for (int i = 0; i < 13; ++i) {
    a[i] = u(rng);
    b[i] = u(rng);
  }
  const conf::CalibrationConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(conf::calibrate(a, b, conf::Role::kChosen, cfg));
}
BENCHMARK(BM_Calibrate);

}  // namespace

BENCHMARK_MAIN();
