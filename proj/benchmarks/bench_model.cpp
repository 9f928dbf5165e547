#include <benchmark/benchmark.h>

#include "iclprobe/analysis.hpp"
#include "iclprobe/intervention.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/tasks.hpp"
#include "iclprobe/trainer.hpp"

using namespace iclprobe;

namespace {

const Model<float>& default_model() {
  static const auto model = Model<float>::random(ModelConfig{}, 3);
  return model;
}

PromptInstance prompt(int J) { return generate_instance(TaskSpec::canonical(TaskFamily::string_length_simple, J, 5), 9); }

void BM_Forward(benchmark::State& state) {
  const auto& model = default_model();
  const auto inst = prompt(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    auto trace = forward(model, std::span<const TokenId>(inst.tokens));
    benchmark::DoNotOptimize(trace.final_logits.data());
  }
  state.counters["tokens"] = static_cast<double>(inst.tokens.size());
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(inst.tokens.size()));
}
BENCHMARK(BM_Forward)->Arg(1)->Arg(8)->Arg(16);

void BM_TrainingStepEpisode(benchmark::State& state) {
  const auto& model = default_model();
  const auto inst = prompt(static_cast<int>(state.range(0)));
  ParamVector<float> grads(model.parameters().size(), 0.0f);
  for (auto _ : state) {
    benchmark::DoNotOptimize(episode_loss_and_grad(model, inst, 1.0f, &grads));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(inst.tokens.size()));
}
BENCHMARK(BM_TrainingStepEpisode)->Arg(8)->Arg(16);

void BM_AttentionGrads(benchmark::State& state) {
  const auto& model = default_model();
  const auto inst = prompt(8);
  for (auto _ : state) {
    auto g = attention_grads(model, std::span<const TokenId>(inst.tokens), inst.gold_answer, inst.final_is_pos());
    benchmark::DoNotOptimize(g.loss_value);
  }
}
BENCHMARK(BM_AttentionGrads);

void BM_RuleVectorPatch(benchmark::State& state) {
  const auto& model = default_model();
  const auto donors = generate_dataset(TaskSpec::canonical(TaskFamily::string_length_simple, 8, 2), 8);
  const auto recipients = random_answer_recipients(donors, 4);
  const int layer = static_cast<int>(state.range(0));
  for (auto _ : state) {
    auto a = protocol_rule_vectors(model, donors, recipients, layer, 8);
    benchmark::DoNotOptimize(a.accuracy);
  }
}
BENCHMARK(BM_RuleVectorPatch)->Arg(1)->Arg(4)->Arg(7);

void BM_DpcaFitAblate(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(n, 128);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % 10;
  for (auto _ : state) {
    const auto fit = dpca_fit(x, labels, 2);
    auto ablated = nullspace_ablate(x, fit);
    benchmark::DoNotOptimize(ablated.data());
  }
}
BENCHMARK(BM_DpcaFitAblate)->Arg(1000)->Arg(8000);

}  // namespace
BENCHMARK_MAIN();
