#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "iclprobe/kvconfig.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/rng.hpp"
#include "iclprobe/tasks.hpp"

namespace iclprobe {

struct TrainConfig {
  int steps = 8000;
  int batch_size = 16;
  double lr_peak = 1e-3;
  double lr_min = 2e-4;
  int warmup_steps = 200;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;

  std::map<TaskFamily, double> mixture{{TaskFamily::string_length_simple, 0.45},
                                       {TaskFamily::string_length_complex, 0.1},
                                       {TaskFamily::digit, 0.25},
                                       {TaskFamily::grid2d, 0.1},
                                       {TaskFamily::knowledge_surrogate, 0.1}};
  // Optional opening phase: the first warm_steps steps draw families from warm_mixture
  // (the main mixture when empty) and flip polarity with warm_polarity_flip_prob.
  int warm_steps = 2000;
  std::map<TaskFamily, double> warm_mixture;
  double warm_polarity_flip_prob = 0.0;
  int demos_min = 1;
  int demos_max = 16;

  // Per-episode rule jitter; evaluation always uses the canonical rule.
  int string_threshold_min = 2, string_threshold_max = 8;
  int digit_threshold_min = 2, digit_threshold_max = 8;
  int grid_threshold_min = -3, grid_threshold_max = 3;
  double polarity_flip_prob = 0.5;

  std::uint64_t seed = 1;
  int log_every = 100;
  int eval_samples = 200;

  void validate() const;  // throws ConfigError

  // Reads "train.*" keys; unknown train.* keys are rejected.
  static TrainConfig from_config(const KeyValueConfig& cfg);
};

// Reads "model.*" keys over the defaults.
ModelConfig model_config_from(const KeyValueConfig& cfg);

struct LossRecord {
  int step = 0;
  double loss = 0;  // step 0: that batch; later rows: mean over the steps since the previous row
  double eval_acc_j1 = 0;
  double eval_acc_j8 = 0;
  double eval_acc_j16 = 0;
};

struct TrainResult {
  Model<float> model;
  std::vector<LossRecord> history;
  double initial_loss = 0;
};

// One randomized training episode: family from the mixture, J uniform in
// [demos_min, demos_max], jittered threshold and random polarity.
PromptInstance sample_episode(const TrainConfig& config, Rng& rng, int step = -1);

// Mean next-token cross-entropy over the answer positions and the final query, and
// its gradient accumulated (scaled by `weight`) into `grads`.
template <typename T>
double episode_loss_and_grad(const Model<T>& model, const PromptInstance& episode, T weight, ParamVector<T>* grads);

// Number of supervised targets in an episode (J demonstration answers plus the final answer).
inline int target_count(const PromptInstance& p) { return p.n_demos() + 1; }

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_log = {});

std::string loss_history_csv(const std::vector<LossRecord>& history);

struct AccuracyResult {
  double accuracy = 0;
  double stderr_ = 0;
  long long correct = 0;
  int n = 0;
};

AccuracyResult make_accuracy(long long correct, int n);

// Greedy accuracy against rule_oracle on n fresh canonical instances of (family, J).
template <typename T>
AccuracyResult eval_accuracy(const Model<T>& model, TaskFamily family, int n_demos, int n_samples,
                             std::uint64_t seed, int workers = 1);

template <typename T>
AccuracyResult eval_accuracy(const Model<T>& model, const std::vector<PromptInstance>& dataset, int workers = 1);

}  // namespace iclprobe
