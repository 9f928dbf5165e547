#include "iclprobe/trainer.hpp"

#include <cmath>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include "iclprobe/errors.hpp"
#include "iclprobe/parallel.hpp"

namespace iclprobe {

void TrainConfig::validate() const {
  if (steps < 1 || batch_size < 1) throw ConfigError("steps and batch_size must be positive");
  if (!(lr_peak > 0) || lr_min < 0 || lr_min > lr_peak) throw ConfigError("need 0 <= lr_min <= lr_peak, lr_peak > 0");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (polarity_flip_prob < 0 || polarity_flip_prob > 1) throw ConfigError("polarity_flip_prob must lie in [0, 1]");
  auto check_mixture = [](const std::map<TaskFamily, double>& mix, const char* what) {
    double total = 0;
    for (const auto& [f, w] : mix) {
      if (w < 0) throw ConfigError(std::string(what) + " weight for " + std::string(to_string(f)) + " is negative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ConfigError(std::string(what) + " weights sum to " + std::to_string(total) + ", not 1");
    }
  };
  check_mixture(mixture, "mixture");
  if (warm_steps < 0) throw ConfigError("warm_steps must be >= 0");
  if (warm_steps > 0 && !warm_mixture.empty()) check_mixture(warm_mixture, "warm mixture");
  if (warm_polarity_flip_prob < 0 || warm_polarity_flip_prob > 1) {
    throw ConfigError("warm_polarity_flip_prob must lie in [0, 1]");
  }
  if (demos_min < 0 || demos_max > kMaxDemos || demos_min > demos_max) {
    throw ConfigError("demonstration range must satisfy 0 <= demos_min <= demos_max <= 16");
  }
  if (string_threshold_min > string_threshold_max || digit_threshold_min > digit_threshold_max ||
      grid_threshold_min > grid_threshold_max) {
    throw ConfigError("threshold jitter ranges must have min <= max");
  }
  if (log_every < 1 || eval_samples < 0) throw ConfigError("log_every must be >= 1 and eval_samples >= 0");
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& cfg) {
  std::set<std::string> known{"train.steps",          "train.batch_size",     "train.lr_peak",
                              "train.lr_min",         "train.warmup_steps",   "train.weight_decay",
                              "train.beta1",          "train.beta2",          "train.adam_eps",
                              "train.grad_clip",      "train.demos_min",      "train.demos_max",
                              "train.string_threshold_min", "train.string_threshold_max",
                              "train.digit_threshold_min",  "train.digit_threshold_max",
                              "train.grid_threshold_min",   "train.grid_threshold_max",
                              "train.polarity_flip_prob",   "train.seed", "train.log_every", "train.eval_samples",
                              "train.warm_steps", "train.warm_polarity_flip_prob"};
  for (TaskFamily f : all_families()) {
    known.insert("train.mix." + std::string(to_string(f)));
    known.insert("train.warm_mix." + std::string(to_string(f)));
  }
  for (const auto& [k, v] : cfg.values()) {
    if (k.starts_with("train.") && !known.count(k)) throw ConfigError("unknown key \"" + k + "\"", cfg.line_of(k));
  }

  TrainConfig c;
  auto geti = [&cfg](const char* key, int fallback) { return static_cast<int>(cfg.get_int(key, fallback)); };
  c.steps = geti("train.steps", c.steps);
  c.batch_size = geti("train.batch_size", c.batch_size);
  c.lr_peak = cfg.get_double("train.lr_peak", c.lr_peak);
  c.lr_min = cfg.get_double("train.lr_min", c.lr_min);
  c.warmup_steps = geti("train.warmup_steps", c.warmup_steps);
  c.weight_decay = cfg.get_double("train.weight_decay", c.weight_decay);
  c.beta1 = cfg.get_double("train.beta1", c.beta1);
  c.beta2 = cfg.get_double("train.beta2", c.beta2);
  c.adam_eps = cfg.get_double("train.adam_eps", c.adam_eps);
  c.grad_clip = cfg.get_double("train.grad_clip", c.grad_clip);
  c.demos_min = geti("train.demos_min", c.demos_min);
  c.demos_max = geti("train.demos_max", c.demos_max);
  c.string_threshold_min = geti("train.string_threshold_min", c.string_threshold_min);
  c.string_threshold_max = geti("train.string_threshold_max", c.string_threshold_max);
  c.digit_threshold_min = geti("train.digit_threshold_min", c.digit_threshold_min);
  c.digit_threshold_max = geti("train.digit_threshold_max", c.digit_threshold_max);
  c.grid_threshold_min = geti("train.grid_threshold_min", c.grid_threshold_min);
  c.grid_threshold_max = geti("train.grid_threshold_max", c.grid_threshold_max);
  c.polarity_flip_prob = cfg.get_double("train.polarity_flip_prob", c.polarity_flip_prob);
  c.seed = cfg.get_u64("train.seed", c.seed);
  c.log_every = geti("train.log_every", c.log_every);
  c.eval_samples = geti("train.eval_samples", c.eval_samples);
  bool any_mix = false;
  for (TaskFamily f : all_families()) any_mix |= cfg.has("train.mix." + std::string(to_string(f)));
  if (any_mix) {
    for (TaskFamily f : all_families()) c.mixture[f] = cfg.get_double("train.mix." + std::string(to_string(f)), 0.0);
  }
  c.warm_steps = geti("train.warm_steps", c.warm_steps);
  for (TaskFamily f : all_families()) {
    const auto key = "train.warm_mix." + std::string(to_string(f));
    if (cfg.has(key)) c.warm_mixture[f] = cfg.get_double(key);
  }
  if (c.warm_mixture.empty()) {
    c.warm_mixture = c.mixture;
  } else {
    for (TaskFamily f : all_families()) c.warm_mixture.try_emplace(f, 0.0);
  }
  c.warm_polarity_flip_prob = cfg.get_double("train.warm_polarity_flip_prob", c.warm_polarity_flip_prob);
  c.validate();
  return c;
}

ModelConfig model_config_from(const KeyValueConfig& cfg) {
  for (const auto& [k, v] : cfg.values()) {
    static const std::set<std::string> known{"model.n_layers",   "model.n_heads", "model.d_model", "model.d_ff",
                                             "model.vocab_size", "model.max_seq", "model.precision"};
    if (k.starts_with("model.") && !known.count(k)) throw ConfigError("unknown key \"" + k + "\"", cfg.line_of(k));
  }
  ModelConfig m;
  m.n_layers = static_cast<int>(cfg.get_int("model.n_layers", m.n_layers));
  m.n_heads = static_cast<int>(cfg.get_int("model.n_heads", m.n_heads));
  m.d_model = static_cast<int>(cfg.get_int("model.d_model", m.d_model));
  m.d_ff = static_cast<int>(cfg.get_int("model.d_ff", m.d_ff));
  m.vocab_size = static_cast<int>(cfg.get_int("model.vocab_size", m.vocab_size));
  m.max_seq = static_cast<int>(cfg.get_int("model.max_seq", m.max_seq));
  const auto prec = cfg.get_string("model.precision", "single");
  if (prec == "single") {
    m.precision = Precision::single;
  } else if (prec == "double") {
    m.precision = Precision::double_;
  } else {
    throw ConfigError("model.precision must be single or double", cfg.line_of("model.precision"));
  }
  m.validate();
  return m;
}

PromptInstance sample_episode(const TrainConfig& config, Rng& rng, int step) {
  const bool warm = step >= 0 && step < config.warm_steps;
  const auto& mixture = warm && !config.warm_mixture.empty() ? config.warm_mixture : config.mixture;
  double u = rng.uniform01();
  TaskFamily family = mixture.rbegin()->first;
  for (const auto& [f, w] : mixture) {
    if (u < w) {
      family = f;
      break;
    }
    u -= w;
  }
  TaskSpec spec = TaskSpec::canonical(family, static_cast<int>(rng.uniform_int(config.demos_min, config.demos_max)));
  switch (family) {
    case TaskFamily::string_length_simple:
    case TaskFamily::string_length_complex:
      spec.threshold = static_cast<int>(rng.uniform_int(config.string_threshold_min, config.string_threshold_max));
      break;
    case TaskFamily::digit:
      spec.threshold = static_cast<int>(rng.uniform_int(config.digit_threshold_min, config.digit_threshold_max));
      break;
    case TaskFamily::grid2d:
      spec.threshold = static_cast<int>(rng.uniform_int(config.grid_threshold_min, config.grid_threshold_max));
      break;
    case TaskFamily::knowledge_surrogate: break;
  }
  spec.polarity = is_categorization(family) && rng.bernoulli(warm ? config.warm_polarity_flip_prob : config.polarity_flip_prob);
  return generate_instance(spec, rng.next_u64());
}

template <typename T>
double episode_loss_and_grad(const Model<T>& model, const PromptInstance& episode, T weight, ParamVector<T>* grads) {
  const std::span<const TokenId> tokens(episode.tokens);
  const auto tape = forward_tape(model, tokens);
  std::vector<std::pair<int, TokenId>> targets;
  for (const auto& d : episode.roles.demos) targets.emplace_back(d.is_pos, episode.tokens[static_cast<std::size_t>(d.answer_pos)]);
  targets.emplace_back(episode.final_is_pos(), episode.gold_answer);

  Matrix<T> dlogits = Matrix<T>::Zero(tape.logits.rows(), tape.logits.cols());
  const T scale = weight / static_cast<T>(targets.size());
  double loss = 0;
  for (const auto& [pos, target] : targets) {
    const auto row = tape.logits.row(pos);
    const T mx = row.maxCoeff();
    const auto e = (row.array() - mx).exp();
    const T sum = e.sum();
    loss += static_cast<double>(mx + std::log(sum) - row(target));
    dlogits.row(pos) = (e / sum).matrix() * scale;
    dlogits(pos, target) -= scale;
  }
  if (grads) backward(model, tape, tokens, dlogits, grads, nullptr);
  return loss / static_cast<double>(targets.size());
}

namespace {

double learning_rate(const TrainConfig& c, int step) {
  if (step < c.warmup_steps) return c.lr_peak * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const double span = std::max(1, c.steps - c.warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup_steps) / span);
  return c.lr_min + 0.5 * (c.lr_peak - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

TrainResult train(const ModelConfig& model_config, const TrainConfig& config,
                  const std::function<void(const LossRecord&)>& on_log) {
  config.validate();
  ModelConfig mc = model_config;
  mc.precision = Precision::single;
  TrainResult result{Model<float>::random(mc, derive_seed(config.seed, 0)), {}, 0.0};
  auto& model = result.model;
  auto& params = model.parameters();
  const std::size_t n = params.size();

  std::vector<char> decays(n, 0);
  for (const auto& t : model.layout().tensors()) {
    const bool is_matrix = t.rows > 1 && t.cols > 1;
    for (std::size_t i = 0; i < t.size(); ++i) decays[t.offset + i] = is_matrix ? 1 : 0;
  }

  ParamVector<float> grads(n), m1(n, 0.0f), m2(n, 0.0f);
  Rng rng(derive_seed(config.seed, 1));
  const std::uint64_t eval_seed = derive_seed(config.seed, 2);

  auto evaluate = [&](LossRecord& rec) {
    if (config.eval_samples == 0) return;
    rec.eval_acc_j1 = eval_accuracy(model, TaskFamily::string_length_simple, 1, config.eval_samples, eval_seed).accuracy;
    rec.eval_acc_j8 = eval_accuracy(model, TaskFamily::string_length_simple, 8, config.eval_samples, eval_seed).accuracy;
    rec.eval_acc_j16 = eval_accuracy(model, TaskFamily::string_length_simple, 16, config.eval_samples, eval_seed).accuracy;
  };

  double interval_loss = 0;
  int interval_steps = 0;
  int diverged_run = 0;
  for (int step = 0; step < config.steps; ++step) {
    std::fill(grads.begin(), grads.end(), 0.0f);
    // every answer target in the batch carries the same weight
    std::vector<PromptInstance> batch;
    std::size_t targets = 0;
    for (int b = 0; b < config.batch_size; ++b) {
      batch.push_back(sample_episode(config, rng, step));
      targets += batch.back().roles.demos.size() + 1;
    }
    double batch_loss = 0;
    for (const auto& episode : batch) {
      const double share = static_cast<double>(episode.roles.demos.size() + 1) / static_cast<double>(targets);
      batch_loss += share * episode_loss_and_grad(model, episode, static_cast<float>(share), &grads);
    }
    if (!std::isfinite(batch_loss)) {
      throw TrainingFailure("non-finite loss at step " + std::to_string(step));
    }
    if (step == 0) result.initial_loss = batch_loss;
    if (batch_loss > 10.0 * result.initial_loss) {
      if (++diverged_run >= 500) {
        std::ostringstream os;
        os << "training diverged: loss " << batch_loss << " above 10x initial " << result.initial_loss
           << " for 500 consecutive steps (step " << step << ", lr " << learning_rate(config, step) << ")";
        throw TrainingFailure(os.str());
      }
    } else {
      diverged_run = 0;
    }

    double norm2 = 0;
    for (float g : grads) norm2 += static_cast<double>(g) * g;
    const double norm = std::sqrt(norm2);
    const float clip = norm > config.grad_clip ? static_cast<float>(config.grad_clip / norm) : 1.0f;

    const double lr = learning_rate(config, step);
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1);
    const float b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
    const float step_size = static_cast<float>(lr / bc1);
    const float inv_bc2 = static_cast<float>(1.0 / bc2);
    const float eps = static_cast<float>(config.adam_eps);
    const float decay = static_cast<float>(lr * config.weight_decay);
    for (std::size_t i = 0; i < n; ++i) {
      const float g = grads[i] * clip;
      m1[i] = b1 * m1[i] + (1.0f - b1) * g;
      m2[i] = b2 * m2[i] + (1.0f - b2) * g * g;
      if (decays[i]) params[i] -= decay * params[i];
      params[i] -= step_size * m1[i] / (std::sqrt(m2[i] * inv_bc2) + eps);
    }

    interval_loss += batch_loss;
    ++interval_steps;
    const bool last = step + 1 == config.steps;
    if (step == 0 || (step + 1) % config.log_every == 0 || last) {
      LossRecord rec;
      rec.step = step == 0 ? 0 : step + 1;
      rec.loss = interval_loss / interval_steps;
      evaluate(rec);
      result.history.push_back(rec);
      if (on_log) on_log(rec);
      interval_loss = 0;
      interval_steps = 0;
    }
  }
  return result;
}

std::string loss_history_csv(const std::vector<LossRecord>& history) {
  std::ostringstream os;
  os << "step,loss,eval_acc_J1,eval_acc_J8,eval_acc_J16\n";
  os << std::setprecision(6) << std::fixed;
  for (const auto& r : history) {
    os << r.step << ',' << r.loss << ',' << r.eval_acc_j1 << ',' << r.eval_acc_j8 << ',' << r.eval_acc_j16 << '\n';
  }
  return os.str();
}

AccuracyResult make_accuracy(long long correct, int n) {
  AccuracyResult r;
  r.correct = correct;
  r.n = n;
  if (n > 0) {
    r.accuracy = static_cast<double>(correct) / n;
    r.stderr_ = std::sqrt(r.accuracy * (1.0 - r.accuracy) / n);
  }
  return r;
}

template <typename T>
AccuracyResult eval_accuracy(const Model<T>& model, const std::vector<PromptInstance>& dataset, int workers) {
  const int n = static_cast<int>(dataset.size());
  const long long correct = parallel_count(n, workers, [&](int i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto trace = forward(model, std::span<const TokenId>(inst.tokens));
    return greedy_answer(trace, inst.final_is_pos()) == inst.gold_answer ? 1 : 0;
  });
  return make_accuracy(correct, n);
}

template <typename T>
AccuracyResult eval_accuracy(const Model<T>& model, TaskFamily family, int n_demos, int n_samples, std::uint64_t seed,
                             int workers) {
  return eval_accuracy(model, generate_dataset(TaskSpec::canonical(family, n_demos, seed), n_samples), workers);
}

template double episode_loss_and_grad(const Model<float>&, const PromptInstance&, float, ParamVector<float>*);
template double episode_loss_and_grad(const Model<double>&, const PromptInstance&, double, ParamVector<double>*);
template AccuracyResult eval_accuracy(const Model<float>&, const std::vector<PromptInstance>&, int);
template AccuracyResult eval_accuracy(const Model<double>&, const std::vector<PromptInstance>&, int);
template AccuracyResult eval_accuracy(const Model<float>&, TaskFamily, int, int, std::uint64_t, int);
template AccuracyResult eval_accuracy(const Model<double>&, TaskFamily, int, int, std::uint64_t, int);

}  // namespace iclprobe
