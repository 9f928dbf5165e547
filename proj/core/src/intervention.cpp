#include "iclprobe/intervention.hpp"

#include "iclprobe/errors.hpp"
#include "iclprobe/parallel.hpp"
#include "iclprobe/rng.hpp"

namespace iclprobe {

namespace {

template <typename T>
std::vector<double> row_vector(const Matrix<T>& m, int row) {
  std::vector<double> v(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(c)] = static_cast<double>(m(row, c));
  return v;
}

void check_layers(const std::vector<int>& layers, int n_layers) {
  if (layers.empty()) throw RangeError("layer list is empty");
  for (int l : layers) {
    if (l < 0 || l > n_layers) throw RangeError("layer " + std::to_string(l) + " outside [0, " + std::to_string(n_layers) + "]");
  }
}

std::vector<AccuracyResult> tally(const std::vector<std::vector<char>>& hits, std::size_t n_cols) {
  std::vector<AccuracyResult> out;
  for (std::size_t c = 0; c < n_cols; ++c) {
    long long correct = 0;
    for (const auto& row : hits) correct += row[c];
    out.push_back(make_accuracy(correct, static_cast<int>(hits.size())));
  }
  return out;
}

}  // namespace

template <typename T>
PatchSet capture(const ActivationTrace<T>& trace, const std::vector<PatchAddress>& addresses, std::string provenance) {
  PatchSet out;
  out.provenance = std::move(provenance);
  for (const auto& a : addresses) {
    if (a.layer < 0 || a.layer >= static_cast<int>(trace.hidden.size())) {
      throw RangeError("capture layer " + std::to_string(a.layer) + " out of range");
    }
    if (a.position < 0 || a.position >= trace.seq_len()) {
      throw RangeError("capture position " + std::to_string(a.position) + " out of range");
    }
    out.set(a, row_vector(trace.hidden[static_cast<std::size_t>(a.layer)], a.position));
  }
  return out;
}

template <typename T>
ActivationTrace<T> run_with_patch(const Model<T>& model, std::span<const TokenId> tokens, const PatchSet& patch,
                                  PatchSite site) {
  ForwardOptions<T> options;
  options.patch = &patch;
  options.site = site;
  return forward(model, tokens, options);
}

PatchSet answer_ablation_patch(const PromptInstance& instance, int k, int layer, int d_model) {
  if (k < 0 || k > instance.n_demos()) {
    throw RangeError("cannot ablate " + std::to_string(k) + " answers of a " + std::to_string(instance.n_demos()) +
                     "-demonstration prompt");
  }
  PatchSet p;
  p.provenance = "ablate k=" + std::to_string(k);
  for (int j = 0; j < k; ++j) {
    p.set({layer, instance.roles.demos[static_cast<std::size_t>(j)].answer_pos},
          std::vector<double>(static_cast<std::size_t>(d_model), 0.0));
  }
  return p;
}

template <typename T>
ActivationTrace<T> ablate_answers(const Model<T>& model, const PromptInstance& instance, int k, int layer) {
  return run_with_patch(model, std::span<const TokenId>(instance.tokens),
                        answer_ablation_patch(instance, k, layer, model.config().d_model));
}

std::vector<double> mean_vector(const std::vector<std::vector<double>>& vectors) {
  if (vectors.empty()) throw RangeError("mean of an empty vector set");
  std::vector<double> mean(vectors.front().size(), 0.0);
  for (const auto& v : vectors) {
    if (v.size() != mean.size()) throw RangeError("vectors differ in length");
    for (std::size_t i = 0; i < v.size(); ++i) mean[i] += v[i];
  }
  for (auto& x : mean) x /= static_cast<double>(vectors.size());
  return mean;
}

template <typename T>
std::vector<AccuracyResult> task_vector_sweep(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                              const std::vector<PromptInstance>& recipients,
                                              const std::vector<int>& layers, bool averaged, int workers) {
  if (donors.empty()) throw RangeError("task-vector protocol needs at least one donor");
  if (!averaged && donors.size() != recipients.size()) {
    throw RangeError("non-averaged task vectors need one donor per recipient");
  }
  check_layers(layers, model.config().n_layers);
  const int n_donors = static_cast<int>(donors.size());

  // vectors[i][li]
  std::vector<std::vector<std::vector<double>>> vectors(static_cast<std::size_t>(n_donors));
  parallel_for(n_donors, workers, [&](int i) {
    const auto& d = donors[static_cast<std::size_t>(i)];
    const auto trace = forward(model, std::span<const TokenId>(d.tokens));
    auto& slot = vectors[static_cast<std::size_t>(i)];
    for (int l : layers) slot.push_back(row_vector(trace.hidden[static_cast<std::size_t>(l)], d.final_is_pos()));
  });

  std::vector<std::vector<double>> averages;
  if (averaged) {
    for (std::size_t li = 0; li < layers.size(); ++li) {
      std::vector<std::vector<double>> per_layer;
      per_layer.reserve(vectors.size());
      for (const auto& v : vectors) per_layer.push_back(v[li]);
      averages.push_back(mean_vector(per_layer));
    }
  }

  const int n = static_cast<int>(recipients.size());
  std::vector<std::vector<char>> hits(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const auto& r = recipients[static_cast<std::size_t>(i)];
    const auto clean = forward(model, std::span<const TokenId>(r.tokens));
    auto& row = hits[static_cast<std::size_t>(i)];
    for (std::size_t li = 0; li < layers.size(); ++li) {
      PatchSet p;
      p.set({layers[li], r.final_is_pos()}, averaged ? averages[li] : vectors[static_cast<std::size_t>(i)][li]);
      const auto logits = forward_from(model, layers[li], clean.hidden[static_cast<std::size_t>(layers[li])], &p);
      row.push_back(argmax_row(logits, r.final_is_pos()) == r.gold_answer ? 1 : 0);
    }
  });
  return tally(hits, layers.size());
}

template <typename T>
AccuracyResult protocol_task_vector(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                    const std::vector<PromptInstance>& recipients, int layer, bool averaged,
                                    int workers) {
  return task_vector_sweep(model, donors, recipients, {layer}, averaged, workers).front();
}

template <typename T>
std::vector<AccuracyResult> rule_vector_sweep(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                              const std::vector<PromptInstance>& recipients,
                                              const std::vector<int>& layers, int m, int workers) {
  if (donors.size() != recipients.size()) throw RangeError("rule-vector protocol needs one recipient per donor");
  check_layers(layers, model.config().n_layers);
  for (std::size_t i = 0; i < donors.size(); ++i) {
    if (donors[i].n_demos() != recipients[i].n_demos()) {
      throw RangeError("donor and recipient " + std::to_string(i) + " hold different numbers of demonstrations");
    }
    if (m < 0 || m > donors[i].n_demos()) throw RangeError("m = " + std::to_string(m) + " outside [0, J]");
  }
  const int n = static_cast<int>(donors.size());
  std::vector<std::vector<char>> hits(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const auto& d = donors[static_cast<std::size_t>(i)];
    const auto& r = recipients[static_cast<std::size_t>(i)];
    const auto donor_trace = forward(model, std::span<const TokenId>(d.tokens));
    const auto clean = forward(model, std::span<const TokenId>(r.tokens));
    auto& row = hits[static_cast<std::size_t>(i)];
    for (int l : layers) {
      PatchSet p;
      p.provenance = "rule-vectors";
      for (int j = 0; j < m; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        p.set({l, r.roles.demos[uj].answer_pos},
              row_vector(donor_trace.hidden[static_cast<std::size_t>(l)], d.roles.demos[uj].answer_pos));
      }
      const auto logits = forward_from(model, l, clean.hidden[static_cast<std::size_t>(l)], &p);
      row.push_back(argmax_row(logits, r.final_is_pos()) == r.gold_answer ? 1 : 0);
    }
  });
  return tally(hits, layers.size());
}

template <typename T>
AccuracyResult protocol_rule_vectors(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                     const std::vector<PromptInstance>& recipients, int layer, int m, int workers) {
  return rule_vector_sweep(model, donors, recipients, {layer}, m, workers).front();
}

template <typename T>
std::vector<AccuracyResult> ablation_sweep(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                           int layer, const std::vector<int>& ks, int workers) {
  check_layers({layer}, model.config().n_layers);
  for (const auto& inst : dataset) {
    for (int k : ks) {
      if (k < 0 || k > inst.n_demos()) throw RangeError("k = " + std::to_string(k) + " outside [0, J]");
    }
  }
  const int n = static_cast<int>(dataset.size());
  std::vector<std::vector<char>> hits(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto clean = forward(model, std::span<const TokenId>(inst.tokens));
    auto& row = hits[static_cast<std::size_t>(i)];
    for (int k : ks) {
      const auto p = answer_ablation_patch(inst, k, layer, model.config().d_model);
      const auto logits = forward_from(model, layer, clean.hidden[static_cast<std::size_t>(layer)], &p);
      row.push_back(argmax_row(logits, inst.final_is_pos()) == inst.gold_answer ? 1 : 0);
    }
  });
  return tally(hits, ks.size());
}

std::vector<PromptInstance> zero_shot_recipients(const TaskSpec& spec, int n, std::uint64_t seed) {
  TaskSpec zero = spec;
  zero.n_demos = 0;
  zero.seed = seed;
  return generate_dataset(zero, n);
}

std::vector<PromptInstance> random_answer_recipients(const std::vector<PromptInstance>& donors, std::uint64_t seed) {
  std::vector<PromptInstance> out;
  out.reserve(donors.size());
  for (std::size_t i = 0; i < donors.size(); ++i) {
    out.push_back(make_dummy(donors[i], DummyMode::random_answers, derive_seed(seed, i)).prompt);
  }
  return out;
}

#define ICLPROBE_INSTANTIATE(T)                                                                                    \
  template PatchSet capture(const ActivationTrace<T>&, const std::vector<PatchAddress>&, std::string);             \
  template ActivationTrace<T> run_with_patch(const Model<T>&, std::span<const TokenId>, const PatchSet&, PatchSite); \
  template ActivationTrace<T> ablate_answers(const Model<T>&, const PromptInstance&, int, int);                    \
  template std::vector<AccuracyResult> task_vector_sweep(const Model<T>&, const std::vector<PromptInstance>&,      \
                                                         const std::vector<PromptInstance>&, const std::vector<int>&, \
                                                         bool, int);                                               \
  template AccuracyResult protocol_task_vector(const Model<T>&, const std::vector<PromptInstance>&,                \
                                               const std::vector<PromptInstance>&, int, bool, int);                \
  template std::vector<AccuracyResult> rule_vector_sweep(const Model<T>&, const std::vector<PromptInstance>&,      \
                                                         const std::vector<PromptInstance>&, const std::vector<int>&, \
                                                         int, int);                                                \
  template AccuracyResult protocol_rule_vectors(const Model<T>&, const std::vector<PromptInstance>&,               \
                                                const std::vector<PromptInstance>&, int, int, int);                \
  template std::vector<AccuracyResult> ablation_sweep(const Model<T>&, const std::vector<PromptInstance>&, int,    \
                                                      const std::vector<int>&, int);

ICLPROBE_INSTANTIATE(float)
ICLPROBE_INSTANTIATE(double)

}  // namespace iclprobe
