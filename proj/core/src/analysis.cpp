#include "iclprobe/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "iclprobe/errors.hpp"
#include "iclprobe/intervention.hpp"
#include "iclprobe/parallel.hpp"
#include "iclprobe/rng.hpp"

namespace iclprobe {

using Eigen::MatrixXd;
using Eigen::VectorXd;

template <typename T>
SaliencyMap saliency(const ActivationTrace<T>& trace, const AttnGrads<T>& grads) {
  if (trace.attn.size() != grads.grads.size()) throw RangeError("trace and gradients differ in layer count");
  SaliencyMap out;
  for (std::size_t l = 0; l < trace.attn.size(); ++l) {
    const auto& heads = trace.attn[l];
    if (heads.size() != grads.grads[l].size()) throw RangeError("trace and gradients differ in head count");
    const auto seq = heads.front().rows();
    MatrixXd acc = MatrixXd::Zero(seq, seq);
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const auto& g = grads.grads[l][h];
      if (g.rows() != seq || g.cols() != seq) throw RangeError("gradient shape does not match attention");
      acc += heads[h].template cast<double>().cwiseProduct(g.template cast<double>());
    }
    out.layers.push_back(acc.cwiseAbs());
  }
  return out;
}

template <typename T>
SaliencyMap instance_saliency(const Model<T>& model, const PromptInstance& instance) {
  const std::span<const TokenId> tokens(instance.tokens);
  const auto trace = forward(model, tokens);
  const auto grads = attention_grads(model, tokens, instance.gold_answer, instance.final_is_pos());
  return saliency(trace, grads);
}

std::vector<double> saliency_answer_profile(const SaliencyMap& map, const PromptInstance& instance, int layer) {
  if (layer < 0 || layer >= static_cast<int>(map.layers.size())) {
    throw RangeError("saliency layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(map.layers.size()) + ")");
  }
  const auto& m = map.layers[static_cast<std::size_t>(layer)];
  const int row = instance.final_is_pos();
  std::vector<double> out;
  for (const auto& d : instance.roles.demos) out.push_back(m(row, d.answer_pos));
  return out;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&v](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw RangeError("spearman inputs differ in length");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

template <typename T>
std::vector<AccuracyResult> per_layer_accuracy(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                               int workers) {
  const int n_layers = model.config().n_layers;
  const int n = static_cast<int>(dataset.size());
  std::vector<std::vector<char>> hits(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto trace = forward(model, std::span<const TokenId>(inst.tokens));
    auto& row = hits[static_cast<std::size_t>(i)];
    for (int l = 0; l <= n_layers; ++l) {
      const auto logits = logit_lens(model, trace, l);
      row.push_back(argmax_row(logits, inst.final_is_pos()) == inst.gold_answer ? 1 : 0);
    }
  });
  std::vector<AccuracyResult> out;
  for (int l = 0; l <= n_layers; ++l) {
    long long correct = 0;
    for (const auto& row : hits) correct += row[static_cast<std::size_t>(l)];
    out.push_back(make_accuracy(correct, n));
  }
  return out;
}

int max_jump_layer(const std::vector<double>& accuracy) {
  if (accuracy.size() < 2) throw RangeError("need at least two layers to find a jump");
  int best = 1;
  double best_jump = accuracy[1] - accuracy[0];
  for (std::size_t l = 2; l < accuracy.size(); ++l) {
    const double jump = accuracy[l] - accuracy[l - 1];
    if (jump > best_jump) {
      best_jump = jump;
      best = static_cast<int>(l);
    }
  }
  return best;
}

ClusterStats cluster_stats(const MatrixXd& points) {
  const auto n = points.rows();
  const auto k = points.cols();
  if (n < 2) throw ParameterDomainError("covariance needs at least two points");
  ClusterStats s;
  s.count = static_cast<int>(n);
  s.mean = points.colwise().mean().transpose();
  const MatrixXd centered = points.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  const double lambda = 1e-6 * s.cov.trace() / static_cast<double>(k);
  s.cov.diagonal().array() += lambda;
  return s;
}

double mahalanobis(const VectorXd& x, const ClusterStats& stats) {
  if (x.size() != stats.mean.size() || stats.cov.rows() != x.size() || stats.cov.cols() != x.size()) {
    throw RangeError("mahalanobis: dimension mismatch");
  }
  const Eigen::LLT<MatrixXd> llt(stats.cov);
  if (llt.info() != Eigen::Success) throw ConditioningError("covariance is not positive definite");
  const VectorXd z = llt.matrixL().solve(x - stats.mean);
  return z.norm();
}

double cluster_separation(const MatrixXd& points, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(points.rows()) != labels.size()) throw RangeError("one label per point required");
  std::map<int, std::vector<Eigen::Index>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Eigen::Index>(i));
  if (members.size() < 2) throw ParameterDomainError("cluster separation needs at least two clusters");
  const auto k = points.cols();
  for (const auto& [label, idx] : members) {
    if (static_cast<Eigen::Index>(idx.size()) < k + 1) {
      throw ParameterDomainError("cluster " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                                 " members; need at least " + std::to_string(k + 1));
    }
  }
  double total = 0;
  for (const auto& [label, idx] : members) {
    MatrixXd cluster(static_cast<Eigen::Index>(idx.size()), k);
    for (std::size_t r = 0; r < idx.size(); ++r) cluster.row(static_cast<Eigen::Index>(r)) = points.row(idx[r]);
    const auto stats = cluster_stats(cluster);
    double sum = 0;
    long long count = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) continue;
      sum += mahalanobis(points.row(static_cast<Eigen::Index>(i)).transpose(), stats);
      ++count;
    }
    total += sum / static_cast<double>(count);
  }
  return total / static_cast<double>(members.size());
}

namespace {

// Flips each row so its largest-magnitude entry is positive.
void canonical_signs(MatrixXd& rows) {
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    Eigen::Index arg = 0;
    rows.row(r).cwiseAbs().maxCoeff(&arg);
    if (rows(r, arg) < 0) rows.row(r) *= -1.0;
  }
}

}  // namespace

PcaResult pca_project(const MatrixXd& x, int k) {
  const auto n = x.rows();
  const auto p = x.cols();
  if (k < 1 || k >= std::min(n, p)) {
    throw RangeError("pca components k=" + std::to_string(k) + " must satisfy 1 <= k < min(n, p)");
  }
  PcaResult out;
  out.mean = x.colwise().mean().transpose();
  const MatrixXd centered = x.rowwise() - out.mean.transpose();
  const Eigen::BDCSVD<MatrixXd> svd(centered, Eigen::ComputeThinV);
  out.components = svd.matrixV().leftCols(k).transpose();
  canonical_signs(out.components);
  out.projected = centered * out.components.transpose();
  out.explained_variance = svd.singularValues().head(k).array().square() / static_cast<double>(n - 1);
  return out;
}

MatrixXd label_average_matrix(const MatrixXd& centered, const std::vector<int>& labels) {
  if (static_cast<std::size_t>(centered.rows()) != labels.size()) throw RangeError("one label per row required");
  std::map<int, std::pair<VectorXd, int>> sums;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = sums.try_emplace(labels[i], VectorXd::Zero(centered.cols()), 0);
    it->second.first += centered.row(static_cast<Eigen::Index>(i)).transpose();
    it->second.second += 1;
  }
  MatrixXd out(centered.rows(), centered.cols());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& [sum, count] = sums.at(labels[i]);
    out.row(static_cast<Eigen::Index>(i)) = (sum / static_cast<double>(count)).transpose();
  }
  return out;
}

SubspaceModel dpca_fit(const MatrixXd& x, const std::vector<int>& labels, int d, double ridge, std::string variable) {
  const auto p = x.cols();
  if (d < 1 || d >= p) throw RangeError("dPCA components d=" + std::to_string(d) + " must satisfy 1 <= d < p");
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw RangeError("one label per row required");
  SubspaceModel m;
  m.variable = std::move(variable);
  m.components = d;
  m.mean = x.colwise().mean().transpose();
  const MatrixXd xc = x.rowwise() - m.mean.transpose();

  const bool single_label = std::all_of(labels.begin(), labels.end(), [&](int l) { return l == labels.front(); });
  if (single_label) {
    m.compression = MatrixXd::Zero(d, p);
    m.decompression = MatrixXd::Zero(p, d);
    m.warning = "all rows share one label: the label-average matrix is zero";
    return m;
  }

  const MatrixXd xl = label_average_matrix(xc, labels);
  MatrixXd gram = xc.transpose() * xc;
  const double scale = gram.trace() / static_cast<double>(p);
  if (ridge == 0.0) {
    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
    const double lo = eig.eigenvalues().minCoeff();
    const double hi = eig.eigenvalues().maxCoeff();
    if (!(hi > 0) || lo <= 1e-12 * hi) {
      const double suggested = 1e-3 * std::max(scale, 1e-12);
      throw ConditioningError("X^T X is singular (eigenvalue ratio " + std::to_string(hi > 0 ? lo / hi : 0.0) +
                                  "); retry with ridge ~ " + std::to_string(suggested),
                              suggested);
    }
  } else {
    gram.diagonal().array() += ridge;
  }
  const MatrixXd coef = gram.ldlt().solve(xc.transpose() * xl);  // [p][p]
  const MatrixXd fitted = xc * coef;
  const Eigen::BDCSVD<MatrixXd> svd(fitted, Eigen::ComputeThinV);
  MatrixXd v = svd.matrixV().leftCols(d).transpose();  // [d][p]
  canonical_signs(v);
  m.decompression = v.transpose();
  m.compression = (coef * m.decompression).transpose();
  return m;
}

double dpca_objective(const MatrixXd& x, const std::vector<int>& labels, const SubspaceModel& model) {
  const MatrixXd xc = x.rowwise() - model.mean.transpose();
  const MatrixXd xl = label_average_matrix(xc, labels);
  return (xl - xc * model.compression.transpose() * model.decompression.transpose()).squaredNorm();
}

MatrixXd nullspace_ablate(const MatrixXd& x, const SubspaceModel& model) {
  const auto p = model.compression.cols();
  if (x.cols() != p || model.mean.size() != p) throw RangeError("data and subspace model differ in dimension");
  const Eigen::JacobiSVD<MatrixXd> svd(model.compression, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double tol = sv.size() ? std::max<double>(static_cast<double>(p) * sv.maxCoeff() * 1e-12, 0.0) : 0.0;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > tol ? 1 : 0;
  if (rank >= p) throw ConditioningError("compression matrix has full column rank: its null space is empty");
  const MatrixXd basis = svd.matrixV().rightCols(p - rank);  // B, [p][p-rank]
  const MatrixXd gram = basis.transpose() * basis;
  const MatrixXd projector = basis * gram.ldlt().solve(basis.transpose());
  const MatrixXd centered = x.rowwise() - model.mean.transpose();
  MatrixXd out = centered * projector;
  out.rowwise() += model.mean.transpose();
  return out;
}

ProbeResult linear_probe(const MatrixXd& x, const std::vector<int>& labels, double train_fraction, std::uint64_t seed,
                         double ridge) {
  const auto n = x.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw RangeError("one label per row required");
  std::vector<int> classes(labels.begin(), labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  }
  const auto n_train = static_cast<Eigen::Index>(std::floor(train_fraction * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) throw RangeError("probe split leaves an empty partition");

  const auto p = x.cols();
  const auto c = static_cast<Eigen::Index>(classes.size());
  auto class_index = [&classes](int label) {
    return static_cast<Eigen::Index>(std::lower_bound(classes.begin(), classes.end(), label) - classes.begin());
  };
  MatrixXd a(n_train, p + 1);
  MatrixXd y = MatrixXd::Zero(n_train, c);
  for (Eigen::Index i = 0; i < n_train; ++i) {
    const auto r = order[static_cast<std::size_t>(i)];
    a.row(i) << x.row(r), 1.0;
    y(i, class_index(labels[static_cast<std::size_t>(r)])) = 1.0;
  }
  MatrixXd gram = a.transpose() * a;
  gram.diagonal().head(p).array() += ridge * std::max(gram.diagonal().head(p).mean(), 1e-12);
  const MatrixXd w = gram.ldlt().solve(a.transpose() * y);

  ProbeResult out;
  out.n_test = static_cast<int>(n - n_train);
  std::map<int, int> test_counts;
  long long correct = 0;
  for (Eigen::Index i = n_train; i < n; ++i) {
    const auto r = order[static_cast<std::size_t>(i)];
    Eigen::RowVectorXd row(p + 1);
    row << x.row(r), 1.0;
    Eigen::Index pred = 0;
    (row * w).maxCoeff(&pred);
    const int label = labels[static_cast<std::size_t>(r)];
    correct += pred == class_index(label) ? 1 : 0;
    test_counts[label] += 1;
  }
  int majority = 0;
  for (const auto& [label, count] : test_counts) majority = std::max(majority, count);
  out.accuracy = static_cast<double>(correct) / out.n_test;
  out.chance = static_cast<double>(majority) / out.n_test;
  out.stderr_ = std::sqrt(out.chance * (1.0 - out.chance) / out.n_test);
  return out;
}

std::string_view to_string(RuleVariable v) { return v == RuleVariable::answer ? "answer" : "string-length"; }

RuleVariable parse_rule_variable(std::string_view s) {
  if (s == "answer") return RuleVariable::answer;
  if (s == "string-length") return RuleVariable::string_length;
  throw ParameterDomainError("unknown rule variable \"" + std::string(s) + "\" (expected string-length or answer)");
}

template <typename T>
RuleVectorSet collect_rule_vectors(const Model<T>& model, const std::vector<PromptInstance>& dataset, int layer,
                                   int workers) {
  if (layer < 0 || layer > model.config().n_layers) throw RangeError("layer out of range");
  const int n = static_cast<int>(dataset.size());
  std::vector<MatrixXd> per_instance(static_cast<std::size_t>(n));
  parallel_for(n, workers, [&](int i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto trace = forward(model, std::span<const TokenId>(inst.tokens));
    const auto& h = trace.hidden[static_cast<std::size_t>(layer)];
    MatrixXd rows(inst.n_demos(), h.cols());
    for (int j = 0; j < inst.n_demos(); ++j) {
      rows.row(j) = h.row(inst.roles.demos[static_cast<std::size_t>(j)].answer_pos).template cast<double>();
    }
    per_instance[static_cast<std::size_t>(i)] = std::move(rows);
  });
  RuleVectorSet out;
  Eigen::Index total = 0;
  for (const auto& m : per_instance) total += m.rows();
  out.vectors.resize(total, model.config().d_model);
  Eigen::Index r = 0;
  for (int i = 0; i < n; ++i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto& rows = per_instance[static_cast<std::size_t>(i)];
    for (int j = 0; j < inst.n_demos(); ++j, ++r) {
      out.vectors.row(r) = rows.row(j);
      out.string_length.push_back(inst.roles.demos[static_cast<std::size_t>(j)].query.length());
      out.answer.push_back(inst.tokens[static_cast<std::size_t>(inst.roles.demos[static_cast<std::size_t>(j)].answer_pos)]);
      out.origin.emplace_back(i, j);
    }
  }
  return out;
}

template <typename T>
RemovalResult information_removal_experiment(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                             int layer, RuleVariable variable, int d, std::uint64_t probe_seed,
                                             int workers) {
  const auto set = collect_rule_vectors(model, dataset, layer, workers);
  const auto& labels = set.labels(variable);
  MatrixXd ablated = set.vectors;
  if (d > 0) {
    const auto fit = dpca_fit(set.vectors, labels, d, 0.0, std::string(to_string(variable)));
    ablated = nullspace_ablate(set.vectors, fit);
  }

  std::vector<Eigen::Index> first_row(dataset.size() + 1, 0);
  for (std::size_t i = 0; i < dataset.size(); ++i) first_row[i + 1] = first_row[i] + dataset[i].n_demos();

  const int n = static_cast<int>(dataset.size());
  const long long correct = parallel_count(n, workers, [&](int i) {
    const auto& inst = dataset[static_cast<std::size_t>(i)];
    const auto clean = forward(model, std::span<const TokenId>(inst.tokens));
    PatchSet p;
    p.provenance = "dpca-removal";
    for (int j = 0; j < inst.n_demos(); ++j) {
      const auto row = ablated.row(first_row[static_cast<std::size_t>(i)] + j);
      p.set({layer, inst.roles.demos[static_cast<std::size_t>(j)].answer_pos}, std::vector<double>(row.begin(), row.end()));
    }
    const auto logits = forward_from(model, layer, clean.hidden[static_cast<std::size_t>(layer)], &p);
    return argmax_row(logits, inst.final_is_pos()) == inst.gold_answer ? 1 : 0;
  });

  RemovalResult out;
  out.accuracy = make_accuracy(correct, n);
  out.probe = linear_probe(ablated, labels, 0.5, probe_seed);
  return out;
}

#define ICLPROBE_INSTANTIATE(T)                                                                                 \
  template SaliencyMap saliency(const ActivationTrace<T>&, const AttnGrads<T>&);                                \
  template SaliencyMap instance_saliency(const Model<T>&, const PromptInstance&);                              \
  template std::vector<AccuracyResult> per_layer_accuracy(const Model<T>&, const std::vector<PromptInstance>&, \
                                                          int);                                                 \
  template RuleVectorSet collect_rule_vectors(const Model<T>&, const std::vector<PromptInstance>&, int, int);  \
  template RemovalResult information_removal_experiment(const Model<T>&, const std::vector<PromptInstance>&,   \
                                                        int, RuleVariable, int, std::uint64_t, int);

ICLPROBE_INSTANTIATE(float)
ICLPROBE_INSTANTIATE(double)

}  // namespace iclprobe
