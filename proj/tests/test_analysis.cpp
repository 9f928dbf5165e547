#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "iclprobe/analysis.hpp"
#include "iclprobe/errors.hpp"
#include "iclprobe/intervention.hpp"
#include "iclprobe/rng.hpp"

using namespace iclprobe;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd gaussian(int rows, int cols, Rng& rng) {
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  }
  return m;
}

ModelConfig tiny(int layers = 2, int heads = 2) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = 16;
  c.d_ff = 32;
  return c;
}

double max_abs(const MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace

TEST_CASE("saliency with zero gradients is zero") {
  const auto model = Model<double>::random(tiny(), 1);
  const auto inst = generate_instance(TaskSpec::canonical(TaskFamily::digit, 3, 1), 2);
  const auto trace = forward(model, std::span<const TokenId>(inst.tokens));
  AttnGrads<double> g;
  for (const auto& layer : trace.attn) {
    std::vector<Matrix<double>> heads;
    for (const auto& a : layer) heads.push_back(Matrix<double>::Zero(a.rows(), a.cols()));
    g.grads.push_back(heads);
  }
  for (const auto& m : saliency(trace, g).layers) CHECK(max_abs(m) == 0.0);
  g.grads.pop_back();
  CHECK_THROWS_AS(saliency(trace, g), RangeError);
}

TEST_CASE("saliency equals the elementwise product, single head") {
  const auto model = Model<double>::random(tiny(2, 1), 2);
  const auto inst = generate_instance(TaskSpec::canonical(TaskFamily::string_length_simple, 3, 1), 2);
  const std::span<const TokenId> tokens(inst.tokens);
  const auto trace = forward(model, tokens);
  const auto grads = attention_grads(model, tokens, inst.gold_answer, inst.final_is_pos());
  const auto map = saliency(trace, grads);
  for (int l = 0; l < 2; ++l) {
    const auto& a = trace.attn[static_cast<std::size_t>(l)][0];
    const auto& g = grads.grads[static_cast<std::size_t>(l)][0];
    const auto& m = map.layers[static_cast<std::size_t>(l)];
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
      for (Eigen::Index c = 0; c < a.cols(); ++c) CHECK(m(r, c) == std::abs(a(r, c) * g(r, c)));
    }
  }
}

TEST_CASE("multi-head saliency is the magnitude of the summed per-head products") {
  const auto model = Model<double>::random(tiny(2, 4), 3);
  const auto inst = generate_instance(TaskSpec::canonical(TaskFamily::grid2d, 3, 1), 2);
  const std::span<const TokenId> tokens(inst.tokens);
  const auto trace = forward(model, tokens);
  const auto grads = attention_grads(model, tokens, inst.gold_answer, inst.final_is_pos());
  const auto map = saliency(trace, grads);
  for (int l = 0; l < 2; ++l) {
    MatrixXd sum = MatrixXd::Zero(trace.attn[0][0].rows(), trace.attn[0][0].cols());
    for (int h = 0; h < 4; ++h) {
      sum += trace.attn[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)].cwiseProduct(
          grads.grads[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]);
    }
    const auto& m = map.layers[static_cast<std::size_t>(l)];
    CHECK(max_abs(m - sum.cwiseAbs()) <= 1e-15);
    CHECK(m.minCoeff() >= 0.0);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = r + 1; c < m.cols(); ++c) CHECK(m(r, c) == 0.0);
    }
  }
}

TEST_CASE("answer profile reads the final row at each answer position") {
  const auto model = Model<float>::random(tiny(), 4);
  const auto inst = generate_instance(TaskSpec::canonical(TaskFamily::string_length_complex, 4, 1), 5);
  // Swap the first two demonstrations and recompute on the permuted prompt.
  std::vector<std::pair<std::string, char>> demos;
  for (int j = 0; j < 4; ++j) demos.emplace_back(inst.demo_query(j), inst.demo_answer(j));
  std::swap(demos[0], demos[1]);
  const auto permuted = assemble_prompt(inst.spec, demos, inst.final_query());
  for (const auto* p : {&inst, &permuted}) {
    const auto map = instance_saliency(model, *p);
    for (int l = 0; l < 2; ++l) {
      const auto profile = saliency_answer_profile(map, *p, l);
      REQUIRE(profile.size() == 4);
      for (int j = 0; j < 4; ++j) {
        CHECK(profile[static_cast<std::size_t>(j)] ==
              map.layers[static_cast<std::size_t>(l)](p->final_is_pos(), p->roles.demos[static_cast<std::size_t>(j)].answer_pos));
        CHECK(profile[static_cast<std::size_t>(j)] >= 0.0);
      }
    }
    CHECK_THROWS_AS(saliency_answer_profile(map, *p, 2), RangeError);
  }
  const auto one = generate_instance(TaskSpec::canonical(TaskFamily::digit, 1, 1), 5);
  const auto single = saliency_answer_profile(instance_saliency(model, one), one, 1);
  CHECK(single.size() == 1);
  CHECK(single[0] >= 0.0);
}

TEST_CASE("spearman rank correlation") {
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
  // Ties get average ranks: x ranks 1,2,3,4; y ranks 1,2.5,2.5,4.
  CHECK(spearman({1, 2, 3, 4}, {1, 2, 2, 3}) == doctest::Approx(0.9486832980505138));
  CHECK_THROWS_AS(spearman({1, 2}, {1}), RangeError);
}

TEST_CASE("mahalanobis closed forms") {
  ClusterStats s;
  s.mean = VectorXd::Zero(2);
  s.cov = MatrixXd::Identity(2, 2);
  CHECK(mahalanobis(s.mean, s) == 0.0);
  VectorXd x(2);
  x << 3, -4;
  CHECK(std::abs(mahalanobis(x, s) - 5.0) <= 1e-12);
  s.cov << 4, 0, 0, 1;
  x << 2, 1;
  CHECK(std::abs(mahalanobis(x, s) - std::sqrt(2.0)) <= 1e-12);
  s.cov << 1, 0, 0, -1;
  CHECK_THROWS_AS(mahalanobis(x, s), ConditioningError);
  CHECK_THROWS_AS(mahalanobis(VectorXd::Zero(3), s), RangeError);
}

TEST_CASE("mahalanobis whitening identity on random SPD matrices") {
  Rng rng(5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(2, 8));
    const MatrixXd a = gaussian(k, k, rng);
    ClusterStats s;
    s.cov = a * a.transpose() + 0.1 * MatrixXd::Identity(k, k);
    s.mean = gaussian(k, 1, rng);
    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(s.cov);
    const MatrixXd root = eig.operatorSqrt();
    const VectorXd u = gaussian(k, 1, rng);
    worst = std::max(worst, std::abs(mahalanobis(s.mean + root * u, s) - u.norm()));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("cluster statistics are regularized sample moments") {
  MatrixXd p(3, 2);
  p << 1, 2, 3, 2, 5, 2;  // second coordinate constant
  const auto s = cluster_stats(p);
  CHECK(s.count == 3);
  CHECK(s.mean(0) == doctest::Approx(3.0));
  const double lambda = 1e-6 * 4.0 / 2.0;
  CHECK(s.cov(0, 0) == doctest::Approx(4.0 + lambda));
  CHECK(s.cov(1, 1) == doctest::Approx(lambda));
  CHECK(s.cov == s.cov.transpose());
  CHECK_NOTHROW(mahalanobis(VectorXd::Ones(2), s));
  CHECK_THROWS_AS(cluster_stats(MatrixXd::Zero(1, 2)), ParameterDomainError);
}

TEST_CASE("cluster separation: separated clouds and the null reference") {
  Rng rng(6);
  const int n = 5000;
  MatrixXd pts(2 * n, 2);
  std::vector<int> labels(2 * n);
  for (int i = 0; i < 2 * n; ++i) {
    pts(i, 0) = rng.normal() + (i < n ? 0.0 : 10.0);
    pts(i, 1) = rng.normal();
    labels[static_cast<std::size_t>(i)] = i < n ? 0 : 1;
  }
  CHECK(std::abs(cluster_separation(pts, labels) - 10.0) / 10.0 < 0.05);

  // Same distribution under both labels: the statistic sits at the in-cluster mean of |u|.
  for (int i = n; i < 2 * n; ++i) pts(i, 0) -= 10.0;
  const double null_expectation = std::sqrt(std::numbers::pi / 2.0);
  CHECK(std::abs(cluster_separation(pts, labels) - null_expectation) / null_expectation < 0.05);

  CHECK_THROWS_AS(cluster_separation(pts, std::vector<int>(2 * n, 0)), ParameterDomainError);
  MatrixXd few(4, 2);
  few << 0, 0, 1, 1, 2, 0, 5, 5;
  CHECK_THROWS_AS(cluster_separation(few, {0, 0, 0, 1}), ParameterDomainError);
}

TEST_CASE("pca projection") {
  Rng rng(7);
  MatrixXd x = MatrixXd::Zero(50, 4);
  for (int i = 0; i < 50; ++i) x(i, 2) = rng.normal() * 3.0 + 1.0;
  auto r = pca_project(x, 1);
  CHECK(std::abs(r.components(0, 2)) >= 1 - 1e-9);
  CHECK(r.components(0, 2) > 0);

  x = gaussian(40, 6, rng) * gaussian(6, 6, rng);
  r = pca_project(x, 5);
  for (int i = 1; i < 5; ++i) CHECK(r.explained_variance(i) <= r.explained_variance(i - 1));
  for (int i = 0; i < 5; ++i) {
    Eigen::Index arg;
    r.components.row(i).cwiseAbs().maxCoeff(&arg);
    CHECK(r.components(i, arg) > 0);
    CHECK(std::abs(r.components.row(i).norm() - 1.0) < 1e-12);
  }

  // Rank-3 data is reproduced exactly by three components.
  const MatrixXd low = gaussian(30, 3, rng) * gaussian(3, 8, rng);
  const auto p3 = pca_project(low, 3);
  const MatrixXd back = (p3.projected * p3.components).rowwise() + p3.mean.transpose();
  CHECK((back - low).norm() / low.norm() <= 1e-9);
  CHECK_THROWS_AS(pca_project(low, 8), RangeError);
  CHECK_THROWS_AS(pca_project(low, 0), RangeError);
}

TEST_CASE("label average matrix") {
  MatrixXd x(4, 2);
  x << 1, 0, 3, 0, 10, 2, 20, 4;
  const auto avg = label_average_matrix(x, {0, 0, 1, 1});
  MatrixXd expected(4, 2);
  expected << 2, 0, 2, 0, 15, 3, 15, 3;
  CHECK(avg == expected);
}

TEST_CASE("dpca recovers a single informative coordinate") {
  Rng rng(8);
  const int n = 400, p = 6;
  MatrixXd x = gaussian(n, p, rng);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = i % 3;
    x(i, 4) = 4.0 * (i % 3) + 0.1 * rng.normal();
  }
  const auto m = dpca_fit(x, labels, 1, 0.0, "toy");
  const VectorXd row = m.compression.row(0).transpose();
  CHECK(std::abs(row(4)) / row.norm() >= 0.99);
  CHECK(m.variable == "toy");
  CHECK(m.components == 1);
  CHECK(m.warning.empty());
}

TEST_CASE("dpca with a single label reports a degenerate fit") {
  Rng rng(9);
  const MatrixXd x = gaussian(30, 4, rng);
  const auto m = dpca_fit(x, std::vector<int>(30, 2), 2);
  CHECK(max_abs(m.compression) == 0.0);
  CHECK_FALSE(m.warning.empty());
  CHECK(dpca_objective(x, std::vector<int>(30, 2), m) <= 1e-20);
}

TEST_CASE("dpca closed form matches gradient descent") {
  Rng rng(10);
  const int n = 20, p = 5, d = 2;
  const MatrixXd x = gaussian(n, p, rng);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, 3));
  const auto fit = dpca_fit(x, labels, d);
  const double closed = dpca_objective(x, labels, fit);

  const MatrixXd xc = x.rowwise() - x.colwise().mean();
  const MatrixXd xl = label_average_matrix(xc, labels);
  MatrixXd D = gaussian(d, p, rng);
  MatrixXd F = gaussian(p, d, rng);
  const double spectral = Eigen::JacobiSVD<MatrixXd>(xc).singularValues()(0);
  const double lr = 0.05 / (spectral * spectral);
  double obj = 0;
  for (int it = 0; it < 400000; ++it) {
    const MatrixXd z = xc * D.transpose();  // [n][d]
    const MatrixXd r = z * F.transpose() - xl;
    obj = r.squaredNorm();
    const MatrixXd gF = 2.0 * r.transpose() * z;
    const MatrixXd gD = 2.0 * (r * F).transpose() * xc;
    F -= lr * gF;
    D -= lr * gD;
  }
  CHECK(closed <= obj * (1 + 1e-9));
  CHECK(std::abs(obj - closed) / closed <= 1e-6);
}

TEST_CASE("dpca is never worse than PCA of the same rank") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const MatrixXd x = gaussian(60, 7, rng);
    std::vector<int> labels(60);
    for (auto& l : labels) l = static_cast<int>(rng.uniform_int(0, 4));
    const int d = static_cast<int>(rng.uniform_int(1, 3));
    const auto fit = dpca_fit(x, labels, d);
    const auto pca = pca_project(x, d);
    const MatrixXd xc = x.rowwise() - pca.mean.transpose();
    const MatrixXd xl = label_average_matrix(xc, labels);
    const double pca_obj = (xl - xc * pca.components.transpose() * pca.components).squaredNorm();
    CHECK(dpca_objective(x, labels, fit) <= pca_obj + 1e-9);
  }
}

TEST_CASE("dpca rejects singular designs with a ridge suggestion") {
  Rng rng(12);
  MatrixXd x = gaussian(40, 4, rng);
  x.col(3) = x.col(0) + x.col(1);
  std::vector<int> labels(40);
  for (int i = 0; i < 40; ++i) labels[static_cast<std::size_t>(i)] = i % 2;
  try {
    dpca_fit(x, labels, 1);
    FAIL("expected ConditioningError");
  } catch (const ConditioningError& e) {
    CHECK(e.suggested_ridge() > 0);
    const auto ok = dpca_fit(x, labels, 1, e.suggested_ridge());
    CHECK(ok.compression.allFinite());
  }
  CHECK_THROWS_AS(dpca_fit(x, labels, 4), RangeError);
  CHECK_THROWS_AS(dpca_fit(x, labels, 0), RangeError);
}

TEST_CASE("null-space ablation: axis case, annihilation and idempotence") {
  SubspaceModel m;
  m.compression = MatrixXd(1, 3);
  m.compression << 1, 0, 0;
  m.mean = VectorXd::Zero(3);
  MatrixXd x(2, 3);
  x << 1, 2, 3, -4, 5, 6;
  MatrixXd expected(2, 3);
  expected << 0, 2, 3, 0, 5, 6;
  CHECK(max_abs(nullspace_ablate(x, m) - expected) <= 1e-15);

  Rng rng(13);
  double worst_res = 0, worst_idem = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int p = static_cast<int>(rng.uniform_int(3, 20));
    const int d = static_cast<int>(rng.uniform_int(1, p - 1));
    SubspaceModel r;
    r.compression = gaussian(d, p, rng);
    r.mean = gaussian(p, 1, rng);
    const MatrixXd data = gaussian(50, p, rng) * 3.0;
    const MatrixXd once = nullspace_ablate(data, r);
    const MatrixXd twice = nullspace_ablate(once, r);
    worst_res = std::max(worst_res, max_abs(r.compression * (once.rowwise() - r.mean.transpose()).transpose()));
    worst_idem = std::max(worst_idem, max_abs(twice - once));
  }
  CHECK(worst_res <= 1e-8);
  CHECK(worst_idem <= 1e-10);

  SubspaceModel full;
  full.compression = MatrixXd::Identity(3, 3);
  full.mean = VectorXd::Zero(3);
  CHECK_THROWS_AS(nullspace_ablate(x, full), ConditioningError);
  CHECK_THROWS_AS(nullspace_ablate(MatrixXd::Zero(2, 4), m), RangeError);
}

TEST_CASE("linear probe decodes a linear label and fails after removal") {
  Rng rng(14);
  const int n = 2000, p = 10;
  MatrixXd x = gaussian(n, p, rng);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(0, 1));
    x.row(i) += (labels[static_cast<std::size_t>(i)] ? 2.0 : -2.0) * VectorXd::Unit(p, 3).transpose();
  }
  const auto before = linear_probe(x, labels, 0.5, 3);
  CHECK(before.accuracy > 0.95);
  CHECK(before.n_test == 1000);
  const auto fit = dpca_fit(x, labels, 1);
  const auto after = linear_probe(nullspace_ablate(x, fit), labels, 0.5, 3);
  CHECK(std::abs(after.accuracy - after.chance) <= 3 * after.stderr_);
  CHECK(linear_probe(x, labels, 0.5, 3).accuracy == before.accuracy);
  CHECK_THROWS_AS(linear_probe(x, labels, 1.0, 3), RangeError);
}

TEST_CASE("per-layer accuracy matches evaluation at the last layer") {
  const auto model = Model<float>::random(tiny(3), 15);
  const auto data = generate_dataset(TaskSpec::canonical(TaskFamily::digit, 4, 6), 300);
  const auto layers = per_layer_accuracy(model, data);
  REQUIRE(layers.size() == 4);
  CHECK(layers.back().correct == eval_accuracy(model, data).correct);
  // An untrained model does not beat chance at any layer.
  for (const auto& a : layers) CHECK(a.accuracy <= 0.5 + 3 * std::sqrt(0.25 / 300));
  CHECK(per_layer_accuracy(model, data, 3)[2].correct == layers[2].correct);
}

TEST_CASE("max jump layer") {
  CHECK(max_jump_layer({0.5, 0.5, 0.6, 0.9, 0.95}) == 3);
  CHECK(max_jump_layer({0.5, 0.75, 1.0}) == 1);
  CHECK_THROWS_AS(max_jump_layer({0.5}), RangeError);
}

TEST_CASE("rule vector collection and empty removal") {
  const auto model = Model<float>::random(tiny(), 16);
  const auto data = generate_dataset(TaskSpec::canonical(TaskFamily::string_length_simple, 4, 7), 60);
  const auto set = collect_rule_vectors(model, data, 1);
  CHECK(set.vectors.rows() == 240);
  CHECK(set.vectors.cols() == 16);
  const auto trace = forward(model, std::span<const TokenId>(data[2].tokens));
  for (int c = 0; c < 16; ++c) {
    CHECK(set.vectors(2 * 4 + 3, c) == static_cast<double>(trace.hidden[1](data[2].roles.demos[3].answer_pos, c)));
  }
  CHECK(set.string_length[2 * 4 + 3] == static_cast<int>(data[2].demo_query(3).size()));
  CHECK(set.answer[2 * 4 + 3] == data[2].tokens[static_cast<std::size_t>(data[2].roles.demos[3].answer_pos)]);
  CHECK(set.origin[2 * 4 + 3] == std::pair{2, 3});

  const auto none = information_removal_experiment(model, data, 1, RuleVariable::string_length, 0, 3);
  CHECK(none.accuracy.correct == eval_accuracy(model, data).correct);
  const auto removed = information_removal_experiment(model, data, 1, RuleVariable::answer, 2, 3);
  CHECK(removed.accuracy.n == 60);
  CHECK(parse_rule_variable("string-length") == RuleVariable::string_length);
  CHECK_THROWS_AS(parse_rule_variable("length"), ParameterDomainError);
}
