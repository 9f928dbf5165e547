#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "iclprobe/model.hpp"
#include "iclprobe/tasks.hpp"
#include "iclprobe/trainer.hpp"

namespace iclprobe {

// ---------------------------------------------------------------------------------------------
// Attention saliency: I_l = |sum_h A_{h,l} * dL/dA_{h,l}| elementwise, one matrix per layer.

struct SaliencyMap {
  std::vector<Eigen::MatrixXd> layers;  // [L] x [seq][seq], non-negative, zero above the diagonal
};

template <typename T>
SaliencyMap saliency(const ActivationTrace<T>& trace, const AttnGrads<T>& grads);

// Saliency of one prompt with the loss taken on its gold answer at the final "is" position.
template <typename T>
SaliencyMap instance_saliency(const Model<T>& model, const PromptInstance& instance);

// I_l[final_is_pos][answer_pos_j] for each demonstration j.
std::vector<double> saliency_answer_profile(const SaliencyMap& map, const PromptInstance& instance, int layer);

// Spearman rank correlation (average ranks for ties); 0 when either side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------------------------
// Logit-lens accuracy per residual layer 0..L at each prompt's final "is" position.

template <typename T>
std::vector<AccuracyResult> per_layer_accuracy(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                               int workers = 1);

// Layer l >= 1 with the largest accuracy increase over l-1 (first on ties).
int max_jump_layer(const std::vector<double>& accuracy);

// ---------------------------------------------------------------------------------------------
// Cluster geometry.

struct ClusterStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
  int count = 0;
};

// Sample mean and covariance of the rows of `points`, regularized by
// lambda * I with lambda = 1e-6 * trace / k.
ClusterStats cluster_stats(const Eigen::MatrixXd& points);

// sqrt((x - mu)^T Sigma^-1 (x - mu)) through a Cholesky factor of the stored covariance.
double mahalanobis(const Eigen::VectorXd& x, const ClusterStats& stats);

// For each label's cluster, the mean distance of every point outside it to that cluster;
// returns the mean over clusters.
double cluster_separation(const Eigen::MatrixXd& points, const std::vector<int>& labels);

struct PcaResult {
  Eigen::MatrixXd components;          // [k][p], unit rows, largest-magnitude entry positive
  Eigen::MatrixXd projected;           // [n][k]
  Eigen::VectorXd explained_variance;  // non-increasing
  Eigen::VectorXd mean;
};

PcaResult pca_project(const Eigen::MatrixXd& x, int k);

// ---------------------------------------------------------------------------------------------
// Demixed subspace fitting and null-space removal (rows of X are samples).

struct SubspaceModel {
  Eigen::MatrixXd compression;    // D_c, [d][p]
  Eigen::MatrixXd decompression;  // F,   [p][d]
  Eigen::VectorXd mean;           // mu_X
  std::string variable;
  int components = 0;
  std::string warning;  // non-empty for degenerate fits
};

// Rows of the centered data replaced by their label-class mean.
Eigen::MatrixXd label_average_matrix(const Eigen::MatrixXd& centered, const std::vector<int>& labels);

// Minimizes ||X_L - Xc D_c^T F^T||^2 over rank-d (F, D_c) in closed form (reduced-rank
// regression). Throws ConditioningError with a suggested ridge when Xc^T Xc is singular
// and ridge == 0.
SubspaceModel dpca_fit(const Eigen::MatrixXd& x, const std::vector<int>& labels, int d, double ridge = 0.0,
                       std::string variable = {});

double dpca_objective(const Eigen::MatrixXd& x, const std::vector<int>& labels, const SubspaceModel& model);

// Centers X by the model mean, projects rows onto Null(D_c) with B (B^T B)^-1 B^T, adds the mean back.
Eigen::MatrixXd nullspace_ablate(const Eigen::MatrixXd& x, const SubspaceModel& model);

struct ProbeResult {
  double accuracy = 0;
  double chance = 0;   // majority-class rate on the held-out split
  double stderr_ = 0;  // binomial standard error at chance
  int n_test = 0;
};

// Ridge least-squares one-vs-rest linear classifier with a bias, trained on a shuffled
// split and scored on the held-out remainder.
ProbeResult linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels, double train_fraction,
                         std::uint64_t seed, double ridge = 1e-3);

// ---------------------------------------------------------------------------------------------
// Rule-vector experiments on a trained model.

enum class RuleVariable { string_length, answer };
std::string_view to_string(RuleVariable v);
RuleVariable parse_rule_variable(std::string_view s);

struct RuleVectorSet {
  Eigen::MatrixXd vectors;  // one row per (instance, demonstration)
  std::vector<int> string_length;
  std::vector<int> answer;  // token id of the demonstration answer
  std::vector<std::pair<int, int>> origin;  // (instance, demonstration)

  const std::vector<int>& labels(RuleVariable v) const { return v == RuleVariable::answer ? answer : string_length; }
};

template <typename T>
RuleVectorSet collect_rule_vectors(const Model<T>& model, const std::vector<PromptInstance>& dataset, int layer,
                                   int workers = 1);

struct RemovalResult {
  AccuracyResult accuracy;
  ProbeResult probe;
};

// Fits the demixed subspace of `variable` on the rule vectors at `layer`, removes it from
// every rule vector, patches them back, and scores greedy accuracy. d = 0 removes nothing.
template <typename T>
RemovalResult information_removal_experiment(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                             int layer, RuleVariable variable, int d, std::uint64_t probe_seed,
                                             int workers = 1);

}  // namespace iclprobe
