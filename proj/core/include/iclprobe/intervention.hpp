#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "iclprobe/model.hpp"
#include "iclprobe/patch.hpp"
#include "iclprobe/tasks.hpp"
#include "iclprobe/trainer.hpp"

namespace iclprobe {

// Copies hidden[layer][position] for each address.
template <typename T>
PatchSet capture(const ActivationTrace<T>& trace, const std::vector<PatchAddress>& addresses,
                 std::string provenance = {});

template <typename T>
ActivationTrace<T> run_with_patch(const Model<T>& model, std::span<const TokenId> tokens, const PatchSet& patch,
                                  PatchSite site = PatchSite::block_output);

// Zero vectors at the first k demonstration answer positions of `instance`, at `layer`.
PatchSet answer_ablation_patch(const PromptInstance& instance, int k, int layer, int d_model);

template <typename T>
ActivationTrace<T> ablate_answers(const Model<T>& model, const PromptInstance& instance, int k, int layer);

std::vector<double> mean_vector(const std::vector<std::vector<double>>& vectors);

// Task-vector patching. Donor i's hidden state at its final "is" position (layer l) is patched
// into recipient i's final "is" position at the same layer; with `averaged`, the mean over all
// donors is patched into every recipient instead. Recipients are zero-shot prompts scored
// against their own gold answers. One accuracy per entry of `layers`.
template <typename T>
std::vector<AccuracyResult> task_vector_sweep(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                              const std::vector<PromptInstance>& recipients,
                                              const std::vector<int>& layers, bool averaged, int workers = 1);

template <typename T>
AccuracyResult protocol_task_vector(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                    const std::vector<PromptInstance>& recipients, int layer, bool averaged,
                                    int workers = 1);

// Distributed rule-vector patching: the donor's hidden states at its first m answer positions
// (layer l) overwrite the recipient's states at its own first m answer positions. Donor and
// recipient must hold the same number of demonstrations.
template <typename T>
std::vector<AccuracyResult> rule_vector_sweep(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                              const std::vector<PromptInstance>& recipients,
                                              const std::vector<int>& layers, int m, int workers = 1);

template <typename T>
AccuracyResult protocol_rule_vectors(const Model<T>& model, const std::vector<PromptInstance>& donors,
                                     const std::vector<PromptInstance>& recipients, int layer, int m,
                                     int workers = 1);

// Accuracy with the first k answer positions zeroed at `layer`, one entry per k.
template <typename T>
std::vector<AccuracyResult> ablation_sweep(const Model<T>& model, const std::vector<PromptInstance>& dataset,
                                           int layer, const std::vector<int>& ks, int workers = 1);

// Recipient sets for the protocols. Task-vector recipients are zero-shot prompts on
// independently drawn final queries; rule-vector recipients are random-answer dummies
// of each donor.
std::vector<PromptInstance> zero_shot_recipients(const TaskSpec& spec, int n, std::uint64_t seed);
std::vector<PromptInstance> random_answer_recipients(const std::vector<PromptInstance>& donors, std::uint64_t seed);

}  // namespace iclprobe
