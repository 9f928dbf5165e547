#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "iclprobe/kvconfig.hpp"
#include "iclprobe/model.hpp"
#include "iclprobe/tasks.hpp"
#include "iclprobe/trainer.hpp"

namespace iclprobe {

enum class Command {
  gen,
  train,
  eval,
  layers,
  saliency,
  patch_task_vector,
  patch_rule_vectors,
  ablate,
  separation,
  dpca_remove,
  table1,
  plot,
};

std::string_view to_string(Command c);
Command parse_command(std::string_view s);  // throws ConfigError
const std::vector<Command>& all_commands();

struct ExperimentSpec {
  Command command = Command::eval;
  KeyValueConfig config;
  std::optional<std::uint64_t> seed;        // overrides the config's seed key
  std::optional<std::filesystem::path> out;  // overrides the config's out key
};

struct RunReport {
  std::filesystem::path out_dir;
  std::vector<std::string> files;  // names relative to out_dir, in write order
};

// Executes one pipeline and writes its CSVs plus <command>_manifest.json into the output
// directory. Errors propagate as exceptions; see exit_code_for.
RunReport run(const ExperimentSpec& spec);

// 2 for checkpoint problems, 3 for configuration problems, 4 for numerical failures, 1 otherwise.
int exit_code_for(const std::exception& e);

// ---------------------------------------------------------------------------------------------
// Table-1 style comparison for one (family, J): best layer per protocol chosen on a
// selection sample, then scored on a disjoint evaluation sample.

struct ProtocolScore {
  int layer = -1;
  AccuracyResult accuracy;
};

struct Table1Row {
  TaskFamily family = TaskFamily::string_length_simple;
  int n_demos = 0;
  double chance = 0;
  AccuracyResult baseline;
  ProtocolScore task_vector_avg;
  ProtocolScore task_vector;
  ProtocolScore rule_vectors;
  // selection accuracies per layer for each protocol, keyed by protocol name
  std::map<std::string, std::vector<AccuracyResult>> selection;

  // (rule - chance) / (baseline - chance); 0 when the baseline is at chance.
  double rule_gap_recovery() const;
};

double chance_rate(TaskFamily family);

Table1Row table1_row(const Model<float>& model, TaskFamily family, int n_demos, int n_samples, int n_select,
                     std::uint64_t seed, const std::vector<int>& layers, int workers = 1);

}  // namespace iclprobe
