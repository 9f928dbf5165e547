#include "iclprobe/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "iclprobe/analysis.hpp"
#include "iclprobe/checkpoint.hpp"
#include "iclprobe/csv.hpp"
#include "iclprobe/errors.hpp"
#include "iclprobe/intervention.hpp"
#include "iclprobe/parallel.hpp"
#include "iclprobe/plots.hpp"
#include "iclprobe/rng.hpp"

namespace iclprobe {

namespace {

struct CommandName {
  Command command;
  const char* name;
};

constexpr CommandName kCommands[] = {
    {Command::gen, "gen"},
    {Command::train, "train"},
    {Command::eval, "eval"},
    {Command::layers, "layers"},
    {Command::saliency, "saliency"},
    {Command::patch_task_vector, "patch-task-vector"},
    {Command::patch_rule_vectors, "patch-rule-vectors"},
    {Command::ablate, "ablate"},
    {Command::separation, "separation"},
    {Command::dpca_remove, "dpca-remove"},
    {Command::table1, "table1"},
    {Command::plot, "plot"},
};

}  // namespace

std::string_view to_string(Command c) {
  for (const auto& [command, name] : kCommands) {
    if (command == c) return name;
  }
  return "?";
}

Command parse_command(std::string_view s) {
  for (const auto& [command, name] : kCommands) {
    if (s == name) return command;
  }
  throw ConfigError("unknown command \"" + std::string(s) + "\"");
}

const std::vector<Command>& all_commands() {
  static const std::vector<Command> commands = [] {
    std::vector<Command> v;
    for (const auto& c : kCommands) v.push_back(c.command);
    return v;
  }();
  return commands;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const CheckpointError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParameterDomainError*>(&e) ||
      dynamic_cast<const RangeError*>(&e) || dynamic_cast<const CapacityError*>(&e) ||
      dynamic_cast<const TokenizationError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const ConditioningError*>(&e) || dynamic_cast<const TrainingFailure*>(&e)) return 4;
  return 1;
}

double chance_rate(TaskFamily family) {
  if (is_categorization(family)) return 0.5;
  return 1.0 / static_cast<double>(default_knowledge_table().values().size());
}

double Table1Row::rule_gap_recovery() const {
  const double gap = baseline.accuracy - chance;
  if (gap <= 0) return 0.0;
  return (rule_vectors.accuracy.accuracy - chance) / gap;
}

namespace {

// Seed streams so that selection and evaluation samples never share instances.
enum Stream : std::uint64_t {
  kSelectDonors = 101,
  kSelectZeroShot = 102,
  kSelectRandom = 103,
  kEvalDonors = 201,
  kEvalZeroShot = 202,
  kEvalRandom = 203,
  kLayerSelect = 301,
  kProbe = 401,
};

std::vector<PromptInstance> donors_for(TaskFamily family, int n_demos, int n, std::uint64_t seed) {
  return generate_dataset(TaskSpec::canonical(family, n_demos, seed), n);
}

ProtocolScore pick(const std::vector<AccuracyResult>& sweep, const std::vector<int>& layers) {
  ProtocolScore best;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    if (best.layer < 0 || sweep[i].accuracy > best.accuracy.accuracy) {
      best.layer = layers[i];
      best.accuracy = sweep[i];
    }
  }
  return best;
}

}  // namespace

Table1Row table1_row(const Model<float>& model, TaskFamily family, int n_demos, int n_samples, int n_select,
                     std::uint64_t seed, const std::vector<int>& layers, int workers) {
  if (layers.empty()) throw ConfigError("layer sweep is empty");
  Table1Row row;
  row.family = family;
  row.n_demos = n_demos;
  row.chance = chance_rate(family);
  const auto spec = TaskSpec::canonical(family, n_demos, seed);

  // Layer selection.
  const auto sel_donors = donors_for(family, n_demos, n_select, derive_seed(seed, kSelectDonors));
  const auto sel_zero = zero_shot_recipients(spec, n_select, derive_seed(seed, kSelectZeroShot));
  const auto sel_random = random_answer_recipients(sel_donors, derive_seed(seed, kSelectRandom));
  row.selection["task-vector-avg"] = task_vector_sweep(model, sel_donors, sel_zero, layers, true, workers);
  row.selection["task-vector"] = task_vector_sweep(model, sel_donors, sel_zero, layers, false, workers);
  row.selection["rule-vectors"] = rule_vector_sweep(model, sel_donors, sel_random, layers, n_demos, workers);
  const int tv_avg_layer = pick(row.selection["task-vector-avg"], layers).layer;
  const int tv_layer = pick(row.selection["task-vector"], layers).layer;
  const int rv_layer = pick(row.selection["rule-vectors"], layers).layer;

  // Evaluation at the selected layers.
  const auto donors = donors_for(family, n_demos, n_samples, derive_seed(seed, kEvalDonors));
  const auto zero = zero_shot_recipients(spec, n_samples, derive_seed(seed, kEvalZeroShot));
  const auto random = random_answer_recipients(donors, derive_seed(seed, kEvalRandom));
  row.baseline = eval_accuracy(model, donors, workers);
  row.task_vector_avg = {tv_avg_layer, protocol_task_vector(model, donors, zero, tv_avg_layer, true, workers)};
  row.task_vector = {tv_layer, protocol_task_vector(model, donors, zero, tv_layer, false, workers)};
  row.rule_vectors = {rv_layer, protocol_rule_vectors(model, donors, random, rv_layer, n_demos, workers)};
  return row;
}

namespace {

const std::set<std::string> kKnownKeys = {
    "checkpoint", "family", "J",  "layers", "layer",       "n_samples",   "n_select",  "seed",
    "out",        "m",      "k",  "variables", "d",        "table1.rows", "plot.input", "plot.kind",
    "plot.output", "pca_components"};

void check_keys(const KeyValueConfig& cfg) {
  for (const auto& [key, value] : cfg.values()) {
    if (kKnownKeys.count(key) || key.rfind("train.", 0) == 0 || key.rfind("model.", 0) == 0) continue;
    throw ConfigError("unknown key \"" + key + "\"", cfg.line_of(key));
  }
}

// Reads settings with defaults and remembers every resolved value for the manifest.
class Settings {
 public:
  explicit Settings(const KeyValueConfig& cfg) : cfg_(cfg) {}

  std::string str(const std::string& key, const std::string& fallback) {
    auto v = cfg_.get_string(key, fallback);
    resolved_[key] = v;
    return v;
  }
  int integer(const std::string& key, int fallback, int lo, int hi) {
    const long long v = cfg_.get_int(key, fallback);
    if (v < lo || v > hi) {
      throw ConfigError(key + " = " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(hi) + "]",
                        cfg_.line_of(key));
    }
    resolved_[key] = std::to_string(v);
    return static_cast<int>(v);
  }
  std::vector<int> ints(const std::string& key, const std::vector<int>& fallback, int lo, int hi) {
    std::vector<long long> def(fallback.begin(), fallback.end());
    const auto raw = cfg_.get_int_list(key, def);
    if (raw.empty()) throw ConfigError(key + " must not be empty", cfg_.line_of(key));
    std::vector<int> out;
    std::string joined;
    for (long long v : raw) {
      if (v < lo || v > hi) {
        throw ConfigError(key + " entry " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + "]",
                          cfg_.line_of(key));
      }
      out.push_back(static_cast<int>(v));
      joined += (joined.empty() ? "" : ",") + std::to_string(v);
    }
    resolved_[key] = joined;
    return out;
  }
  std::vector<std::string> words(const std::string& key, const std::string& fallback) {
    const auto raw = str(key, fallback);
    std::vector<std::string> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item.erase(0, item.find_first_not_of(" \t"));
      item.erase(item.find_last_not_of(" \t") + 1);
      if (!item.empty()) out.push_back(item);
    }
    if (out.empty()) throw ConfigError(key + " must not be empty", cfg_.line_of(key));
    return out;
  }
  void record(const std::string& key, const std::string& value) { resolved_[key] = value; }
  int line_of(const std::string& key) const { return cfg_.line_of(key); }
  const KeyValueConfig& config() const { return cfg_; }
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  const KeyValueConfig& cfg_;
  std::map<std::string, std::string> resolved_;
};

TaskFamily family_setting(Settings& s) {
  const auto name = s.str("family", "string-length-simple");
  try {
    return parse_family(name);
  } catch (const ParameterDomainError& e) {
    throw ConfigError(e.what(), s.line_of("family"));
  }
}

std::vector<int> layer_setting(Settings& s, int n_layers) {
  const auto raw = s.config().get_string("layers", "all");
  if (raw == "all") {
    s.record("layers", "all");
    std::vector<int> all(static_cast<std::size_t>(n_layers + 1));
    for (int l = 0; l <= n_layers; ++l) all[static_cast<std::size_t>(l)] = l;
    return all;
  }
  return s.ints("layers", {}, 0, n_layers);
}

struct LoadedModel {
  Model<float> model;
  std::string path;
  std::string hash;
};

LoadedModel load_model(Settings& s) {
  const auto path = s.str("checkpoint", "");
  if (path.empty()) throw ConfigError("the checkpoint key is required for this command");
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path);
  const auto bytes = read_file_bytes(path);
  return {decode_checkpoint<float>(bytes), path, hex64(fnv1a64(bytes))};
}

class Output {
 public:
  explicit Output(std::filesystem::path dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

  void csv(const std::string& name, const CsvTable& table) {
    write_csv(dir_ / name, table);
    files_.push_back(name);
  }
  void text(const std::string& name, const std::string& body) {
    write_text_file(dir_ / name, body);
    files_.push_back(name);
  }
  const std::filesystem::path& dir() const { return dir_; }
  const std::vector<std::string>& files() const { return files_; }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

CsvTable protocol_table() {
  CsvTable t;
  t.header = {"protocol", "family", "J", "layer", "m", "accuracy", "stderr", "n_samples", "seed"};
  return t;
}

void add_protocol_row(CsvTable& t, const std::string& protocol, TaskFamily family, int J, int layer, int m,
                      const AccuracyResult& a, std::uint64_t seed) {
  t.add_row({protocol, std::string(to_string(family)), fmt(J), fmt(layer), fmt(m), fmt(a.accuracy), fmt(a.stderr_),
             fmt(a.n), std::to_string(seed)});
}

using Json = nlohmann::json;

struct Context {
  Settings& settings;
  Output& out;
  std::uint64_t seed;
  int workers;
  Json results = Json::object();
  std::optional<LoadedModel> model;

  const Model<float>& m() {
    if (!model) model = load_model(settings);
    return model->model;
  }
};

int default_samples(Command c) {
  switch (c) {
    case Command::separation:
    case Command::dpca_remove:
    case Command::saliency:
      return 1000;
    case Command::gen:
      return 100;
    default:
      return 5000;
  }
}

void cmd_gen(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const auto js = s.ints("J", {8}, 0, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::gen), 1, 10'000'000);
  std::string body;
  for (int J : js) {
    for (const auto& inst : generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n)) {
      body += serialize_instance(inst);
      body += '\n';
    }
  }
  ctx.out.text("instances.tsv", body);
}

void cmd_train(Context& ctx) {
  auto& s = ctx.settings;
  const auto& cfg = s.config();
  auto tc = TrainConfig::from_config(cfg);
  if (cfg.has("seed") || ctx.settings.resolved().count("seed")) tc.seed = ctx.seed;
  const auto mc = model_config_from(cfg);
  for (const auto& [k, v] : cfg.values()) {
    if (k.rfind("train.", 0) == 0 || k.rfind("model.", 0) == 0) s.record(k, v);
  }
  s.record("train.seed", std::to_string(tc.seed));
  const auto path = s.str("checkpoint", "");
  if (path.empty()) throw ConfigError("the checkpoint key is required for train");

  auto result = train(mc, tc, [](const LossRecord& r) {
    std::cerr << "step " << r.step << " loss " << fmt(r.loss) << " acc J1/J8/J16 " << fmt(r.eval_acc_j1) << " "
              << fmt(r.eval_acc_j8) << " " << fmt(r.eval_acc_j16) << '\n';
  });
  if (std::filesystem::path(path).has_parent_path()) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  }
  save_checkpoint(path, result.model);
  ctx.out.text("loss_history.csv", loss_history_csv(result.history));
  const auto bytes = read_file_bytes(path);
  ctx.model = LoadedModel{std::move(result.model), path, hex64(fnv1a64(bytes))};
  ctx.results["initial_loss"] = fmt(result.initial_loss);
}

void cmd_eval(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const auto js = s.ints("J", {0, 1, 2, 4, 8, 16}, 0, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::eval), 1, 10'000'000);
  const auto& model = ctx.m();
  CsvTable t;
  t.header = {"family", "J", "accuracy", "stderr", "correct", "n_samples", "seed"};
  for (int J : js) {
    const auto a = eval_accuracy(model, family, J, n, ctx.seed, ctx.workers);
    t.add_row({std::string(to_string(family)), fmt(J), fmt(a.accuracy), fmt(a.stderr_), fmt(a.correct), fmt(a.n),
               std::to_string(ctx.seed)});
  }
  ctx.out.csv("eval.csv", t);
}

void cmd_layers(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const auto js = s.ints("J", {16}, 0, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::layers), 1, 10'000'000);
  const auto& model = ctx.m();
  CsvTable t;
  t.header = {"family", "J", "layer", "accuracy", "stderr", "n_samples"};
  Json jumps = Json::object();
  for (int J : js) {
    const auto dataset = generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n);
    const auto acc = per_layer_accuracy(model, dataset, ctx.workers);
    std::vector<double> curve;
    for (std::size_t l = 0; l < acc.size(); ++l) {
      t.add_row({std::string(to_string(family)), fmt(J), fmt(static_cast<int>(l)), fmt(acc[l].accuracy),
                 fmt(acc[l].stderr_), fmt(acc[l].n)});
      curve.push_back(acc[l].accuracy);
    }
    jumps[std::to_string(J)] = max_jump_layer(curve);
  }
  ctx.out.csv("layer_accuracy.csv", t);
  ctx.results["max_jump_layer"] = jumps;
}

void cmd_saliency(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const int J = s.integer("J", 8, 1, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::saliency), 1, 10'000'000);
  const auto& model = ctx.m();
  const int L = model.config().n_layers;
  const auto dataset = generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n);

  std::vector<SaliencyMap> maps(dataset.size());
  parallel_for(n, ctx.workers,
               [&](int i) { maps[static_cast<std::size_t>(i)] = instance_saliency(model, dataset[static_cast<std::size_t>(i)]); });

  // Heatmap of the first instance.
  CsvTable heat;
  heat.header = {"layer", "row", "col", "value"};
  for (int l = 0; l < L; ++l) {
    const auto& m = maps.front().layers[static_cast<std::size_t>(l)];
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c <= r; ++c) {
        heat.add_row({fmt(l), fmt(static_cast<int>(r)), fmt(static_cast<int>(c)), fmt(m(r, c))});
      }
    }
  }
  ctx.out.csv("saliency.csv", heat);

  // Answer-position profile and its trend over demonstration order.
  CsvTable profile;
  profile.header = {"layer", "demo", "mean_score", "stderr", "n_samples"};
  CsvTable trend;
  trend.header = {"layer", "spearman_mean", "stderr", "answer_share", "n_samples"};
  std::vector<double> order(static_cast<std::size_t>(J));
  for (int j = 0; j < J; ++j) order[static_cast<std::size_t>(j)] = j + 1;
  for (int l = 0; l < L; ++l) {
    std::vector<double> sum(static_cast<std::size_t>(J), 0.0), sq(static_cast<std::size_t>(J), 0.0);
    double rho_sum = 0, rho_sq = 0, share_sum = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto p = saliency_answer_profile(maps[i], dataset[i], l);
      for (int j = 0; j < J; ++j) {
        sum[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)];
        sq[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)] * p[static_cast<std::size_t>(j)];
      }
      const double rho = spearman(order, p);
      rho_sum += rho;
      rho_sq += rho * rho;
      const auto& m = maps[i].layers[static_cast<std::size_t>(l)];
      const double row_total = m.row(dataset[i].final_is_pos()).sum();
      double answers = 0;
      for (double v : p) answers += v;
      share_sum += row_total > 0 ? answers / row_total : 0.0;
    }
    const double nn = static_cast<double>(dataset.size());
    for (int j = 0; j < J; ++j) {
      const double mean = sum[static_cast<std::size_t>(j)] / nn;
      const double var = std::max(0.0, sq[static_cast<std::size_t>(j)] / nn - mean * mean);
      profile.add_row({fmt(l), fmt(j + 1), fmt(mean), fmt(std::sqrt(var / nn)), fmt(n)});
    }
    const double rho_mean = rho_sum / nn;
    const double rho_var = std::max(0.0, rho_sq / nn - rho_mean * rho_mean);
    trend.add_row({fmt(l), fmt(rho_mean), fmt(std::sqrt(rho_var / nn)), fmt(share_sum / nn), fmt(n)});
  }
  ctx.out.csv("saliency_profile.csv", profile);
  ctx.out.csv("saliency_trend.csv", trend);
}

void cmd_patch_task_vector(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const auto js = s.ints("J", {8}, 1, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::patch_task_vector), 1, 10'000'000);
  const auto& model = ctx.m();
  const auto layers = layer_setting(s, model.config().n_layers);
  auto t = protocol_table();
  for (int J : js) {
    const auto spec = TaskSpec::canonical(family, J, ctx.seed);
    const auto donors = donors_for(family, J, n, derive_seed(ctx.seed, kEvalDonors));
    const auto recipients = zero_shot_recipients(spec, n, derive_seed(ctx.seed, kEvalZeroShot));
    const auto avg = task_vector_sweep(model, donors, recipients, layers, true, ctx.workers);
    const auto single = task_vector_sweep(model, donors, recipients, layers, false, ctx.workers);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      add_protocol_row(t, "task-vector-avg", family, J, layers[i], 0, avg[i], ctx.seed);
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      add_protocol_row(t, "task-vector", family, J, layers[i], 0, single[i], ctx.seed);
    }
  }
  ctx.out.csv("patch_task_vector.csv", t);
}

void cmd_patch_rule_vectors(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const int J = s.integer("J", 8, 1, kMaxDemos);
  const auto ms = s.ints("m", {J}, 1, J);
  const int n = s.integer("n_samples", default_samples(Command::patch_rule_vectors), 1, 10'000'000);
  const auto& model = ctx.m();
  const auto layers = layer_setting(s, model.config().n_layers);
  const auto donors = donors_for(family, J, n, derive_seed(ctx.seed, kEvalDonors));
  const auto recipients = random_answer_recipients(donors, derive_seed(ctx.seed, kEvalRandom));
  auto t = protocol_table();
  for (int m : ms) {
    const auto sweep = rule_vector_sweep(model, donors, recipients, layers, m, ctx.workers);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      add_protocol_row(t, "rule-vectors", family, J, layers[i], m, sweep[i], ctx.seed);
    }
  }
  ctx.out.csv("patch_rule_vectors.csv", t);
}

// Layer with the sharpest logit-lens accuracy rise, measured on its own sample.
int middle_layer(Context& ctx, TaskFamily family, int J, int n_select) {
  const auto& model = ctx.m();
  const auto sel = donors_for(family, J, n_select, derive_seed(ctx.seed, kLayerSelect));
  const auto acc = per_layer_accuracy(model, sel, ctx.workers);
  std::vector<double> curve;
  for (const auto& a : acc) curve.push_back(a.accuracy);
  return max_jump_layer(curve);
}

void cmd_ablate(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const int J = s.integer("J", 16, 1, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::ablate), 1, 10'000'000);
  std::vector<int> all_k(static_cast<std::size_t>(J + 1));
  for (int k = 0; k <= J; ++k) all_k[static_cast<std::size_t>(k)] = k;
  const auto ks = s.ints("k", all_k, 0, J);
  const auto& model = ctx.m();
  int layer = 0;
  if (s.config().has("layer")) {
    layer = s.integer("layer", 0, 0, model.config().n_layers);
  } else {
    const int n_select = s.integer("n_select", 500, 1, 10'000'000);
    layer = middle_layer(ctx, family, J, n_select);
    s.record("layer", std::to_string(layer));
  }
  const auto dataset = generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n);
  const auto sweep = ablation_sweep(model, dataset, layer, ks, ctx.workers);
  auto t = protocol_table();
  for (std::size_t i = 0; i < ks.size(); ++i) add_protocol_row(t, "ablate", family, J, layer, ks[i], sweep[i], ctx.seed);
  ctx.out.csv("ablation.csv", t);
  ctx.results["layer"] = layer;
}

std::vector<RuleVariable> variable_setting(Settings& s, TaskFamily family) {
  std::vector<RuleVariable> out;
  const std::string fallback = family == TaskFamily::string_length_simple || family == TaskFamily::string_length_complex
                                   ? "string-length,answer"
                                   : "answer";
  for (const auto& w : s.words("variables", fallback)) {
    try {
      out.push_back(parse_rule_variable(w));
    } catch (const ParameterDomainError& e) {
      throw ConfigError(e.what(), s.line_of("variables"));
    }
  }
  return out;
}

void cmd_separation(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const int J = s.integer("J", 8, 1, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::separation), 1, 10'000'000);
  const int k = s.integer("pca_components", 2, 1, 64);
  const auto variables = variable_setting(s, family);
  const auto& model = ctx.m();
  const auto layers = layer_setting(s, model.config().n_layers);
  const auto dataset = generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n);
  CsvTable t;
  t.header = {"layer", "variable", "distance"};
  for (int layer : layers) {
    const auto set = collect_rule_vectors(model, dataset, layer, ctx.workers);
    const auto pca = pca_project(set.vectors, k);
    for (auto v : variables) {
      t.add_row({fmt(layer), std::string(to_string(v)), fmt(cluster_separation(pca.projected, set.labels(v)))});
    }
  }
  ctx.out.csv("separation.csv", t);
}

void cmd_dpca_remove(Context& ctx) {
  auto& s = ctx.settings;
  const auto family = family_setting(s);
  const int J = s.integer("J", 8, 1, kMaxDemos);
  const int n = s.integer("n_samples", default_samples(Command::dpca_remove), 1, 10'000'000);
  const auto ds = s.ints("d", {0, 1, 2, 5}, 0, 4096);
  const auto variables = variable_setting(s, family);
  const auto& model = ctx.m();
  const auto layers = layer_setting(s, model.config().n_layers);
  const auto dataset = generate_dataset(TaskSpec::canonical(family, J, ctx.seed), n);
  CsvTable t;
  t.header = {"layer", "variable", "d", "accuracy", "probe_acc", "stderr", "probe_chance", "n_samples"};
  for (int layer : layers) {
    for (auto v : variables) {
      for (int d : ds) {
        const auto r = information_removal_experiment(model, dataset, layer, v, d, derive_seed(ctx.seed, kProbe),
                                                      ctx.workers);
        t.add_row({fmt(layer), std::string(to_string(v)), fmt(d), fmt(r.accuracy.accuracy), fmt(r.probe.accuracy),
                   fmt(r.accuracy.stderr_), fmt(r.probe.chance), fmt(n)});
      }
    }
  }
  ctx.out.csv("dpca_removal.csv", t);
}

std::vector<std::pair<TaskFamily, int>> table1_rows(Settings& s) {
  const auto words = s.words("table1.rows",
                             "string-length-simple:8,string-length-complex:8,digit:8,grid2d:8,grid2d:16");
  std::vector<std::pair<TaskFamily, int>> rows;
  for (const auto& w : words) {
    const auto colon = w.find(':');
    if (colon == std::string::npos) throw ConfigError("table1.rows entry \"" + w + "\" is not family:J", s.line_of("table1.rows"));
    try {
      const int J = std::stoi(w.substr(colon + 1));
      if (J < 1 || J > kMaxDemos) throw ConfigError("table1.rows J out of range in \"" + w + "\"", s.line_of("table1.rows"));
      rows.emplace_back(parse_family(w.substr(0, colon)), J);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError("bad table1.rows entry \"" + w + "\": " + e.what(), s.line_of("table1.rows"));
    }
  }
  return rows;
}

void cmd_table1(Context& ctx) {
  auto& s = ctx.settings;
  const auto rows = table1_rows(s);
  const int n = s.integer("n_samples", default_samples(Command::table1), 1, 10'000'000);
  const int n_select = s.integer("n_select", 500, 1, 10'000'000);
  const auto& model = ctx.m();
  const auto layers = layer_setting(s, model.config().n_layers);
  CsvTable t;
  t.header = {"family", "J",          "Baseline",      "TaskVector-Avg", "TaskVector-NonAvg", "DistributedRuleVectors",
              "chance", "layer_avg",  "layer_nonavg",  "layer_rule",     "rule_gap_recovery", "n_samples"};
  auto sweep = protocol_table();
  Json flags = Json::array();
  for (const auto& [family, J] : rows) {
    const auto r = table1_row(model, family, J, n, n_select, ctx.seed, layers, ctx.workers);
    t.add_row({std::string(to_string(family)), fmt(J), fmt(r.baseline.accuracy),
               fmt(r.task_vector_avg.accuracy.accuracy), fmt(r.task_vector.accuracy.accuracy),
               fmt(r.rule_vectors.accuracy.accuracy), fmt(r.chance), fmt(r.task_vector_avg.layer),
               fmt(r.task_vector.layer), fmt(r.rule_vectors.layer), fmt(r.rule_gap_recovery()), fmt(n)});
    for (const auto& [protocol, accs] : r.selection) {
      for (std::size_t i = 0; i < layers.size(); ++i) {
        add_protocol_row(sweep, protocol, family, J, layers[i], protocol == "rule-vectors" ? J : 0, accs[i], ctx.seed);
      }
    }
    const double best_tv = std::max(r.task_vector_avg.accuracy.accuracy, r.task_vector.accuracy.accuracy);
    if (is_categorization(family) && r.rule_vectors.accuracy.accuracy < best_tv) {
      flags.push_back(std::string(to_string(family)) + ":" + std::to_string(J) +
                      " rule-vector accuracy below task-vector accuracy");
    }
    if (family == TaskFamily::string_length_simple && r.rule_gap_recovery() < 0.6) {
      flags.push_back(std::string(to_string(family)) + ":" + std::to_string(J) +
                      " rule vectors recover less than 60% of the baseline gap");
    }
  }
  ctx.out.csv("table1.csv", t);
  ctx.out.csv("table1_selection.csv", sweep);
  ctx.results["contrast_flags"] = flags;
}

void cmd_plot(Context& ctx) {
  auto& s = ctx.settings;
  const auto input = s.str("plot.input", "");
  if (input.empty()) throw ConfigError("plot.input is required for plot");
  const auto kind = [&] {
    try {
      return parse_plot_kind(s.str("plot.kind", "curve"));
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), s.line_of("plot.kind"));
    }
  }();
  const auto name = s.str("plot.output", std::filesystem::path(input).stem().string() + ".svg");
  const auto table = read_csv(input);
  ctx.out.text(name, render_plot(table, kind, std::filesystem::path(input).stem().string()));
}

}  // namespace

RunReport run(const ExperimentSpec& spec) {
  const auto& cfg = spec.config;
  check_keys(cfg);
  Settings settings(cfg);
  const std::filesystem::path out_dir = spec.out ? *spec.out : std::filesystem::path(settings.str("out", "out"));
  std::uint64_t seed = 0;
  if (spec.seed) {
    seed = *spec.seed;
  } else {
    const long long raw = cfg.get_int("seed", 1);
    if (raw < 0) throw ConfigError("seed must be non-negative", cfg.line_of("seed"));
    seed = static_cast<std::uint64_t>(raw);
  }
  settings.record("seed", std::to_string(seed));

  Output out(out_dir);
  Context ctx{settings, out, seed, worker_count(), Json::object(), std::nullopt};
  switch (spec.command) {
    case Command::gen: cmd_gen(ctx); break;
    case Command::train: cmd_train(ctx); break;
    case Command::eval: cmd_eval(ctx); break;
    case Command::layers: cmd_layers(ctx); break;
    case Command::saliency: cmd_saliency(ctx); break;
    case Command::patch_task_vector: cmd_patch_task_vector(ctx); break;
    case Command::patch_rule_vectors: cmd_patch_rule_vectors(ctx); break;
    case Command::ablate: cmd_ablate(ctx); break;
    case Command::separation: cmd_separation(ctx); break;
    case Command::dpca_remove: cmd_dpca_remove(ctx); break;
    case Command::table1: cmd_table1(ctx); break;
    case Command::plot: cmd_plot(ctx); break;
  }

  Json manifest;
  manifest["command"] = std::string(to_string(spec.command));
  manifest["seed"] = seed;
  manifest["config"] = settings.resolved();
  if (ctx.model) {
    manifest["checkpoint"] = {{"path", ctx.model->path}, {"fnv1a64", ctx.model->hash}};
  } else {
    manifest["checkpoint"] = nullptr;
  }
  manifest["outputs"] = out.files();
  manifest["results"] = ctx.results;
  const std::string manifest_name = std::string(to_string(spec.command)) + "_manifest.json";
  out.text(manifest_name, manifest.dump(2) + "\n");
  return {out.dir(), out.files()};
}

}  // namespace iclprobe
