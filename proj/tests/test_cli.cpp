#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "iclprobe/checkpoint.hpp"
#include "iclprobe/csv.hpp"
#include "iclprobe/errors.hpp"
#include "iclprobe/experiments.hpp"
#include "iclprobe/plots.hpp"

using namespace iclprobe;
namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "iclprobe_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const fs::path& tiny_checkpoint() {
  static const fs::path path = [] {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.d_ff = 32;
    auto p = scratch() / "tiny.ckpt";
    save_checkpoint(p, Model<float>::random(c, 77));
    return p;
  }();
  return path;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const std::string& name, const std::string& body) {
  const auto p = scratch() / name;
  std::ofstream(p) << body;
  return p;
}

RunReport run_command(Command c, const std::string& config, const fs::path& out, std::uint64_t seed = 3) {
  ExperimentSpec spec;
  spec.command = c;
  spec.config = KeyValueConfig::parse(config);
  spec.seed = seed;
  spec.out = out;
  return run(spec);
}

std::string base_config() { return "checkpoint = " + tiny_checkpoint().string() + "\n"; }

std::string cli() {
  if (const char* env = std::getenv("ICLPROBE_CLI")) return env;
  return ICLPROBE_CLI;
}

int run_cli(const std::string& args, const std::string& log) {
  const std::string cmd = cli() + " " + args + " > " + (scratch() / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("commands parse and print") {
  for (auto c : all_commands()) CHECK(parse_command(to_string(c)) == c);
  CHECK_THROWS_AS(parse_command("bogus"), ConfigError);
  CHECK(all_commands().size() == 12);
}

TEST_CASE("every command is byte-deterministic") {
  const std::string cfg = base_config() +
                          "family = string-length-simple\n"
                          "n_samples = 24\n"
                          "n_select = 12\n"
                          "table1.rows = string-length-simple:4,digit:3\n"
                          "train.steps = 3\ntrain.batch_size = 2\ntrain.eval_samples = 4\n"
                          "model.n_layers = 1\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.d_ff = 16\n";
  const std::map<Command, std::string> extra = {
      {Command::gen, "J = 2,5\n"},
      {Command::eval, "J = 0,4\n"},
      {Command::layers, "J = 4\n"},
      {Command::saliency, "J = 3\n"},
      {Command::patch_task_vector, "J = 3\n"},
      {Command::patch_rule_vectors, "J = 3\nm = 1,3\n"},
      {Command::ablate, "J = 3\n"},
      {Command::separation, "J = 4\n"},
      {Command::dpca_remove, "J = 4\nd = 0,1\nlayers = 1,2\n"},
      {Command::table1, ""},
  };
  for (const auto& [command, more] : extra) {
    CAPTURE(to_string(command));
    const auto a = run_command(command, cfg + more, scratch() / "det_a");
    const auto b = run_command(command, cfg + more, scratch() / "det_b");
    REQUIRE(a.files == b.files);
    CHECK(a.files.size() >= 2);
    for (const auto& f : a.files) {
      CAPTURE(f);
      CHECK(slurp(a.out_dir / f) == slurp(b.out_dir / f));
    }
  }
  // Training writes a checkpoint; identical seeds give identical bytes.
  const auto train_cfg = [&](const std::string& ckpt) {
    std::string c = cfg;
    c.replace(c.find(tiny_checkpoint().string()), tiny_checkpoint().string().size(), (scratch() / ckpt).string());
    return c;
  };
  const auto ta = run_command(Command::train, train_cfg("ta.ckpt"), scratch() / "train_a");
  run_command(Command::train, train_cfg("tb.ckpt"), scratch() / "train_b");
  CHECK(read_file_bytes(scratch() / "ta.ckpt") == read_file_bytes(scratch() / "tb.ckpt"));
  CHECK(slurp(scratch() / "train_a" / "loss_history.csv") == slurp(scratch() / "train_b" / "loss_history.csv"));
  CHECK(ta.files.front() == "loss_history.csv");
}

TEST_CASE("protocol CSV schema and manifest contents") {
  const auto r = run_command(Command::patch_rule_vectors, base_config() + "J = 3\nn_samples = 10\nlayers = 0,2\n",
                             scratch() / "schema");
  const auto t = read_csv(r.out_dir / "patch_rule_vectors.csv");
  CHECK(t.header == std::vector<std::string>{"protocol", "family", "J", "layer", "m", "accuracy", "stderr",
                                             "n_samples", "seed"});
  CHECK(t.rows.size() == 2);
  CHECK(t.rows[1][3] == "2");
  CHECK(t.rows[1][8] == "3");
  const auto manifest = nlohmann::json::parse(slurp(r.out_dir / "patch-rule-vectors_manifest.json"));
  CHECK(manifest["command"] == "patch-rule-vectors");
  CHECK(manifest["seed"] == 3);
  CHECK(manifest["config"]["layers"] == "0,2");
  CHECK(manifest["config"]["m"] == "3");
  CHECK(manifest["checkpoint"]["fnv1a64"] == hex64(fnv1a64(read_file_bytes(tiny_checkpoint()))));

  // The manifest's config reproduces the run.
  std::string replay;
  for (const auto& [k, v] : manifest["config"].items()) {
    if (k != "seed") replay += k + " = " + v.get<std::string>() + "\n";
  }
  const auto again = run_command(Command::patch_rule_vectors, replay, scratch() / "schema_replay",
                                 manifest["seed"].get<std::uint64_t>());
  CHECK(slurp(again.out_dir / "patch_rule_vectors.csv") == slurp(r.out_dir / "patch_rule_vectors.csv"));
}

TEST_CASE("layers agrees with eval at the last layer") {
  const std::string cfg = base_config() + "family = digit\nJ = 5\nn_samples = 200\n";
  const auto l = read_csv(run_command(Command::layers, cfg, scratch() / "cross").out_dir / "layer_accuracy.csv");
  const auto e = read_csv(run_command(Command::eval, cfg, scratch() / "cross").out_dir / "eval.csv");
  CHECK(l.rows.size() == 3);
  CHECK(l.rows.back()[l.column("accuracy")] == e.rows.front()[e.column("accuracy")]);
}

TEST_CASE("table1 columns") {
  const auto r = run_command(Command::table1,
                             base_config() + "n_samples = 20\nn_select = 10\ntable1.rows = grid2d:8,grid2d:16\n",
                             scratch() / "t1");
  const auto t = read_csv(r.out_dir / "table1.csv");
  for (const char* c : {"family", "J", "Baseline", "TaskVector-Avg", "TaskVector-NonAvg", "DistributedRuleVectors"}) {
    CHECK(t.column(c) >= 0);
  }
  CHECK(t.rows.size() == 2);
  CHECK(t.rows[1][1] == "16");
}

TEST_CASE("library error mapping") {
  CHECK(exit_code_for(CheckpointError("x")) == 2);
  CHECK(exit_code_for(ConfigError("x", 3)) == 3);
  CHECK(exit_code_for(ConditioningError("x")) == 4);
  CHECK(exit_code_for(TrainingFailure("x")) == 4);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
  CHECK_THROWS_AS(run_command(Command::eval, "checkpoint = /nonexistent/model.ckpt\n", scratch() / "e"),
                  CheckpointError);
  try {
    run_command(Command::eval, base_config() + "n_sampels = 3\n", scratch() / "e");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(run_command(Command::eval, base_config() + "J = 17\n", scratch() / "e"), ConfigError);
  CHECK_THROWS_AS(run_command(Command::eval, base_config() + "family = words\n", scratch() / "e"), ConfigError);
  CHECK_THROWS_AS(run_command(Command::eval, base_config() + "layers = \n", scratch() / "e"), ConfigError);
}

TEST_CASE("command-line exit codes") {
  const auto good = write_config("good.cfg", base_config() + "family = digit\nJ = 2\nn_samples = 10\n");
  const auto out = (scratch() / "cli_out").string();
  CHECK(run_cli("eval --config " + good.string() + " --out " + out, "ok.log") == 0);
  CHECK(fs::exists(scratch() / "cli_out" / "eval.csv"));

  const auto missing = write_config("missing.cfg", "checkpoint = /nonexistent/model.ckpt\n");
  CHECK(run_cli("eval --config " + missing.string() + " --out " + out, "missing.log") == 2);

  const auto bad = write_config("bad.cfg", base_config() + "J = 2\nthis line is wrong\n");
  CHECK(run_cli("eval --config " + bad.string() + " --out " + out, "bad.log") == 3);
  CHECK(slurp(scratch() / "bad.log").find("line 3") != std::string::npos);
  CHECK(run_cli("frobnicate --config " + good.string(), "cmd.log") == 3);
  CHECK(run_cli("eval", "noconfig.log") == 3);

  const auto diverge = write_config(
      "diverge.cfg", "checkpoint = " + (scratch() / "diverge.ckpt").string() +
                         "\ntrain.steps = 700\ntrain.batch_size = 1\ntrain.warmup_steps = 0\ntrain.lr_peak = 10000\n"
                         "train.lr_min = 10000\ntrain.grad_clip = 1e9\ntrain.eval_samples = 0\n"
                         "model.n_layers = 1\nmodel.d_model = 16\nmodel.n_heads = 2\nmodel.d_ff = 16\n");
  CHECK(run_cli("train --config " + diverge.string() + " --out " + out, "diverge.log") == 4);

  // --seed overrides the file and lands in the manifest.
  CHECK(run_cli("eval --config " + good.string() + " --seed 99 --out " + out, "seed.log") == 0);
  const auto manifest = nlohmann::json::parse(slurp(scratch() / "cli_out" / "eval_manifest.json"));
  CHECK(manifest["seed"] == 99);
}

TEST_CASE("plots") {
  CsvTable empty;
  const auto e1 = render_plot(empty, PlotKind::curve);
  CHECK(e1.find("<svg") != std::string::npos);
  CHECK(e1.find("<path") == std::string::npos);
  CsvTable header_only;
  header_only.header = {"layer", "row", "col", "value"};
  CHECK(render_plot(header_only, PlotKind::heatmap).find("class=\"cell\"") == std::string::npos);

  const auto r = run_command(Command::saliency, base_config() + "J = 2\nn_samples = 3\n", scratch() / "plots");
  const auto csv = r.out_dir / "saliency.csv";
  const auto svg = render_plot(read_csv(csv), PlotKind::heatmap);
  std::size_t cells = 0;
  for (auto pos = svg.find("class=\"cell\""); pos != std::string::npos; pos = svg.find("class=\"cell\"", pos + 1)) ++cells;
  CHECK(cells == read_csv(csv).rows.size());

  emit_plots(csv, PlotKind::heatmap, scratch() / "h1.svg");
  emit_plots(csv, PlotKind::heatmap, scratch() / "h2.svg");
  CHECK(slurp(scratch() / "h1.svg") == slurp(scratch() / "h2.svg"));

  CHECK_THROWS_AS(emit_plots(csv, PlotKind::separation, scratch() / "x.svg"), ConfigError);
  CHECK_THROWS_AS(parse_plot_kind("pie"), ConfigError);

  // Through the command line: empty CSV is fine, a schema mismatch exits 3.
  std::ofstream(scratch() / "empty.csv") << "";
  const auto ok = write_config("plot_ok.cfg", "plot.input = " + (scratch() / "empty.csv").string() + "\nplot.kind = separation\n");
  CHECK(run_cli("plot --config " + ok.string() + " --out " + (scratch() / "plot_out").string(), "plot_ok.log") == 0);
  CHECK(fs::exists(scratch() / "plot_out" / "empty.svg"));
  const auto mismatch = write_config("plot_bad.cfg", "plot.input = " + csv.string() + "\nplot.kind = curve\n");
  CHECK(run_cli("plot --config " + mismatch.string() + " --out " + (scratch() / "plot_out").string(), "plot_bad.log") == 3);

  const auto layer_csv = run_command(Command::layers, base_config() + "J = 2\nn_samples = 10\n", scratch() / "plots");
  const auto curve = render_plot(read_csv(layer_csv.out_dir / "layer_accuracy.csv"), PlotKind::curve);
  CHECK(curve.find("<path") != std::string::npos);
}
