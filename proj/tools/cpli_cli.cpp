// cpli: train / prune / finetune / eval / experiment / report

#include "cpli/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace cpli;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::uint64_t seed = 1;
  std::string variant = "cpli";
  double cr = 2.0;
  std::size_t locations = 10;
  fs::path out = "out";
  std::size_t jobs = 1;

  // data
  std::string source = "synth";
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_count = 10000, test_count = 2000, classes = 10;
  std::vector<std::size_t> dims{3, 12, 12};
  std::uint64_t data_seed = 1;
  double blob_sigma = 1.5, jitter = 1.0, noise = 0.1;
  std::size_t distractors = 0;

  // model
  std::vector<std::size_t> channels{16, 32, 32, 64};
  std::vector<std::size_t> pool_after{1, 2};
  std::size_t kernel = 3;

  // optimisation
  std::size_t train_epochs = 20, finetune_epochs = 10, batch_size = 64;
  double train_lr = 0.1, finetune_lr = 0.01, momentum = 0.9, weight_decay = 1e-4;

  // pruning
  double gamma = 1.0, rho = 1.3, damping = 0.0;
  std::size_t probe_images = 256;

  // experiment
  std::vector<std::string> variants{"cpli", "cpli_no_fi", "cpli_no_fl", "cp_baseline", "magnitude"};
  std::vector<std::size_t> location_list{10};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

void add_config_keys(CLI::App& app, Options& o) {
  auto* g = app.add_option_group("Config keys", "also settable in the --config file as key = value");
  g->add_option("--source", o.source, "synth | idx | cifar")->check(CLI::IsMember({"synth", "idx", "cifar"}));
  g->add_option("--train-images,--train_images", o.train_images);
  g->add_option("--train-labels,--train_labels", o.train_labels);
  g->add_option("--test-images,--test_images", o.test_images);
  g->add_option("--test-labels,--test_labels", o.test_labels);
  g->add_option("--train-count,--train_count", o.train_count);
  g->add_option("--test-count,--test_count", o.test_count);
  g->add_option("--classes", o.classes);
  g->add_option("--dims", o.dims, "synthetic image dims c h w")->expected(3);
  g->add_option("--data-seed,--data_seed", o.data_seed);
  g->add_option("--blob-sigma,--blob_sigma", o.blob_sigma);
  g->add_option("--jitter", o.jitter);
  g->add_option("--noise", o.noise);
  g->add_option("--distractors", o.distractors);
  g->add_option("--channels", o.channels, "conv widths")->expected(1, 64);
  g->add_option("--pool-after,--pool_after", o.pool_after, "2x2 pool after these conv ordinals (1-based)")->expected(0, 64);
  g->add_option("--kernel", o.kernel);
  g->add_option("--train-epochs,--train_epochs", o.train_epochs);
  g->add_option("--finetune-epochs,--finetune_epochs", o.finetune_epochs);
  g->add_option("--batch-size,--batch_size", o.batch_size);
  g->add_option("--train-lr,--train_lr", o.train_lr);
  g->add_option("--finetune-lr,--finetune_lr", o.finetune_lr);
  g->add_option("--momentum", o.momentum);
  g->add_option("--weight-decay,--weight_decay", o.weight_decay);
  g->add_option("--gamma", o.gamma);
  g->add_option("--rho", o.rho);
  g->add_option("--damping", o.damping);
  g->add_option("--probe-images,--probe_images", o.probe_images);
  g->add_option("--variants", o.variants)->expected(1, 16);
  g->add_option("--location-list,--location_list", o.location_list)->expected(1, 16);
  g->add_option("--seeds", o.seeds)->expected(1, 64);
}

DataConfig data_config(const Options& o) {
  DataConfig d;
  d.source = o.source;
  d.train_images = o.train_images;
  d.train_labels = o.train_labels;
  d.test_images = o.test_images;
  d.test_labels = o.test_labels;
  d.train_count = o.train_count;
  d.test_count = o.test_count;
  d.classes = o.classes;
  d.dims = o.dims;
  d.seed = o.data_seed;
  d.synth.blob_sigma = o.blob_sigma;
  d.synth.jitter = o.jitter;
  d.synth.noise = o.noise;
  d.synth.distractors = o.distractors;
  return d;
}

TrainConfig train_config(const Options& o, bool fine) {
  TrainConfig t = fine ? default_finetune() : TrainConfig{};
  t.epochs = fine ? o.finetune_epochs : o.train_epochs;
  t.batch_size = o.batch_size;
  t.sgd.lr = fine ? o.finetune_lr : o.train_lr;
  t.sgd.momentum = o.momentum;
  t.sgd.weight_decay = o.weight_decay;
  t.seed = o.seed;
  return t;
}

PruneConfig prune_config(const Options& o) {
  PruneConfig p;
  p.gamma = o.gamma;
  p.num_locations = o.locations;
  p.probe_images = o.probe_images;
  p.variant = variant_from_string(o.variant);
  p.solver.rho = o.rho;
  p.damping = o.damping;
  p.seed = o.seed;
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_report_files(const fs::path& stem, const CompressionReport& r) {
  write_text(fs::path(stem.string() + ".json"), report_to_json(r));
  std::ostringstream t;
  write_report_table(t, r);
  write_text(fs::path(stem.string() + ".tsv"), t.str());
}

std::string pct(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(2);
  s << v;
  return s.str();
}

int cmd_train(const Options& o) {
  const Datasets data = load_datasets(data_config(o));
  const NetworkSpec spec = build_network({o.channels, o.pool_after, o.kernel}, data.train.image_dims(),
                                         data.train.num_classes);
  Checkpoint m = train(spec, data.train, train_config(o, false));
  const double test_acc = evaluate(m, data.test);
  fs::create_directories(o.out);
  save_checkpoint(m, o.out / "model.ckpt");
  std::cout << "train_accuracy\t" << pct(100 * m.meta.accuracy) << "\ntest_accuracy\t" << pct(100 * test_acc)
            << "\ncheckpoint\t" << (o.out / "model.ckpt").string() << '\n';
  return 0;
}

int cmd_prune(const Options& o, const fs::path& model_path) {
  const Checkpoint m = load_checkpoint(model_path);
  const Datasets data = load_datasets(data_config(o));
  PruneConfig pc = prune_config(o);
  pc.budgets = budgets_for_cr(m.spec, o.cr).budgets;
  const PruneRun run = prune(m, data.train, data.test, pc);
  fs::create_directories(o.out);
  save_checkpoint(run.pruned, o.out / "pruned.ckpt");
  std::ostringstream trace;
  write_trace(trace, run.trace);
  write_text(o.out / "trace.tsv", trace.str());
  write_report_files(o.out / "report", run.report);
  std::cout << "compression_ratio\t" << run.report.compression_ratio << "\nacc_baseline\t"
            << pct(run.report.acc_baseline) << "\nacc_pruned\t" << pct(run.report.acc_pruned) << '\n';
  return 0;
}

int cmd_finetune(const Options& o, const fs::path& model_path, const fs::path& report_path) {
  const Checkpoint m = load_checkpoint(model_path);
  const Datasets data = load_datasets(data_config(o));
  const Checkpoint tuned = finetune(m, data.train, train_config(o, true));
  const double acc = 100.0 * evaluate(tuned, data.test);
  fs::create_directories(o.out);
  save_checkpoint(tuned, o.out / "finetuned.ckpt");
  std::cout << "acc_finetuned\t" << pct(acc) << '\n';
  if (!report_path.empty()) {
    CompressionReport r = report_from_json(read_text(report_path));
    r.acc_finetuned = acc;
    r.acc_drop = r.acc_finetuned - r.acc_baseline;
    write_report_files(o.out / "report", r);
    std::cout << "acc_drop\t" << pct(r.acc_drop) << '\n';
  }
  return 0;
}

int cmd_eval(const Options& o, const fs::path& model_path, const std::string& split) {
  const Checkpoint m = load_checkpoint(model_path);
  const Datasets data = load_datasets(data_config(o));
  const double acc = evaluate(m, split == "train" ? data.train : data.test);
  std::cout << "accuracy\t" << pct(100 * acc) << '\n';
  return 0;
}

int cmd_experiment(const Options& o) {
  ExperimentPlan plan;
  plan.data = data_config(o);
  plan.model = {o.channels, o.pool_after, o.kernel};
  plan.train = train_config(o, false);
  plan.finetune = train_config(o, true);
  plan.prune = prune_config(o);
  plan.target_cr = o.cr;
  plan.jobs = o.jobs;
  std::vector<Variant> variants;
  for (const auto& v : o.variants) variants.push_back(variant_from_string(v));
  plan.cells = grid_cells(variants, o.location_list, o.seeds);

  const ExperimentResult res = run_experiment(plan);
  fs::create_directories(o.out / "cells");
  for (std::size_t i = 0; i < plan.cells.size(); ++i) {
    const auto& c = plan.cells[i];
    const fs::path stem = o.out / "cells" /
                          (std::string(to_string(c.variant)) + "_L" + std::to_string(c.num_locations) +
                           "_s" + std::to_string(c.seed));
    write_report_files(stem, res.cells[i]);
    std::ostringstream trace;
    write_trace(trace, res.traces[i]);
    write_text(fs::path(stem.string() + ".trace.tsv"), trace.str());
  }
  std::ostringstream table;
  write_aggregate_table(table, res.rows);
  write_text(o.out / "experiment.tsv", table.str());
  write_text(o.out / "experiment.json", experiment_to_json(res));
  std::cout << table.str();
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs) {
  std::vector<ExperimentCell> cells;
  std::vector<CompressionReport> reports;
  for (const auto& path : inputs) {
    CompressionReport r = report_from_json(read_text(path));
    std::cout << "## " << path << '\n';
    write_report_table(std::cout, r);
    cells.push_back({variant_from_string(r.variant), r.seed, r.num_locations});
    reports.push_back(std::move(r));
  }
  if (reports.size() > 1) {
    std::cout << "## aggregate\n";
    write_aggregate_table(std::cout, aggregate(cells, reports));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPLI channel pruning: train, prune, fine-tune and evaluate small CNNs"};
  app.fallthrough();
  app.require_subcommand(1);
  Options o;
  app.set_config("--config", "", "key = value config file (INI or TOML, no sections)");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.add_option("--seed", o.seed, "run seed");
  app.add_option("--variant", o.variant, "pruning variant")
      ->check(CLI::IsMember({"cpli", "cpli_no_fl", "cpli_no_fi", "cp_baseline", "magnitude"}));
  app.add_option("--cr", o.cr, "target FLOPs compression ratio")->check(CLI::PositiveNumber);
  app.add_option("--locations", o.locations, "sampled locations per image")->check(CLI::PositiveNumber);
  app.add_option("--out", o.out, "output directory");
  app.add_option("--jobs", o.jobs, "parallel experiment workers")->check(CLI::PositiveNumber);
  add_config_keys(app, o);

  fs::path model_path, report_path;
  std::string split = "test";
  std::vector<std::string> report_inputs;

  auto* train_cmd = app.add_subcommand("train", "train a baseline network");
  auto* prune_cmd = app.add_subcommand("prune", "prune a checkpoint to a FLOPs target");
  prune_cmd->add_option("--model", model_path, "input checkpoint")->required()->check(CLI::ExistingFile);
  auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a pruned checkpoint");
  ft_cmd->add_option("--model", model_path, "pruned checkpoint")->required()->check(CLI::ExistingFile);
  ft_cmd->add_option("--report", report_path, "prune report.json to complete")->check(CLI::ExistingFile);
  auto* eval_cmd = app.add_subcommand("eval", "top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  auto* exp_cmd = app.add_subcommand("experiment", "variant x locations x seeds grid");
  auto* report_cmd = app.add_subcommand("report", "tabulate report.json files");
  report_cmd->add_option("inputs", report_inputs, "report files")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*prune_cmd) return cmd_prune(o, model_path);
    if (*ft_cmd) return cmd_finetune(o, model_path, report_path);
    if (*eval_cmd) return cmd_eval(o, model_path, split);
    if (*exp_cmd) return cmd_experiment(o);
    if (*report_cmd) return cmd_report(report_inputs);
  } catch (const std::exception& e) {
    std::cerr << "cpli: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
