#pragma once

#include "cpli/flops.hpp"
#include "cpli/model_io.hpp"
#include "cpli/pruner.hpp"
#include "cpli/sgd.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace cpli {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  SgdConfig sgd{};
  /// lr is multiplied by 0.1 once at each of these fractions of the run.
  std::vector<double> decay_points{0.5, 0.75};
  std::uint64_t seed = 0;
};

/// 10 epochs starting at lr 0.01.
TrainConfig default_finetune();

double learning_rate_at(const TrainConfig& cfg, std::size_t epoch);

/// One pass over `data` in a seeded shuffled order; returns the mean loss.
double train_epoch(Checkpoint& model, VelocityState& velocity, const DatasetHandle& data,
                   const TrainConfig& cfg, std::size_t epoch);

/// Trains from a fresh He initialisation.
Checkpoint train(const NetworkSpec& spec, const DatasetHandle& data, const TrainConfig& cfg);

/// Continues SGD on an existing (pruned) model with fresh velocity buffers.
Checkpoint finetune(const Checkpoint& model, const DatasetHandle& data, const TrainConfig& cfg);

/// Top-1 accuracy in [0, 1]. Throws on an empty split.
double evaluate(const Checkpoint& model, const DatasetHandle& data);

struct LayerCompression {
  std::size_t layer = 0;
  std::size_t kept = 0;
  std::size_t total = 0;
  std::uint64_t flops_before = 0;
  std::uint64_t flops_after = 0;
};

struct CompressionReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t num_locations = 0;
  std::vector<LayerCompression> layers;
  std::uint64_t flops_before = 0;
  std::uint64_t flops_after = 0;
  double compression_ratio = 1.0;
  double acc_baseline = 0;
  double acc_pruned = 0;
  double acc_finetuned = 0;
  /// acc_finetuned - acc_baseline, positive when accuracy improved.
  double acc_drop = 0;
  /// Wall-clock seconds per phase; kept out of the report files so reruns stay byte-identical.
  std::map<std::string, double> timings;
};

CompressionReport make_report(const Checkpoint& original, const Checkpoint& pruned);

struct PruneRun {
  Checkpoint pruned;
  PruneTrace trace;
  CompressionReport report;
};

/// prune_model + FLOPs accounting + pre-fine-tune evaluation on `test`.
PruneRun prune(const Checkpoint& model, const DatasetHandle& probe_data, const DatasetHandle& test,
               const PruneConfig& cfg);

std::string report_to_json(const CompressionReport& r);
CompressionReport report_from_json(const std::string& text);
void write_report_table(std::ostream& os, const CompressionReport& r);

struct DataConfig {
  std::string source = "synth";  // synth | idx | cifar
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t train_count = 10000;
  std::size_t test_count = 2000;
  std::size_t classes = 10;
  Dims dims{3, 12, 12};
  SynthOptions synth{};
  std::uint64_t seed = 1;
};

struct Datasets {
  DatasetHandle train;
  DatasetHandle test;
};

Datasets load_datasets(const DataConfig& cfg);

struct ModelConfig {
  std::vector<std::size_t> channels{16, 32, 32, 64};
  std::vector<std::size_t> pool_after{1, 2};
  std::size_t kernel = 3;
};

NetworkSpec build_network(const ModelConfig& model, const Dims& input_dims, std::size_t classes);

struct ExperimentCell {
  Variant variant = Variant::cpli;
  std::uint64_t seed = 0;
  std::size_t num_locations = 10;
};

struct ExperimentPlan {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  TrainConfig finetune = default_finetune();
  PruneConfig prune;  // budgets resolved from target_cr when empty
  double target_cr = 2.0;
  std::vector<ExperimentCell> cells;
  std::size_t jobs = 1;
};

/// Every combination of variants x location counts x seeds.
std::vector<ExperimentCell> grid_cells(const std::vector<Variant>& variants,
                                       const std::vector<std::size_t>& locations,
                                       const std::vector<std::uint64_t>& seeds);

struct AggregateRow {
  std::string variant;
  std::size_t num_locations = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> acc_drop;       // per seed, percentage points
  std::vector<double> acc_finetuned;  // per seed, percent
  std::vector<double> acc_pruned;     // per seed, percent
  double mean_acc_drop = 0;
  double mean_acc_finetuned = 0;
  double mean_acc_pruned = 0;
  double mean_cr = 0;
};

struct ExperimentResult {
  std::vector<CompressionReport> cells;  // plan order
  std::vector<PruneTrace> traces;        // plan order
  std::vector<AggregateRow> rows;        // first-appearance order of (variant, locations)
};

/// Runs a single cell against an already trained baseline.
CompressionReport run_cell(const ExperimentPlan& plan, const ExperimentCell& cell,
                           const Checkpoint& baseline, const Datasets& data,
                           PruneTrace* trace_out = nullptr);

ExperimentResult run_experiment(const ExperimentPlan& plan);

std::vector<AggregateRow> aggregate(const std::vector<ExperimentCell>& cells,
                                    const std::vector<CompressionReport>& reports);

void write_aggregate_table(std::ostream& os, const std::vector<AggregateRow>& rows);
std::string experiment_to_json(const ExperimentResult& result);

}  // namespace cpli
