#include "cpli/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace cpli {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<LayerParams> zero_like(const ModelWeights& w) { return zero_velocity(w); }

void accumulate(std::vector<LayerParams>& acc, const std::vector<LayerParams>& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    if (!acc[i].weight.empty()) acc[i].weight.flat() += g[i].weight.flat();
    if (!acc[i].bias.empty()) acc[i].bias.flat() += g[i].bias.flat();
  }
}

void scale(std::vector<LayerParams>& acc, double s) {
  for (auto& p : acc) {
    if (!p.weight.empty()) p.weight.flat() *= s;
    if (!p.bias.empty()) p.bias.flat() *= s;
  }
}

std::size_t argmax(const Tensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return best;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TrainConfig default_finetune() {
  TrainConfig t;
  t.epochs = 10;
  t.sgd.lr = 0.01;
  return t;
}

double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.sgd.lr;
  for (double p : cfg.decay_points) {
    const auto boundary = static_cast<std::size_t>(std::floor(p * static_cast<double>(cfg.epochs)));
    if (epoch >= boundary) lr *= 0.1;
  }
  return lr;
}

double train_epoch(Checkpoint& model, VelocityState& velocity, const DatasetHandle& data,
                   const TrainConfig& cfg, std::size_t epoch) {
  if (data.count() == 0) throw std::invalid_argument("train: empty training split");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be >= 1");
  std::vector<std::size_t> order(data.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);

  SgdConfig sgd = cfg.sgd;
  sgd.lr = learning_rate_at(cfg, epoch);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    std::vector<LayerParams> acc = zero_like(model.weights);
    for (std::size_t k = start; k < end; ++k) {
      const std::size_t n = order[k];
      const ForwardResult f = forward_collect(model.spec, model.weights,
                                              normalize_input(model.meta, data.image(n)));
      const Gradients g = backward_collect(model.spec, model.weights, f, data.labels[n]);
      accumulate(acc, g.param_grads);
      loss_sum += g.loss;
    }
    scale(acc, 1.0 / static_cast<double>(end - start));
    sgd_step(model.weights, acc, sgd, velocity);
  }
  return loss_sum / static_cast<double>(order.size());
}

Checkpoint train(const NetworkSpec& spec, const DatasetHandle& data, const TrainConfig& cfg) {
  Checkpoint model{spec, init_weights(spec, cfg.seed), {}};
  model.meta.seed = cfg.seed;
  model.meta.dataset = data.split;
  VelocityState v = zero_velocity(model.weights);
  for (std::size_t e = 0; e < cfg.epochs; ++e) train_epoch(model, v, data, cfg, e);
  model.meta.epochs = cfg.epochs;
  if (data.count() > 0) model.meta.accuracy = evaluate(model, data);
  return model;
}

Checkpoint finetune(const Checkpoint& model, const DatasetHandle& data, const TrainConfig& cfg) {
  Checkpoint out = model;
  VelocityState v = zero_velocity(out.weights);
  for (std::size_t e = 0; e < cfg.epochs; ++e) train_epoch(out, v, data, cfg, e);
  out.meta.epochs = model.meta.epochs + cfg.epochs;
  return out;
}

double evaluate(const Checkpoint& model, const DatasetHandle& data) {
  if (data.count() == 0) throw std::invalid_argument("evaluate: empty split");
  std::size_t correct = 0;
  for (std::size_t n = 0; n < data.count(); ++n) {
    const Tensor logits =
        infer_logits(model.spec, model.weights, normalize_input(model.meta, data.image(n)));
    correct += argmax(logits) == data.labels[n];
  }
  return static_cast<double>(correct) / static_cast<double>(data.count());
}

CompressionReport make_report(const Checkpoint& original, const Checkpoint& pruned) {
  CompressionReport r;
  const FlopsLedger before = flops_count(original.spec);
  const FlopsLedger after = flops_count(pruned.spec);
  for (std::size_t l : original.spec.conv_layers()) {
    r.layers.push_back({l, pruned.spec.layers[l].in_channels, original.spec.layers[l].in_channels,
                        before.per_layer[l], after.per_layer[l]});
  }
  r.flops_before = before.total;
  r.flops_after = after.total;
  r.compression_ratio = static_cast<double>(before.total) / static_cast<double>(after.total);
  return r;
}

PruneRun prune(const Checkpoint& model, const DatasetHandle& probe_data, const DatasetHandle& test,
               const PruneConfig& cfg) {
  auto t0 = Clock::now();
  PruneResult pr = prune_model(model, probe_data, cfg);
  const double prune_seconds = seconds_since(t0);
  PruneRun run{std::move(pr.compressed), std::move(pr.trace), {}};
  run.report = make_report(model, run.pruned);
  run.report.variant = std::string(to_string(cfg.variant));
  run.report.seed = cfg.seed;
  run.report.num_locations = cfg.num_locations;
  run.report.timings["prune"] = prune_seconds;
  t0 = Clock::now();
  run.report.acc_baseline = 100.0 * evaluate(model, test);
  run.report.acc_pruned = 100.0 * evaluate(run.pruned, test);
  run.report.acc_finetuned = run.report.acc_pruned;
  run.report.acc_drop = run.report.acc_finetuned - run.report.acc_baseline;
  run.report.timings["eval"] = seconds_since(t0);
  run.pruned.meta.accuracy = run.report.acc_pruned / 100.0;
  return run;
}

std::string report_to_json(const CompressionReport& r) {
  json layers = json::array();
  for (const auto& l : r.layers) {
    layers.push_back({{"layer", l.layer},
                      {"kept", l.kept},
                      {"total", l.total},
                      {"flops_before", l.flops_before},
                      {"flops_after", l.flops_after}});
  }
  const json j{{"variant", r.variant},
               {"seed", r.seed},
               {"num_locations", r.num_locations},
               {"layers", layers},
               {"flops_before", r.flops_before},
               {"flops_after", r.flops_after},
               {"compression_ratio", r.compression_ratio},
               {"acc_baseline", r.acc_baseline},
               {"acc_pruned", r.acc_pruned},
               {"acc_finetuned", r.acc_finetuned},
               {"acc_drop", r.acc_drop}};
  return j.dump(2) + "\n";
}

CompressionReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  CompressionReport r;
  r.variant = j.at("variant");
  r.seed = j.at("seed");
  r.num_locations = j.at("num_locations");
  for (const json& l : j.at("layers")) {
    r.layers.push_back({l.at("layer"), l.at("kept"), l.at("total"), l.at("flops_before"),
                        l.at("flops_after")});
  }
  r.flops_before = j.at("flops_before");
  r.flops_after = j.at("flops_after");
  r.compression_ratio = j.at("compression_ratio");
  r.acc_baseline = j.at("acc_baseline");
  r.acc_pruned = j.at("acc_pruned");
  r.acc_finetuned = j.at("acc_finetuned");
  r.acc_drop = j.at("acc_drop");
  return r;
}

void write_report_table(std::ostream& os, const CompressionReport& r) {
  const auto old = os.precision(17);
  os << "layer\tkept\ttotal\tflops_before\tflops_after\n";
  for (const auto& l : r.layers) {
    os << l.layer << '\t' << l.kept << '\t' << l.total << '\t' << l.flops_before << '\t'
       << l.flops_after << '\n';
  }
  os << "# variant\tseed\tlocations\tflops_before\tflops_after\tcr\tacc_baseline\tacc_pruned"
        "\tacc_finetuned\tacc_drop\n";
  os << "# " << r.variant << '\t' << r.seed << '\t' << r.num_locations << '\t' << r.flops_before
     << '\t' << r.flops_after << '\t' << r.compression_ratio << '\t' << r.acc_baseline << '\t'
     << r.acc_pruned << '\t' << r.acc_finetuned << '\t' << r.acc_drop << '\n';
  os.precision(old);
}

Datasets load_datasets(const DataConfig& cfg) {
  Datasets d;
  if (cfg.source == "synth") {
    d.train = synth_dataset(cfg.seed, cfg.train_count, cfg.classes, cfg.dims, cfg.synth, "train");
    d.test = synth_dataset(cfg.seed + 0x9e3779b97f4a7c15ull, cfg.test_count, cfg.classes, cfg.dims,
                           cfg.synth, "test");
  } else if (cfg.source == "idx") {
    d.train = load_idx(cfg.train_images, cfg.train_labels, cfg.classes, "train");
    d.test = load_idx(cfg.test_images, cfg.test_labels, cfg.classes, "test");
  } else if (cfg.source == "cifar") {
    d.train = load_cifar_binary(cfg.train_images, "train");
    d.test = load_cifar_binary(cfg.test_images, "test");
  } else {
    throw std::invalid_argument("unknown data source '" + cfg.source + "'");
  }
  auto truncate = [](DatasetHandle& h, std::size_t n) {
    if (n == 0 || n >= h.count()) return;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    h = h.subset(idx);
  };
  if (cfg.source != "synth") {
    truncate(d.train, cfg.train_count);
    truncate(d.test, cfg.test_count);
  }
  d.train.validate();
  d.test.validate();
  return d;
}

NetworkSpec build_network(const ModelConfig& model, const Dims& input_dims, std::size_t classes) {
  return make_conv_net(input_dims, model.channels, classes, model.pool_after, model.kernel);
}

std::vector<ExperimentCell> grid_cells(const std::vector<Variant>& variants,
                                       const std::vector<std::size_t>& locations,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<ExperimentCell> cells;
  for (Variant v : variants) {
    for (std::size_t loc : locations) {
      for (std::uint64_t s : seeds) cells.push_back({v, s, loc});
    }
  }
  return cells;
}

CompressionReport run_cell(const ExperimentPlan& plan, const ExperimentCell& cell,
                           const Checkpoint& baseline, const Datasets& data, PruneTrace* trace_out) {
  PruneConfig pcfg = plan.prune;
  pcfg.variant = cell.variant;
  pcfg.seed = cell.seed;
  pcfg.num_locations = cell.num_locations;
  if (pcfg.budgets.empty()) pcfg.budgets = budgets_for_cr(baseline.spec, plan.target_cr).budgets;

  PruneRun run = prune(baseline, data.train, data.test, pcfg);
  TrainConfig ft = plan.finetune;
  ft.seed = cell.seed;
  const auto t0 = Clock::now();
  const Checkpoint tuned = finetune(run.pruned, data.train, ft);
  run.report.timings["finetune"] = seconds_since(t0);
  run.report.acc_finetuned = 100.0 * evaluate(tuned, data.test);
  run.report.acc_drop = run.report.acc_finetuned - run.report.acc_baseline;
  if (trace_out) *trace_out = std::move(run.trace);
  return run.report;
}

std::vector<AggregateRow> aggregate(const std::vector<ExperimentCell>& cells,
                                    const std::vector<CompressionReport>& reports) {
  std::vector<AggregateRow> rows;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const std::string variant(to_string(cells[c].variant));
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) {
      return r.variant == variant && r.num_locations == cells[c].num_locations;
    });
    if (it == rows.end()) {
      rows.push_back({variant, cells[c].num_locations, {}, {}, {}, {}, 0, 0, 0, 0});
      it = rows.end() - 1;
    }
    it->seeds.push_back(cells[c].seed);
    it->acc_drop.push_back(reports[c].acc_drop);
    it->acc_finetuned.push_back(reports[c].acc_finetuned);
    it->acc_pruned.push_back(reports[c].acc_pruned);
    it->mean_cr += reports[c].compression_ratio;
  }
  for (auto& r : rows) {
    r.mean_acc_drop = mean(r.acc_drop);
    r.mean_acc_finetuned = mean(r.acc_finetuned);
    r.mean_acc_pruned = mean(r.acc_pruned);
    r.mean_cr /= static_cast<double>(r.seeds.size());
  }
  return rows;
}

ExperimentResult run_experiment(const ExperimentPlan& plan) {
  const Datasets data = load_datasets(plan.data);
  const NetworkSpec spec = build_network(plan.model, data.train.image_dims(), data.train.num_classes);

  std::vector<std::uint64_t> seeds;
  for (const auto& c : plan.cells) {
    if (std::find(seeds.begin(), seeds.end(), c.seed) == seeds.end()) seeds.push_back(c.seed);
  }
  std::vector<Checkpoint> baselines(seeds.size());
  parallel_for(seeds.size(), plan.jobs, [&](std::size_t i) {
    TrainConfig tc = plan.train;
    tc.seed = seeds[i];
    baselines[i] = train(spec, data.train, tc);
  });

  ExperimentResult result;
  result.cells.resize(plan.cells.size());
  result.traces.resize(plan.cells.size());
  parallel_for(plan.cells.size(), plan.jobs, [&](std::size_t i) {
    const auto& cell = plan.cells[i];
    const std::size_t s = static_cast<std::size_t>(
        std::find(seeds.begin(), seeds.end(), cell.seed) - seeds.begin());
    result.cells[i] = run_cell(plan, cell, baselines[s], data, &result.traces[i]);
  });
  result.rows = aggregate(plan.cells, result.cells);
  return result;
}

void write_aggregate_table(std::ostream& os, const std::vector<AggregateRow>& rows) {
  auto join = [](const std::vector<double>& v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2);
    for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
    return s.str();
  };
  const auto old_flags = os.flags();
  const auto old_precision = os.precision();
  os << "variant\tlocations\tseeds\tmean_cr\tmean_acc_pruned\tmean_acc_finetuned\tmean_acc_drop"
        "\tper_seed_acc_finetuned\tper_seed_acc_drop\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << r.variant << '\t' << r.num_locations << '\t' << r.seeds.size() << '\t' << r.mean_cr
       << '\t' << r.mean_acc_pruned << '\t' << r.mean_acc_finetuned << '\t' << std::showpos
       << r.mean_acc_drop << std::noshowpos << '\t' << join(r.acc_finetuned) << '\t'
       << join(r.acc_drop) << '\n';
  }
  os.flags(old_flags);
  os.precision(old_precision);
}

std::string experiment_to_json(const ExperimentResult& result) {
  json rows = json::array();
  for (const auto& r : result.rows) {
    rows.push_back({{"variant", r.variant},
                    {"num_locations", r.num_locations},
                    {"seeds", r.seeds},
                    {"acc_drop", r.acc_drop},
                    {"acc_finetuned", r.acc_finetuned},
                    {"acc_pruned", r.acc_pruned},
                    {"mean_acc_drop", r.mean_acc_drop},
                    {"mean_acc_finetuned", r.mean_acc_finetuned},
                    {"mean_acc_pruned", r.mean_acc_pruned},
                    {"mean_cr", r.mean_cr}});
  }
  json cells = json::array();
  for (const auto& c : result.cells) cells.push_back(json::parse(report_to_json(c)));
  return json{{"rows", rows}, {"cells", cells}}.dump(2) + "\n";
}

}  // namespace cpli
