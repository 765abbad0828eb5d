#include "cpli/pruner.hpp"

#include "cpli/flops.hpp"

#include <algorithm>
#include <cmath>
#include <iterator>
#include <numeric>
#include <random>

namespace cpli {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::size_t previous_conv(const NetworkSpec& spec, std::size_t layer) {
  for (std::size_t k = layer; k-- > 0;) {
    const LayerKind kind = spec.layers[k].kind;
    if (kind == LayerKind::conv2d) return k;
    require(kind == LayerKind::relu || kind == LayerKind::maxpool2d,
            "layer " + std::to_string(layer) +
                " is not fed by a conv through channel-preserving layers only");
  }
  throw std::invalid_argument("layer " + std::to_string(layer) + " has no preceding conv2d");
}

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& patches, const std::vector<std::size_t>& support,
                               std::size_t block) {
  Eigen::MatrixXd out(patches.rows(), static_cast<Eigen::Index>(support.size() * block));
  for (std::size_t s = 0; s < support.size(); ++s) {
    out.middleCols(static_cast<Eigen::Index>(s * block), static_cast<Eigen::Index>(block)) =
        patches.middleCols(static_cast<Eigen::Index>(support[s] * block),
                           static_cast<Eigen::Index>(block));
  }
  return out;
}

Tensor slice_input_channels(const Tensor& w, const std::vector<std::size_t>& support) {
  const std::size_t c_out = w.dim(0), c_in = w.dim(1), kk = w.dim(2) * w.dim(3);
  Tensor out({c_out, support.size(), w.dim(2), w.dim(3)});
  for (std::size_t i = 0; i < c_out; ++i) {
    for (std::size_t s = 0; s < support.size(); ++s) {
      std::copy_n(w.data() + (i * c_in + support[s]) * kk, kk, out.data() + (i * support.size() + s) * kk);
    }
  }
  return out;
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::cpli: return "cpli";
    case Variant::cpli_no_fl: return "cpli_no_fl";
    case Variant::cpli_no_fi: return "cpli_no_fi";
    case Variant::cp_baseline: return "cp_baseline";
    case Variant::magnitude: return "magnitude";
  }
  return "unknown";
}

Variant variant_from_string(std::string_view name) {
  for (auto v : {Variant::cpli, Variant::cpli_no_fl, Variant::cpli_no_fi, Variant::cp_baseline,
                 Variant::magnitude}) {
    if (to_string(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) + "'");
}

Tensor normalize_input(const CheckpointMeta& meta, const Tensor& image) {
  if (meta.pixel_mean == 0.0 && meta.pixel_std == 1.0) return image;
  Tensor out = image;
  for (auto& v : out.values()) v = (v - meta.pixel_mean) / meta.pixel_std;
  return out;
}

ReferenceFeatures extract_reference_features(const Checkpoint& uncompressed,
                                             const DatasetHandle& probes) {
  ReferenceFeatures ref;
  ref.conv_outputs.resize(probes.count());
  for (std::size_t n = 0; n < probes.count(); ++n) {
    ForwardResult f = forward_collect(uncompressed.spec, uncompressed.weights,
                                      normalize_input(uncompressed.meta, probes.image(n)));
    auto& row = ref.conv_outputs[n];
    row.resize(uncompressed.spec.layers.size());
    for (std::size_t l : uncompressed.spec.conv_layers()) row[l] = std::move(f.activations[l]);
  }
  return ref;
}

std::vector<std::size_t> sample_locations(std::uint64_t seed, std::size_t layer, std::size_t image,
                                          std::size_t extent, std::size_t count) {
  std::vector<std::size_t> all(extent);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (count >= extent) return all;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(image)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> picked;
  picked.reserve(count);
  std::sample(all.begin(), all.end(), std::back_inserter(picked), count, rng);
  return picked;
}

FeatureProbe extract_probes(const Checkpoint& uncompressed, const ReferenceFeatures& reference,
                            const Checkpoint& compressed, std::size_t layer,
                            const DatasetHandle& probes, const PruneConfig& cfg) {
  require(layer < uncompressed.spec.layers.size() &&
              uncompressed.spec.layers[layer].kind == LayerKind::conv2d,
          "extract_probes: layer " + std::to_string(layer) + " is not a conv2d");
  require(reference.conv_outputs.size() == probes.count(),
          "extract_probes: reference features do not match the probe set");
  require(cfg.num_locations >= 1, "extract_probes: num_locations must be >= 1");
  const LayerSpec& ls = uncompressed.spec.layers[layer];
  const LayerSpec& cs = compressed.spec.layers.at(layer);
  require(cs == ls, "extract_probes: layer " + std::to_string(layer) +
                        " of the compressed model no longer matches the uncompressed layer");

  const Dims out_dims = uncompressed.spec.output_dims()[layer];
  const std::size_t h_out = out_dims[1], w_out = out_dims[2], extent = h_out * w_out;
  const std::size_t kk = ls.kernel_h * ls.kernel_w;
  const ConvGeometry geom{ls.kernel_h, ls.kernel_w, ls.stride, ls.pad};

  FeatureProbe p;
  p.layer = layer;
  p.c_in = ls.in_channels;
  p.c_out = ls.out_channels;
  p.kernel_h = ls.kernel_h;
  p.kernel_w = ls.kernel_w;
  p.locations_per_image = std::min(cfg.num_locations, extent);
  p.locations_clamped = cfg.num_locations > extent;

  const std::size_t rows = probes.count() * p.locations_per_image;
  const auto c_out = static_cast<Eigen::Index>(p.c_out);
  p.locations.reserve(rows);
  p.y0.resize(static_cast<Eigen::Index>(rows), c_out);
  p.ystar.resize(static_cast<Eigen::Index>(rows), c_out);
  p.grad.resize(static_cast<Eigen::Index>(rows), c_out);
  p.z.resize(static_cast<Eigen::Index>(rows) * c_out, static_cast<Eigen::Index>(p.c_in));
  p.patches.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(p.c_in * kk));

  const auto w0 = uncompressed.weights[layer].weight.matrix();  // [c_out, c_in*kk]
  const Tensor& bias0 = uncompressed.weights[layer].bias;
  const Tensor& bias_c = compressed.weights[layer].bias;

  Eigen::Index r = 0;
  for (std::size_t n = 0; n < probes.count(); ++n) {
    const ForwardResult fwd = forward_collect(compressed.spec, compressed.weights,
                                              normalize_input(compressed.meta, probes.image(n)));
    const Gradients grads =
        backward_collect(compressed.spec, compressed.weights, fwd, probes.labels[n]);
    const Tensor& x = layer == 0 ? fwd.input : fwd.activations[layer - 1];
    const Tensor& y_c = fwd.activations[layer];
    const Tensor& dy = grads.activation_grads[layer];
    const Tensor& y_ref = reference.conv_outputs[n][layer];

    for (std::size_t loc : sample_locations(cfg.seed, layer, n, extent, p.locations_per_image)) {
      const std::size_t oy = loc / w_out, ox = loc % w_out;
      p.locations.emplace_back(n, loc);
      const Eigen::VectorXd patch = extract_patch(x, geom, oy, ox);
      p.patches.row(r) = patch.transpose();
      for (std::size_t i = 0; i < p.c_out; ++i) {
        const std::size_t flat = i * extent + loc;
        p.y0(r, static_cast<Eigen::Index>(i)) = y_ref[flat] - bias0[i];
        p.ystar(r, static_cast<Eigen::Index>(i)) = y_c[flat] - bias_c[i];
        p.grad(r, static_cast<Eigen::Index>(i)) = dy[flat];
      }
      for (std::size_t j = 0; j < p.c_in; ++j) {
        const auto off = static_cast<Eigen::Index>(j * kk);
        const auto len = static_cast<Eigen::Index>(kk);
        p.z.block(r * c_out, static_cast<Eigen::Index>(j), c_out, 1).noalias() =
            w0.middleCols(off, len) * patch.segment(off, len);
      }
      ++r;
    }
  }
  return p;
}

WeightedSystem<double> build_weighted_system(const FeatureProbe& probe, Variant variant,
                                             double gamma) {
  require(variant != Variant::magnitude, "magnitude pruning does not use a weighted system");
  const Eigen::Index rows = static_cast<Eigen::Index>(probe.rows());
  const Eigen::Index c_out = static_cast<Eigen::Index>(probe.c_out);
  const bool use_grad = variant == Variant::cpli || variant == Variant::cpli_no_fi;
  const bool use_gate = variant == Variant::cpli || variant == Variant::cpli_no_fl;

  Eigen::MatrixXd a(rows * c_out, static_cast<Eigen::Index>(probe.c_in));
  Eigen::VectorXd b(rows * c_out);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index i = 0; i < c_out; ++i) {
      const Eigen::Index row = r * c_out + i;
      const double g = use_grad ? probe.grad(r, i) : 1.0;
      const double s = use_gate ? gamma * probe.ystar(r, i) : 1.0;
      b[row] = g * probe.y0(r, i);
      a.row(row) = (g * s) * probe.z.row(row);
    }
  }
  return WeightedSystem<double>(a, b);
}

ChannelSelection select_channels(const WeightedSystem<double>& system, std::size_t budget,
                                 const LambdaSearchOptions& opt) {
  ChannelSelection sel;
  sel.result = lambda_search(system, budget, opt);
  sel.support = sel.result.support;
  // Dead channels only enter when the live ones cannot fill the budget.
  for (std::size_t j = 0; sel.support.size() < budget && j < static_cast<std::size_t>(system.cols()); ++j) {
    if (!std::binary_search(sel.support.begin(), sel.support.end(), j)) {
      sel.support.insert(std::upper_bound(sel.support.begin(), sel.support.end(), j), j);
      ++sel.padded;
    }
  }
  return sel;
}

std::vector<std::size_t> magnitude_select(const Tensor& weights, std::size_t budget) {
  require(weights.rank() == 4, "magnitude_select expects conv weights [c_out,c_in,kh,kw]");
  const std::size_t c_out = weights.dim(0), c_in = weights.dim(1), kk = weights.dim(2) * weights.dim(3);
  require(budget >= 1 && budget <= c_in, "magnitude_select: budget outside [1, c_in]");
  std::vector<double> norms(c_in, 0.0);
  for (std::size_t i = 0; i < c_out; ++i) {
    for (std::size_t j = 0; j < c_in; ++j) {
      const double* w = weights.data() + (i * c_in + j) * kk;
      for (std::size_t k = 0; k < kk; ++k) norms[j] += std::abs(w[k]);
    }
  }
  std::vector<std::size_t> order(c_in);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
  order.resize(budget);
  std::sort(order.begin(), order.end());
  return order;
}

LayerRefit refit_layer(const FeatureProbe& probe, const std::vector<std::size_t>& support,
                       const LayerParams& original, double damping, bool refit) {
  require(!support.empty(), "refit_layer: support must not be empty");
  require(std::is_sorted(support.begin(), support.end()) && support.back() < probe.c_in,
          "refit_layer: support must be ascending channel indices below c_in");
  require(original.weight.dims() == Dims{probe.c_out, probe.c_in, probe.kernel_h, probe.kernel_w},
          "refit_layer: original weights do not match the probed layer");
  const std::size_t kk = probe.kernel_h * probe.kernel_w;

  const Eigen::MatrixXd p = gather_columns(probe.patches, support, kk);
  const Eigen::MatrixXd& t = probe.y0;

  LayerRefit out;
  Tensor sliced = slice_input_channels(original.weight, support);
  const Eigen::MatrixXd coef0 = sliced.matrix().transpose();
  out.residual_before = (t - p * coef0).squaredNorm();

  if (!refit) {
    out.weight = std::move(sliced);
    out.bias = original.bias;
    out.residual_after = out.residual_before;
    return out;
  }

  const auto r = least_squares_refit(p, t, damping);
  out.damping = r.damping;
  out.check = refit_orthogonality(p, t, r.weights, r.damping);
  Eigen::MatrixXd resid = t - p * r.weights;
  const Eigen::RowVectorXd shift = resid.colwise().mean();
  resid.rowwise() -= shift;
  out.residual_after = resid.squaredNorm();

  out.weight = Tensor({probe.c_out, support.size(), probe.kernel_h, probe.kernel_w});
  out.weight.matrix() = r.weights.transpose();
  out.bias = original.bias;
  out.bias.flat() += shift.transpose();
  return out;
}

void remove_channels(Checkpoint& model, std::size_t layer, const std::vector<std::size_t>& support,
                     LayerParams new_params) {
  NetworkSpec& spec = model.spec;
  require(layer < spec.layers.size() && spec.layers[layer].kind == LayerKind::conv2d,
          "remove_channels: layer is not a conv2d");
  const std::size_t prev = previous_conv(spec, layer);
  const std::size_t kept = support.size();
  require(new_params.weight.dims() == Dims{spec.layers[layer].out_channels, kept,
                                           spec.layers[layer].kernel_h, spec.layers[layer].kernel_w},
          "remove_channels: refit weights have dims " + dims_to_string(new_params.weight.dims()));

  LayerParams& pw = model.weights[prev];
  const std::size_t filter = dims_product(pw.weight.dims()) / pw.weight.dim(0);
  Tensor w({kept, pw.weight.dim(1), pw.weight.dim(2), pw.weight.dim(3)});
  Tensor b({kept});
  for (std::size_t s = 0; s < kept; ++s) {
    require(support[s] < pw.weight.dim(0), "remove_channels: support index out of range");
    std::copy_n(pw.weight.data() + support[s] * filter, filter, w.data() + s * filter);
    b[s] = pw.bias[support[s]];
  }
  pw = {std::move(w), std::move(b)};
  spec.layers[prev].out_channels = kept;
  spec.layers[layer].in_channels = kept;
  model.weights[layer] = std::move(new_params);
  spec.validate();
  check_weights(spec, model.weights);
}

PruneResult prune_model(const Checkpoint& uncompressed, const DatasetHandle& data,
                        const PruneConfig& cfg) {
  uncompressed.spec.validate();
  const std::vector<std::size_t> convs = uncompressed.spec.conv_layers();
  require(cfg.budgets.size() == convs.size(),
          "prune_model: expected " + std::to_string(convs.size()) + " budgets, got " +
              std::to_string(cfg.budgets.size()));
  require(cfg.probe_images >= 1 && cfg.num_locations >= 1, "prune_model: probe counts must be >= 1");
  require(data.count() >= 1, "prune_model: no probe images");
  for (std::size_t k = 1; k < convs.size(); ++k) {
    const std::size_t c_in = uncompressed.spec.layers[convs[k]].in_channels;
    require(cfg.budgets[k] >= 1 && cfg.budgets[k] <= c_in,
            "prune_model: budget " + std::to_string(cfg.budgets[k]) + " for conv " +
                std::to_string(k) + " outside [1, " + std::to_string(c_in) + "]");
  }

  std::vector<std::size_t> picked(data.count());
  std::iota(picked.begin(), picked.end(), std::size_t{0});
  if (cfg.probe_images < data.count()) {
    std::vector<std::size_t> chosen;
    std::mt19937_64 rng(cfg.seed);
    std::sample(picked.begin(), picked.end(), std::back_inserter(chosen), cfg.probe_images, rng);
    picked = std::move(chosen);
  }
  const DatasetHandle probes = data.subset(picked);
  const ReferenceFeatures reference = extract_reference_features(uncompressed, probes);

  PruneResult result{uncompressed, {}};
  for (std::size_t k = 1; k < convs.size(); ++k) {
    const std::size_t layer = convs[k];
    try {
      const FeatureProbe probe =
          extract_probes(uncompressed, reference, result.compressed, layer, probes, cfg);

      PruneTraceRecord rec;
      rec.layer = layer;
      rec.variant = std::string(to_string(cfg.variant));
      rec.c_in = probe.c_in;
      rec.budget = cfg.budgets[k];
      rec.probes = probe.rows();
      rec.locations_clamped = probe.locations_clamped;

      if (cfg.variant == Variant::magnitude) {
        rec.support = magnitude_select(result.compressed.weights[layer].weight, rec.budget);
      } else {
        const ChannelSelection sel = select_channels(
            build_weighted_system(probe, cfg.variant, cfg.gamma), rec.budget, cfg.solver);
        rec.support = sel.support;
        rec.lambda = sel.result.lambda_final;
        rec.backfilled = sel.result.backfilled.size() + sel.padded;
      }

      const bool refit = cfg.refit && cfg.variant != Variant::magnitude;
      LayerRefit fit = refit_layer(probe, rec.support, result.compressed.weights[layer],
                                   cfg.damping, refit);
      rec.residual_before = fit.residual_before;
      rec.residual_after = fit.residual_after;
      rec.damping = fit.damping;
      rec.refit_gradient_norm = fit.check.gradient_norm;
      rec.refit_bound = fit.check.bound;
      rec.refit_ok = fit.check.ok;

      remove_channels(result.compressed, layer, rec.support,
                      {std::move(fit.weight), std::move(fit.bias)});
      result.trace.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw PruneError("pruning layer " + std::to_string(layer) + " failed: " + e.what(),
                       result.trace);
    }
  }
  return result;
}

std::vector<std::size_t> budgets_for_keep_fraction(const NetworkSpec& spec, double keep_fraction) {
  require(keep_fraction > 0.0 && keep_fraction <= 1.0, "keep fraction must be in (0, 1]");
  std::vector<std::size_t> budgets;
  const auto convs = spec.conv_layers();
  for (std::size_t k = 0; k < convs.size(); ++k) {
    const std::size_t c_in = spec.layers[convs[k]].in_channels;
    if (k == 0) {
      budgets.push_back(c_in);
      continue;
    }
    const auto b = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(c_in) - 1e-9));
    budgets.push_back(std::clamp<std::size_t>(b, 1, c_in));
  }
  return budgets;
}

NetworkSpec pruned_spec(const NetworkSpec& spec, const std::vector<std::size_t>& budgets) {
  NetworkSpec out = spec;
  const auto convs = spec.conv_layers();
  require(budgets.size() == convs.size(), "pruned_spec: one budget per conv layer expected");
  for (std::size_t k = 1; k < convs.size(); ++k) {
    const std::size_t prev = previous_conv(out, convs[k]);
    out.layers[prev].out_channels = budgets[k];
    out.layers[convs[k]].in_channels = budgets[k];
  }
  out.validate();
  return out;
}

CrResolution budgets_for_cr(const NetworkSpec& spec, double target_cr) {
  require(target_cr >= 1.0, "target compression ratio must be >= 1");
  const double base = static_cast<double>(flops_count(spec).total);
  CrResolution best;
  best.budgets = budgets_for_keep_fraction(spec, 1.0);
  double best_gap = std::abs(1.0 - target_cr);
  constexpr int kSteps = 1000;
  for (int s = kSteps; s >= 1; --s) {
    const double f = static_cast<double>(s) / kSteps;
    auto budgets = budgets_for_keep_fraction(spec, f);
    const double cr = base / static_cast<double>(flops_count(pruned_spec(spec, budgets)).total);
    const double gap = std::abs(cr - target_cr);
    if (gap < best_gap) {
      best = {f, std::move(budgets), cr};
      best_gap = gap;
    }
  }
  return best;
}

}  // namespace cpli
