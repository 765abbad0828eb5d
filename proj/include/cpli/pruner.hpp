#pragma once

#include "cpli/model_io.hpp"
#include "cpli/network.hpp"
#include "cpli/solvers.hpp"
#include "cpli/trace.hpp"

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cpli {

enum class Variant { cpli, cpli_no_fl, cpli_no_fi, cp_baseline, magnitude };

std::string_view to_string(Variant v);
Variant variant_from_string(std::string_view name);

struct PruneConfig {
  /// Kept input channels per conv layer, indexed by conv ordinal. Entry 0
  /// (the first conv) is ignored: the first layer is never pruned.
  std::vector<std::size_t> budgets;
  double gamma = 1.0;
  std::size_t num_locations = 10;
  std::size_t probe_images = 256;
  Variant variant = Variant::cpli;
  LambdaSearchOptions solver;
  double damping = 0.0;
  std::uint64_t seed = 0;
  /// false keeps the original weights of the surviving channels (zero-fill).
  bool refit = true;
};

/// Conv outputs of the uncompressed model for every probe image, taken once
/// before any layer is pruned. Indexed [image][layer]; non-conv entries are empty.
struct ReferenceFeatures {
  std::vector<std::vector<Tensor>> conv_outputs;
};

ReferenceFeatures extract_reference_features(const Checkpoint& uncompressed,
                                             const DatasetHandle& probes);

/// Sampled records for one conv layer. Rows are (image, location) pairs in
/// image order; for per-output-channel data, row r and channel i live at r * c_out + i.
struct FeatureProbe {
  std::size_t layer = 0;
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t locations_per_image = 0;
  bool locations_clamped = false;
  /// (image index, flat output location) for each row.
  std::vector<std::pair<std::size_t, std::size_t>> locations;
  Eigen::MatrixXd y0;       // [rows, c_out] uncompressed conv response (bias excluded)
  Eigen::MatrixXd ystar;    // [rows, c_out] current compressed response (bias excluded)
  Eigen::MatrixXd grad;     // [rows, c_out] dC/dy of the compressed model
  Eigen::MatrixXd z;        // [rows * c_out, c_in] per-input-channel contributions
  Eigen::MatrixXd patches;  // [rows, c_in * kh * kw] receptive fields from the compressed input

  std::size_t rows() const { return locations.size(); }
};

/// Draws `count` distinct flat locations out of `extent`, ascending.
std::vector<std::size_t> sample_locations(std::uint64_t seed, std::size_t layer, std::size_t image,
                                          std::size_t extent, std::size_t count);

/// `compressed` must hold the pruned prefix with layer `layer` still carrying
/// its uncompressed weights.
FeatureProbe extract_probes(const Checkpoint& uncompressed, const ReferenceFeatures& reference,
                            const Checkpoint& compressed, std::size_t layer,
                            const DatasetHandle& probes, const PruneConfig& cfg);

/// Rows b = g * y0, A_j = g * s * z_j with (g, s) by variant:
///   cpli (grad, gamma*ystar), cpli_no_fl (1, gamma*ystar), cpli_no_fi (grad, 1), cp_baseline (1, 1).
WeightedSystem<double> build_weighted_system(const FeatureProbe& probe, Variant variant,
                                             double gamma);

struct ChannelSelection {
  SelectionResult<double> result;
  std::vector<std::size_t> support;  // exactly `budget` entries, ascending
  std::size_t padded = 0;            // all-zero channels added to fill the budget
};

ChannelSelection select_channels(const WeightedSystem<double>& system, std::size_t budget,
                                 const LambdaSearchOptions& opt = {});

/// The `budget` input channels with the largest sum_i |W_ij|_1; ties go to the lower index.
std::vector<std::size_t> magnitude_select(const Tensor& weights, std::size_t budget);

struct LayerRefit {
  Tensor weight;  // [c_out, |S|, kh, kw]
  Tensor bias;
  double damping = 0;
  double residual_before = 0;
  double residual_after = 0;
  RefitCheck check;
};

/// Least-squares refit of the kept channels against y0; the bias moves by the
/// mean remaining residual. With `refit == false` the original weights of the
/// kept channels are sliced out unchanged.
LayerRefit refit_layer(const FeatureProbe& probe, const std::vector<std::size_t>& support,
                       const LayerParams& original, double damping, bool refit = true);

struct PruneResult {
  Checkpoint compressed;
  PruneTrace trace;
};

class PruneError : public std::runtime_error {
 public:
  PruneError(const std::string& what, PruneTrace partial)
      : std::runtime_error(what), trace_(std::move(partial)) {}
  const PruneTrace& trace() const noexcept { return trace_; }

 private:
  PruneTrace trace_;
};

/// Layer-by-layer pruning of every conv after the first. Throws PruneError
/// carrying the trace so far when a stage fails.
PruneResult prune_model(const Checkpoint& uncompressed, const DatasetHandle& data,
                        const PruneConfig& cfg);

/// Physically removes input channels not in `support` from conv `layer` and
/// the matching filters from the preceding conv.
void remove_channels(Checkpoint& model, std::size_t layer, const std::vector<std::size_t>& support,
                     LayerParams new_params);

/// ceil(keep_fraction * c_in) for every prunable conv; the first conv keeps all.
std::vector<std::size_t> budgets_for_keep_fraction(const NetworkSpec& spec, double keep_fraction);

struct CrResolution {
  double keep_fraction = 1.0;
  std::vector<std::size_t> budgets;
  double achieved_cr = 1.0;
};

/// Uniform keep fraction whose achieved FLOPs ratio is closest to `target_cr`.
CrResolution budgets_for_cr(const NetworkSpec& spec, double target_cr);

/// Spec after applying per-conv budgets (used for FLOPs accounting).
NetworkSpec pruned_spec(const NetworkSpec& spec, const std::vector<std::size_t>& budgets);

Tensor normalize_input(const CheckpointMeta& meta, const Tensor& image);

}  // namespace cpli
