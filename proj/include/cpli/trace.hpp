#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace cpli {

/// One pruning stage: which conv layer, what was kept and how well the
/// sampled outputs were reconstructed before and after the refit.
struct PruneTraceRecord {
  std::size_t layer = 0;  // index into NetworkSpec::layers
  std::string variant;
  double lambda = 0;
  std::size_t c_in = 0;
  std::size_t budget = 0;
  std::vector<std::size_t> support;
  std::size_t backfilled = 0;
  std::size_t probes = 0;
  bool locations_clamped = false;
  double residual_before = 0;  // sum (y0 - y)^2 with dropped channels zeroed, original weights
  double residual_after = 0;   // sum (y0 - y)^2 after the least-squares refit
  double damping = 0;
  double refit_gradient_norm = 0;
  double refit_bound = 0;
  bool refit_ok = true;

  friend bool operator==(const PruneTraceRecord&, const PruneTraceRecord&) = default;
};

using PruneTrace = std::vector<PruneTraceRecord>;

}  // namespace cpli
