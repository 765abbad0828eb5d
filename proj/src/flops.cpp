#include "cpli/flops.hpp"

namespace cpli {

FlopsLedger flops_count(const NetworkSpec& spec) {
  FlopsLedger ledger;
  if (spec.layers.empty()) return ledger;
  const std::vector<Dims> out = spec.output_dims();
  ledger.per_layer.assign(spec.layers.size(), 0);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    std::uint64_t f = 0;
    if (l.kind == LayerKind::conv2d) {
      f = 2ull * l.out_channels * l.in_channels * l.kernel_h * l.kernel_w * out[i][1] * out[i][2];
    } else if (l.kind == LayerKind::linear) {
      f = 2ull * l.in_features * l.out_features;
    }
    ledger.per_layer[i] = f;
    ledger.total += f;
  }
  return ledger;
}

}  // namespace cpli
