#pragma once

#include "cpli/network.hpp"

#include <cstdint>
#include <vector>

namespace cpli {

struct FlopsLedger {
  std::vector<std::uint64_t> per_layer;  // aligned with NetworkSpec::layers
  std::uint64_t total = 0;
};

/// Multiply and add counted separately: conv = 2 c_out c_in kh kw h_out w_out,
/// linear = 2 in out, everything else 0.
FlopsLedger flops_count(const NetworkSpec& spec);

}  // namespace cpli
