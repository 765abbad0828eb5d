#pragma once

#include "cpli/network.hpp"

namespace cpli {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  bool nesterov = true;
};

/// Velocity buffers shaped like the model parameters.
using VelocityState = ModelWeights;

VelocityState zero_velocity(const ModelWeights& weights);

/// In-place momentum step. Weight decay is added to the gradient before the
/// velocity update:
///   g' = g + wd * w,  v = mu * v + g',  w -= lr * (nesterov ? g' + mu * v : v)
void sgd_step(ModelWeights& weights, const std::vector<LayerParams>& grads, const SgdConfig& cfg,
              VelocityState& velocity);

}  // namespace cpli
