#include "cpli/sgd.hpp"

#include <stdexcept>
#include <string>

namespace cpli {

namespace {

void step_tensor(Tensor& w, const Tensor& g, Tensor& v, const SgdConfig& cfg) {
  if (w.empty()) return;
  if (g.dims() != w.dims() || v.dims() != w.dims()) {
    throw std::invalid_argument("sgd_step shape mismatch: weights " + dims_to_string(w.dims()) +
                                ", gradient " + dims_to_string(g.dims()) + ", velocity " +
                                dims_to_string(v.dims()));
  }
  auto wf = w.flat();
  auto vf = v.flat();
  const Eigen::VectorXd gd = g.flat() + cfg.weight_decay * wf;
  vf = cfg.momentum * vf + gd;
  if (cfg.nesterov) {
    wf -= cfg.lr * (gd + cfg.momentum * vf);
  } else {
    wf -= cfg.lr * vf;
  }
}

}  // namespace

VelocityState zero_velocity(const ModelWeights& weights) {
  VelocityState v(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!weights[i].weight.empty()) v[i].weight = Tensor(weights[i].weight.dims());
    if (!weights[i].bias.empty()) v[i].bias = Tensor(weights[i].bias.dims());
  }
  return v;
}

void sgd_step(ModelWeights& weights, const std::vector<LayerParams>& grads, const SgdConfig& cfg,
              VelocityState& velocity) {
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("sgd_step: lr must be > 0");
  if (grads.size() != weights.size() || velocity.size() != weights.size()) {
    throw std::invalid_argument("sgd_step: gradient/velocity layer count mismatch");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    step_tensor(weights[i].weight, grads[i].weight, velocity[i].weight, cfg);
    step_tensor(weights[i].bias, grads[i].bias, velocity[i].bias, cfg);
  }
}

}  // namespace cpli
