#include "cpli/network.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace cpli {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

std::string layer_tag(std::size_t index, LayerKind kind) {
  return "layer " + std::to_string(index) + " (" + std::string(to_string(kind)) + ")";
}

std::span<const std::uint8_t> mask_for(const LayerMasks& masks, std::size_t layer) {
  if (masks.empty()) return {};
  return masks[layer];
}

}  // namespace

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::flatten: return "flatten";
    case LayerKind::linear: return "linear";
    case LayerKind::softmax_ce_head: return "softmax_ce_head";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(std::string_view name) {
  for (auto k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool2d, LayerKind::flatten,
                 LayerKind::linear, LayerKind::softmax_ce_head}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv(std::size_t c_in, std::size_t c_out, std::size_t kernel,
                          std::size_t stride, std::size_t pad) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in_channels = c_in;
  l.out_channels = c_out;
  l.kernel_h = l.kernel_w = kernel;
  l.stride = stride;
  l.pad = pad;
  return l;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool(std::size_t window, std::size_t stride) {
  LayerSpec l;
  l.kind = LayerKind::maxpool2d;
  l.window = window;
  l.stride = stride;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::linear;
  l.in_features = in;
  l.out_features = out;
  return l;
}

LayerSpec LayerSpec::head() {
  LayerSpec l;
  l.kind = LayerKind::softmax_ce_head;
  return l;
}

Dims LayerSpec::weight_dims() const {
  if (kind == LayerKind::conv2d) return {out_channels, in_channels, kernel_h, kernel_w};
  if (kind == LayerKind::linear) return {out_features, in_features};
  return {};
}

Dims LayerSpec::bias_dims() const {
  if (kind == LayerKind::conv2d) return {out_channels};
  if (kind == LayerKind::linear) return {out_features};
  return {};
}

std::vector<Dims> NetworkSpec::output_dims() const {
  require(input_dims.size() == 3, "network input dims must be [c,h,w], got " +
                                      dims_to_string(input_dims));
  std::vector<Dims> out;
  out.reserve(layers.size());
  Dims cur = input_dims;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string tag = layer_tag(i, l.kind);
    switch (l.kind) {
      case LayerKind::conv2d:
        require(cur.size() == 3, tag + ": expects [c,h,w] input, got " + dims_to_string(cur));
        require(l.in_channels >= 1 && l.out_channels >= 1 && l.kernel_h >= 1 && l.kernel_w >= 1,
                tag + ": channel and kernel extents must be >= 1");
        require(l.stride >= 1, tag + ": stride must be >= 1");
        require(cur[0] == l.in_channels, tag + ": in_channels " + std::to_string(l.in_channels) +
                                             " but incoming channels " + std::to_string(cur[0]));
        cur = {l.out_channels, conv_output_extent(cur[1], l.kernel_h, l.stride, l.pad),
               conv_output_extent(cur[2], l.kernel_w, l.stride, l.pad)};
        break;
      case LayerKind::relu:
        break;
      case LayerKind::maxpool2d:
        require(cur.size() == 3, tag + ": expects [c,h,w] input, got " + dims_to_string(cur));
        require(l.window >= 1 && l.stride >= 1, tag + ": window and stride must be >= 1");
        cur = {cur[0], conv_output_extent(cur[1], l.window, l.stride, 0),
               conv_output_extent(cur[2], l.window, l.stride, 0)};
        break;
      case LayerKind::flatten:
        cur = {dims_product(cur)};
        break;
      case LayerKind::linear:
        require(cur.size() == 1, tag + ": expects flat input, got " + dims_to_string(cur));
        require(cur[0] == l.in_features, tag + ": in_features " + std::to_string(l.in_features) +
                                             " but incoming features " + std::to_string(cur[0]));
        require(l.out_features >= 1, tag + ": out_features must be >= 1");
        cur = {l.out_features};
        break;
      case LayerKind::softmax_ce_head:
        require(cur.size() == 1 && cur[0] == num_classes,
                tag + ": expects [" + std::to_string(num_classes) + "] logits, got " +
                    dims_to_string(cur));
        break;
    }
    out.push_back(cur);
  }
  return out;
}

std::vector<Dims> NetworkSpec::input_dims_per_layer() const {
  std::vector<Dims> in;
  in.reserve(layers.size());
  Dims cur = input_dims;
  for (const Dims& d : output_dims()) {
    in.push_back(cur);
    cur = d;
  }
  return in;
}

void NetworkSpec::validate() const {
  require(num_classes >= 1, "network must have at least one class");
  require(!layers.empty(), "network has no layers");
  std::size_t heads = 0, convs = 0;
  for (const auto& l : layers) {
    heads += l.kind == LayerKind::softmax_ce_head;
    convs += l.kind == LayerKind::conv2d;
  }
  require(heads == 1 && layers.back().kind == LayerKind::softmax_ce_head,
          "network must end in exactly one softmax_ce_head");
  require(convs >= 1, "network must contain at least one conv2d layer");
  (void)output_dims();
}

std::vector<std::size_t> NetworkSpec::conv_layers() const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].kind == LayerKind::conv2d) idx.push_back(i);
  }
  return idx;
}

NetworkSpec make_conv_net(const Dims& input_dims, const std::vector<std::size_t>& channels,
                          std::size_t num_classes, const std::vector<std::size_t>& pool_after,
                          std::size_t kernel) {
  NetworkSpec spec;
  spec.input_dims = input_dims;
  spec.num_classes = num_classes;
  std::size_t c = input_dims.at(0);
  for (std::size_t k = 0; k < channels.size(); ++k) {
    spec.layers.push_back(LayerSpec::conv(c, channels[k], kernel, 1, kernel / 2));
    spec.layers.push_back(LayerSpec::relu());
    if (std::find(pool_after.begin(), pool_after.end(), k) != pool_after.end()) {
      spec.layers.push_back(LayerSpec::maxpool(2, 2));
    }
    c = channels[k];
  }
  spec.layers.push_back(LayerSpec::flatten());
  const Dims flat = spec.output_dims().back();
  spec.layers.push_back(LayerSpec::linear(flat.at(0), num_classes));
  spec.layers.push_back(LayerSpec::head());
  spec.validate();
  return spec;
}

ModelWeights init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ModelWeights w(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_params()) continue;
    const Dims wd = l.weight_dims();
    const std::size_t fan_in = dims_product(wd) / wd[0];
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    w[i].weight = Tensor(wd);
    for (auto& v : w[i].weight.values()) v = normal(rng);
    w[i].bias = Tensor(l.bias_dims());
  }
  return w;
}

void check_weights(const NetworkSpec& spec, const ModelWeights& weights) {
  require(weights.size() == spec.layers.size(),
          "weights cover " + std::to_string(weights.size()) + " layers, spec has " +
              std::to_string(spec.layers.size()));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.has_params()) continue;
    require(weights[i].weight.dims() == l.weight_dims(),
            layer_tag(i, l.kind) + ": weight dims " + dims_to_string(weights[i].weight.dims()) +
                " expected " + dims_to_string(l.weight_dims()));
    require(weights[i].bias.dims() == l.bias_dims(),
            layer_tag(i, l.kind) + ": bias dims " + dims_to_string(weights[i].bias.dims()) +
                " expected " + dims_to_string(l.bias_dims()));
  }
}

ForwardResult forward_collect(const NetworkSpec& spec, const ModelWeights& weights,
                              const Tensor& input, const LayerMasks& masks) {
  require(input.dims() == spec.input_dims, "input dims " + dims_to_string(input.dims()) +
                                               " do not match network input " +
                                               dims_to_string(spec.input_dims));
  require(masks.empty() || masks.size() == spec.layers.size(),
          "masks must be empty or cover every layer");
  check_weights(spec, weights);

  ForwardResult r;
  r.input = input;
  r.masks = masks;
  r.activations.reserve(spec.layers.size());
  r.pool_argmax.resize(spec.layers.size());
  const Tensor* cur = &r.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d:
        r.activations.push_back(conv2d_forward(*cur, weights[i].weight, weights[i].bias,
                                               mask_for(masks, i), l.stride, l.pad));
        break;
      case LayerKind::relu:
        r.activations.push_back(relu_forward(*cur));
        break;
      case LayerKind::maxpool2d: {
        PoolResult p = maxpool2d_forward(*cur, l.window, l.stride);
        r.pool_argmax[i] = std::move(p.argmax);
        r.activations.push_back(std::move(p.output));
        break;
      }
      case LayerKind::flatten:
        r.activations.push_back(flatten_forward(*cur));
        break;
      case LayerKind::linear:
        r.activations.push_back(linear_forward(*cur, weights[i].weight, weights[i].bias));
        break;
      case LayerKind::softmax_ce_head:
        r.logits = *cur;
        r.activations.push_back(softmax(*cur));
        break;
    }
    cur = &r.activations.back();
  }
  return r;
}

Tensor infer_logits(const NetworkSpec& spec, const ModelWeights& weights, const Tensor& input) {
  require(input.dims() == spec.input_dims, "input dims " + dims_to_string(input.dims()) +
                                               " do not match network input " +
                                               dims_to_string(spec.input_dims));
  Tensor cur = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv2d:
        cur = conv2d_forward(cur, weights[i].weight, weights[i].bias, {}, l.stride, l.pad);
        break;
      case LayerKind::relu:
        for (auto& v : cur.values()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::maxpool2d:
        cur = maxpool2d_forward(cur, l.window, l.stride).output;
        break;
      case LayerKind::flatten:
        cur.reshape({cur.size()});
        break;
      case LayerKind::linear:
        cur = linear_forward(cur, weights[i].weight, weights[i].bias);
        break;
      case LayerKind::softmax_ce_head:
        return cur;
    }
  }
  return cur;
}

Gradients backward_collect(const NetworkSpec& spec, const ModelWeights& weights,
                           const ForwardResult& fwd, std::size_t label) {
  require(label < spec.num_classes, "label " + std::to_string(label) + " out of range for " +
                                        std::to_string(spec.num_classes) + " classes");
  require(fwd.activations.size() == spec.layers.size(),
          "forward result does not match network depth");

  const std::size_t n = spec.layers.size();
  Gradients g;
  g.activation_grads.resize(n);
  g.param_grads.resize(n);
  g.loss = cross_entropy(fwd.logits, label);

  Tensor d_out = cross_entropy_grad(fwd.logits, label);
  g.activation_grads[n - 1] = d_out;
  for (std::size_t k = n - 1; k-- > 0;) {
    const LayerSpec& l = spec.layers[k];
    const Tensor& in = k == 0 ? fwd.input : fwd.activations[k - 1];
    g.activation_grads[k] = d_out;
    switch (l.kind) {
      case LayerKind::conv2d: {
        ConvGrads cg = conv2d_backward(in, weights[k].weight, d_out, mask_for(fwd.masks, k),
                                       l.stride, l.pad);
        g.param_grads[k] = {std::move(cg.d_weights), std::move(cg.d_bias)};
        d_out = std::move(cg.d_input);
        break;
      }
      case LayerKind::relu:
        d_out = relu_backward(in, d_out);
        break;
      case LayerKind::maxpool2d:
        d_out = maxpool2d_backward(in.dims(), fwd.pool_argmax[k], d_out);
        break;
      case LayerKind::flatten:
        d_out.reshape(in.dims());
        break;
      case LayerKind::linear: {
        LinearGrads lg = linear_backward(in, weights[k].weight, d_out);
        g.param_grads[k] = {std::move(lg.d_weights), std::move(lg.d_bias)};
        d_out = std::move(lg.d_input);
        break;
      }
      case LayerKind::softmax_ce_head:
        throw std::invalid_argument("softmax_ce_head must be the last layer");
    }
  }
  return g;
}

}  // namespace cpli
