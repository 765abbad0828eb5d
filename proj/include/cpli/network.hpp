#pragma once

#include "cpli/layers.hpp"
#include "cpli/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cpli {

enum class LayerKind { conv2d, relu, maxpool2d, flatten, linear, softmax_ce_head };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // maxpool2d
  std::size_t window = 0;
  // linear
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  static LayerSpec conv(std::size_t c_in, std::size_t c_out, std::size_t kernel,
                        std::size_t stride = 1, std::size_t pad = 0);
  static LayerSpec relu();
  static LayerSpec maxpool(std::size_t window, std::size_t stride);
  static LayerSpec flatten();
  static LayerSpec linear(std::size_t in, std::size_t out);
  static LayerSpec head();

  bool has_params() const { return kind == LayerKind::conv2d || kind == LayerKind::linear; }
  Dims weight_dims() const;
  Dims bias_dims() const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Dims input_dims;  // [c, h, w]
  std::size_t num_classes = 0;
  std::vector<LayerSpec> layers;

  /// Throws std::invalid_argument unless the layer chain is shape-compatible,
  /// ends in exactly one softmax_ce_head and contains at least one conv2d.
  void validate() const;
  /// Output dims of every layer (the head reports [num_classes]).
  std::vector<Dims> output_dims() const;
  /// Input dims of every layer.
  std::vector<Dims> input_dims_per_layer() const;
  std::vector<std::size_t> conv_layers() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Conv stack followed by a linear head; `pool_after` lists conv ordinals
/// (0-based) that get a 2x2/2 max pool after their ReLU.
NetworkSpec make_conv_net(const Dims& input_dims, const std::vector<std::size_t>& channels,
                          std::size_t num_classes, const std::vector<std::size_t>& pool_after,
                          std::size_t kernel = 3);

struct LayerParams {
  Tensor weight;
  Tensor bias;
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

using ModelWeights = std::vector<LayerParams>;
/// Indexed by layer; an empty mask keeps every input channel.
using LayerMasks = std::vector<ChannelMask>;

/// He-normal weights and zero biases, drawn in layer order from `seed`.
ModelWeights init_weights(const NetworkSpec& spec, std::uint64_t seed);
void check_weights(const NetworkSpec& spec, const ModelWeights& weights);

struct ForwardResult {
  Tensor input;
  /// Output of every layer. Conv entries hold the pre-activation output; the
  /// head entry holds the softmax probabilities.
  std::vector<Tensor> activations;
  std::vector<std::vector<std::size_t>> pool_argmax;
  LayerMasks masks;
  Tensor logits;
};

ForwardResult forward_collect(const NetworkSpec& spec, const ModelWeights& weights,
                              const Tensor& input, const LayerMasks& masks = {});

/// Logits only; skips storing intermediates.
Tensor infer_logits(const NetworkSpec& spec, const ModelWeights& weights, const Tensor& input);

struct Gradients {
  double loss = 0.0;
  /// dC/d(output of layer k); the head entry holds dC/dlogits.
  std::vector<Tensor> activation_grads;
  std::vector<LayerParams> param_grads;  // empty tensors for parameter-free layers
};

Gradients backward_collect(const NetworkSpec& spec, const ModelWeights& weights,
                           const ForwardResult& forward, std::size_t label);

}  // namespace cpli
