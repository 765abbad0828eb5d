#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cpli/layers.hpp"
#include "cpli/network.hpp"
#include "cpli/sgd.hpp"
#include "oracles.hpp"

#include <cmath>
#include <random>

using namespace cpli;

namespace {

NetworkSpec two_conv_net() {
  NetworkSpec s;
  s.input_dims = {2, 5, 5};
  s.num_classes = 3;
  s.layers = {LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::relu(), LayerSpec::conv(3, 2, 3, 1, 0),
              LayerSpec::relu(), LayerSpec::flatten(), LayerSpec::linear(18, 3), LayerSpec::head()};
  s.validate();
  return s;
}

NetworkSpec pooled_net() {
  NetworkSpec s;
  s.input_dims = {2, 6, 6};
  s.num_classes = 4;
  s.layers = {LayerSpec::conv(2, 3, 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool(2, 2),
              LayerSpec::conv(3, 4, 3, 2, 1), LayerSpec::flatten(), LayerSpec::linear(16, 4),
              LayerSpec::head()};
  s.validate();
  return s;
}

ModelWeights random_weights(const NetworkSpec& s, std::uint64_t seed) {
  ModelWeights w = init_weights(s, seed);
  std::mt19937_64 rng(seed + 17);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!w[i].bias.empty()) w[i].bias = oracle::random_tensor(w[i].bias.dims(), rng, 0.1);
  }
  return w;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({1, 4, 5}, rng);
  const Tensor w({1, 1, 1, 1}, 1.0);
  const Tensor b({1});
  const ChannelMask mask{1};
  CHECK(conv2d_forward(x, w, b, mask, 1, 0) == x);
}

TEST_CASE("conv2d: all-zero mask leaves only the bias") {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({3, 6, 6}, rng);
  const Tensor w = oracle::random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = oracle::random_tensor({4}, rng);
  const Tensor y = conv2d_forward(x, w, b, ChannelMask{0, 0, 0}, 1, 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = 0; k < 36; ++k) CHECK(y[i * 36 + k] == b[i]);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
  std::mt19937_64 rng(3);
  struct Case { Dims in; Dims w; std::size_t stride, pad; };
  for (const Case& c : {Case{{3, 8, 8}, {4, 3, 3, 3}, 1, 1}, Case{{2, 7, 9}, {5, 2, 3, 2}, 2, 0},
                        Case{{1, 5, 5}, {2, 1, 5, 5}, 1, 2}}) {
    const Tensor x = oracle::random_tensor(c.in, rng);
    const Tensor w = oracle::random_tensor(c.w, rng);
    const Tensor b = oracle::random_tensor({c.w[0]}, rng);
    const Tensor got = conv2d_forward(x, w, b, {}, c.stride, c.pad);
    const Tensor want = oracle::naive_conv(x, w, b, c.stride, c.pad);
    REQUIRE(got.dims() == want.dims());
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(std::abs(got[k] - want[k]) < 1e-12);
  }
}

TEST_CASE("conv2d mask is exactly input-channel zeroing") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = oracle::random_tensor({5, 6, 6}, rng);
    const Tensor w = oracle::random_tensor({3, 5, 3, 3}, rng);
    const Tensor b = oracle::random_tensor({3}, rng);
    ChannelMask mask(5);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng() & 1u);
    Tensor zeroed = x;
    for (std::size_t c = 0; c < 5; ++c)
      if (!mask[c]) std::fill_n(zeroed.data() + c * 36, 36, 0.0);
    CHECK(conv2d_forward(x, w, b, mask, 1, 1) == conv2d_forward(zeroed, w, b, ChannelMask(5, 1), 1, 1));
  }
}

TEST_CASE("conv2d rejects shape mismatches and names the dimension") {
  const Tensor x({3, 4, 4});
  const Tensor w({2, 4, 3, 3});
  const Tensor b({2});
  CHECK_THROWS_WITH_AS(conv2d_forward(x, w, b, {}, 1, 1), doctest::Contains("c_in"),
                       std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(x, Tensor({2, 3, 3, 3}), Tensor({3}), {}, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(x, Tensor({2, 3, 3, 3}), b, ChannelMask{1, 0}, 1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(conv2d_forward(x, Tensor({2, 3, 3, 3}), b, ChannelMask{1, 2, 0}, 1, 1),
                  std::invalid_argument);
}

TEST_CASE("aux layers") {
  SUBCASE("relu") {
    const Tensor y = relu_forward(Tensor({3}, {-1.0, 0.0, 2.0}));
    CHECK(y.storage() == std::vector<double>{0.0, 0.0, 2.0});
  }
  SUBCASE("maxpool forward/backward routes to the max") {
    const Tensor x({1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    const PoolResult p = maxpool2d_forward(x, 2, 2);
    CHECK(p.output.size() == 1);
    CHECK(p.output[0] == 4.0);
    const Tensor dx = maxpool2d_backward(x.dims(), p.argmax, Tensor({1, 1, 1}, 1.0));
    CHECK(dx.storage() == std::vector<double>{0.0, 0.0, 0.0, 1.0});
  }
  SUBCASE("maxpool ties resolve to the lowest flat index") {
    const Tensor x({1, 2, 2}, {5.0, 5.0, 5.0, 5.0});
    const PoolResult p = maxpool2d_forward(x, 2, 2);
    CHECK(p.argmax[0] == 0);
  }
  SUBCASE("linear matches a dense matvec") {
    std::mt19937_64 rng(5);
    const Tensor w = oracle::random_tensor({7, 11}, rng);
    const Tensor x = oracle::random_tensor({11}, rng);
    const Tensor b = oracle::random_tensor({7}, rng);
    const Tensor got = linear_forward(x, w, b);
    const Tensor want = oracle::naive_matvec(w, x, b);
    for (std::size_t i = 0; i < 7; ++i) CHECK(std::abs(got[i] - want[i]) < 1e-12);
  }
}

TEST_CASE("cross entropy equals -log softmax") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor z = oracle::random_tensor({5}, rng, 3.0);
    const Tensor p = softmax(z);
    for (std::size_t y = 0; y < 5; ++y) CHECK(std::abs(cross_entropy(z, y) + std::log(p[y])) < 1e-12);
  }
  CHECK_THROWS_AS(cross_entropy(Tensor({3}), 3), std::invalid_argument);
}

TEST_CASE("backward: saturated softmax gives a vanishing logit gradient") {
  const Tensor z({3}, {0.0, 60.0, 0.0});
  const Tensor g = cross_entropy_grad(z, 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(g[i]) < 1e-20);
}

TEST_CASE("backward: single linear layer has dC/dW = (softmax - onehot) x^T") {
  std::mt19937_64 rng(7);
  const Tensor w = oracle::random_tensor({4, 6}, rng);
  const Tensor x = oracle::random_tensor({6}, rng);
  const Tensor y = linear_forward(x, w, Tensor({4}));
  const Tensor dy = cross_entropy_grad(y, 2);
  const LinearGrads g = linear_backward(x, w, dy);
  const Tensor p = softmax(y);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      const double expect = (p[i] - (i == 2 ? 1.0 : 0.0)) * x[j];
      CHECK(std::abs(g.d_weights(i, j) - expect) < 1e-14);
    }
}

TEST_CASE("forward_collect") {
  const NetworkSpec s = two_conv_net();
  const ModelWeights w = random_weights(s, 11);
  std::mt19937_64 rng(12);
  const Tensor x = oracle::random_tensor(s.input_dims, rng);

  SUBCASE("all-ones masks match plain inference") {
    LayerMasks masks(s.layers.size());
    masks[0] = ChannelMask(2, 1);
    masks[2] = ChannelMask(3, 1);
    const ForwardResult masked = forward_collect(s, w, x, masks);
    CHECK(masked.logits == infer_logits(s, w, x));
    CHECK(masked.logits == forward_collect(s, w, x).logits);
  }
  SUBCASE("single conv net: activation equals conv2d_forward") {
    NetworkSpec one;
    one.input_dims = {2, 5, 5};
    one.num_classes = 2;
    one.layers = {LayerSpec::conv(2, 2, 3, 1, 1), LayerSpec::flatten(), LayerSpec::linear(50, 2),
                  LayerSpec::head()};
    const ModelWeights w1 = random_weights(one, 3);
    const ForwardResult f = forward_collect(one, w1, x);
    CHECK(f.activations[0] == conv2d_forward(x, w1[0].weight, w1[0].bias, {}, 1, 1));
  }
  SUBCASE("layer-by-layer re-application is bitwise equal") {
    const ForwardResult f = forward_collect(s, w, x);
    Tensor cur = x;
    cur = conv2d_forward(cur, w[0].weight, w[0].bias, {}, 1, 1);
    CHECK(cur == f.activations[0]);
    cur = relu_forward(cur);
    CHECK(cur == f.activations[1]);
    cur = conv2d_forward(cur, w[2].weight, w[2].bias, {}, 1, 0);
    CHECK(cur == f.activations[2]);
    cur = relu_forward(cur);
    CHECK(cur == f.activations[3]);
    cur = flatten_forward(cur);
    CHECK(cur == f.activations[4]);
    cur = linear_forward(cur, w[5].weight, w[5].bias);
    CHECK(cur == f.logits);
  }
  SUBCASE("wrong input dims") {
    CHECK_THROWS_AS(forward_collect(s, w, Tensor({2, 4, 5})), std::invalid_argument);
  }
}

TEST_CASE("backward_collect agrees with central finite differences") {
  for (const NetworkSpec& s : {two_conv_net(), pooled_net()}) {
    ModelWeights w = random_weights(s, 21);
    std::mt19937_64 rng(22);
    Tensor x = oracle::random_tensor(s.input_dims, rng);
    const std::size_t label = 1;
    const ForwardResult f = forward_collect(s, w, x);
    const Gradients g = backward_collect(s, w, f, label);
    CHECK(std::abs(g.loss - oracle::loss_from(s, w, 0, x, label)) < 1e-12);
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      if (!s.layers[i].has_params()) continue;
      auto loss = [&] { return oracle::loss_from(s, w, 0, x, label); };
      CHECK(oracle::max_relative_error(g.param_grads[i].weight, oracle::finite_difference(w[i].weight, loss)) < 1e-4);
      CHECK(oracle::max_relative_error(g.param_grads[i].bias, oracle::finite_difference(w[i].bias, loss)) < 1e-4);
    }
    for (std::size_t i = 0; i + 1 < s.layers.size(); ++i) {
      Tensor act = f.activations[i];
      auto loss = [&] { return oracle::loss_from(s, w, i + 1, act, label); };
      Tensor fd = oracle::finite_difference(act, loss);
      Tensor an = g.activation_grads[i];
      // non-differentiable points: ReLU at ~0 and pool windows with tied maxima
      const LayerKind next = s.layers[i + 1].kind;
      for (std::size_t k = 0; k < act.size(); ++k) {
        bool kink = next == LayerKind::relu && std::abs(act[k]) < 1e-4;
        if (next == LayerKind::maxpool2d) {
          const std::size_t hw = act.dim(1) * act.dim(2), y = (k % hw) / act.dim(2), x0 = k % act.dim(2);
          const std::size_t base = k - (y % 2) * act.dim(2) - (x0 % 2);
          for (std::size_t o : {std::size_t{0}, std::size_t{1}, act.dim(2), act.dim(2) + 1})
            if (base + o != k && std::abs(act[base + o] - act[k]) < 1e-4) kink = true;
        }
        if (kink) fd[k] = an[k] = 0;
      }
      CHECK(oracle::max_relative_error(an, fd) < 1e-4);
    }
  }
}

TEST_CASE("backward_collect rejects out-of-range labels") {
  const NetworkSpec s = two_conv_net();
  const ModelWeights w = random_weights(s, 1);
  const ForwardResult f = forward_collect(s, w, Tensor(s.input_dims, 0.5));
  CHECK_THROWS_AS(backward_collect(s, w, f, 3), std::invalid_argument);
}

TEST_CASE("forward/backward are deterministic") {
  const NetworkSpec s = pooled_net();
  const ModelWeights w = random_weights(s, 5);
  std::mt19937_64 rng(6);
  const Tensor x = oracle::random_tensor(s.input_dims, rng);
  const ForwardResult a = forward_collect(s, w, x), b = forward_collect(s, w, x);
  CHECK(a.activations == b.activations);
  const Gradients ga = backward_collect(s, w, a, 2), gb = backward_collect(s, w, b, 2);
  CHECK(ga.activation_grads == gb.activation_grads);
  CHECK(ga.param_grads == gb.param_grads);
}

TEST_CASE("network spec validation") {
  NetworkSpec s = two_conv_net();
  s.layers[2].in_channels = 4;
  CHECK_THROWS_WITH_AS(s.validate(), doctest::Contains("in_channels"), std::invalid_argument);
  NetworkSpec no_head = two_conv_net();
  no_head.layers.pop_back();
  CHECK_THROWS_AS(no_head.validate(), std::invalid_argument);
  NetworkSpec no_conv;
  no_conv.input_dims = {1, 2, 2};
  no_conv.num_classes = 2;
  no_conv.layers = {LayerSpec::flatten(), LayerSpec::linear(4, 2), LayerSpec::head()};
  CHECK_THROWS_AS(no_conv.validate(), std::invalid_argument);
}

TEST_CASE("sgd_step") {
  auto one_param = [](double w0) {
    ModelWeights w(1);
    w[0].weight = Tensor({2}, {w0, -w0});
    w[0].bias = Tensor({1}, {0.5});
    return w;
  };
  std::vector<LayerParams> grad(1);
  grad[0].weight = Tensor({2}, {0.3, -0.7});
  grad[0].bias = Tensor({1}, {1.0});

  SUBCASE("momentum 0 and no decay is a plain gradient step") {
    ModelWeights w = one_param(1.0);
    VelocityState v = zero_velocity(w);
    sgd_step(w, grad, {0.1, 0.0, 0.0, false}, v);
    CHECK(w[0].weight[0] == doctest::Approx(1.0 - 0.1 * 0.3).epsilon(1e-15));
    CHECK(w[0].weight[1] == doctest::Approx(-1.0 + 0.1 * 0.7).epsilon(1e-15));
    CHECK(w[0].bias[0] == doctest::Approx(0.5 - 0.1).epsilon(1e-15));
  }
  SUBCASE("defaults") {
    const SgdConfig d;
    CHECK(d.momentum == 0.9);
    CHECK(d.weight_decay == 0.0001);
    CHECK(d.nesterov);
  }
  SUBCASE("two steps match the hand-unrolled recurrence") {
    for (bool nesterov : {false, true}) {
      const double lr = 0.05, mu = 0.9, wd = 1e-4, g = 0.3;
      ModelWeights w = one_param(1.0);
      VelocityState v = zero_velocity(w);
      const SgdConfig cfg{lr, mu, wd, nesterov};
      sgd_step(w, grad, cfg, v);
      sgd_step(w, grad, cfg, v);
      double w_ = 1.0, v_ = 0.0;
      for (int s = 0; s < 2; ++s) {
        const double gd = g + wd * w_;
        v_ = mu * v_ + gd;
        w_ -= lr * (nesterov ? gd + mu * v_ : v_);
      }
      CHECK(w[0].weight[0] == doctest::Approx(w_).epsilon(1e-14));
      CHECK(v[0].weight[0] == doctest::Approx(v_).epsilon(1e-14));
    }
  }
  SUBCASE("shape mismatch and bad lr") {
    ModelWeights w = one_param(1.0);
    VelocityState v = zero_velocity(w);
    std::vector<LayerParams> bad = grad;
    bad[0].weight = Tensor({3});
    CHECK_THROWS_AS(sgd_step(w, bad, {}, v), std::invalid_argument);
    CHECK_THROWS_AS(sgd_step(w, grad, {0.0, 0.9, 0.0, false}, v), std::invalid_argument);
  }
}
