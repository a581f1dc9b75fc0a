#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "idbp/nn.hpp"

using namespace idbp;
using namespace idbp::nn;

namespace {

template <class T>
Tensor<T> random_tensor(int c, int h, int w, std::mt19937_64& rng, double sd = 1.0)
{
  std::normal_distribution<double> n(0.0, sd);
  Tensor<T> t(c, h, w);
  for (T& v : t.data) {
    v = static_cast<T>(n(rng));
  }
  return t;
}

int reflect_ref(int i, int n)
{
  if (n == 1) {
    return 0;
  }
  while (i < 0 || i >= n) {
    i = i < 0 ? -i : 2 * (n - 1) - i;
  }
  return i;
}

// Six nested loops, centered taps, symmetric boundary.
Tensor<double> naive_conv(const Conv2d<double>& layer, const Tensor<double>& x)
{
  Tensor<double> y(layer.out_channels, x.height, x.width);
  for (int o = 0; o < layer.out_channels; ++o) {
    for (int r = 0; r < x.height; ++r) {
      for (int c = 0; c < x.width; ++c) {
        double acc = layer.bias[static_cast<std::size_t>(o)];
        for (int i = 0; i < layer.in_channels; ++i) {
          for (int u = 0; u < layer.kernel_h; ++u) {
            for (int v = 0; v < layer.kernel_w; ++v) {
              acc += layer.w(o, i, u, v) *
                     x.at(i, reflect_ref(r + u - layer.kernel_h / 2, x.height), reflect_ref(c + v - layer.kernel_w / 2, x.width));
            }
          }
        }
        y.at(o, r, c) = acc;
      }
    }
  }
  return y;
}

Conv2d<double> random_conv(int in, int out, int kh, int kw, std::mt19937_64& rng)
{
  Conv2d<double> layer(in, out, kh, kw);
  std::normal_distribution<double> n(0.0, 0.5);
  for (double& w : layer.weight) {
    w = n(rng);
  }
  for (double& b : layer.bias) {
    b = n(rng);
  }
  return layer;
}

}  // namespace

TEST(Conv, MatchesNaiveLoops)
{
  std::mt19937_64 rng(1);
  struct Case {
    int in, out, kh, kw, h, w;
  };
  // 70x70 spans more than one im2col chunk.
  for (Case c : {Case{1, 1, 3, 3, 5, 4}, Case{3, 4, 3, 3, 9, 11}, Case{2, 3, 5, 3, 8, 6}, Case{2, 2, 3, 3, 70, 70},
                 Case{1, 2, 3, 3, 1, 1}, Case{2, 1, 1, 1, 4, 4}}) {
    const auto layer = random_conv(c.in, c.out, c.kh, c.kw, rng);
    const auto x = random_tensor<double>(c.in, c.h, c.w, rng);
    const auto ref = naive_conv(layer, x);
    const auto got = conv2d_forward(layer, x);
    ASSERT_TRUE(got.same_shape(ref));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      ASSERT_NEAR(got.data[i], ref.data[i], 1e-10);
    }
  }
}

TEST(Conv, BackwardIsAdjointOfForward)
{
  // <conv(x) - b, g> = <x, dL/dx> for the linear part; weight grads match
  // the naive sum over output positions.
  std::mt19937_64 rng(2);
  auto layer = random_conv(3, 2, 3, 3, rng);
  const auto x = random_tensor<double>(3, 7, 6, rng);
  const auto g = random_tensor<double>(2, 7, 6, rng);
  const auto bw = conv2d_backward(layer, x, g);
  auto y = conv2d_forward(layer, x);
  double lhs = 0, rhs = 0;
  for (int o = 0; o < 2; ++o) {
    for (std::size_t p = 0; p < y.plane_size(); ++p) {
      lhs += (y.data[o * y.plane_size() + p] - layer.bias[static_cast<std::size_t>(o)]) * g.data[o * y.plane_size() + p];
    }
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    rhs += x.data[i] * bw.grad_input.data[i];
  }
  EXPECT_NEAR(lhs, rhs, 1e-9 * std::abs(lhs) + 1e-12);

  for (int o = 0; o < 2; ++o) {
    double gb = 0;
    for (std::size_t p = 0; p < g.plane_size(); ++p) {
      gb += g.data[o * g.plane_size() + p];
    }
    EXPECT_NEAR(bw.grad_bias[static_cast<std::size_t>(o)], gb, 1e-10);
    for (int i = 0; i < 3; ++i) {
      for (int u = 0; u < 3; ++u) {
        for (int v = 0; v < 3; ++v) {
          double gw = 0;
          for (int r = 0; r < 7; ++r) {
            for (int c = 0; c < 6; ++c) {
              gw += g.at(o, r, c) * x.at(i, reflect_ref(r + u - 1, 7), reflect_ref(c + v - 1, 6));
            }
          }
          EXPECT_NEAR(bw.grad_weight[((static_cast<std::size_t>(o) * 3 + i) * 3 + u) * 3 + v], gw, 1e-10);
        }
      }
    }
  }
}

TEST(Relu, ForwardAndBackward)
{
  Tensor<double> x(1, 1, 4);
  x.data = {-1.0, 0.0, 0.5, 2.0};
  EXPECT_EQ(relu_forward(x).data, (Buffer<double>{0.0, 0.0, 0.5, 2.0}));
  Tensor<double> g(1, 1, 4, 1.0);
  EXPECT_EQ(relu_backward(x, g).data, (Buffer<double>{0.0, 0.0, 1.0, 1.0}));
}

TEST(Loss, L1ValueAndSubgradient)
{
  Tensor<double> p(1, 1, 4), t(1, 1, 4);
  p.data = {1.0, 2.0, 3.0, 4.0};
  t.data = {1.0, 3.0, 2.0, 4.5};
  const auto lg = l1_residual_loss(p, t);
  EXPECT_DOUBLE_EQ(lg.loss, (0.0 + 1.0 + 1.0 + 0.5) / 4);
  EXPECT_EQ(lg.grad.data, (Buffer<double>{0.0, -0.25, 0.25, -0.25}));
}

TEST(Gradcheck, LinearNetwork)
{
  std::mt19937_64 rng(3);
  auto net = make_plain_cnn<double>({1, 1}, 7);
  const auto in = random_tensor<double>(1, 8, 8, rng);
  auto target = random_tensor<double>(1, 8, 8, rng);
  // Offset so the residual signs do not cancel in the bias gradient.
  for (double& v : target.data) {
    v += 0.7;
  }
  // The loss is piecewise linear in the weights, so central differences are
  // exact between kinks; a wide step keeps roundoff out of the comparison.
  GradcheckOptions o;
  o.seed = 1;
  o.step = 1e-3;
  const auto r = gradcheck(net, in, target, o);
  EXPECT_GE(r.checked, 5);
  EXPECT_LE(r.max_relative_error, 1e-7);
}

TEST(Gradcheck, ThreeLayerNetwork)
{
  std::mt19937_64 rng(4);
  auto net = make_plain_cnn<double>({1, 6, 6, 1}, 11);
  const auto in = random_tensor<double>(1, 12, 10, rng, 0.5);
  const auto target = random_tensor<double>(1, 12, 10, rng, 0.5);
  GradcheckOptions o;
  o.samples = 60;
  o.seed = 2;
  const auto r = gradcheck(net, in, target, o);
  EXPECT_GE(r.checked, 30);
  EXPECT_LE(r.max_relative_error, 1e-4);
}

TEST(Gradcheck, CorruptedGradientIsCaught)
{
  std::mt19937_64 rng(5);
  auto net = make_plain_cnn<double>({1, 6, 6, 1}, 11);
  const auto in = random_tensor<double>(1, 12, 10, rng, 0.5);
  const auto target = random_tensor<double>(1, 12, 10, rng, 0.5);
  GradcheckOptions o;
  o.samples = 60;
  o.seed = 2;
  o.corrupt = [](ParamBuffers<double>& g) {
    for (auto& buf : g) {
      for (double& v : buf) {
        v *= 1.05;
      }
    }
  };
  EXPECT_GE(gradcheck(net, in, target, o).max_relative_error, 1e-2);
}

TEST(Adam, FirstStepClosedForm)
{
  // With bias correction the first update is -lr * g / (|g| + eps').
  auto net = make_plain_cnn<float>({1, 1}, 3, 1);
  auto before = net.parameters()[0][0];
  auto adam = make_adam(net, 0.01);
  ParamBuffers<float> grads = zeros_like(net);
  grads[0][0] = 0.3f;
  grads[1][0] = -2.0f;
  ASSERT_TRUE(adam_step(adam, net.parameters(), grads));
  EXPECT_NEAR(net.parameters()[0][0], before - 0.01 * 0.3 / (0.3 + 1e-8), 1e-7);
  EXPECT_NEAR(net.parameters()[1][0], 0.01, 1e-7);
  EXPECT_EQ(adam.step, 1);

  // Second step with g2: m = 0.9 m1 + 0.1 g2, v = 0.999 v1 + 0.001 g2^2.
  const double g1 = 0.3, g2 = -0.1;
  const double m = 0.9 * (0.1 * g1) + 0.1 * g2;
  const double v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
  const double upd = 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  const double w1 = net.parameters()[0][0];
  grads[0][0] = static_cast<float>(g2);
  ASSERT_TRUE(adam_step(adam, net.parameters(), grads));
  EXPECT_NEAR(net.parameters()[0][0], w1 - upd, 1e-6);
}

TEST(Adam, NonFiniteGradientSkipsStep)
{
  auto net = make_plain_cnn<float>({1, 2, 1}, 3);
  const auto before = net;
  auto adam = make_adam(net);
  ParamBuffers<float> grads = zeros_like(net);
  grads[1][0] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(adam_step(adam, net.parameters(), grads));
  EXPECT_EQ(adam.step, 0);
  EXPECT_EQ(net.layers, before.layers);
}

TEST(Net, ZeroWeightsResidualIsIdentity)
{
  auto net = make_plain_cnn<float>({1, 4, 1}, 1);
  for (auto p : net.parameters()) {
    std::fill(p.begin(), p.end(), 0.0f);
  }
  std::mt19937_64 rng(6);
  const auto x = random_tensor<float>(1, 9, 9, rng);
  const auto noise = net.forward(x);
  for (float v : noise.data) {
    EXPECT_EQ(v, 0.0f);
  }
}

TEST(Net, HeInitStatistics)
{
  auto net = make_plain_cnn<double>({1, 64, 64, 1}, 99);
  const auto& conv = std::get<Conv2d<double>>(net.layers[2]);
  double ss = 0;
  for (double w : conv.weight) {
    ss += w * w;
  }
  const double var = ss / static_cast<double>(conv.weight.size());
  EXPECT_NEAR(var, 2.0 / (64 * 9), 0.1 * 2.0 / (64 * 9));
}

TEST(Net, TrainingIsDeterministicAndLearns)
{
  // Learn to predict additive noise on flat images.
  auto make = [] { return make_plain_cnn<float>({1, 8, 8, 1}, 5); };
  auto source = [](std::mt19937_64& rng) {
    TrainBatch<float> b;
    std::normal_distribution<double> n(0.0, 0.1);
    std::uniform_real_distribution<double> u(0.2, 0.8);
    for (int i = 0; i < 4; ++i) {
      Tensor<float> in(1, 12, 12), tgt(1, 12, 12);
      const double level = u(rng);
      for (std::size_t j = 0; j < in.size(); ++j) {
        tgt.data[j] = static_cast<float>(n(rng));
        in.data[j] = static_cast<float>(level) + tgt.data[j];
      }
      b.inputs.push_back(std::move(in));
      b.targets.push_back(std::move(tgt));
    }
    return b;
  };
  auto a = make(), b = make();
  auto adam_a = make_adam(a, 3e-3), adam_b = make_adam(b, 3e-3);
  const auto ra = train(a, source, 150, adam_a, 42);
  const auto rb = train(b, source, 150, adam_b, 42);
  EXPECT_EQ(ra.loss_trace, rb.loss_trace);
  EXPECT_EQ(a.layers, b.layers);
  EXPECT_EQ(ra.skipped_steps, 0);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += ra.loss_trace[static_cast<std::size_t>(i)];
    tail += ra.loss_trace[ra.loss_trace.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.8 * head);
  EXPECT_THROW(train(a, source, 0, adam_a, 1), std::invalid_argument);
}

TEST(Weights, RoundTripBitExact)
{
  const auto net = make_plain_cnn<float>({1, 5, 5, 1}, 8);
  std::stringstream ss;
  write_weights(net, ss);
  const auto back = read_weights(ss);
  EXPECT_EQ(back.layers, net.layers);
  EXPECT_EQ(back.residual, net.residual);
}

TEST(Weights, CorruptFilesRejected)
{
  const auto net = make_plain_cnn<float>({1, 3, 1}, 8);
  std::stringstream ss;
  write_weights(net, ss);
  const std::string bytes = ss.str();

  std::istringstream bad_magic("XDBPNN1" + bytes.substr(7));
  EXPECT_THROW(read_weights(bad_magic), InputError);
  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_weights(truncated), InputError);
  std::istringstream trailing(bytes + "x");
  EXPECT_THROW(read_weights(trailing), InputError);
  EXPECT_THROW(load_weights("/nonexistent/net.idbpnn"), InputError);
}
