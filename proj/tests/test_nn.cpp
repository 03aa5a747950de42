#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "solidmark/nn/unet.hpp"
#include "solidmark/random.hpp"

using namespace solidmark;
using namespace solidmark::nn;

namespace {

Tensor random_tensor(Rng& rng, int c, int h, int w, double scale = 1.0) {
  Tensor t(c, h, w);
  for (auto& v : t.data) v = static_cast<float>(scale * (2 * uniform01(rng) - 1));
  return t;
}

UNetConfig tiny_config(int cond_dim = 4) {
  UNetConfig c;
  c.in_channels = 2;
  c.height = 8;
  c.width = 8;
  c.base_width = 3;
  c.time_dim = 6;
  c.emb_dim = 5;
  c.cond_dim = cond_dim;
  c.global_hidden = 4;
  return c;
}

double weighted_sum(const Tensor& out, const Tensor& r) {
  double acc = 0;
  for (std::size_t i = 0; i < out.size(); ++i) acc += static_cast<double>(out.data[i]) * r.data[i];
  return acc;
}

}  // namespace

TEST(Conv3x3, MatchesDirectConvolution) {
  Rng rng = derive_rng(1, "conv");
  std::vector<Parameter> params{{"w", {4, 2 * 9}, {}}, {"b", {4}, {}}};
  params[0].value.resize(4 * 18);
  params[1].value.resize(4);
  for (auto& v : params[0].value) v = static_cast<float>(uniform01(rng) - 0.5);
  for (auto& v : params[1].value) v = static_cast<float>(uniform01(rng) - 0.5);
  const Tensor x = random_tensor(rng, 2, 5, 7);
  Tape tape(params, false);
  const Tensor& y = tape.value(tape.conv3x3(tape.input(x), 0, 1));
  for (int o = 0; o < 4; ++o)
    for (int yy = 0; yy < 5; ++yy)
      for (int xx = 0; xx < 7; ++xx) {
        double acc = params[1].value[o];
        for (int i = 0; i < 2; ++i)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = yy + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 7) continue;
              acc += params[0].value[(o * 2 + i) * 9 + ky * 3 + kx] * x.at(i, sy, sx);
            }
        EXPECT_NEAR(y.at(o, yy, xx), acc, 1e-5);
      }
}

TEST(UNet, OutputShapeMatchesInput) {
  UNet net(tiny_config());
  Rng rng = derive_rng(2, "x");
  const Tensor x = random_tensor(rng, 2, 8, 8);
  std::vector<float> cond(4, 0.5f);
  const Tensor y = net.predict(x, 10, cond);
  EXPECT_TRUE(y.same_shape(x));
}

TEST(UNet, RejectsWrongDims) {
  UNet net(tiny_config());
  std::vector<float> cond(4, 0.0f);
  EXPECT_THROW(net.predict(Tensor(2, 12, 8), 1, cond), DimensionError);
  EXPECT_THROW(net.predict(Tensor(2, 8, 8), 1, std::vector<float>(3)), DimensionError);
  auto bad = tiny_config();
  bad.height = 10;
  EXPECT_THROW(UNet{bad}, DimensionError);
}

// Central finite differences against the tape's reverse pass, for a sample of
// entries of every parameter tensor.
TEST(UNet, GradientsMatchFiniteDifferences) {
  UNet net(tiny_config(), 3);
  Rng rng = derive_rng(4, "grad");
  for (auto& p : net.parameters())
    for (auto& v : p.value) v = static_cast<float>(0.4 * (2 * uniform01(rng) - 1));
  const Tensor x = random_tensor(rng, 2, 8, 8);
  const Tensor r = random_tensor(rng, 2, 8, 8);
  std::vector<float> cond{0.3f, -0.2f, 0.9f, -0.5f};
  const int t = 37;

  Gradients g(net.parameters());
  Tape tape(net.parameters(), true);
  const auto out = net.forward(tape, x, t, cond);
  tape.backward(out, r, g);

  const float h = 1e-2f;
  int checked = 0;
  for (std::size_t pi = 0; pi < net.parameters().size(); ++pi) {
    auto& p = net.parameters()[pi];
    for (int s = 0; s < 3; ++s) {
      const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(p.size()) - 1));
      const float orig = p.value[j];
      p.value[j] = orig + h;
      const double up = weighted_sum(net.predict(x, t, cond), r);
      p.value[j] = orig - h;
      const double down = weighted_sum(net.predict(x, t, cond), r);
      p.value[j] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = g.per_param[pi][j];
      EXPECT_NEAR(analytic, numeric, 2e-2 * std::max(1.0, std::abs(numeric))) << p.name << "[" << j << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 60);
}

TEST(UNet, UnconditionalHasNoConditionParameters) {
  UNet net(tiny_config(0));
  EXPECT_THROW(net.idx("cemb.w"), ModelError);
  Rng rng = derive_rng(2, "x");
  EXPECT_NO_THROW(net.predict(random_tensor(rng, 2, 8, 8), 3, {}));
}

TEST(UNet, InitializationIsSeeded) {
  UNet a(tiny_config(), 5), b(tiny_config(), 5), c(tiny_config(), 6);
  EXPECT_EQ(a.parameters()[a.idx("in.w")].value, b.parameters()[b.idx("in.w")].value);
  EXPECT_NE(a.parameters()[a.idx("in.w")].value, c.parameters()[c.idx("in.w")].value);
}

TEST(UNet, ConcurrentForwardPassesAgree) {
  UNet net(tiny_config(), 1);
  Rng rng = derive_rng(9, "p");
  for (auto& p : net.parameters())
    for (auto& v : p.value) v = static_cast<float>(0.3 * (2 * uniform01(rng) - 1));
  std::vector<Tensor> xs;
  for (int i = 0; i < 8; ++i) xs.push_back(random_tensor(rng, 2, 8, 8));
  std::vector<float> cond(4, 0.1f);
  std::vector<Tensor> serial, parallel(xs.size());
  for (const auto& x : xs) serial.push_back(net.predict(x, 5, cond));
  std::vector<std::thread> pool;
  for (std::size_t i = 0; i < xs.size(); ++i)
    pool.emplace_back([&, i] { parallel[i] = net.predict(xs[i], 5, cond); });
  for (auto& th : pool) th.join();
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_EQ(serial[i].data, parallel[i].data);
}

TEST(Adam, MinimizesQuadratic) {
  std::vector<Parameter> params{{"x", {3}, {2.0f, -1.0f, 0.5f}}};
  Adam opt(params, AdamConfig{0.05, 0.9, 0.999, 1e-8, 0.0});
  Gradients g(params);
  for (int i = 0; i < 500; ++i) {
    for (std::size_t j = 0; j < 3; ++j) g.per_param[0][j] = 2 * params[0].value[j];
    opt.step(params, g, 1);
  }
  for (float v : params[0].value) EXPECT_NEAR(v, 0.0f, 1e-2);
  EXPECT_EQ(opt.steps(), 500);
}

TEST(Adam, ReportsPreClipNorm) {
  std::vector<Parameter> params{{"x", {2}, {0.0f, 0.0f}}};
  Adam opt(params, AdamConfig{});
  Gradients g(params);
  g.per_param[0] = {6.0f, 8.0f};
  EXPECT_NEAR(opt.step(params, g, 2), 5.0, 1e-6);
}

TEST(TimestepFeatures, SinCosHalves) {
  const auto f = timestep_features(0, 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(f[i], 0.0f);
    EXPECT_EQ(f[4 + i], 1.0f);
  }
}
