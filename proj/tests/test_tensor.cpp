#include <cmath>

#include "doctest.h"
#include "e2t/errors.hpp"
#include "e2t/gradcheck.hpp"
#include "e2t/network.hpp"

using namespace e2t;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, double stddev = 1.0) {
  Tensor t(s);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

std::vector<int> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

NetworkSpec small_spec(std::size_t blocks) {
  NetworkSpec s;
  s.image_size = 8;
  s.width = 4;
  s.blocks = blocks;
  s.classes = 3;
  s.stem_stride = 1;
  return s;
}

class SignFlip final : public WeightGradEngine {
 public:
  explicit SignFlip(std::string layer) : layer_(std::move(layer)) {}
  Tensor compute(const WeightGradRequest& req, const PrecisionConfig& p, EnergyLedger* l) override {
    Tensor g = exact_.compute(req, p, l);
    if (req.layer == layer_) g *= -1.0;
    return g;
  }

 private:
  std::string layer_;
  ExactWeightGrad exact_;
};

}  // namespace

TEST_CASE("tensor shape and element invariants") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.sum() == doctest::Approx(9.0));
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Tensor u({2, 3}, 2.0);
  CHECK((t + u).sum() == doctest::Approx(21.0));
  CHECK_THROWS_AS(t += Tensor({3, 2}), DimensionError);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("conv2d forward examples") {
  CHECK(conv2d_forward(Tensor({1, 1, 1, 1}, {2.0}), Tensor({1, 1, 1, 1}, {3.0}), {1, 0}).values() ==
        std::vector<double>{6.0});

  Rng rng(3);
  Tensor w = random_tensor({2, 3, 3, 3}, rng);
  Tensor y = conv2d_forward(Tensor({2, 3, 5, 5}), w, {1, 1});
  CHECK(y.max_abs() == 0.0);

  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor k({1, 1, 2, 2}, {1, 0, 0, 1});
  CHECK(conv2d_forward(x, k, {1, 0}).values() == std::vector<double>{6, 8, 12, 14});
}

TEST_CASE("conv2d records 2 FLOPs per MAC") {
  EnergyLedger ledger;
  Rng rng(1);
  Tensor x = random_tensor({2, 3, 6, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng);
  conv2d_forward(x, w, {2, 1}, OpMeter{&ledger});
  const std::uint64_t hout = 3;
  CHECK(ledger.flops() == 2ull * 2 * 4 * 3 * 9 * hout * hout);
}

TEST_CASE("conv2d shape errors name the axis") {
  Tensor x({1, 2, 4, 4}), w({3, 3, 3, 3});
  try {
    conv2d_forward(x, w, {1, 1});
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("axis (1)") != std::string::npos);
  }
}

TEST_CASE("conv2d backward examples") {
  auto b = conv2d_backward(Tensor({1, 1, 1, 1}, {2.0}), Tensor({1, 1, 1, 1}, {3.0}), Tensor({1, 1, 1, 1}, {1.0}),
                           {1, 0});
  CHECK(b.g_params[0].values() == std::vector<double>{2.0});
  CHECK(b.g_x.values() == std::vector<double>{3.0});

  Rng rng(5);
  Tensor x = random_tensor({1, 2, 4, 4}, rng), w = random_tensor({3, 2, 3, 3}, rng);
  auto z = conv2d_backward(x, w, Tensor({1, 3, 4, 4}), {1, 1});
  CHECK(z.g_x.max_abs() == 0.0);
  CHECK(z.g_params[0].max_abs() == 0.0);
}

TEST_CASE("conv2d weight gradient matches central differences") {
  Rng rng(11);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Param w("w", ParamKind::conv_weight, random_tensor({3, 2, 3, 3}, rng));
  const ConvGeometry g{1, 1};
  Tensor target = random_tensor({1, 3, 4, 4}, rng);
  // L = sum(y * target), so g_y = target
  auto loss = [&] { return dot(conv2d_forward(x, w.value, g), target); };
  auto grads = [&] { w.grad = conv2d_backward(x, w.value, target, g).g_params[0]; };
  auto r = finite_difference_check({&w}, loss, grads, 1e-4, 1000, rng);
  CHECK(r.checked == 54);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("conv2d layer backward without forward is a state error") {
  Rng rng(2);
  Conv2d c("c", 1, 1, 3, {1, 1}, rng);
  StepContext ctx;
  CHECK_THROWS_AS(c.backward(Tensor({1, 1, 4, 4}), ctx), StateError);
  ctx.mode = Mode::eval;
  c.forward(Tensor({1, 1, 4, 4}), ctx);
  CHECK_THROWS_AS(c.backward(Tensor({1, 1, 4, 4}), ctx), StateError);
}

TEST_CASE("dense, relu and pooling basics") {
  Tensor y = dense_forward(Tensor({1, 2}, {1, 1}), Tensor({2, 2}, {1, 2, 3, 4}), nullptr);
  CHECK(y.values() == std::vector<double>{3, 7});
  CHECK(relu_forward(Tensor({3}, {-1, 0, 2})).values() == std::vector<double>{0, 0, 2});
  CHECK(relu_backward(Tensor({2}, {-1, 2}), Tensor({2}, {5, 5})).values() == std::vector<double>{0, 5});
  Tensor p = global_avg_pool_forward(Tensor({1, 2, 2, 2}, {1, 2, 3, 4, 0, 0, 0, 8}));
  CHECK(p.values() == std::vector<double>{2.5, 2.0});
  CHECK_THROWS_AS(dense_forward(Tensor({1, 3}), Tensor({2, 2}), nullptr), DimensionError);
}

TEST_CASE("conv, relu, pooling and dense pass finite-difference checks over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(2), c = 1 + rng.below(3), h = 3 + rng.below(4);
    const std::size_t cout = 1 + rng.below(3), k = 1 + 2 * rng.below(2);
    const ConvGeometry g{1 + rng.below(2), rng.below(2)};
    Param x("x", ParamKind::conv_weight, random_tensor({n, c, h, h}, rng));
    Param w("w", ParamKind::conv_weight, random_tensor({cout, c, k, k}, rng));
    Param dw("dense", ParamKind::dense_weight, random_tensor({3, cout}, rng));
    Param db("bias", ParamKind::dense_bias, random_tensor({3}, rng));
    auto labels = random_labels(n, 3, rng);

    Tensor y, r, p;
    std::uint64_t sig = 0;
    auto fwd = [&] {
      y = conv2d_forward(x.value, w.value, g);
      sig = 0;
      relu_signature(y, sig);
      r = relu_forward(y);
      p = global_avg_pool_forward(r);
      return softmax_cross_entropy(dense_forward(p, dw.value, &db.value), labels);
    };
    auto grads = [&] {
      auto l = fwd();
      auto d = dense_backward(p, dw.value, l.g_logits);
      dw.grad = d.g_params[0];
      db.grad = d.g_params[1];
      Tensor gr = relu_backward(y, global_avg_pool_backward(d.g_x, r.shape()));
      auto cb = conv2d_backward(x.value, w.value, gr, g);
      w.grad = cb.g_params[0];
      x.grad = cb.g_x;
    };
    auto res = finite_difference_check({&x, &w, &dw, &db}, [&] { return fwd().loss; }, grads, 1e-5, 200, rng,
                                       [&] { return sig; });
    INFO("seed " << seed << " worst " << res.worst);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("batchnorm passes finite-difference checks over 20 seeds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const std::size_t n = 2 + rng.below(3), c = 1 + rng.below(3), h = 2 + rng.below(3);
    Param x("x", ParamKind::conv_weight, random_tensor({n, c, h, h}, rng, 2.0));
    Param gamma("gamma", ParamKind::bn_gamma, random_tensor({c}, rng));
    Param beta("beta", ParamKind::bn_beta, random_tensor({c}, rng));
    Tensor target = random_tensor(x.value.shape(), rng);
    BatchNormCache cache;
    auto loss = [&] {
      Tensor y = batchnorm_forward_train(x.value, gamma.value, beta.value, 1e-5, &cache, nullptr);
      double l = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) l += 0.5 * (y[i] - target[i]) * (y[i] - target[i]);
      return l;
    };
    auto grads = [&] {
      Tensor y = batchnorm_forward_train(x.value, gamma.value, beta.value, 1e-5, &cache, nullptr);
      auto b = batchnorm_backward(y - target, gamma.value, cache);
      x.grad = b.g_x;
      gamma.grad = b.g_params[0];
      beta.grad = b.g_params[1];
    };
    auto res = finite_difference_check({&x, &gamma, &beta}, loss, grads, 1e-5, 200, rng);
    INFO("seed " << seed << " worst " << res.worst);
    CHECK(res.max_rel_error <= 1e-4);
  }
}

TEST_CASE("finite-difference check: linear model is exact") {
  Rng rng(7);
  Tensor x = random_tensor({4, 5}, rng);
  Param w("w", ParamKind::dense_weight, random_tensor({3, 5}, rng));
  Tensor target = random_tensor({4, 3}, rng);
  auto loss = [&] { return dot(dense_forward(x, w.value, nullptr), target); };
  auto grads = [&] { w.grad = dense_weight_grad(x, target); };
  CHECK(finite_difference_check({&w}, loss, grads, 1e-3, 100, rng).max_rel_error <= 1e-7);
  CHECK_THROWS_AS(finite_difference_check({&w}, loss, grads, 0.1, 100, rng), ConfigError);
}

TEST_CASE("2-block residual CNN gradients and mutation detection") {
  Rng rng(21);
  Network net(small_spec(2), rng);
  Tensor x = random_tensor({3, 3, 8, 8}, rng);
  auto labels = random_labels(3, 3, rng);
  StepContext ctx;
  auto r = finite_difference_check(net, x, labels, ctx, 1e-4, 40, rng);
  INFO(r.worst);
  CHECK(r.max_rel_error <= 1e-4);

  SignFlip flip("block1.conv2");
  ctx.weight_grad = &flip;
  CHECK(finite_difference_check(net, x, labels, ctx, 1e-4, 40, rng).max_rel_error >= 0.5);
}

TEST_CASE("shape algebra matches the closed form") {
  Rng rng(4);
  for (std::size_t h = 1; h <= 9; ++h)
    for (std::size_t k = 1; k <= 5; k += 2)
      for (std::size_t s = 1; s <= 3; ++s)
        for (std::size_t pad = 0; pad <= 2; ++pad) {
          if (h + 2 * pad < k) {
            CHECK_THROWS_AS(conv_out_size(h, k, s, pad), DimensionError);
            continue;
          }
          LayerSpec spec{LayerKind::conv2d, 2, 3, k, s, pad};
          Shape in{1, 2, h, h};
          Shape want = infer_output_shape(spec, in);
          CHECK(want[2] == (h + 2 * pad - k) / s + 1);
          Tensor y = conv2d_forward(Tensor(in), Tensor({3, 2, k, k}), {s, pad});
          CHECK(y.shape() == want);
        }
  CHECK(infer_output_shape({LayerKind::residual_block, 4, 4, 3, 1, 1}, {2, 4, 8, 8}) == Shape{2, 4, 8, 8});
  CHECK_THROWS_AS(infer_output_shape({LayerKind::residual_block, 4, 4, 3, 2, 1}, {2, 4, 8, 8}), DimensionError);
}

TEST_CASE("skipped residual block is the identity and leaves state untouched") {
  Rng rng(8);
  ResidualBlock block("b", 0, 3, 3, rng);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  EnergyLedger ledger;
  StepContext ctx;
  ctx.ledger = &ledger;
  auto mean_before = block.bn1().running_mean();
  Tensor y = block.forward(x, {0.1, false, 0}, ctx);
  CHECK(y == x);
  CHECK(ledger.flops() == 0);
  auto back = block.backward(random_tensor(x.shape(), rng), ctx);
  CHECK(back.g_scale == 0.0);
  for (Param* p : block.parameters()) {
    CHECK(p->grad.max_abs() == 0.0);
    CHECK_FALSE(p->active);
  }
  CHECK(block.bn1().running_mean() == mean_before);
  CHECK_THROWS_AS(block.forward(x, {0.9, true, 1}, ctx), ConfigError);
}

TEST_CASE("kept block with zero last conv is the identity") {
  Rng rng(9);
  ResidualBlock block("b", 0, 2, 3, rng);
  block.conv2().weight().value.fill(0.0);
  block.bn2().beta().value.fill(0.0);
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  StepContext ctx;
  Tensor y = block.forward(x, {1.0, true, 0}, ctx);
  CHECK(y == x);
}

TEST_CASE("mask [1,0,1,0] charges blocks 1 and 3 only") {
  Rng rng(10);
  Network net(small_spec(4), rng);
  Tensor x = random_tensor({2, 3, 8, 8}, rng);
  StepContext ctx;
  EnergyLedger none, half;
  ctx.ledger = &none;
  ctx.forced_mask = std::vector<bool>{false, false, false, false};
  net.forward(x, ctx);
  ctx.ledger = &half;
  ctx.forced_mask = std::vector<bool>{true, false, true, false};
  net.forward(x, ctx);
  auto bf = net.block_flops(2);
  CHECK(half.flops(Phase::forward) - none.flops(Phase::forward) == bf[0] + bf[2]);

  EnergyLedger full;
  ctx.ledger = &full;
  ctx.forced_mask.reset();
  net.forward(x, ctx);
  // softmax loss is not part of forward()
  CHECK(full.flops(Phase::forward) == net.base_forward_flops(2));
}

TEST_CASE("identical seeds give bit-identical ledgers") {
  auto run = [] {
    Rng rng(33);
    NetworkSpec spec = small_spec(2);
    spec.gated = true;
    Network net(spec, rng);
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    EnergyLedger ledger;
    Rng gate_rng = rng.fork("gate-draws");
    StepContext ctx;
    ctx.ledger = &ledger;
    ctx.gate_rng = &gate_rng;
    auto out = net.forward(x, ctx);
    net.backward(softmax_cross_entropy(out.logits, {0, 1}).g_logits, ctx);
    return ledger;
  };
  CHECK(run() == run());
}
