#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "e2t/errors.hpp"
#include "e2t/network.hpp"
#include "e2t/psg_verify.hpp"

using namespace e2t;

namespace {

// fixed list of draws so tests can rescale them
class ListSampler final : public DrawSampler {
 public:
  explicit ListSampler(std::vector<LayerDraw> d, double scale_x = 1.0, double scale_g = 1.0)
      : d_(std::move(d)), sx_(scale_x), sg_(scale_g) {}
  LayerDraw draw(Rng&) override {
    LayerDraw out = d_[i_++ % d_.size()];
    out.x *= sx_;
    out.g *= sg_;
    return out;
  }
  std::string name() const override { return "list"; }

 private:
  std::vector<LayerDraw> d_;
  double sx_, sg_;
  std::size_t i_ = 0;
};

VerifyConfig config(int bits, std::uint64_t n = 20000) {
  VerifyConfig c;
  c.act_msb_bits = bits;
  c.grad_msb_bits = bits + 6;
  c.n_samples = n;
  return c;
}

std::vector<Snapshot> capture(std::uint64_t seed, int steps) {
  Rng rng(seed);
  NetworkSpec spec;
  spec.blocks = 2;
  spec.width = 6;
  spec.image_size = 8;
  spec.classes = 3;
  Network net(spec, rng);
  SnapshotRecorder rec({"block1.conv2", "head"}, 1);
  ExactWeightGrad exact;
  ObservedWeightGrad engine(exact, rec.observer());
  StepContext ctx;
  ctx.weight_grad = &engine;
  for (int s = 0; s < steps; ++s) {
    rec.set_step(static_cast<std::uint64_t>(s));
    Tensor x({4, 3, 8, 8});
    for (double& v : x.data()) v = rng.normal();
    const std::vector<int> labels = {0, 1, 2, 0};
    net.zero_grad();
    auto out = net.forward(x, ctx);
    net.backward(softmax_cross_entropy(out.logits, labels).g_logits, ctx);
  }
  return rec.take();
}

}  // namespace

TEST_CASE("appendix event table rows") {
  CHECK(classify_event(0.0, 0.2, 0.1) == EventKind::h0);
  CHECK(classify_event(0.3, -0.15, 0.1) == EventKind::hp);
  CHECK(classify_event(-0.3, 0.15, 0.1) == EventKind::hn);
  CHECK(classify_event(0.3, 0.05, 0.1) == EventKind::none);
  CHECK(classify_event(0.0, -0.2, 0.1) == EventKind::h0);
  CHECK(classify_event(0.0, 0.1, 0.1) == EventKind::none);  // strict inequality
  CHECK(classify_event(0.3, 0.5, 0.1) == EventKind::none);
  CHECK_THROWS_AS(classify_event(0.1, 0.1, 0.0), ConfigError);
  CHECK(to_string(EventKind::hp) == "Hp");
}

TEST_CASE("events partition the sample space") {
  Rng rng(3);
  for (int i = 0; i < 100000; ++i) {
    const double gw = rng.bernoulli(0.2) ? 0.0 : rng.normal();
    const double gm = rng.normal();
    const double tau = 0.01 + rng.uniform();
    const int matches = (gw == 0 && std::abs(gm) > tau) + (gw > 0 && gm < -tau) + (gw < 0 && gm > tau);
    REQUIRE(matches <= 1);
    CHECK((classify_event(gw, gm, tau) == EventKind::none) == (matches == 0));
  }
}

TEST_CASE("predictor at full width never fails") {
  Rng rng(1);
  GaussianSampler s(8, 8, 32);
  VerifyConfig c;
  c.act_msb_bits = c.act_bits;
  c.grad_msb_bits = c.grad_bits;
  c.n_samples = 10000;
  const auto b = monte_carlo_failure_rate(s, c, rng);
  CHECK(b.failures() == 0);
  CHECK(b.rate == 0.0);
  CHECK(b.samples >= 10000);
}

TEST_CASE("gaussian operands: failure rate within the bound and shrinking with bits") {
  double prev = 1.0;
  for (int bits : {2, 4, 6, 8}) {
    Rng rng(11);
    GaussianSampler s(8, 8, 64);
    const auto b = monte_carlo_failure_rate(s, config(bits), rng);
    CAPTURE(bits);
    CHECK(b.rate_ci.hi <= b.bound + b.bound_ci);
    CHECK(b.rate_ci.hi <= b.bound_literal + b.bound_literal_ci);
    CHECK(b.rate <= prev);
    CHECK(b.bound >= 0.0);
    CHECK(b.delta_x == doctest::Approx(std::ldexp(1.0, -(bits - 1))));
    if (b.rate > 0.0 && prev < 1.0) CHECK(b.rate <= prev / 2.0);
    prev = b.rate;
  }
}

TEST_CASE("sparse operands reach exact cancellations") {
  Rng rng(5);
  SparseSampler s(16, 16, 3);
  VerifyConfig c = config(2);
  c.grad_msb_bits = 2;
  const auto b = monte_carlo_failure_rate(s, c, rng);
  CHECK(b.h0 > 0);
  CHECK(b.e2 != b.e2_literal);
  CHECK(b.rate_ci.hi <= b.bound + b.bound_ci);
  CHECK(b.rate_ci.hi <= b.bound_literal + b.bound_literal_ci);
}

TEST_CASE("power-of-two rescaling leaves event counts unchanged") {
  Rng gen(9);
  GaussianSampler g(6, 5, 16);
  std::vector<LayerDraw> draws;
  for (int i = 0; i < 20; ++i) draws.push_back(g.draw(gen));
  ListSampler base(draws), scaled(draws, 8.0, 1.0 / 64.0);
  Rng r1(0), r2(0);
  const auto a = monte_carlo_failure_rate(base, config(4, 600), r1);
  const auto b = monte_carlo_failure_rate(scaled, config(4, 600), r2);
  CHECK(a.h0 == b.h0);
  CHECK(a.hp == b.hp);
  CHECK(a.hn == b.hn);
  CHECK(a.failures() > 0);
  CHECK(a.bound == b.bound);
}

TEST_CASE("all-zero operands are reported as degenerate") {
  ListSampler zeros({LayerDraw{Tensor({2, 3}), Tensor({2, 3})}});
  Rng rng(0);
  const auto b = monte_carlo_failure_rate(zeros, config(4, 100), rng);
  CHECK(b.degenerate);
  CHECK(b.rate == 0.0);
  CHECK(b.bound == 0.0);
}

TEST_CASE("fixed threshold override and argument checks") {
  Rng rng(2);
  GaussianSampler s(4, 4, 16);
  VerifyConfig c = config(4, 1000);
  c.tau = 0.5;
  CHECK(monte_carlo_failure_rate(s, c, rng).mean_tau == 0.5);
  c.tau = 0.0;
  c.beta = 1.5;
  CHECK_THROWS_AS(monte_carlo_failure_rate(s, c, rng), ConfigError);
  c.beta = 0.05;
  c.act_msb_bits = 9;
  CHECK_THROWS_AS(monte_carlo_failure_rate(s, c, rng), ConfigError);
}

TEST_CASE("snapshot capture and replay") {
  const auto snaps = capture(4, 3);
  REQUIRE(snaps.size() == 6);
  // backward visits the head first
  CHECK(snaps[0].layer == "head");
  CHECK(snaps[1].layer == "block1.conv2");
  CHECK(snaps[0].draw.x.shape() == Shape{6, 4});
  CHECK(snaps[0].draw.g.shape() == Shape{3, 4});
  // conv: rows are (ci, ky, kx), columns (n, oy, ox)
  CHECK(snaps[1].draw.x.shape() == Shape{6 * 9, 4 * 4 * 4});
  CHECK(snaps[1].draw.g.shape() == Shape{6, 4 * 4 * 4});

  const std::string path = "test_psg_verify_snapshots.bin";
  write_snapshots(path, snaps);
  const auto back = read_snapshots(path);
  REQUIRE(back.size() == snaps.size());
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    CHECK(back[i].layer == snaps[i].layer);
    CHECK(back[i].step == snaps[i].step);
    CHECK(back[i].draw.x == snaps[i].draw.x);
    CHECK(back[i].draw.g == snaps[i].draw.g);
  }

  SnapshotSampler a(snaps), b(back);
  Rng r1(0), r2(99);
  const auto ea = monte_carlo_failure_rate(a, config(4, 5000), r1);
  const auto eb = monte_carlo_failure_rate(b, config(4, 5000), r2);
  CHECK(ea.rate == eb.rate);
  CHECK(ea.bound == eb.bound);
  std::remove(path.c_str());
}

TEST_CASE("snapshot recorder honours layer list and interval") {
  CHECK(capture(1, 0).empty());
  SnapshotRecorder none({}, 1);
  CHECK(none.snapshots().empty());
  SnapshotSampler empty({});
  CHECK(empty.empty());
  Rng rng(0);
  CHECK_THROWS_AS(empty.draw(rng), StateError);
  CHECK_THROWS_AS(SnapshotRecorder({"head"}, 0), ConfigError);
}

TEST_CASE("malformed snapshot files are rejected with context") {
  const std::string path = "test_psg_verify_bad.bin";
  {
    std::ofstream o(path, std::ios::binary);
    o << "garbage";
  }
  CHECK_THROWS_AS(read_snapshots(path), FormatError);
  write_snapshots(path, capture(2, 1));
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes.resize(bytes.size() - 10);
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    o << bytes;
  }
  try {
    read_snapshots(path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("snapshot 1") != std::string::npos);
  }
  CHECK_THROWS_AS(read_snapshots("no/such/file.bin"), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("csv rows carry the documented columns") {
  std::ostringstream out;
  write_bound_csv_header(out);
  CHECK(out.str().rfind("bits,tau,rate,rate_ci,bound,bound_ci,", 0) == 0);
  BoundEstimate b;
  b.rate = 0.25;
  write_bound_csv_row(out, "gaussian", config(4), b);
  CHECK(out.str().find("\n4,") != std::string::npos);
}

TEST_CASE("layer draw operands reproduce the layer's weight gradient") {
  Rng rng(6);
  NetworkSpec spec;
  spec.blocks = 2;
  spec.width = 5;
  spec.image_size = 8;
  spec.classes = 3;
  Network net(spec, rng);
  int checked = 0;
  ExactWeightGrad exact;
  ObservedWeightGrad engine(exact, [&](const WeightGradRequest& req) {
    const LayerDraw d = layer_draw(req);
    const Tensor ref = req.inner_product(req.x, req.g_y);
    const std::size_t m_out = d.g.dim(0), m_in = d.x.dim(0), len = d.x.dim(1);
    REQUIRE(ref.size() == m_out * m_in);
    double worst = 0.0;
    for (std::size_t o = 0; o < m_out; ++o)
      for (std::size_t i = 0; i < m_in; ++i) {
        double s = 0.0;
        for (std::size_t l = 0; l < len; ++l) s += d.g[o * len + l] * d.x[i * len + l];
        worst = std::max(worst, std::abs(s - ref[o * m_in + i]));
      }
    CHECK(worst <= 1e-12);
    ++checked;
  });
  StepContext ctx;
  ctx.weight_grad = &engine;
  Tensor x({3, 3, 8, 8});
  for (double& v : x.data()) v = rng.normal();
  auto out = net.forward(x, ctx);
  net.backward(softmax_cross_entropy(out.logits, {0, 1, 2}).g_logits, ctx);
  CHECK(checked >= 5);
}
