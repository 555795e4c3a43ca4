#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "e2t/data.hpp"
#include "e2t/errors.hpp"
#include "e2t/stats.hpp"

using namespace e2t;

namespace {

std::vector<std::uint8_t> cifar_records(const std::vector<int>& labels) {
  std::vector<std::uint8_t> b;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    b.push_back(static_cast<std::uint8_t>(labels[r]));
    for (std::size_t p = 0; p < 3072; ++p) b.push_back(static_cast<std::uint8_t>((p + 31 * r) % 256));
  }
  return b;
}

}  // namespace

TEST_CASE("cifar parser") {
  auto d = parse_cifar10(cifar_records({3, 7}));
  CHECK(d.size() == 2);
  CHECK(d.labels == std::vector<int>{3, 7});
  CHECK(d.images.shape() == Shape{2, 3, 32, 32});
  CHECK(d.images.at(0, 0, 0, 1) == doctest::Approx(1.0 / 255.0));
  CHECK(d.images.at(1, 2, 31, 31) == doctest::Approx(((3071 + 31) % 256) / 255.0));

  CHECK_THROWS_AS(parse_cifar10(std::vector<std::uint8_t>(3072, 0)), FormatError);
  auto bad = cifar_records({200});
  try {
    parse_cifar10(bad);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("record 0") != std::string::npos);
  }
  auto sub = parse_cifar10(cifar_records({1, 1, 2, 1, 2, 2}), 2);
  CHECK(sub.labels == std::vector<int>{1, 1, 2, 2});
}

TEST_CASE("cifar loader normalises per channel") {
  const auto path = std::filesystem::temp_directory_path() / "e2t_cifar_test.bin";
  {
    auto b = cifar_records({0, 1, 2, 3});
    std::ofstream(path, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<long>(b.size()));
  }
  auto d = load_cifar10({path.string()});
  auto s = channel_stats(d.images);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(s.mean[c] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(s.std[c] == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(load_cifar10({"/nonexistent/file.bin"}), FormatError);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic dataset") {
  auto a = synthetic_dataset(5, 103, 10, 0.5);
  auto b = synthetic_dataset(5, 103, 10, 0.5);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == Shape{103, 3, 16, 16});
  auto counts = a.class_counts();
  CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
  CHECK_THROWS_AS(synthetic_dataset(5, 9, 10, 0.5), ConfigError);
  CHECK(synthetic_dataset(6, 50, 10, 0.5).images != a.subset({0}).images);

  // zero difficulty: every image equals its class template
  SyntheticTask task(9);
  Rng rng(1);
  auto clean = task.sample(20, 0.0, rng);
  for (std::size_t i = 0; i < 20; ++i) {
    Tensor t(clean.image_shape());
    const std::size_t per = t.size();
    std::copy_n(task.templates().data().begin() + clean.labels[i] * per, per, t.data().begin());
    CHECK(clean.image(i) == t);
  }
}

TEST_CASE("augmentation") {
  Rng rng(3);
  Tensor img({3, 8, 8});
  for (double& v : img.data()) v = rng.normal();
  CHECK(hflip(hflip(img)) == img);
  CHECK(hflip(img) != img);
  CHECK(pad_crop(Tensor({3, 8, 8}), 4, 4) == Tensor({3, 8, 8}));
  CHECK(pad_crop(img, 4, 4) == img);
  // offset (0, 4) shifts rows down by four with reflection at the top
  Tensor s = pad_crop(img, 0, 4);
  CHECK(s.values()[4 * 8] == img.values()[0]);
  CHECK(s.values()[0] == img.values()[4 * 8]);
  for (int i = 0; i < 50; ++i) CHECK(augment(img, rng).shape() == img.shape());
  CHECK_THROWS_AS(pad_crop(img, 9, 0), ConfigError);
}

TEST_CASE("smd schedule") {
  CHECK(smd_schedule(100, 0.0, 1).kept.size() == 100);
  CHECK(smd_schedule(100, 1.0, 1).kept.empty());
  auto s = smd_schedule(10000, 0.5, 42);
  CHECK(s.kept.size() >= 4850);
  CHECK(s.kept.size() <= 5150);
  CHECK(smd_schedule(10000, 0.5, 42).keep == s.keep);
  CHECK_THROWS_AS(smd_schedule(10, 1.5, 1), ConfigError);
  CHECK(smd_scheduled_iterations(1000, 1.0, 0.5) == 2000);
  CHECK(smd_scheduled_iterations(1000, 0.67, 0.5) == 1340);
}

TEST_CASE("epoch sampler visits every sample once per epoch") {
  EpochSampler s(10, 4, Rng(1));
  CHECK(s.batches_per_epoch() == 3);
  std::vector<int> seen(10, 0);
  for (int b = 0; b < 3; ++b)
    for (auto i : s.next()) ++seen[i];
  CHECK(seen == std::vector<int>(10, 1));
  auto first = s.next();
  CHECK(s.epoch() == 1);
  CHECK(first.size() == 4);
}

TEST_CASE("two dropped epochs visit a sample 2, 1, 0 times at 1/4, 1/2, 1/4") {
  std::vector<std::uint64_t> hist(3, 0);
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    EpochSampler s(40, 8, Rng(seed).fork("sampler"));
    auto sched = smd_schedule(2 * s.batches_per_epoch(), 0.5, seed);
    int visits = 0;
    for (std::size_t b = 0; b < sched.scheduled; ++b) {
      auto batch = s.next();
      if (sched.keep[b]) visits += static_cast<int>(std::count(batch.begin(), batch.end(), 0));
    }
    ++hist[2 - visits];
  }
  CHECK(chi_square_gof(hist, {0.25, 0.5, 0.25}).p_value > 0.01);
}

TEST_CASE("stratified halves") {
  auto d = synthetic_dataset(1, 101, 10, 1.0);
  Rng rng(2);
  auto [a, b] = stratified_halves(d, rng);
  CHECK(a.size() + b.size() == 101);
  auto ca = a.class_counts(), cb = b.class_counts(), cd = d.class_counts();
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(ca[k] + cb[k] == cd[k]);
    CHECK(ca[k] - cb[k] <= 1);
  }
  auto tiny = d.subset({0, 1, 2});
  CHECK_THROWS_AS(stratified_halves(tiny, rng), ConfigError);
}
