#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "e2t/rng.hpp"
#include "e2t/tensor.hpp"

namespace e2t {

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

/// Images N x C x H x W with integer labels in [0, classes).
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }
  Shape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
  Tensor image(std::size_t i) const;
  Tensor gather(const std::vector<std::size_t>& idx) const;
  std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const;
  Dataset subset(const std::vector<std::size_t>& idx) const;
  std::vector<std::size_t> class_counts() const;
};

ChannelStats channel_stats(const Tensor& images);
void normalize(Tensor& images, const ChannelStats& stats);

/// Parses CIFAR-10 binary records (1 label byte + 3072 channel-major pixel
/// bytes) into pixel values in [0, 1]. `source` names the input in errors.
/// Keeps the first `per_class` records of each class when per_class > 0.
/// FormatError on a length that is not a multiple of 3073 or a label > 9.
Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, std::size_t per_class = 0,
                      const std::string& source = "buffer");

/// Reads and concatenates CIFAR-10 binary files, then normalises each channel
/// with `stats`, or with the loaded set's own statistics when `stats` is null.
/// The statistics applied are copied to `used` when given.
Dataset load_cifar10(const std::vector<std::string>& paths, std::size_t per_class = 0,
                     const ChannelStats* stats = nullptr, ChannelStats* used = nullptr);

/// Class-conditional Gaussian images: a fixed per-class template (colour
/// offset plus an oriented cosine grating) plus difficulty * N(0, 1) noise.
class SyntheticTask {
 public:
  SyntheticTask(std::uint64_t seed, std::size_t classes = 10, std::size_t image_size = 16,
                std::size_t channels = 3);
  /// n images with balanced labels (counts differ by at most one), in
  /// shuffled order. ConfigError when n < classes.
  Dataset sample(std::size_t n, double difficulty, Rng& rng) const;
  const Tensor& templates() const { return templates_; }

 private:
  std::size_t classes_;
  Tensor templates_;  // classes x C x H x W
};

/// SyntheticTask(seed, classes) sampled with a stream derived from seed.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, double difficulty);

/// Mirror a C x H x W image left to right.
Tensor hflip(const Tensor& image);
/// Reflect-pad by `pad` and crop the original size at offset (oy, ox) of the
/// padded image; (pad, pad) returns the input.
Tensor pad_crop(const Tensor& image, std::size_t oy, std::size_t ox, std::size_t pad = 4);
/// Random flip (p = 0.5) then random pad-4 crop.
Tensor augment(const Tensor& image, Rng& rng);

/// Mini-batch drop decisions over a run's scheduled batches.
struct BatchSchedule {
  std::size_t scheduled = 0;
  double drop_prob = 0.0;
  std::vector<bool> keep;          // per scheduled batch
  std::vector<std::size_t> kept;   // indices with keep == true
};

/// Each scheduled batch is kept independently with probability 1 - p.
/// ConfigError unless p is in [0, 1].
BatchSchedule smd_schedule(std::size_t n_batches, double p, std::uint64_t seed);

/// Scheduled iterations giving an expected energy ratio r against a baseline
/// that processes `baseline` batches: round(r * baseline / (1 - p)).
std::uint64_t smd_scheduled_iterations(std::uint64_t baseline, double energy_ratio, double p);

/// Visits a fresh uniform permutation each epoch in batches of `batch`; the
/// final batch of an epoch may be short.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::size_t batch, Rng rng);
  std::vector<std::size_t> next();
  std::size_t batches_per_epoch() const { return (n_ + batch_ - 1) / batch_; }
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> perm_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// Splits every class in half at random (odd counts put the extra sample in
/// the first half). ConfigError when a class has fewer
/// than two samples.
std::pair<Dataset, Dataset> stratified_halves(const Dataset& d, Rng& rng);

}  // namespace e2t
