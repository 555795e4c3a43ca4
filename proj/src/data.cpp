#include "e2t/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "e2t/errors.hpp"

namespace e2t {

namespace {

constexpr std::size_t kRecord = 3073;
constexpr std::size_t kSide = 32;

}  // namespace

Tensor Dataset::image(std::size_t i) const {
  const std::size_t per = images.size() / images.dim(0);
  Tensor t(image_shape());
  std::copy_n(images.data().begin() + i * per, per, t.data().begin());
  return t;
}

Tensor Dataset::gather(const std::vector<std::size_t>& idx) const {
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = idx.size();
  Tensor t(s);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(images.data().begin() + idx[k] * per, per, t.data().begin() + k * per);
  }
  return t;
}

std::vector<int> Dataset::gather_labels(const std::vector<std::size_t>& idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  return Dataset{gather(idx), gather_labels(idx), classes};
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> c(classes, 0);
  for (int l : labels) ++c.at(static_cast<std::size_t>(l));
  return c;
}

ChannelStats channel_stats(const Tensor& images) {
  require_rank(images, 4, "channel_stats");
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < hw; ++k) {
        const double v = images[(i * c + ch) * hw + k];
        sum += v;
        sq += v * v;
      }
    const double m = static_cast<double>(n * hw);
    s.mean[ch] = sum / m;
    s.std[ch] = std::sqrt(std::max(sq / m - s.mean[ch] * s.mean[ch], 0.0));
    if (s.std[ch] == 0.0) s.std[ch] = 1.0;
  }
  return s;
}

void normalize(Tensor& images, const ChannelStats& stats) {
  require_rank(images, 4, "normalize");
  const std::size_t n = images.dim(0), c = images.dim(1), hw = images.dim(2) * images.dim(3);
  if (stats.mean.size() != c) throw DimensionError("normalize: channel axis (1) does not match statistics");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t k = 0; k < hw; ++k) {
        double& v = images[(i * c + ch) * hw + k];
        v = (v - stats.mean[ch]) / stats.std[ch];
      }
}

Dataset parse_cifar10(const std::vector<std::uint8_t>& bytes, std::size_t per_class, const std::string& source) {
  if (bytes.empty() || bytes.size() % kRecord != 0) {
    throw FormatError(source + ": length " + std::to_string(bytes.size()) + " is not a positive multiple of " +
                      std::to_string(kRecord) + "-byte records");
  }
  const std::size_t records = bytes.size() / kRecord;
  std::vector<std::size_t> take;
  std::vector<std::size_t> seen(10, 0);
  for (std::size_t r = 0; r < records; ++r) {
    const std::uint8_t label = bytes[r * kRecord];
    if (label > 9) {
      throw FormatError(source + ": record " + std::to_string(r) + " has label " + std::to_string(label) +
                        " (expected 0-9)");
    }
    if (per_class == 0 || seen[label] < per_class) {
      ++seen[label];
      take.push_back(r);
    }
  }
  Dataset d;
  d.classes = 10;
  d.images = Tensor({take.size(), 3, kSide, kSide});
  const std::size_t per = 3 * kSide * kSide;
  for (std::size_t k = 0; k < take.size(); ++k) {
    const std::uint8_t* rec = bytes.data() + take[k] * kRecord;
    d.labels.push_back(rec[0]);
    for (std::size_t p = 0; p < per; ++p) d.images[k * per + p] = rec[1 + p] / 255.0;
  }
  return d;
}

Dataset load_cifar10(const std::vector<std::string>& paths, std::size_t per_class, const ChannelStats* stats,
                     ChannelStats* used) {
  if (paths.empty()) throw ConfigError("load_cifar10: no input files");
  std::vector<Dataset> parts;
  std::size_t total = 0;
  std::vector<std::size_t> quota(10, per_class);
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(path + ": cannot open");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Dataset d = parse_cifar10(bytes, 0, path);
    if (per_class > 0) {
      std::vector<std::size_t> keep;
      for (std::size_t i = 0; i < d.size(); ++i) {
        auto& q = quota[static_cast<std::size_t>(d.labels[i])];
        if (q > 0) {
          --q;
          keep.push_back(i);
        }
      }
      if (keep.empty()) continue;
      d = d.subset(keep);
    }
    total += d.size();
    parts.push_back(std::move(d));
  }
  Dataset out;
  out.images = Tensor({total, 3, kSide, kSide});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.images.data().begin(), p.images.data().end(), out.images.data().begin() + offset);
    offset += p.images.size();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
  }
  const ChannelStats applied = stats ? *stats : channel_stats(out.images);
  normalize(out.images, applied);
  if (used) *used = applied;
  return out;
}

SyntheticTask::SyntheticTask(std::uint64_t seed, std::size_t classes, std::size_t image_size, std::size_t channels)
    : classes_(classes), templates_({classes, channels, image_size, image_size}) {
  if (classes < 2) throw ConfigError("synthetic task needs at least two classes");
  Rng rng = Rng(seed).fork("synthetic-templates");
  const double side = static_cast<double>(image_size);
  for (std::size_t k = 0; k < classes; ++k) {
    const double theta = std::numbers::pi * static_cast<double>(k) / static_cast<double>(classes);
    const double freq = 1.0 + static_cast<double>(k % 3);
    const double phase = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t c = 0; c < channels; ++c) {
      const double offset = rng.normal(0.0, 0.5);
      const double amp = 0.5 + rng.uniform();
      for (std::size_t y = 0; y < image_size; ++y)
        for (std::size_t x = 0; x < image_size; ++x) {
          const double u = (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) / side;
          templates_.at(k, c, y, x) = offset + amp * std::cos(2.0 * std::numbers::pi * freq * u + phase);
        }
    }
  }
}

Dataset SyntheticTask::sample(std::size_t n, double difficulty, Rng& rng) const {
  if (n < classes_) throw ConfigError("synthetic dataset: n must be >= number of classes");
  if (difficulty < 0.0) throw ConfigError("synthetic dataset: difficulty must be >= 0");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  Dataset d;
  d.classes = classes_;
  Shape s = templates_.shape();
  s[0] = n;
  d.images = Tensor(s);
  d.labels.resize(n);
  const std::size_t per = templates_.size() / classes_;
  for (std::size_t slot = 0; slot < n; ++slot) {
    const std::size_t i = order[slot];
    const std::size_t label = slot % classes_;
    d.labels[i] = static_cast<int>(label);
    for (std::size_t p = 0; p < per; ++p) {
      d.images[i * per + p] = templates_[label * per + p] + difficulty * rng.normal();
    }
  }
  return d;
}

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t classes, double difficulty) {
  Rng rng = Rng(seed).fork("synthetic-samples");
  return SyntheticTask(seed, classes).sample(n, difficulty, rng);
}

Tensor hflip(const Tensor& image) {
  require_rank(image, 3, "hflip");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = image[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

Tensor pad_crop(const Tensor& image, std::size_t oy, std::size_t ox, std::size_t pad) {
  require_rank(image, 3, "pad_crop");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (oy > 2 * pad || ox > 2 * pad) throw ConfigError("pad_crop: offset outside the padded image");
  if (pad >= h || pad >= w) throw ConfigError("pad_crop: reflect padding must be smaller than the image");
  auto reflect = [](long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  Tensor out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const long sy = reflect(static_cast<long>(y + oy) - static_cast<long>(pad), static_cast<long>(h));
        const long sx = reflect(static_cast<long>(x + ox) - static_cast<long>(pad), static_cast<long>(w));
        out[(ch * h + y) * w + x] = image[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
      }
  return out;
}

Tensor augment(const Tensor& image, Rng& rng) {
  Tensor t = rng.bernoulli(0.5) ? hflip(image) : image;
  const std::size_t oy = rng.below(9), ox = rng.below(9);
  return pad_crop(t, oy, ox, 4);
}

BatchSchedule smd_schedule(std::size_t n_batches, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("smd: drop probability must be in [0, 1]");
  Rng rng = Rng(seed).fork("smd");
  BatchSchedule s;
  s.scheduled = n_batches;
  s.drop_prob = p;
  s.keep.resize(n_batches);
  for (std::size_t i = 0; i < n_batches; ++i) {
    s.keep[i] = !rng.bernoulli(p);
    if (s.keep[i]) s.kept.push_back(i);
  }
  return s;
}

std::uint64_t smd_scheduled_iterations(std::uint64_t baseline, double energy_ratio, double p) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("smd: drop probability must be in [0, 1)");
  if (!(energy_ratio > 0.0)) throw ConfigError("smd: energy ratio must be > 0");
  return static_cast<std::uint64_t>(std::llround(energy_ratio * static_cast<double>(baseline) / (1.0 - p)));
}

EpochSampler::EpochSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(batch), rng_(rng) {
  if (n == 0 || batch == 0) throw ConfigError("sampler: dataset and batch size must be positive");
  perm_.resize(n);
  reshuffle();
}

void EpochSampler::reshuffle() {
  for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
  rng_.shuffle(perm_);
  cursor_ = 0;
}

std::vector<std::size_t> EpochSampler::next() {
  if (cursor_ >= n_) {
    reshuffle();
    ++epoch_;
  }
  const std::size_t end = std::min(cursor_ + batch_, n_);
  std::vector<std::size_t> b(perm_.begin() + static_cast<long>(cursor_), perm_.begin() + static_cast<long>(end));
  cursor_ = end;
  return b;
}

std::pair<Dataset, Dataset> stratified_halves(const Dataset& d, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) by_class.at(static_cast<std::size_t>(d.labels[i])).push_back(i);
  std::vector<std::size_t> a, b;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.size() < 2) {
      throw ConfigError("split: class " + std::to_string(k) + " has " + std::to_string(idx.size()) +
                        " samples, need at least 2");
    }
    rng.shuffle(idx);
    const std::size_t half = (idx.size() + 1) / 2;
    a.insert(a.end(), idx.begin(), idx.begin() + static_cast<long>(half));
    b.insert(b.end(), idx.begin() + static_cast<long>(half), idx.end());
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {d.subset(a), d.subset(b)};
}

}  // namespace e2t
