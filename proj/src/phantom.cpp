#include "xcvae/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace xcvae {
namespace {

constexpr double kAirHu = -1000.0;
constexpr double kSoftTissueHu = 40.0;
constexpr double kLungHu = -850.0;
constexpr double kBodyAxisU = 0.92, kBodyAxisV = 0.78;
constexpr double kLungCentreU = 0.42;
constexpr double kLungAxisU = 0.30, kLungAxisV = 0.58;
/// Blob voxels at or above this fraction of the peak belong to the lesion.
constexpr double kMaskLevel = 0.5;

using Rng = std::mt19937_64;

double uniform(Rng& rng, RealRange r) {
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

int uniform(Rng& rng, IntRange r) { return std::uniform_int_distribution<int>(r.lo, r.hi)(rng); }

void check_range(IntRange r, int min_lo, const char* what) {
  if (r.lo < min_lo || r.hi < r.lo) {
    throw ValidationError(std::string("phantom: invalid range for ") + what);
  }
}

void check_range(RealRange r, const char* what) {
  if (!(r.lo > 0) || r.hi < r.lo || !std::isfinite(r.hi)) {
    throw ValidationError(std::string("phantom: invalid range for ") + what);
  }
}

/// Lung geometry shrinks toward the apex and base of the stack.
struct Anatomy {
  std::size_t slices, height, width;

  double scale(std::size_t z) const {
    return 0.8 + 0.2 * std::sin(std::numbers::pi * (double(z) + 0.5) / double(slices));
  }
  double u(double x) const { return (x + 0.5 - double(width) / 2) / (double(width) / 2); }
  double v(double y) const { return (y + 0.5 - double(height) / 2) / (double(height) / 2); }

  bool in_body(double u, double v) const {
    return (u / kBodyAxisU) * (u / kBodyAxisU) + (v / kBodyAxisV) * (v / kBodyAxisV) <= 1.0;
  }
  bool in_lung(double u, double v, std::size_t z) const {
    const double s = scale(z);
    for (double side : {-1.0, 1.0}) {
      const double du = (u - side * kLungCentreU) / (kLungAxisU * s);
      const double dv = v / (kLungAxisV * s);
      if (du * du + dv * dv <= 1.0) return true;
    }
    return false;
  }
};

struct Blob {
  double cz, cy, cx;  // voxel coordinates
  double sigma_px, sigma_z, amplitude;
  LesionProfile profile;

  double value(double z, double y, double x) const {
    const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (sigma_px * sigma_px) +
                      (z - cz) * (z - cz) / (sigma_z * sigma_z);
    if (profile == LesionProfile::soft_gaussian) return std::exp(-0.5 * d2);
    const double h = 0.5 * d2;
    return std::exp(-h * h);
  }
};

Blob draw_blob(const LesionClassConfig& cls, const Anatomy& a, Rng& rng) {
  Blob b{};
  const std::size_t z = std::uniform_int_distribution<std::size_t>(0, a.slices - 1)(rng);
  const double side = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
  const double theta = std::uniform_real_distribution<double>(0, 2 * std::numbers::pi)(rng);
  double rho;
  if (std::bernoulli_distribution(cls.peripheral_bias)(rng)) {
    rho = std::uniform_real_distribution<double>(0.65, 0.9)(rng);
  } else {
    rho = 0.85 * std::sqrt(std::uniform_real_distribution<double>(0, 1)(rng));
  }
  const double s = a.scale(z);
  const double u = side * kLungCentreU + rho * kLungAxisU * s * std::cos(theta);
  const double v = rho * kLungAxisV * s * std::sin(theta);
  b.cz = double(z);
  b.cx = u * double(a.width) / 2 + double(a.width) / 2 - 0.5;
  b.cy = v * double(a.height) / 2 + double(a.height) / 2 - 0.5;
  b.sigma_px = uniform(rng, cls.sigma_fraction) * double(a.width);
  b.sigma_z = uniform(rng, cls.sigma_slices);
  b.amplitude = uniform(rng, cls.amplitude_hu);
  b.profile = cls.profile;
  return b;
}

}  // namespace

Tensor Volume::image_slice(std::size_t i) const {
  const std::size_t n = height() * width();
  Tensor s({1, height(), width()});
  std::copy_n(intensities.data() + i * n, n, s.data());
  return s;
}

Tensor Volume::mask_slice(std::size_t i) const {
  const std::size_t n = height() * width();
  Tensor s({1, height(), width()});
  std::copy_n(lesion_mask.data() + i * n, n, s.data());
  return s;
}

void validate(const Volume& v) {
  if (v.intensities.rank() != 3 || v.intensities.dim(0) < 1) {
    throw ValidationError("volume " + v.id + ": intensities must be (slices, H, W)");
  }
  require_same_shape(v.intensities, v.lesion_mask, "volume");
  if (v.label != 0 && v.label != 1) throw ValidationError("volume " + v.id + ": label not binary");
  for (double x : v.intensities.values()) {
    if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("volume " + v.id + ": intensity outside [0,1]");
  }
  for (double m : v.lesion_mask.values()) {
    if (m != 0.0 && m != 1.0) throw ValidationError("volume " + v.id + ": mask not binary");
  }
}

double preprocess_voxel(double hu) {
  if (!std::isfinite(hu)) throw ValidationError("preprocess: non-finite voxel value");
  const double c = std::clamp(hu, kHuWindowLow, kHuWindowHigh);
  return (c - kHuWindowLow) / (kHuWindowHigh - kHuWindowLow);
}

double hu_from_intensity(double intensity) {
  return kHuWindowLow + intensity * (kHuWindowHigh - kHuWindowLow);
}

Tensor preprocess(const RawVolume& raw) {
  Tensor out(raw.voxels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = preprocess_voxel(raw.voxels[i]);
  return out;
}

void PhantomConfig::validate() const {
  if (height < 32 || width < 32) throw ValidationError("phantom: image size must be at least 32x32");
  check_range(slices, 1, "slices");
  check_range(positive.count, 1, "positive.count");
  check_range(negative.count, 0, "negative.count");
  check_range(vessels_per_slice, 0, "vessels_per_slice");
  for (const LesionClassConfig* c : {&positive, &negative}) {
    check_range(c->sigma_fraction, "sigma_fraction");
    check_range(c->sigma_slices, "sigma_slices");
    check_range(c->amplitude_hu, "amplitude_hu");
    if (c->peripheral_bias < 0 || c->peripheral_bias > 1) {
      throw ValidationError("phantom: peripheral_bias must lie in [0, 1]");
    }
    // Four widths must fit inside one lung, which spans kLungAxisU of the width.
    if (4.0 * c->sigma_fraction.hi >= kLungAxisU) {
      throw ValidationError("phantom: lesion larger than the lung field");
    }
  }
  if (!(class_balance >= 0.0 && class_balance <= 1.0)) {
    throw ValidationError("phantom: class_balance must lie in [0, 1]");
  }
  if (!(noise_hu >= 0.0)) throw ValidationError("phantom: noise_hu must be non-negative");
}

std::uint64_t volume_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = dataset_seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RawPhantom generate_raw(const PhantomConfig& cfg, std::uint64_t seed, int label) {
  cfg.validate();
  if (label != 0 && label != 1) throw ValidationError("phantom: label must be 0 or 1");
  Rng rng(seed);
  const std::size_t S = std::size_t(uniform(rng, cfg.slices));
  const std::size_t H = cfg.height, W = cfg.width;
  const Anatomy a{S, H, W};

  const LesionClassConfig& cls = label == 1 ? cfg.positive : cfg.negative;
  std::vector<Blob> lesions(std::size_t(uniform(rng, cls.count)));
  for (Blob& b : lesions) b = draw_blob(cls, a, rng);

  RawPhantom out;
  out.raw.spacing_mm = cfg.spacing_mm;
  out.raw.voxels = Tensor({S, H, W});
  out.lesion_mask = Tensor({S, H, W});
  std::uniform_real_distribution<double> noise(-cfg.noise_hu, cfg.noise_hu);
  const double vessel_sigma = std::max(0.6, 0.012 * double(W));

  for (std::size_t z = 0; z < S; ++z) {
    std::vector<std::pair<double, double>> vessels(std::size_t(uniform(rng, cfg.vessels_per_slice)));
    std::vector<double> vessel_amp(vessels.size());
    for (std::size_t k = 0; k < vessels.size(); ++k) {
      double y, x;
      do {
        y = std::uniform_real_distribution<double>(0, double(H))(rng);
        x = std::uniform_real_distribution<double>(0, double(W))(rng);
      } while (!a.in_lung(a.u(x), a.v(y), z));
      vessels[k] = {y, x};
      vessel_amp[k] = std::uniform_real_distribution<double>(300.0, 600.0)(rng);
    }
    bool any = false;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double u = a.u(double(x)), v = a.v(double(y));
        double hu = kAirHu;
        const bool lung = a.in_lung(u, v, z);
        if (lung) {
          hu = kLungHu;
          for (std::size_t k = 0; k < vessels.size(); ++k) {
            const double dy = double(y) - vessels[k].first, dx = double(x) - vessels[k].second;
            hu += vessel_amp[k] * std::exp(-0.5 * (dy * dy + dx * dx) / (vessel_sigma * vessel_sigma));
          }
          double peak = 0.0;
          for (const Blob& b : lesions) {
            const double p = b.value(double(z), double(y), double(x));
            hu += b.amplitude * p;
            peak = std::max(peak, p);
          }
          if (peak >= kMaskLevel) {
            out.lesion_mask.at(z, y, x) = 1.0;
            any = true;
          }
        } else if (a.in_body(u, v)) {
          hu = kSoftTissueHu;
        }
        out.raw.voxels.at(z, y, x) = hu + noise(rng);
      }
    }
    if (any) out.lesion_slices.push_back(z);
  }
  return out;
}

Volume generate_volume(const PhantomConfig& cfg, std::uint64_t seed, int label) {
  RawPhantom p = generate_raw(cfg, seed, label);
  Volume v;
  v.intensities = preprocess(p.raw);
  v.lesion_mask = std::move(p.lesion_mask);
  v.label = label;
  v.seed = seed;
  v.spacing_mm = p.raw.spacing_mm;
  return v;
}

Volume generate_volume(const PhantomConfig& cfg, std::uint64_t seed) {
  Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
  const int label = std::bernoulli_distribution(cfg.class_balance)(rng) ? 1 : 0;
  return generate_volume(cfg, seed, label);
}

std::vector<Volume> generate_dataset(const PhantomConfig& cfg, std::size_t count) {
  cfg.validate();
  const auto positives = std::size_t(std::llround(double(count) * cfg.class_balance));
  std::vector<int> labels(count, 0);
  std::fill_n(labels.begin(), std::min(positives, count), 1);
  Rng rng(volume_seed(cfg.seed, ~std::uint64_t{0}));
  std::shuffle(labels.begin(), labels.end(), rng);

  std::vector<Volume> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Volume v = generate_volume(cfg, volume_seed(cfg.seed, i), labels[i]);
    char id[32];
    std::snprintf(id, sizeof id, "vol_%04zu", i);
    v.id = id;
    out.push_back(std::move(v));
  }
  return out;
}

Splits make_splits(const std::vector<int>& labels, const SplitFractions& f, std::uint64_t seed) {
  if (f.train <= 0 || f.validation < 0 || f.test < 0) {
    throw ValidationError("make_splits: the train fraction must be positive and none negative");
  }
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) {
    throw ValidationError("make_splits: fractions must sum to 1");
  }
  const std::size_t n = labels.size();
  const auto n_val = std::size_t(std::llround(f.validation * double(n)));
  const auto n_test = std::size_t(std::llround(f.test * double(n)));
  if (n_val + n_test > n) throw ValidationError("make_splits: not enough items");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(volume_seed(seed, 0x5B1175ULL));
  std::shuffle(order.begin(), order.end(), rng);

  Splits s;
  s.validation.assign(order.begin(), order.begin() + std::ptrdiff_t(n_val));
  s.test.assign(order.begin() + std::ptrdiff_t(n_val), order.begin() + std::ptrdiff_t(n_val + n_test));
  s.train.assign(order.begin() + std::ptrdiff_t(n_val + n_test), order.end());
  auto finish = [&](std::vector<std::size_t>& idx, ClassCounts& counts) {
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) (labels[i] == 1 ? counts.positive : counts.negative)++;
  };
  finish(s.train, s.train_counts);
  finish(s.validation, s.validation_counts);
  finish(s.test, s.test_counts);
  return s;
}

}  // namespace xcvae
