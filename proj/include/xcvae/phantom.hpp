#pragma once

// Synthetic chest-CT-like volumes with injected lesion blobs. Positive
// volumes carry soft, peripheral, ground-glass-like blobs; negative volumes
// carry nothing or dense compact distractors. The lesion mask marks every
// injected blob, so the mask alone does not reveal the label.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "xcvae/tensor.hpp"

namespace xcvae {

inline constexpr double kHuWindowLow = -1000.0;
inline constexpr double kHuWindowHigh = 400.0;
inline constexpr const char* kGeneratorVersion = "xcvae-phantom/1";

/// Voxels in Hounsfield-analog units, (slices, H, W).
struct RawVolume {
  Tensor voxels;
  std::array<double, 3> spacing_mm{3.0, 0.7, 0.7};
};

struct Volume {
  std::string id;
  Tensor intensities;  // (slices, H, W) in [0, 1]
  Tensor lesion_mask;  // (slices, H, W) in {0, 1}
  int label = 0;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing_mm{3.0, 0.7, 0.7};

  std::size_t slices() const { return intensities.dim(0); }
  std::size_t height() const { return intensities.dim(1); }
  std::size_t width() const { return intensities.dim(2); }
  /// (1, H, W) copies of slice `i`.
  Tensor image_slice(std::size_t i) const;
  Tensor mask_slice(std::size_t i) const;
};

/// Throws ValidationError if the volume breaks its invariants.
void validate(const Volume& v);

/// Clamps to [-1000, 400] HU and maps linearly onto [0, 1].
Tensor preprocess(const RawVolume& raw);
double preprocess_voxel(double hu);
/// Inverse of the linear part of preprocess.
double hu_from_intensity(double intensity);

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct RealRange {
  double lo = 0.0;
  double hi = 0.0;
};

enum class LesionProfile { soft_gaussian, dense_plateau };

struct LesionClassConfig {
  IntRange count;
  /// In-plane Gaussian width as a fraction of the image width.
  RealRange sigma_fraction;
  /// Through-plane width in slices.
  RealRange sigma_slices;
  RealRange amplitude_hu;
  /// Probability that a blob centre is drawn from the outer lung rim.
  double peripheral_bias = 0.0;
  LesionProfile profile = LesionProfile::soft_gaussian;
};

struct PhantomConfig {
  std::size_t height = 128;
  std::size_t width = 128;
  IntRange slices{8, 24};
  LesionClassConfig positive{{1, 3}, {0.035, 0.06}, {0.6, 1.2}, {250.0, 400.0}, 0.8,
                             LesionProfile::soft_gaussian};
  LesionClassConfig negative{{0, 2}, {0.035, 0.06}, {0.6, 1.2}, {650.0, 900.0}, 0.0,
                             LesionProfile::dense_plateau};
  /// Small bright vessel cross-sections per slice, present in both classes.
  IntRange vessels_per_slice{2, 6};
  double noise_hu = 20.0;
  double class_balance = 0.5;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing_mm{3.0, 0.7, 0.7};

  void validate() const;
};

/// Per-volume random stream seed derived from the dataset seed and an index.
std::uint64_t volume_seed(std::uint64_t dataset_seed, std::uint64_t index);

/// Raw HU volume plus the exact lesion support, before normalisation.
struct RawPhantom {
  RawVolume raw;
  Tensor lesion_mask;
  /// Slice indices holding at least one mask voxel.
  std::vector<std::size_t> lesion_slices;
};

RawPhantom generate_raw(const PhantomConfig& cfg, std::uint64_t seed, int label);

/// Draws the label from class_balance using the volume's own stream.
Volume generate_volume(const PhantomConfig& cfg, std::uint64_t seed);
Volume generate_volume(const PhantomConfig& cfg, std::uint64_t seed, int label);

/// `count` volumes with round(count * class_balance) positives in a seeded
/// random order. Volume i uses volume_seed(cfg.seed, i).
std::vector<Volume> generate_dataset(const PhantomConfig& cfg, std::size_t count);

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

struct ClassCounts {
  std::size_t negative = 0;
  std::size_t positive = 0;
};

struct Splits {
  std::vector<std::size_t> train, validation, test;
  ClassCounts train_counts, validation_counts, test_counts;
};

/// Disjoint seeded split of `labels.size()` items. Validation and test sizes
/// are round(fraction * n); train takes the remainder.
Splits make_splits(const std::vector<int>& labels, const SplitFractions& fractions,
                   std::uint64_t seed);

}  // namespace xcvae
