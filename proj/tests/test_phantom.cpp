#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "xcvae/phantom.hpp"

namespace xcvae {
namespace {

PhantomConfig small_config() {
  PhantomConfig c;
  c.height = c.width = 32;
  c.slices = {3, 5};
  c.seed = 17;
  return c;
}

TEST(Preprocess, WindowEndpoints) {
  EXPECT_DOUBLE_EQ(preprocess_voxel(-1000.0), 0.0);
  EXPECT_DOUBLE_EQ(preprocess_voxel(400.0), 1.0);
  EXPECT_DOUBLE_EQ(preprocess_voxel(2000.0), 1.0);
  EXPECT_DOUBLE_EQ(preprocess_voxel(-3000.0), 0.0);
}

TEST(Preprocess, LinearInterior) {
  // (-300 + 1000) / 1400
  EXPECT_NEAR(preprocess_voxel(-300.0), 0.5, 1e-15);
  EXPECT_NEAR(preprocess_voxel(-650.0), 0.25, 1e-15);
}

TEST(Preprocess, RoundTripInsideWindow) {
  for (double t = 0.0; t <= 1.0; t += 0.0625) {
    EXPECT_NEAR(preprocess_voxel(hu_from_intensity(t)), t, 1e-6);
  }
}

TEST(Preprocess, RejectsNonFinite) {
  RawVolume raw;
  raw.voxels = Tensor({1, 2, 2}, 0.0);
  raw.voxels[3] = std::nan("");
  EXPECT_THROW(preprocess(raw), ValidationError);
  raw.voxels[3] = INFINITY;
  EXPECT_THROW(preprocess(raw), ValidationError);
}

TEST(Generator, Deterministic) {
  PhantomConfig c = small_config();
  auto a = generate_dataset(c, 6), b = generate_dataset(c, 6);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].intensities, b[i].intensities);
    EXPECT_EQ(a[i].lesion_mask, b[i].lesion_mask);
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].id, b[i].id);
  }
  c.seed = 18;
  auto d = generate_dataset(c, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= !(a[i].intensities == d[i].intensities);
  EXPECT_TRUE(differs);
}

TEST(Generator, ForcedClass) {
  PhantomConfig c = small_config();
  c.class_balance = 1.0;
  auto vs = generate_dataset(c, 10);
  ASSERT_EQ(vs.size(), 10u);
  for (const Volume& v : vs) {
    EXPECT_EQ(v.label, 1);
    EXPECT_GT(v.lesion_mask.sum(), 0.0) << v.id;
  }
}

TEST(Generator, NoNegativeLesionsGivesEmptyMasks) {
  PhantomConfig c = small_config();
  c.negative.count = {0, 0};
  for (const Volume& v : generate_dataset(c, 12)) {
    if (v.label == 0) EXPECT_EQ(v.lesion_mask.sum(), 0.0) << v.id;
  }
}

TEST(Generator, VolumeInvariants) {
  PhantomConfig c = small_config();
  const double lung = preprocess_voxel(-850.0);
  for (const Volume& v : generate_dataset(c, 16)) {
    EXPECT_NO_THROW(validate(v));
    EXPECT_GE(v.slices(), 3u);
    EXPECT_LE(v.slices(), 5u);
    for (std::size_t i = 0; i < v.intensities.size(); ++i) {
      EXPECT_GE(v.intensities[i], 0.0);
      EXPECT_LE(v.intensities[i], 1.0);
      const double m = v.lesion_mask[i];
      ASSERT_TRUE(m == 0.0 || m == 1.0);
      if (m == 1.0) EXPECT_GT(v.intensities[i], lung) << v.id << " voxel " << i;
    }
  }
}

TEST(Generator, ClassBalanceRounds) {
  PhantomConfig c = small_config();
  c.class_balance = 0.3;
  auto vs = generate_dataset(c, 10);
  EXPECT_EQ(std::count_if(vs.begin(), vs.end(), [](const Volume& v) { return v.label == 1; }), 3);
}

TEST(Generator, RejectsDegenerateConfig) {
  PhantomConfig c = small_config();
  c.positive.sigma_fraction = {0.2, 0.3};
  EXPECT_THROW(generate_volume(c, 1, 1), ValidationError);
  c = small_config();
  c.class_balance = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config();
  c.slices = {0, 2};
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(generate_volume(small_config(), 1, 2), ValidationError);
}

std::vector<int> alternating(std::size_t n) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = int(i % 2);
  return y;
}

TEST(Splits, Sizes) {
  Splits s = make_splits(alternating(100), {0.8, 0.1, 0.1}, 3);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.validation.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
  EXPECT_EQ(s.train_counts.negative + s.train_counts.positive, 80u);
  EXPECT_EQ(s.test_counts.negative + s.test_counts.positive, 10u);
}

TEST(Splits, Disjoint) {
  Splits s = make_splits(alternating(57), {0.6, 0.2, 0.2}, 9);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
  EXPECT_EQ(all.size(), 57u);
  EXPECT_EQ(*all.rbegin(), 56u);
}

TEST(Splits, AllTrain) {
  Splits s = make_splits(alternating(20), {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 20u);
  EXPECT_TRUE(s.validation.empty());
  EXPECT_TRUE(s.test.empty());
}

TEST(Splits, Deterministic) {
  Splits a = make_splits(alternating(40), {0.5, 0.25, 0.25}, 4);
  Splits b = make_splits(alternating(40), {0.5, 0.25, 0.25}, 4);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
}

TEST(Splits, RejectsBadFractions) {
  EXPECT_THROW(make_splits(alternating(10), {0.5, 0.2, 0.2}, 1), ValidationError);
  EXPECT_THROW(make_splits(alternating(10), {1.2, -0.1, -0.1}, 1), ValidationError);
  EXPECT_THROW(make_splits(alternating(10), {0.0, 0.5, 0.5}, 1), ValidationError);
}

}  // namespace
}  // namespace xcvae
