#include <gtest/gtest.h>

#include <set>

#include "fvlab/random.hpp"

using namespace fvlab;

TEST(Rng, SameSeedSameStream) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedSeedsDifferByTagAndIndex) {
  EXPECT_NE(derive_seed(1, "split"), derive_seed(1, "shuffle-labels"));
  EXPECT_NE(derive_seed(1, "split", 0), derive_seed(1, "split", 1));
  EXPECT_EQ(derive_seed(5, "x", 3), derive_seed(5, "x", 3));
}

TEST(Rng, BelowStaysInRange) {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) EXPECT_LT(r.below(7), 7u);
}

TEST(Rng, UniformInUnitInterval) {
  Rng r(11);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Rng, NormalHasRoughlyUnitMoments) {
  Rng r(13);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 0.05);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng r(17);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  r.shuffle(v);
  EXPECT_EQ(std::set<int>(v.begin(), v.end()).size(), 10u);
}

TEST(Rng, SampleIsDistinctAndClamped) {
  Rng r(19);
  auto s = r.sample(std::vector<int>{1, 2, 3, 4, 5}, 3);
  EXPECT_EQ(s.size(), 3u);
  EXPECT_EQ(std::set<int>(s.begin(), s.end()).size(), 3u);
  EXPECT_EQ(r.sample(std::vector<int>{1, 2}, 5).size(), 2u);
}
