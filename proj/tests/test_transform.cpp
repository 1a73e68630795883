#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "support.hpp"

using namespace saak;
using testing_support::error_kind;
using testing_support::random_features;
using testing_support::stage;

namespace {

std::vector<StageShape> chain(std::size_t side, const std::vector<StageConfig>& stages) {
  return plan_stage_shapes(side, side, stages);
}

}  // namespace

TEST(Patches, Counts) {
  const auto t = random_features(1, 4, 4, 1, 1);
  EXPECT_EQ(extract_patches(t, 2, 2).rows, 4u);
  EXPECT_EQ(extract_patches(t, 2, 1).rows, 9u);
  const auto big = extract_patches(random_features(1, 32, 32, 3, 2), 3, 1);
  EXPECT_EQ(big.grid_height, 30u);
  EXPECT_EQ(big.grid_width, 30u);
  EXPECT_EQ(big.cols, 27u);
}

TEST(Patches, LayoutIsRowMajorWithChannelInnermost) {
  FeatureTensor t{Tensor({1, 3, 3, 2})};
  for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = static_cast<float>(i);
  const auto p = extract_patches(t, 2, 1);
  // Second window starts at (0,1): (0,1),(0,2),(1,1),(1,2) each with 2 channels.
  const std::vector<float> expected{2, 3, 4, 5, 8, 9, 10, 11};
  EXPECT_EQ(std::vector<float>(p.row(1), p.row(1) + 8), expected);
}

TEST(Patches, WindowLargerThanImageIsDomainError) {
  EXPECT_EQ(error_kind([] { extract_patches(random_features(1, 2, 2, 1, 3), 3, 1); }), ErrorKind::domain);
}

TEST(ForwardStage, NonNegativeAndPairExclusive) {
  const auto t = random_features(30, 8, 8, 1, 7);
  for (const auto& cfg : {stage(2, 1, Pooling::none), stage(3, 1, Pooling::none, Truncation::top_k(5)),
                          stage(2, 2, Pooling::none)}) {
    const auto k = fit_stage_kernels(t, cfg);
    const auto out = forward_stage(t, k);
    const std::size_t ch = out.channels();
    ASSERT_EQ(ch, k.output_channels());
    for (std::size_t loc = 0; loc < out.values.size() / ch; ++loc) {
      const float* g = out.values.data() + loc * ch;
      for (std::size_t c = 1; c < ch; ++c) EXPECT_GE(g[c], 0.0f);
      for (std::size_t a = 0; a < k.retained(); ++a) EXPECT_EQ(g[2 * a + 1] * g[2 * a + 2], 0.0f);
    }
  }
}

TEST(ForwardStage, DcChannelIsNotRectified) {
  FeatureTensor t{Tensor({1, 2, 2, 1}, -0.5f)};
  SaakKernelSet k;
  k.config = stage(2, 2, Pooling::none);
  k.input_channels = 1;
  k.input_dim = 4;
  k.dc = dc_vector<float>(4);
  k.ac_basis = Tensor({0, 4});
  const auto out = forward_stage(t, k);
  EXPECT_FLOAT_EQ(out.values[0], -1.0f);
}

TEST(ForwardStage, PureDcPatch) {
  const auto fit = fit_stage_kernels(random_features(10, 2, 2, 1, 11), stage(2, 2, Pooling::none));
  const FeatureTensor t{Tensor({1, 2, 2, 1}, 0.75f)};
  const auto out = forward_stage(t, fit);
  EXPECT_NEAR(out.values[0], 1.5f, 1e-6);
  for (std::size_t c = 1; c < out.channels(); ++c) EXPECT_NEAR(out.values[c], 0.0f, 1e-6);
}

TEST(ForwardStage, ParsevalOnKeepAllNonOverlapping) {
  const auto t = random_features(1, 4, 4, 1, 13);
  const auto k = fit_stage_kernels(random_features(50, 4, 4, 1, 14), stage(2, 2, Pooling::none));
  const auto out = forward_stage(t, k);
  double in_energy = 0.0, out_energy = 0.0;
  for (float v : t.values.values()) in_energy += static_cast<double>(v) * v;
  for (float v : out.values.values()) out_energy += static_cast<double>(v) * v;
  EXPECT_NEAR(out_energy, in_energy, 1e-5 * in_energy);
}

TEST(ForwardStage, ParsevalPerPatchOnOverlappingStage) {
  const auto t = random_features(3, 5, 5, 2, 15);
  const auto k = fit_stage_kernels(t, stage(2, 1, Pooling::none));
  const auto out = forward_stage(t, k);
  const auto p = extract_patches(t, 2, 1);
  for (std::size_t r = 0; r < p.rows; ++r) {
    double in = 0.0, o = 0.0;
    for (std::size_t c = 0; c < p.cols; ++c) in += static_cast<double>(p.row(r)[c]) * p.row(r)[c];
    for (std::size_t c = 0; c < out.channels(); ++c) {
      const double v = out.values[r * out.channels() + c];
      o += v * v;
    }
    EXPECT_NEAR(o, in, 1e-5 * std::max(1.0, in));
  }
}

TEST(ForwardStage, WrongInputChannelsIsDomainError) {
  const auto k = fit_stage_kernels(random_features(5, 4, 4, 1, 17), stage(2, 2, Pooling::none));
  EXPECT_EQ(error_kind([&] { forward_stage(random_features(1, 4, 4, 2, 18), k); }), ErrorKind::domain);
}

TEST(MaxPool, Examples) {
  const FeatureTensor t{Tensor({1, 2, 2, 1}, std::vector<float>{1, 3, 2, 0})};
  const auto out = max_pool(t);
  EXPECT_EQ(out.values.shape(), (std::vector<std::size_t>{1, 1, 1, 1}));
  EXPECT_EQ(out.values[0], 3.0f);
  const auto odd = max_pool(random_features(2, 15, 15, 3, 19));
  EXPECT_EQ(odd.height(), 7u);
  EXPECT_EQ(odd.width(), 7u);
}

TEST(MaxPool, PoolsChannelsIndependently) {
  const auto t = random_features(2, 6, 4, 3, 21);
  const auto out = max_pool(t);
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        for (std::size_t c = 0; c < 3; ++c) {
          float m = -1.0f;
          for (std::size_t di = 0; di < 2; ++di) {
            for (std::size_t dj = 0; dj < 2; ++dj) m = std::max(m, t.values.at(n, 2 * i + di, 2 * j + dj, c));
          }
          EXPECT_EQ(out.values.at(n, i, j, c), m);
        }
      }
    }
  }
}

TEST(Shapes, CifarChain) {
  const std::vector<StageConfig> stages{stage(3, 1, Pooling::max2x2), stage(3, 1, Pooling::max2x2),
                                        stage(3, 1, Pooling::none)};
  const auto s = chain(32, stages);
  EXPECT_EQ(s[0].grid_height, 30u);
  EXPECT_EQ(s[0].out_height, 15u);
  EXPECT_EQ(s[1].grid_height, 13u);
  EXPECT_EQ(s[1].out_height, 6u);
  EXPECT_EQ(s[2].out_height, 4u);
}

TEST(Shapes, CifarChainMatchesForwardCascade) {
  const std::vector<StageConfig> stages{stage(3, 1, Pooling::max2x2, Truncation::top_k(4)),
                                        stage(3, 1, Pooling::max2x2, Truncation::top_k(4)),
                                        stage(3, 1, Pooling::none, Truncation::top_k(4))};
  const auto t = random_features(4, 32, 32, 3, 23);
  const auto cascade = fit_cascade(t, stages);
  const auto outs = forward_cascade(t, cascade);
  ASSERT_EQ(outs.size(), 3u);
  EXPECT_EQ(outs[0].height(), 15u);
  EXPECT_EQ(outs[1].height(), 6u);
  EXPECT_EQ(outs[2].height(), 4u);
  EXPECT_EQ(outs[2].width(), 4u);
  EXPECT_EQ(outs[2].channels(), 7u);
  EXPECT_EQ(outs[2].stage, 3);
}

TEST(Shapes, MnistNonOverlappingStopsAfterTwoStages) {
  const auto s = chain(28, {stage(2, 2, Pooling::none), stage(2, 2, Pooling::none)});
  EXPECT_EQ(s[0].out_height, 14u);
  EXPECT_EQ(s[1].out_height, 7u);
}

TEST(Shapes, ExhaustedDimsNameTheStage) {
  try {
    chain(8, {stage(5, 1, Pooling::none), stage(5, 1, Pooling::none)});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 2"), std::string::npos);
  }
}

TEST(Inverse, OneStageRoundTrip) {
  const auto t = random_features(1, 4, 4, 1, 29);
  const auto k = fit_stage_kernels(random_features(40, 4, 4, 1, 30), stage(2, 2, Pooling::none));
  const auto back = inverse_stage(forward_stage(t, k), k);
  ASSERT_EQ(back.values.shape(), t.values.shape());
  for (std::size_t i = 0; i < t.values.size(); ++i) EXPECT_NEAR(back.values[i], t.values[i], 1e-5);
}

TEST(Inverse, TwoStageRoundTrip) {
  const auto t = random_features(6, 8, 8, 1, 31);
  const std::vector<StageConfig> stages{stage(2, 2, Pooling::none), stage(2, 2, Pooling::none)};
  const auto cascade = fit_cascade(t, stages);
  const auto back = inverse_cascade(forward_cascade(t, cascade).back(), cascade);
  for (std::size_t i = 0; i < t.values.size(); ++i) EXPECT_NEAR(back.values[i], t.values[i], 1e-5);
}

TEST(Inverse, ZeroFeaturesGiveZeroImage) {
  const auto k = fit_stage_kernels(random_features(20, 4, 4, 1, 37), stage(2, 2, Pooling::none));
  const FeatureTensor z{Tensor({1, 2, 2, 7})};
  const auto back = inverse_stage(z, k);
  EXPECT_EQ(back.height(), 4u);
  for (float v : back.values.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Inverse, LossyStagesAreUnsupported) {
  const auto t = random_features(20, 6, 6, 1, 41);
  const auto overlapping = fit_stage_kernels(t, stage(2, 1, Pooling::none));
  const auto pooled = fit_stage_kernels(t, stage(2, 2, Pooling::max2x2));
  const auto truncated = fit_stage_kernels(t, stage(2, 2, Pooling::none, Truncation::top_k(2)));
  EXPECT_EQ(error_kind([&] { inverse_stage(forward_stage(t, overlapping), overlapping); }), ErrorKind::unsupported);
  EXPECT_EQ(error_kind([&] { inverse_stage(forward_stage(t, pooled), pooled); }), ErrorKind::unsupported);
  EXPECT_EQ(error_kind([&] { inverse_stage(forward_stage(t, truncated), truncated); }), ErrorKind::unsupported);
}

TEST(Rmse, IdenticalIsZero) {
  const auto t = random_features(3, 4, 4, 5, 43);
  for (bool norm : {false, true}) {
    for (double v : rmse_per_spectral(t, t, norm).values) EXPECT_EQ(v, 0.0);
  }
}

TEST(Rmse, ShiftByOneIsOne) {
  const auto t = random_features(3, 4, 4, 5, 47);
  auto shifted = t;
  for (float& v : shifted.values.values()) v += 1.0f;
  for (double v : rmse_per_spectral(t, shifted, false).values) EXPECT_NEAR(v, 1.0, 1e-6);
}

TEST(Rmse, MatchesOracle) {
  const auto a = random_features(4, 3, 5, 6, 53);
  const auto b = random_features(4, 3, 5, 6, 59);
  const auto got = rmse_per_spectral(a, b, false).values;
  const auto want = oracle::rmse(std::vector<float>(a.values.values().begin(), a.values.values().end()),
                                 std::vector<float>(b.values.values().begin(), b.values.values().end()), 6);
  for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(got[c], want[c], 1e-12);
}

TEST(Rmse, NormalizedZeroChannelIsFlagged) {
  FeatureTensor clean{Tensor({1, 2, 2, 2})};
  for (std::size_t i = 0; i < 8; i += 2) clean.values[i] = 2.0f;
  auto attacked = clean;
  for (float& v : attacked.values.values()) v += 1.0f;
  const auto curve = rmse_per_spectral(clean, attacked, true);
  EXPECT_NEAR(curve.values[0], 0.5, 1e-12);
  EXPECT_EQ(curve.values[1], 0.0);
  EXPECT_FALSE(curve.degenerate[0]);
  EXPECT_TRUE(curve.degenerate[1]);
}

TEST(Rmse, ShapeMismatchIsDomainError) {
  EXPECT_EQ(error_kind([] { rmse_per_spectral(random_features(1, 2, 2, 3, 1), random_features(1, 2, 2, 4, 1), false); }),
            ErrorKind::domain);
}
