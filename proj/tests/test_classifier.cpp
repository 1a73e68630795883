#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace saak;
using testing_support::error_kind;
using testing_support::TempDir;

namespace {

struct Data {
  RowMatrix<float> x;
  std::vector<int> y;
};

// Two Gaussian-free blobs: points uniform in unit squares centred at (-1, 0)
// and (+1, 0) pushed apart so the margin is at least 1.
Data blobs(std::size_t n, std::uint64_t seed) {
  Data d{RowMatrix<float>(static_cast<Eigen::Index>(n), 2), std::vector<int>(n)};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    d.y[i] = c;
    d.x(static_cast<Eigen::Index>(i), 0) = (c == 0 ? -1.0f : 1.0f) + u(rng);
    d.x(static_cast<Eigen::Index>(i), 1) = u(rng) * 4.0f;
  }
  return d;
}

Data xor_points() {
  Data d{RowMatrix<float>(4, 2), {0, 1, 1, 0}};
  d.x << 0, 0, 0, 1, 1, 0, 1, 1;
  return d;
}

template <typename Model, typename LossFn>
void check_gradient(Model m, const RowMatrix<double>& x, const std::vector<int>& y, double l2,
                    LossFn loss_fn, double tol, std::vector<RowMatrix<double>*> (*params)(Model&)) {
  Model grad = m;
  loss_fn(m, x, y, l2, &grad);
  const auto analytic = params(grad);
  const auto values = params(m);
  const double h = 1e-6;
  for (std::size_t p = 0; p < values.size(); ++p) {
    RowMatrix<double>& w = *values[p];
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double saved = w.data()[i];
      w.data()[i] = saved + h;
      const double up = loss_fn(m, x, y, l2, static_cast<Model*>(nullptr));
      w.data()[i] = saved - h;
      const double down = loss_fn(m, x, y, l2, static_cast<Model*>(nullptr));
      w.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = analytic[p]->data()[i];
      const double rel = std::abs(numeric - exact) / std::max(1e-8, std::abs(numeric) + std::abs(exact));
      EXPECT_TRUE(rel < tol || std::abs(numeric - exact) < 1e-9)
          << "param " << p << " entry " << i << ": numeric " << numeric << " analytic " << exact;
    }
  }
}

RowMatrix<double> random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  RowMatrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

}  // namespace

TEST(Logistic, SeparableBlobsReachFullAccuracy) {
  const Data d = blobs(200, 1);
  TrainParams p = default_logistic_params();
  p.epochs = 100;
  p.batch = 32;
  const auto m = train_logistic<float>(d.x, d.y, 2, p);
  EXPECT_EQ(evaluate(m, d.x, std::span<const int>(d.y)), 1.0);
}

TEST(Logistic, ZeroInputPredictsPriorArgmax) {
  RowMatrix<float> x = RowMatrix<float>::Zero(30, 3);
  std::vector<int> y(30, 2);
  for (int i = 0; i < 8; ++i) y[i] = 0;
  for (int i = 8; i < 14; ++i) y[i] = 1;
  TrainParams p;
  p.epochs = 30;
  const auto m = train_logistic<float>(x, y, 3, p);
  for (int label : predict(m, x)) EXPECT_EQ(label, 2);
}

TEST(Logistic, DivergenceIsTrainingError) {
  Data d = blobs(50, 2);
  d.x *= 1e18f;
  TrainParams p;
  p.learning_rate = 1e10;
  p.epochs = 5;
  p.l2 = 0.0;
  try {
    train_logistic<float>(d.x, d.y, 2, p);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::training);
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(Logistic, FullBatchLossIsMonotoneAtSmallRate) {
  const Data d = blobs(120, 3);
  TrainParams p;
  p.learning_rate = 1e-3;
  p.momentum = 0.0;
  p.batch = 1000;
  p.epochs = 40;
  std::vector<double> losses;
  train_logistic<float>(d.x, d.y, 2, p, &losses);
  ASSERT_EQ(losses.size(), 40u);
  for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1]);
}

TEST(Mlp, SolvesXor) {
  const Data d = xor_points();
  TrainParams p = default_mlp_params();
  p.hidden = 4;
  p.learning_rate = 0.05;
  p.epochs = 2000;
  p.batch = 4;
  p.l2 = 0.0;
  // Four ReLU units have bad local minima on XOR for some inits; this seed
  // converges.
  p.seed = 1;
  const auto m = train_mlp<float>(d.x, d.y, 2, p);
  EXPECT_EQ(evaluate(m, d.x, std::span<const int>(d.y)), 1.0);
}

TEST(Mlp, ZeroHiddenIsConfigError) {
  const Data d = xor_points();
  TrainParams p;
  p.hidden = 0;
  EXPECT_EQ(error_kind([&] { train_mlp<float>(d.x, d.y, 2, p); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { StandardClassifier(ClassifierKind::mlp, p); }), ErrorKind::config);
}

TEST(Mlp, SameSeedSameModel) {
  const Data d = blobs(64, 4);
  TrainParams p = default_mlp_params();
  p.hidden = 8;
  p.epochs = 5;
  p.batch = 16;
  const auto a = train_mlp<float>(d.x, d.y, 2, p);
  const auto b = train_mlp<float>(d.x, d.y, 2, p);
  EXPECT_EQ(a.w1, b.w1);
  EXPECT_EQ(a.w2, b.w2);
  p.seed = 99;
  const auto c = train_mlp<float>(d.x, d.y, 2, p);
  EXPECT_NE(a.w1, c.w1);
}

TEST(GradientCheck, LogisticMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const RowMatrix<double> x = random_matrix(12, 5, rng);
  std::vector<int> y(12);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 3);
  LinearModel<double> m{random_matrix(3, 5, rng) * 0.3, RowVector<double>::Zero(3), 0.0};
  m.bias << 0.1, -0.2, 0.05;
  const auto params = [](LinearModel<double>& lm) -> std::vector<RowMatrix<double>*> {
    return {&lm.weights};
  };
  check_gradient<LinearModel<double>>(
      m, x, y, 1e-2,
      [](const LinearModel<double>& mm, const RowMatrix<double>& xx, const std::vector<int>& yy, double l2,
         LinearModel<double>* g) { return logistic_loss_and_gradient(mm, xx, std::span<const int>(yy), l2, g); },
      1e-4, +params);
  // Bias separately (it is a row vector).
  LinearModel<double> grad = m;
  logistic_loss_and_gradient(m, x, std::span<const int>(y), 1e-2, &grad);
  for (Eigen::Index c = 0; c < 3; ++c) {
    auto up = m, down = m;
    up.bias[c] += 1e-6;
    down.bias[c] -= 1e-6;
    const double numeric = (logistic_loss_and_gradient(up, x, std::span<const int>(y), 1e-2) -
                            logistic_loss_and_gradient(down, x, std::span<const int>(y), 1e-2)) / 2e-6;
    EXPECT_LT(std::abs(numeric - grad.bias[c]) / (std::abs(numeric) + std::abs(grad.bias[c])), 1e-4);
  }
}

TEST(GradientCheck, MlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const RowMatrix<double> x = random_matrix(10, 4, rng);
  std::vector<int> y(10);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<int>(i % 3);
  auto m = init_mlp<double>(4, 6, 3, 11);
  m.b1.setConstant(0.05);
  const auto params = [](MlpModel<double>& mm) -> std::vector<RowMatrix<double>*> { return {&mm.w1, &mm.w2}; };
  check_gradient<MlpModel<double>>(
      m, x, y, 1e-2,
      [](const MlpModel<double>& mm, const RowMatrix<double>& xx, const std::vector<int>& yy, double l2,
         MlpModel<double>* g) { return mlp_loss_and_gradient(mm, xx, std::span<const int>(yy), l2, g); },
      1e-3, +params);
  MlpModel<double> grad = m;
  mlp_loss_and_gradient(m, x, std::span<const int>(y), 1e-2, &grad);
  for (Eigen::Index c = 0; c < 3; ++c) {
    auto up = m, down = m;
    up.b2[c] += 1e-6;
    down.b2[c] -= 1e-6;
    const double numeric = (mlp_loss_and_gradient(up, x, std::span<const int>(y), 1e-2) -
                            mlp_loss_and_gradient(down, x, std::span<const int>(y), 1e-2)) / 2e-6;
    EXPECT_LT(std::abs(numeric - grad.b2[c]) / (std::abs(numeric) + std::abs(grad.b2[c])), 1e-3);
  }
  for (Eigen::Index h = 0; h < 6; ++h) {
    auto up = m, down = m;
    up.b1[h] += 1e-6;
    down.b1[h] -= 1e-6;
    const double numeric = (mlp_loss_and_gradient(up, x, std::span<const int>(y), 1e-2) -
                            mlp_loss_and_gradient(down, x, std::span<const int>(y), 1e-2)) / 2e-6;
    const double diff = std::abs(numeric - grad.b1[h]);
    EXPECT_TRUE(diff < 1e-9 || diff / (std::abs(numeric) + std::abs(grad.b1[h])) < 1e-3) << h;
  }
}

TEST(Predict, TiesGoToLowestClass) {
  RowMatrix<float> s(2, 3);
  s << 1, 1, 0, 0, 2, 2;
  EXPECT_EQ(argmax_rows(s), (std::vector<int>{0, 1}));
}

TEST(Predict, FeatureMismatchIsDomainError) {
  LinearModel<float> m{RowMatrix<float>::Zero(2, 3), RowVector<float>::Zero(2), 0.0};
  EXPECT_EQ(error_kind([&] { predict(m, RowMatrix<float>(RowMatrix<float>::Zero(1, 4))); }), ErrorKind::domain);
}

TEST(Accuracy, EmptyIsDomainErrorAndCountsMatchBruteForce) {
  EXPECT_EQ(error_kind([] { accuracy(std::vector<int>{}, std::vector<int>{}); }), ErrorKind::domain);
  std::mt19937_64 rng(8);
  std::vector<int> a(97), b(97);
  int same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = static_cast<int>(rng() % 4);
    b[i] = static_cast<int>(rng() % 4);
    same += a[i] == b[i];
  }
  EXPECT_DOUBLE_EQ(accuracy(a, b), same / 97.0);
}

TEST(Standardizer, ZeroVarianceColumnKeepsUnitScale) {
  RowMatrix<float> x(3, 2);
  x << 1, 5, 2, 5, 3, 5;
  const auto s = Standardizer::fit(x);
  EXPECT_FLOAT_EQ(s.mean[0], 2.0f);
  EXPECT_FLOAT_EQ(s.scale[1], 1.0f);
  s.apply(x);
  EXPECT_FLOAT_EQ(x(0, 1), 0.0f);
  EXPECT_NEAR(x(2, 0), std::sqrt(1.5), 1e-6);
}

TEST(StandardClassifier, InvariantToPerFeatureShiftAndScale) {
  const Data d = blobs(100, 9);
  RowMatrix<float> moved = d.x;
  moved.col(0) = moved.col(0) * 4.0f;
  moved.col(0).array() += 100.0f;
  moved.col(1).array() -= 3.0f;
  TrainParams p;
  p.epochs = 10;
  StandardClassifier a(ClassifierKind::logistic, p), b(ClassifierKind::logistic, p);
  a.fit(d.x, d.y, 2);
  b.fit(moved, d.y, 2);
  EXPECT_EQ(a.predict(d.x), b.predict(moved));
}

TEST(StandardClassifier, EmptyTestSetIsDomainError) {
  const Data d = blobs(20, 10);
  StandardClassifier c(ClassifierKind::logistic, TrainParams{});
  c.fit(d.x, d.y, 2);
  EXPECT_EQ(error_kind([&] { c.evaluate(RowMatrix<float>(0, 2), std::vector<int>{}); }), ErrorKind::domain);
}

TEST(StandardClassifier, SaveLoadRoundTrip) {
  TempDir dir;
  const Data d = blobs(60, 12);
  for (const auto kind : {ClassifierKind::logistic, ClassifierKind::mlp}) {
    TrainParams p = kind == ClassifierKind::mlp ? default_mlp_params() : default_logistic_params();
    p.hidden = 7;
    p.epochs = 5;
    StandardClassifier c(kind, p);
    c.fit(d.x, d.y, 2);
    const auto path = dir / ("model_" + to_string(kind) + ".saak");
    c.save(path);
    const auto back = StandardClassifier::load(path);
    EXPECT_EQ(back.kind(), kind);
    EXPECT_EQ(back.features(), 2u);
    EXPECT_EQ(back.class_count(), 2);
    EXPECT_EQ(back.predict(d.x), c.predict(d.x));
    EXPECT_EQ(back.final_loss(), c.final_loss());
  }
}

TEST(StandardClassifier, UnfittedUseIsConsistencyError) {
  StandardClassifier c(ClassifierKind::logistic, TrainParams{});
  EXPECT_EQ(error_kind([&] { c.predict(RowMatrix<float>::Zero(1, 2)); }), ErrorKind::consistency);
}

TEST(ClassifierKind, ParseNames) {
  EXPECT_EQ(parse_classifier_kind("lr"), ClassifierKind::logistic);
  EXPECT_EQ(parse_classifier_kind("mlp"), ClassifierKind::mlp);
  EXPECT_EQ(error_kind([] { parse_classifier_kind("svm"); }), ErrorKind::config);
}
