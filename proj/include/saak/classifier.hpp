#pragma once

// Softmax regression and a one-hidden-layer ReLU MLP trained with mini-batch
// gradient descent with momentum. Models are templated on the scalar type so
// training can run in float while gradient checks run in double.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/kv_text.hpp"
#include "saak/random.hpp"
#include "saak/tensor.hpp"

namespace saak {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct TrainParams {
  double learning_rate = 1e-2;
  std::size_t epochs = 50;
  std::size_t batch = 128;
  double l2 = 1e-4;
  double momentum = 0.9;
  std::size_t hidden = 512;  // MLP only
  std::uint64_t seed = 1;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw ConfigError("learning rate must be positive");
    }
    if (batch == 0) throw ConfigError("batch size must be positive");
    if (!(l2 >= 0.0)) throw ConfigError("l2 must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }
};

inline TrainParams default_logistic_params() { return TrainParams{}; }

inline TrainParams default_mlp_params() {
  TrainParams p;
  p.learning_rate = 5e-3;
  return p;
}

template <std::floating_point T>
struct LinearModel {
  RowMatrix<T> weights;  // C x F
  RowVector<T> bias;     // C
  double final_loss = 0.0;

  std::size_t features() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(weights.rows()); }

  RowMatrix<T> scores(const RowMatrix<T>& x) const {
    RowMatrix<T> s = x * weights.transpose();
    s.rowwise() += bias;
    return s;
  }
};

template <std::floating_point T>
struct MlpModel {
  RowMatrix<T> w1;  // F x H
  RowVector<T> b1;  // H
  RowMatrix<T> w2;  // H x C
  RowVector<T> b2;  // C
  double final_loss = 0.0;

  std::size_t features() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t hidden() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t classes() const { return static_cast<std::size_t>(w2.cols()); }

  RowMatrix<T> scores(const RowMatrix<T>& x) const {
    RowMatrix<T> h = x * w1;
    h.rowwise() += b1;
    h = h.cwiseMax(T(0));
    RowMatrix<T> s = h * w2;
    s.rowwise() += b2;
    return s;
  }
};

namespace detail {

// Row-wise softmax in place; returns the summed cross-entropy.
template <typename T>
double softmax_cross_entropy(RowMatrix<T>& scores, std::span<const int> labels) {
  double loss = 0.0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    auto row = scores.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
    const double p = static_cast<double>(row(labels[static_cast<std::size_t>(r)]));
    loss -= std::log(std::max(p, 1e-300));
  }
  return loss;
}

// probs -= onehot(y), then / N
template <typename T>
void softmax_backward(RowMatrix<T>& probs, std::span<const int> labels) {
  for (Eigen::Index r = 0; r < probs.rows(); ++r) probs(r, labels[static_cast<std::size_t>(r)]) -= T(1);
  probs /= static_cast<T>(probs.rows());
}

template <typename T>
void check_training_inputs(const RowMatrix<T>& x, std::span<const int> y, int class_count) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DomainError("classifier: " + std::to_string(x.rows()) + " rows but " +
                      std::to_string(y.size()) + " labels");
  }
  if (class_count < 2) throw DomainError("classifier needs at least 2 classes");
  if (x.rows() < class_count) {
    throw DomainError("classifier needs N >= C samples, got N=" + std::to_string(x.rows()));
  }
  if (x.cols() == 0) throw DomainError("classifier input has no features");
  if (!x.allFinite()) throw DomainError("classifier input contains non-finite values");
  for (const int label : y) {
    if (label < 0 || label >= class_count) {
      throw DomainError("label " + std::to_string(label) + " outside [0, " +
                        std::to_string(class_count) + ")");
    }
  }
}

template <typename T>
RowMatrix<T> gather_rows(const RowMatrix<T>& x, std::span<const std::size_t> rows) {
  RowMatrix<T> out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = x.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

template <typename T>
void fill_glorot(RowMatrix<T>& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<T>(rng.uniform(-limit, limit));
  }
}

template <typename T>
void momentum_step(auto& param, auto& velocity, const auto& grad, T lr, T mu) {
  velocity = mu * velocity - lr * grad;
  param += velocity;
}

template <typename T>
void sgd_update(LinearModel<T>& m, LinearModel<T>& v, const LinearModel<T>& g, T lr, T mu) {
  momentum_step(m.weights, v.weights, g.weights, lr, mu);
  momentum_step(m.bias, v.bias, g.bias, lr, mu);
}

template <typename T>
void sgd_update(MlpModel<T>& m, MlpModel<T>& v, const MlpModel<T>& g, T lr, T mu) {
  momentum_step(m.w1, v.w1, g.w1, lr, mu);
  momentum_step(m.b1, v.b1, g.b1, lr, mu);
  momentum_step(m.w2, v.w2, g.w2, lr, mu);
  momentum_step(m.b2, v.b2, g.b2, lr, mu);
}

template <typename T>
LinearModel<T> zeros_like(const LinearModel<T>& m) {
  return {RowMatrix<T>::Zero(m.weights.rows(), m.weights.cols()),
          RowVector<T>::Zero(m.bias.cols()), 0.0};
}

template <typename T>
MlpModel<T> zeros_like(const MlpModel<T>& m) {
  return {RowMatrix<T>::Zero(m.w1.rows(), m.w1.cols()), RowVector<T>::Zero(m.b1.cols()),
          RowMatrix<T>::Zero(m.w2.rows(), m.w2.cols()), RowVector<T>::Zero(m.b2.cols()), 0.0};
}

}  // namespace detail

/// Mean softmax cross-entropy plus (l2/2)||W||^2. Fills `grad` when given.
template <std::floating_point T>
double logistic_loss_and_gradient(const LinearModel<T>& m, const RowMatrix<T>& x,
                                  std::span<const int> y, double l2,
                                  LinearModel<T>* grad = nullptr) {
  RowMatrix<T> probs = m.scores(x);
  double loss = detail::softmax_cross_entropy(probs, y) / static_cast<double>(x.rows());
  loss += 0.5 * l2 * static_cast<double>(m.weights.squaredNorm());
  if (grad) {
    detail::softmax_backward(probs, y);
    grad->weights = probs.transpose() * x + static_cast<T>(l2) * m.weights;
    grad->bias = probs.colwise().sum();
  }
  return loss;
}

/// Mean cross-entropy plus (l2/2)(||W1||^2 + ||W2||^2). Fills `grad` when given.
template <std::floating_point T>
double mlp_loss_and_gradient(const MlpModel<T>& m, const RowMatrix<T>& x, std::span<const int> y,
                             double l2, MlpModel<T>* grad = nullptr) {
  RowMatrix<T> pre = x * m.w1;
  pre.rowwise() += m.b1;
  const RowMatrix<T> act = pre.cwiseMax(T(0));
  RowMatrix<T> probs = act * m.w2;
  probs.rowwise() += m.b2;
  double loss = detail::softmax_cross_entropy(probs, y) / static_cast<double>(x.rows());
  loss += 0.5 * l2 * static_cast<double>(m.w1.squaredNorm() + m.w2.squaredNorm());
  if (grad) {
    detail::softmax_backward(probs, y);
    grad->w2 = act.transpose() * probs + static_cast<T>(l2) * m.w2;
    grad->b2 = probs.colwise().sum();
    RowMatrix<T> back = probs * m.w2.transpose();
    back.array() *= (pre.array() > T(0)).template cast<T>();
    grad->w1 = x.transpose() * back + static_cast<T>(l2) * m.w1;
    grad->b1 = back.colwise().sum();
  }
  return loss;
}

namespace detail {

inline double model_loss(const auto& m, const auto& x, std::span<const int> y, double l2,
                         auto* grad) {
  using M = std::remove_cvref_t<decltype(m)>;
  if constexpr (requires { m.weights; }) {
    return logistic_loss_and_gradient(m, x, y, l2, static_cast<M*>(grad));
  } else {
    return mlp_loss_and_gradient(m, x, y, l2, static_cast<M*>(grad));
  }
}

// Shuffled mini-batch descent; the shuffle of epoch e comes from its own
// seeded stream, so results depend only on (data, params).
template <typename T, typename Model>
void minibatch_descent(Model& model, const RowMatrix<T>& x, std::span<const int> y,
                       const TrainParams& p, std::string_view name,
                       std::vector<double>* epoch_losses) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  Model grad = zeros_like(model);
  Model velocity = zeros_like(model);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> rows;
  std::vector<int> labels;
  const T lr = static_cast<T>(p.learning_rate);
  const T mu = static_cast<T>(p.momentum);
  const auto diverged = [&](std::size_t epoch) {
    return TrainingError(std::string(name) + " loss diverged in epoch " +
                         std::to_string(epoch + 1) + "; try a learning rate smaller than " +
                         format_double(p.learning_rate));
  };
  for (std::size_t epoch = 0; epoch < p.epochs; ++epoch) {
    const bool full_batch = p.batch >= n;
    if (!full_batch) {
      Rng rng(derive_seed(p.seed, Stream::classifier_shuffle, epoch));
      rng.shuffle(std::span<std::size_t>(order));
    }
    for (std::size_t start = 0; start < n; start += p.batch) {
      double loss;
      if (full_batch) {
        loss = model_loss(model, x, y, p.l2, &grad);
      } else {
        const std::size_t end = std::min(n, start + p.batch);
        rows.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                    order.begin() + static_cast<std::ptrdiff_t>(end));
        labels.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = y[rows[i]];
        loss = model_loss(model, gather_rows(x, rows), std::span<const int>(labels), p.l2, &grad);
      }
      if (!std::isfinite(loss)) throw diverged(epoch);
      sgd_update(model, velocity, grad, lr, mu);
    }
    if (epoch_losses) epoch_losses->push_back(model_loss(model, x, y, p.l2, static_cast<Model*>(nullptr)));
  }
  model.final_loss = model_loss(model, x, y, p.l2, static_cast<Model*>(nullptr));
  if (!std::isfinite(model.final_loss)) throw diverged(p.epochs ? p.epochs - 1 : 0);
}

}  // namespace detail

/// Weights start at zero (the problem is convex).
template <std::floating_point T>
LinearModel<T> train_logistic(const RowMatrix<T>& x, std::span<const int> y, int class_count,
                              const TrainParams& p, std::vector<double>* epoch_losses = nullptr) {
  p.validate();
  detail::check_training_inputs(x, y, class_count);
  LinearModel<T> m{RowMatrix<T>::Zero(class_count, x.cols()), RowVector<T>::Zero(class_count), 0.0};
  detail::minibatch_descent(m, x, y, p, "logistic", epoch_losses);
  return m;
}

/// Weights start uniform in +-sqrt(6/(fan_in+fan_out)), biases at zero.
template <std::floating_point T>
MlpModel<T> init_mlp(std::size_t features, std::size_t hidden, int class_count, std::uint64_t seed) {
  if (hidden == 0) throw ConfigError("MLP hidden width must be positive");
  const std::size_t c = static_cast<std::size_t>(class_count);
  MlpModel<T> m;
  m.w1.resize(static_cast<Eigen::Index>(features), static_cast<Eigen::Index>(hidden));
  m.w2.resize(static_cast<Eigen::Index>(hidden), class_count);
  Rng rng(derive_seed(seed, Stream::classifier_init));
  detail::fill_glorot(m.w1, features, hidden, rng);
  detail::fill_glorot(m.w2, hidden, c, rng);
  m.b1 = RowVector<T>::Zero(static_cast<Eigen::Index>(hidden));
  m.b2 = RowVector<T>::Zero(class_count);
  return m;
}

template <std::floating_point T>
MlpModel<T> train_mlp(const RowMatrix<T>& x, std::span<const int> y, int class_count,
                      const TrainParams& p, std::vector<double>* epoch_losses = nullptr) {
  if (p.hidden == 0) throw ConfigError("MLP hidden width must be positive");
  p.validate();
  detail::check_training_inputs(x, y, class_count);
  MlpModel<T> m = init_mlp<T>(static_cast<std::size_t>(x.cols()), p.hidden, class_count, p.seed);
  detail::minibatch_descent(m, x, y, p, "mlp", epoch_losses);
  return m;
}

/// Row-wise argmax; ties go to the lowest class.
template <typename T>
std::vector<int> argmax_rows(const RowMatrix<T>& scores) {
  std::vector<int> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < scores.cols(); ++c) {
      if (scores(r, c) > scores(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

template <typename Model, typename T>
std::vector<int> predict(const Model& model, const RowMatrix<T>& x) {
  if (static_cast<std::size_t>(x.cols()) != model.features()) {
    throw DomainError("predict: model expects " + std::to_string(model.features()) +
                      " features, input has " + std::to_string(x.cols()));
  }
  return argmax_rows<T>(model.scores(x));
}

inline double accuracy(std::span<const int> predicted, std::span<const int> truth) {
  if (predicted.size() != truth.size()) throw DomainError("accuracy: length mismatch");
  if (truth.empty()) throw DomainError("accuracy of an empty set is undefined");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

template <typename Model, typename T>
double evaluate(const Model& model, const RowMatrix<T>& x, std::span<const int> y) {
  if (x.rows() == 0) throw DomainError("evaluate: empty test set");
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DomainError("evaluate: " + std::to_string(x.rows()) + " rows but " +
                      std::to_string(y.size()) + " labels");
  }
  const std::vector<int> predicted = predict(model, x);
  return accuracy(predicted, y);
}

/// Per-dimension z-score from training statistics; zero-variance columns keep scale 1.
struct Standardizer {
  std::vector<float> mean;
  std::vector<float> scale;

  static Standardizer fit(const RowMatrix<float>& x) {
    Standardizer s;
    const auto cols = static_cast<std::size_t>(x.cols());
    s.mean.resize(cols);
    s.scale.resize(cols);
    const double n = static_cast<double>(x.rows());
    for (std::size_t j = 0; j < cols; ++j) {
      const auto col = x.col(static_cast<Eigen::Index>(j)).template cast<double>();
      const double mu = col.sum() / n;
      const double var = (col.array() - mu).square().sum() / n;
      const double sd = std::sqrt(var);
      s.mean[j] = static_cast<float>(mu);
      s.scale[j] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;
    }
    return s;
  }

  std::size_t features() const { return mean.size(); }

  void apply(RowMatrix<float>& x) const {
    if (static_cast<std::size_t>(x.cols()) != mean.size()) {
      throw DomainError("standardizer expects " + std::to_string(mean.size()) +
                        " features, input has " + std::to_string(x.cols()));
    }
    const Eigen::Map<const RowVector<float>> mu(mean.data(), static_cast<Eigen::Index>(mean.size()));
    const Eigen::Map<const RowVector<float>> sd(scale.data(), static_cast<Eigen::Index>(scale.size()));
    x.rowwise() -= mu;
    x.array().rowwise() /= sd.array();
  }
};

enum class ClassifierKind { logistic, mlp };

inline std::string to_string(ClassifierKind k) { return k == ClassifierKind::logistic ? "lr" : "mlp"; }

inline ClassifierKind parse_classifier_kind(std::string_view s) {
  if (s == "lr" || s == "logistic") return ClassifierKind::logistic;
  if (s == "mlp") return ClassifierKind::mlp;
  throw ConfigError("unknown classifier '" + std::string(s) + "' (expected lr or mlp)");
}

/// Fit/predict on packed feature vectors. Other engines can implement this.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual void fit(const RowMatrix<float>& x, std::span<const int> y, int class_count) = 0;
  virtual std::vector<int> predict(const RowMatrix<float>& x) const = 0;
  virtual std::size_t features() const = 0;

  double evaluate(const RowMatrix<float>& x, std::span<const int> y) const {
    if (x.rows() == 0) throw DomainError("evaluate: empty test set");
    if (static_cast<std::size_t>(x.rows()) != y.size()) {
      throw DomainError("evaluate: " + std::to_string(x.rows()) + " rows but " +
                        std::to_string(y.size()) + " labels");
    }
    return accuracy(predict(x), y);
  }
};

/// The built-in LR/MLP engines with standardization folded in.
class StandardClassifier final : public Classifier {
 public:
  StandardClassifier(ClassifierKind kind, TrainParams params) : kind_(kind), params_(params) {
    if (kind_ == ClassifierKind::mlp && params_.hidden == 0) {
      throw ConfigError("MLP hidden width must be positive");
    }
    params_.validate();
  }

  ClassifierKind kind() const { return kind_; }
  const TrainParams& params() const { return params_; }
  const Standardizer& standardizer() const { return standardizer_; }
  int class_count() const { return class_count_; }
  double final_loss() const { return kind_ == ClassifierKind::logistic ? linear_.final_loss : mlp_.final_loss; }

  void fit(const RowMatrix<float>& x, std::span<const int> y, int class_count) override {
    detail::check_training_inputs(x, y, class_count);
    standardizer_ = Standardizer::fit(x);
    RowMatrix<float> z = x;
    standardizer_.apply(z);
    class_count_ = class_count;
    if (kind_ == ClassifierKind::logistic) {
      linear_ = train_logistic<float>(z, y, class_count, params_);
    } else {
      mlp_ = train_mlp<float>(z, y, class_count, params_);
    }
  }

  std::vector<int> predict(const RowMatrix<float>& x) const override {
    if (class_count_ == 0) throw ConsistencyError("classifier used before fit");
    RowMatrix<float> z = x;
    standardizer_.apply(z);
    return kind_ == ClassifierKind::logistic ? saak::predict(linear_, z) : saak::predict(mlp_, z);
  }

  std::size_t features() const override { return standardizer_.features(); }

  /// Flat float tensor (mean, scale, parameters) plus a key-value sidecar.
  void save(const std::filesystem::path& path) const {
    if (class_count_ == 0) throw ConsistencyError("cannot save an unfitted classifier");
    std::vector<float> flat(standardizer_.mean);
    flat.insert(flat.end(), standardizer_.scale.begin(), standardizer_.scale.end());
    const auto append = [&flat](const auto& m) { flat.insert(flat.end(), m.data(), m.data() + m.size()); };
    if (kind_ == ClassifierKind::logistic) {
      append(linear_.weights);
      append(linear_.bias);
    } else {
      append(mlp_.w1);
      append(mlp_.b1);
      append(mlp_.w2);
      append(mlp_.b2);
    }
    const std::size_t count = flat.size();
    save_tensor(path, Tensor({count}, std::move(flat)));

    KvDocument meta("saak-model", 1);
    meta.set("classifier", to_string(kind_));
    meta.set("features", features());
    meta.set("classes", class_count_);
    meta.set("hidden", kind_ == ClassifierKind::mlp ? params_.hidden : std::size_t{0});
    meta.set("learning_rate", params_.learning_rate);
    meta.set("epochs", params_.epochs);
    meta.set("batch", params_.batch);
    meta.set("l2", params_.l2);
    meta.set("momentum", params_.momentum);
    meta.set("seed", params_.seed);
    meta.set("final_loss", final_loss());
    meta.write(sidecar_for(path));
  }

  static StandardClassifier load(const std::filesystem::path& path) {
    return with_context("model " + path.string(), [&] {
      const KvDocument meta = KvDocument::read(sidecar_for(path));
      meta.expect_format("saak-model", 1);
      TrainParams p;
      p.learning_rate = meta.number<double>("learning_rate");
      p.epochs = meta.number<std::size_t>("epochs");
      p.batch = meta.number<std::size_t>("batch");
      p.l2 = meta.number<double>("l2");
      p.momentum = meta.number<double>("momentum");
      p.seed = meta.number<std::uint64_t>("seed");
      const ClassifierKind kind = parse_classifier_kind(meta.require("classifier"));
      p.hidden = kind == ClassifierKind::mlp ? meta.number<std::size_t>("hidden") : p.hidden;
      StandardClassifier c(kind, p);
      const auto f = meta.number<std::size_t>("features");
      const int classes = meta.number<int>("classes");
      if (f == 0 || classes < 2) throw FormatError("model sidecar has invalid dims");
      const std::size_t cc = static_cast<std::size_t>(classes);
      const std::size_t params = kind == ClassifierKind::logistic
                                     ? cc * f + cc
                                     : f * p.hidden + p.hidden + p.hidden * cc + cc;
      const Tensor flat = load_tensor(path);
      if (flat.rank() != 1 || flat.size() != 2 * f + params) {
        throw ConsistencyError("model tensor has " + std::to_string(flat.size()) +
                               " values, sidecar dims require " + std::to_string(2 * f + params));
      }
      const float* cursor = flat.data();
      const auto take = [&cursor](auto& m, Eigen::Index rows, Eigen::Index cols) {
        m.resize(rows, cols);
        std::copy(cursor, cursor + rows * cols, m.data());
        cursor += rows * cols;
      };
      c.standardizer_.mean.assign(cursor, cursor + f);
      cursor += f;
      c.standardizer_.scale.assign(cursor, cursor + f);
      cursor += f;
      const auto fi = static_cast<Eigen::Index>(f), hi = static_cast<Eigen::Index>(p.hidden);
      if (kind == ClassifierKind::logistic) {
        take(c.linear_.weights, classes, fi);
        take(c.linear_.bias, 1, classes);
      } else {
        take(c.mlp_.w1, fi, hi);
        take(c.mlp_.b1, 1, hi);
        take(c.mlp_.w2, hi, classes);
        take(c.mlp_.b2, 1, classes);
      }
      c.linear_.final_loss = c.mlp_.final_loss = meta.number<double>("final_loss");
      c.class_count_ = classes;
      return c;
    });
  }

  static std::filesystem::path sidecar_for(std::filesystem::path path) {
    return path.replace_extension(".meta");
  }

 private:
  ClassifierKind kind_;
  TrainParams params_;
  Standardizer standardizer_;
  LinearModel<float> linear_;
  MlpModel<float> mlp_;
  int class_count_ = 0;
};

}  // namespace saak
