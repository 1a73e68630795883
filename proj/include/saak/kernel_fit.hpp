#pragma once

// One stage of Saak kernel fitting: DC kernel, correlation of the DC-removed
// local cuboids, eigendecomposition and truncation. The retained AC
// eigenvectors b_k are later used as the augmented pair (b_k, -b_k).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/kv_text.hpp"
#include "saak/parallel.hpp"
#include "saak/patches.hpp"
#include "saak/tensor.hpp"

namespace saak {

enum class Pooling { none, max2x2 };

inline std::string to_string(Pooling p) { return p == Pooling::none ? "none" : "max"; }

inline Pooling parse_pooling(std::string_view text) {
  if (text == "none") return Pooling::none;
  if (text == "max" || text == "max2x2") return Pooling::max2x2;
  throw ConfigError("unknown pooling '" + std::string(text) + "' (expected none|max)");
}

/// How many AC eigenvectors a stage keeps.
///   keep_all: every AC direction (lossless)
///   top_k:    `kernels` kernels in total, DC included, so kernels - 1 AC ones
///   energy:   smallest prefix holding `fraction` of the AC energy, never
///             fewer than `floor` AC components
struct Truncation {
  enum class Mode { keep_all, top_k, energy };
  Mode mode = Mode::energy;
  std::size_t kernels = 0;
  double fraction = 0.995;
  std::size_t floor = 3;

  static Truncation keep_all() { return {Mode::keep_all, 0, 1.0, 0}; }
  static Truncation top_k(std::size_t k) { return {Mode::top_k, k, 1.0, 0}; }
  static Truncation energy(double fraction, std::size_t floor = 3) {
    return {Mode::energy, 0, fraction, floor};
  }

  friend bool operator==(const Truncation&, const Truncation&) = default;
};

inline std::string to_string(const Truncation& t) {
  switch (t.mode) {
    case Truncation::Mode::keep_all: return "all";
    case Truncation::Mode::top_k: return "top:" + std::to_string(t.kernels);
    case Truncation::Mode::energy:
      return "energy:" + format_double(t.fraction) +
             (t.floor != 3 ? ":" + std::to_string(t.floor) : std::string());
  }
  return "all";
}

/// Parses "all", "top:K" or "energy:F[:FLOOR]".
inline Truncation parse_truncation(std::string_view text) {
  const auto parts = split(text, ':');
  try {
    if (parts.size() == 1 && parts[0] == "all") return Truncation::keep_all();
    if (parts.size() == 2 && parts[0] == "top") {
      return Truncation::top_k(parse_number<std::size_t>(parts[1], "truncation"));
    }
    if ((parts.size() == 2 || parts.size() == 3) && parts[0] == "energy") {
      const double fraction = parse_number<double>(parts[1], "truncation");
      const std::size_t floor =
          parts.size() == 3 ? parse_number<std::size_t>(parts[2], "truncation") : 3;
      return Truncation::energy(fraction, floor);
    }
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  throw ConfigError("unknown truncation '" + std::string(text) +
                    "' (expected all | top:K | energy:F[:FLOOR])");
}

struct StageConfig {
  std::size_t kernel_size = 2;
  std::size_t stride = 1;
  Pooling pool = Pooling::none;
  Truncation truncation = Truncation::energy(0.995);

  bool overlapping() const { return stride != kernel_size; }

  void validate() const {
    if (kernel_size != 2 && kernel_size != 3 && kernel_size != 5) {
      throw ConfigError("kernel size " + std::to_string(kernel_size) + " not in {2,3,5}");
    }
    if (stride != 1 && stride != kernel_size) {
      throw ConfigError("stride " + std::to_string(stride) + " must be 1 or the kernel size");
    }
    if (truncation.mode == Truncation::Mode::top_k && truncation.kernels < 1) {
      throw ConfigError("top-K truncation needs K >= 1");
    }
    if (truncation.mode == Truncation::Mode::energy &&
        !(truncation.fraction > 0.0 && truncation.fraction <= 1.0)) {
      throw ConfigError("energy fraction must lie in (0, 1]");
    }
  }

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

/// "kernel=3 stride=1 pool=max truncation=energy:0.995"
inline std::string to_string(const StageConfig& c) {
  return "kernel=" + std::to_string(c.kernel_size) + " stride=" + std::to_string(c.stride) +
         " pool=" + to_string(c.pool) + " truncation=" + to_string(c.truncation);
}

inline StageConfig parse_stage_config(std::string_view text) {
  StageConfig c;
  for (const auto& token : split(trim(text), ' ')) {
    if (token.empty()) continue;
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("stage option '" + token + "' is not key=value");
    const std::string key = token.substr(0, eq), value = token.substr(eq + 1);
    try {
      if (key == "kernel") {
        c.kernel_size = parse_number<std::size_t>(value, key);
      } else if (key == "stride") {
        c.stride = parse_number<std::size_t>(value, key);
      } else if (key == "pool") {
        c.pool = parse_pooling(value);
      } else if (key == "truncation") {
        c.truncation = parse_truncation(value);
      } else {
        throw ConfigError("unknown stage option '" + key + "'");
      }
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }
  c.validate();
  return c;
}

/// Kernels of one fitted stage.
struct SaakKernelSet {
  StageConfig config;
  std::size_t input_channels = 0;
  std::size_t input_dim = 0;         // kernel_size^2 * input_channels
  std::vector<float> dc;             // a0, length input_dim
  Tensor ac_basis;                   // retained x input_dim, rows b_1..b_{K-1}
  std::vector<double> eigenvalues;   // all input_dim - 1 AC eigenvalues, non-increasing
  std::size_t patch_count = 0;       // local cuboids the correlation was averaged over

  std::size_t retained() const { return ac_basis.rank() == 2 ? ac_basis.dim(0) : 0; }
  /// K: DC plus retained AC kernels.
  std::size_t kernel_count() const { return retained() + 1; }
  /// 2K - 1 after augmentation.
  std::size_t output_channels() const { return 2 * retained() + 1; }
  bool keeps_all() const { return retained() + 1 == input_dim; }

  std::span<const float> basis_row(std::size_t i) const {
    return ac_basis.values().subspan(i * input_dim, input_dim);
  }
};

/// a0 = (1/sqrt(n)) (1, ..., 1).
template <std::floating_point T = double>
std::vector<T> dc_vector(std::size_t n) {
  if (n == 0) throw DomainError("dc_vector needs dimension >= 1");
  return std::vector<T>(n, static_cast<T>(1.0 / std::sqrt(static_cast<double>(n))));
}

/// f = f~ - a0 (a0^T f~), i.e. the patch minus its mean.
template <std::floating_point T>
std::vector<T> remove_dc(std::span<const T> patch) {
  if (patch.empty()) throw DomainError("remove_dc needs a non-empty patch");
  const double mean =
      std::accumulate(patch.begin(), patch.end(), 0.0) / static_cast<double>(patch.size());
  std::vector<T> out(patch.size());
  std::transform(patch.begin(), patch.end(), out.begin(),
                 [mean](T v) { return static_cast<T>(v - mean); });
  return out;
}

template <std::floating_point T>
std::vector<T> remove_dc(const std::vector<T>& patch) {
  return remove_dc(std::span<const T>(patch));
}

/// Running sum of f f^T in double precision. Only the lower triangle is
/// maintained until `correlation()`.
class CorrelationAccumulator {
 public:
  explicit CorrelationAccumulator(std::size_t dim = 0)
      : sum_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {}

  std::size_t dim() const { return static_cast<std::size_t>(sum_.rows()); }
  std::size_t count() const { return count_; }

  void reset() {
    sum_.setZero();
    count_ = 0;
  }

  /// Adds rows that are already DC-removed.
  void add(const Eigen::Ref<const Eigen::MatrixXd>& rows) {
    if (static_cast<std::size_t>(rows.cols()) != dim()) {
      throw DomainError("patch width " + std::to_string(rows.cols()) + " != correlation dim " +
                        std::to_string(dim()));
    }
    sum_.selfadjointView<Eigen::Lower>().rankUpdate(rows.transpose());
    count_ += static_cast<std::size_t>(rows.rows());
  }

  /// Removes the mean of each float patch row, then adds it.
  void add_raw_patches(const float* rows, std::size_t count, Eigen::MatrixXd& scratch) {
    const auto n = static_cast<Eigen::Index>(dim());
    scratch.resize(static_cast<Eigen::Index>(count), n);
    for (std::size_t r = 0; r < count; ++r) {
      const float* src = rows + r * dim();
      double mean = 0.0;
      for (Eigen::Index c = 0; c < n; ++c) mean += src[c];
      mean /= static_cast<double>(n);
      for (Eigen::Index c = 0; c < n; ++c) scratch(static_cast<Eigen::Index>(r), c) = src[c] - mean;
    }
    add(scratch);
  }

  void merge(const CorrelationAccumulator& other) {
    sum_.triangularView<Eigen::Lower>() += other.sum_;
    count_ += other.count_;
  }

  /// R = (1/M) sum f f^T as a full symmetric matrix.
  Eigen::MatrixXd correlation() const {
    if (count_ == 0) throw DomainError("correlation of zero patches");
    Eigen::MatrixXd r = sum_.selfadjointView<Eigen::Lower>();
    return r / static_cast<double>(count_);
  }

 private:
  Eigen::MatrixXd sum_;
  std::size_t count_ = 0;
};

/// R = (1/M) sum_m f_m f_m^T over rows that are already DC-removed.
inline Eigen::MatrixXd correlation_matrix(const PatchMatrix& patches) {
  if (patches.rows == 0) throw DomainError("correlation_matrix needs at least one patch");
  CorrelationAccumulator acc(patches.cols);
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> rows(
      patches.values.data(), static_cast<Eigen::Index>(patches.rows),
      static_cast<Eigen::Index>(patches.cols));
  acc.add(rows.cast<double>());
  return acc.correlation();
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
template <typename Vec>
void apply_sign_convention(Vec&& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v.size() > 0 && v[best] < 0) v = -v;
}

struct EigenDecomposition {
  Eigen::VectorXd values;   // non-increasing
  Eigen::MatrixXd vectors;  // column i pairs with values[i]
};

/// Eigendecomposition of a symmetric matrix, eigenvalues sorted non-increasing.
inline EigenDecomposition symmetric_eig(const Eigen::MatrixXd& r) {
  if (r.rows() != r.cols()) throw DomainError("symmetric_eig needs a square matrix");
  const double scale = std::max(1.0, r.cwiseAbs().maxCoeff());
  if (r.size() > 0 && (r - r.transpose()).cwiseAbs().maxCoeff() > 1e-6 * scale) {
    throw DomainError("symmetric_eig input is not symmetric within 1e-6");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(r, Eigen::ComputeEigenvectors);
  if (solver.info() != Eigen::Success) {
    throw NumericError("symmetric eigensolver failed to converge (n=" + std::to_string(r.rows()) +
                       ")");
  }
  EigenDecomposition out;
  out.values = solver.eigenvalues().reverse();
  out.vectors = solver.eigenvectors().rowwise().reverse();
  for (Eigen::Index c = 0; c < out.vectors.cols(); ++c) apply_sign_convention(out.vectors.col(c));
  return out;
}

/// Orthonormal basis of the complement of the all-ones direction
/// (Helmert columns), n x (n-1).
inline Eigen::MatrixXd ac_subspace_basis(std::size_t n) {
  const auto size = static_cast<Eigen::Index>(n);
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(size, size - 1);
  for (Eigen::Index k = 1; k < size; ++k) {
    const double norm = std::sqrt(static_cast<double>(k) * static_cast<double>(k + 1));
    q.col(k - 1).head(k).setConstant(1.0 / norm);
    q(k, k - 1) = -static_cast<double>(k) / norm;
  }
  return q;
}

/// Number of AC eigenvectors a truncation rule keeps out of a spectrum.
inline std::size_t retained_ac_count(std::span<const double> eigenvalues, const Truncation& t,
                                     std::size_t input_dim) {
  const std::size_t available = input_dim - 1;
  switch (t.mode) {
    case Truncation::Mode::keep_all:
      return available;
    case Truncation::Mode::top_k:
      if (t.kernels < 1 || t.kernels > input_dim) {
        throw ConfigError("top-K truncation K=" + std::to_string(t.kernels) +
                          " outside [1, " + std::to_string(input_dim) + "]");
      }
      return t.kernels - 1;
    case Truncation::Mode::energy: {
      const std::size_t floor = std::min(t.floor, available);
      const double total = std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
      if (!(total > 0.0)) return floor;
      double running = 0.0;
      std::size_t keep = available;
      for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
        running += eigenvalues[i];
        if (running >= t.fraction * total) {
          keep = i + 1;
          break;
        }
      }
      return std::max(keep, floor);
    }
  }
  return available;
}

/// Turns an accumulated correlation into a kernel set: eigenvectors of R
/// restricted to the AC subspace, sorted, sign-normalized and truncated.
inline SaakKernelSet kernels_from_correlation(const CorrelationAccumulator& acc,
                                              const StageConfig& cfg,
                                              std::size_t input_channels) {
  const std::size_t n = acc.dim();
  if (n < 2) throw DomainError("stage input dimension must be at least 2");
  const Eigen::MatrixXd r = acc.correlation();
  const Eigen::MatrixXd q = ac_subspace_basis(n);
  Eigen::MatrixXd projected = q.transpose() * r * q;
  projected = 0.5 * (projected + projected.transpose()).eval();
  const EigenDecomposition eig = symmetric_eig(projected);

  SaakKernelSet k;
  k.config = cfg;
  k.input_channels = input_channels;
  k.input_dim = n;
  k.dc = dc_vector<float>(n);
  k.patch_count = acc.count();
  k.eigenvalues.resize(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    k.eigenvalues[i] = std::max(0.0, eig.values[static_cast<Eigen::Index>(i)]);
  }
  const std::size_t keep = retained_ac_count(k.eigenvalues, cfg.truncation, n);
  k.ac_basis = Tensor({keep, n});
  for (std::size_t i = 0; i < keep; ++i) {
    Eigen::VectorXd b = q * eig.vectors.col(static_cast<Eigen::Index>(i));
    b.normalize();
    apply_sign_convention(b);
    for (std::size_t j = 0; j < n; ++j) k.ac_basis.at(i, j) = static_cast<float>(b[static_cast<Eigen::Index>(j)]);
  }
  return k;
}

/// Images per correlation chunk. Fixed so the reduction order, and hence the
/// fitted kernels, never depend on the worker count.
inline constexpr std::size_t kFitChunkImages = 64;

/// Accumulates correlation over image chunks [first, last) produced by
/// `chunk_fn(first, last, accumulator, scratch)`. Chunks run in parallel
/// waves and are merged in chunk order.
template <typename ChunkFn>
CorrelationAccumulator accumulate_over_chunks(std::size_t image_count, std::size_t dim,
                                              ChunkFn&& chunk_fn) {
  CorrelationAccumulator total(dim);
  const std::size_t chunks = (image_count + kFitChunkImages - 1) / kFitChunkImages;
  const std::size_t wave = std::max<std::size_t>(1, std::min<std::size_t>(thread_count(), chunks));
  std::vector<CorrelationAccumulator> partial(wave, CorrelationAccumulator(dim));
  std::vector<Eigen::MatrixXd> scratch(wave);
  for (std::size_t base = 0; base < chunks; base += wave) {
    const std::size_t in_wave = std::min(wave, chunks - base);
    parallel_for(in_wave, [&](std::size_t w) {
      partial[w].reset();
      const std::size_t first = (base + w) * kFitChunkImages;
      const std::size_t last = std::min(image_count, first + kFitChunkImages);
      chunk_fn(first, last, partial[w], scratch[w]);
    });
    for (std::size_t w = 0; w < in_wave; ++w) total.merge(partial[w]);
  }
  return total;
}

/// Fits one stage on a feature tensor: extract cuboids at the configured
/// stride, remove DC, average f f^T, eigendecompose and truncate.
inline SaakKernelSet fit_stage_kernels(const FeatureTensor& features, const StageConfig& cfg) {
  cfg.validate();
  require_rank(features.values, 4, "fit_stage_kernels");
  if (features.count() == 0) throw DomainError("fit_stage_kernels needs at least one image");
  check_window_fits(features.height(), features.width(), cfg.kernel_size);
  const std::size_t dim = cfg.kernel_size * cfg.kernel_size * features.channels();
  if (cfg.truncation.mode == Truncation::Mode::top_k && cfg.truncation.kernels > dim) {
    throw ConfigError("top-K truncation K=" + std::to_string(cfg.truncation.kernels) +
                      " exceeds patch dimension " + std::to_string(dim));
  }
  const std::size_t per_image = window_count(features.height(), cfg.kernel_size, cfg.stride) *
                                window_count(features.width(), cfg.kernel_size, cfg.stride);
  auto acc = accumulate_over_chunks(
      features.count(), dim,
      [&](std::size_t first, std::size_t last, CorrelationAccumulator& local,
          Eigen::MatrixXd& scratch) {
        std::vector<float> patches(per_image * dim);
        for (std::size_t n = first; n < last; ++n) {
          extract_image_patches(features.image(n).data(), features.height(), features.width(),
                                features.channels(), cfg.kernel_size, cfg.stride,
                                patches.data());
          local.add_raw_patches(patches.data(), per_image, scratch);
        }
      });
  return kernels_from_correlation(acc, cfg, features.channels());
}

struct KernelSimilarity {
  std::vector<double> per_component;  // |cos| of matching AC kernels
  double mean = 0.0;
};

/// |cos| between corresponding AC kernels of two fitted sets.
inline KernelSimilarity kernel_cosine_similarity(const SaakKernelSet& a, const SaakKernelSet& b) {
  if (a.input_dim != b.input_dim || a.retained() != b.retained()) {
    throw DomainError("kernel sets differ in shape: " + std::to_string(a.retained()) + "x" +
                      std::to_string(a.input_dim) + " vs " + std::to_string(b.retained()) + "x" +
                      std::to_string(b.input_dim));
  }
  KernelSimilarity out;
  out.per_component.reserve(a.retained());
  for (std::size_t i = 0; i < a.retained(); ++i) {
    const auto x = a.basis_row(i), y = b.basis_row(i);
    double dot = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t j = 0; j < a.input_dim; ++j) {
      dot += static_cast<double>(x[j]) * y[j];
      xx += static_cast<double>(x[j]) * x[j];
      yy += static_cast<double>(y[j]) * y[j];
    }
    const double denom = std::sqrt(xx * yy);
    out.per_component.push_back(denom > 0.0 ? std::min(1.0, std::abs(dot) / denom) : 0.0);
  }
  if (!out.per_component.empty()) {
    out.mean = std::accumulate(out.per_component.begin(), out.per_component.end(), 0.0) /
               static_cast<double>(out.per_component.size());
  }
  return out;
}

// Persistence: <stem>.saak holds the K x input_dim kernel matrix (row 0 is
// the DC kernel); <stem>.meta holds the stage settings and full spectrum.

inline std::filesystem::path sidecar_path(const std::filesystem::path& tensor_path) {
  auto p = tensor_path;
  p.replace_extension(".meta");
  return p;
}

inline void save_kernels(const std::filesystem::path& path, const SaakKernelSet& k, int stage) {
  Tensor matrix({k.kernel_count(), k.input_dim});
  std::copy(k.dc.begin(), k.dc.end(), matrix.data());
  std::copy(k.ac_basis.values().begin(), k.ac_basis.values().end(), matrix.data() + k.input_dim);
  save_tensor(path, matrix);

  KvDocument meta("saak-kernel", 1);
  meta.set("stage", stage);
  meta.set("kernel_size", k.config.kernel_size);
  meta.set("stride", k.config.stride);
  meta.set("pool", to_string(k.config.pool));
  meta.set("truncation", to_string(k.config.truncation));
  meta.set("input_channels", k.input_channels);
  meta.set("input_dim", k.input_dim);
  meta.set("retained", k.retained());
  meta.set("output_channels", k.output_channels());
  meta.set("patch_count", k.patch_count);
  meta.set_list("eigenvalues", k.eigenvalues);
  meta.write(sidecar_path(path));
}

inline SaakKernelSet load_kernels(const std::filesystem::path& path) {
  const KvDocument meta = KvDocument::read(sidecar_path(path));
  return with_context(sidecar_path(path).string(), [&] {
    meta.expect_format("saak-kernel", 1);
    SaakKernelSet k;
    k.config.kernel_size = meta.number<std::size_t>("kernel_size");
    k.config.stride = meta.number<std::size_t>("stride");
    k.config.pool = parse_pooling(meta.require("pool"));
    k.config.truncation = parse_truncation(meta.require("truncation"));
    k.input_channels = meta.number<std::size_t>("input_channels");
    k.input_dim = meta.number<std::size_t>("input_dim");
    k.patch_count = meta.number<std::size_t>("patch_count");
    k.eigenvalues = meta.list<double>("eigenvalues");
    const std::size_t retained = meta.number<std::size_t>("retained");

    const Tensor matrix = load_tensor(path);
    if (matrix.rank() != 2 || matrix.dim(0) != retained + 1 || matrix.dim(1) != k.input_dim) {
      throw ConsistencyError("kernel tensor shape " + shape_string(matrix.shape()) +
                             " disagrees with sidecar (" + std::to_string(retained + 1) + "x" +
                             std::to_string(k.input_dim) + ")");
    }
    if (k.input_dim != k.config.kernel_size * k.config.kernel_size * k.input_channels) {
      throw ConsistencyError("input_dim does not equal kernel_size^2 * input_channels");
    }
    k.dc.assign(matrix.data(), matrix.data() + k.input_dim);
    k.ac_basis = Tensor({retained, k.input_dim},
                        std::vector<float>(matrix.data() + k.input_dim,
                                           matrix.data() + matrix.size()));
    return k;
  });
}

}  // namespace saak
