#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/kernel_fit.hpp"
#include "saak/parallel.hpp"
#include "saak/patches.hpp"
#include "saak/tensor.hpp"

namespace saak {

using SaakCascade = std::vector<SaakKernelSet>;

/// Spatial extent after valid windows and optional 2x2/2 pooling.
struct StageShape {
  std::size_t in_height = 0, in_width = 0;
  std::size_t grid_height = 0, grid_width = 0;  // after projection
  std::size_t out_height = 0, out_width = 0;    // after pooling
};

/// Spatial shape chain of a cascade; throws a config error naming the first
/// stage whose input is smaller than its window (or its pool).
inline std::vector<StageShape> plan_stage_shapes(std::size_t height, std::size_t width,
                                                 std::span<const StageConfig> stages) {
  std::vector<StageShape> shapes;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& cfg = stages[s];
    StageShape shape{height, width};
    if (height < cfg.kernel_size || width < cfg.kernel_size) {
      throw ConfigError("stage " + std::to_string(s + 1) + ": input spatial dims " +
                        std::to_string(height) + "x" + std::to_string(width) +
                        " are smaller than kernel size " + std::to_string(cfg.kernel_size));
    }
    shape.grid_height = window_count(height, cfg.kernel_size, cfg.stride);
    shape.grid_width = window_count(width, cfg.kernel_size, cfg.stride);
    shape.out_height = shape.grid_height;
    shape.out_width = shape.grid_width;
    if (cfg.pool == Pooling::max2x2) {
      if (shape.grid_height < 2 || shape.grid_width < 2) {
        throw ConfigError("stage " + std::to_string(s + 1) + ": " +
                          std::to_string(shape.grid_height) + "x" +
                          std::to_string(shape.grid_width) + " response too small to pool");
      }
      shape.out_height = shape.grid_height / 2;
      shape.out_width = shape.grid_width / 2;
    }
    shapes.push_back(shape);
    height = shape.out_height;
    width = shape.out_width;
  }
  return shapes;
}

/// 2x2 (in general window x window, stride) max over each channel; trailing
/// rows/columns that do not fill a window are dropped.
inline FeatureTensor max_pool(const FeatureTensor& t, std::size_t window = 2, std::size_t stride = 2) {
  require_rank(t.values, 4, "max_pool");
  if (t.height() < window || t.width() < window) {
    throw DomainError("max_pool window " + std::to_string(window) + " exceeds spatial dims " +
                      std::to_string(t.height()) + "x" + std::to_string(t.width()));
  }
  const std::size_t oh = window_count(t.height(), window, stride);
  const std::size_t ow = window_count(t.width(), window, stride);
  const std::size_t k = t.channels();
  FeatureTensor out{Tensor({t.count(), oh, ow, k}), t.stage};
  parallel_for(t.count(), [&](std::size_t n) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        float* dst = &out.values.at(n, i, j, 0);
        const float* first = &t.values.at(n, i * stride, j * stride, 0);
        std::copy_n(first, k, dst);
        for (std::size_t di = 0; di < window; ++di) {
          for (std::size_t dj = 0; dj < window; ++dj) {
            const float* src = &t.values.at(n, i * stride + di, j * stride + dj, 0);
            for (std::size_t c = 0; c < k; ++c) dst[c] = std::max(dst[c], src[c]);
          }
        }
      }
    }
  });
  return out;
}

namespace detail {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Projects one image's cuboids and writes DC + sign-to-position pairs into
// `out` (grid_h * grid_w * (2r + 1) floats). `patches` and `coeffs` are scratch.
inline void project_image(const float* image, std::size_t height, std::size_t width,
                          std::size_t channels, const SaakKernelSet& k, RowMatrixF& patches,
                          RowMatrixF& coeffs, float* out) {
  const std::size_t ks = k.config.kernel_size;
  const std::size_t gh = window_count(height, ks, k.config.stride);
  const std::size_t gw = window_count(width, ks, k.config.stride);
  const auto rows = static_cast<Eigen::Index>(gh * gw);
  const auto dim = static_cast<Eigen::Index>(k.input_dim);
  patches.resize(rows, dim);
  extract_image_patches(image, height, width, channels, ks, k.config.stride, patches.data());

  const std::size_t r = k.retained();
  const std::size_t kout = 2 * r + 1;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(k.input_dim));
  for (Eigen::Index row = 0; row < rows; ++row) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < dim; ++c) sum += patches(row, c);
    out[static_cast<std::size_t>(row) * kout] = static_cast<float>(sum * inv_sqrt);
    const auto mean = static_cast<float>(sum / static_cast<double>(k.input_dim));
    patches.row(row).array() -= mean;
  }
  if (r == 0) return;
  Eigen::Map<const RowMatrixF> basis(k.ac_basis.data(), static_cast<Eigen::Index>(r), dim);
  coeffs.noalias() = patches * basis.transpose();
  for (Eigen::Index row = 0; row < rows; ++row) {
    float* g = out + static_cast<std::size_t>(row) * kout;
    for (std::size_t a = 0; a < r; ++a) {
      const float p = coeffs(row, static_cast<Eigen::Index>(a));
      g[2 * a + 1] = p > 0.0f ? p : 0.0f;
      g[2 * a + 2] = p < 0.0f ? -p : 0.0f;
    }
  }
}

inline void check_stage_input(const FeatureTensor& t, const SaakKernelSet& k) {
  require_rank(t.values, 4, "forward_stage");
  if (k.input_dim != k.config.kernel_size * k.config.kernel_size * t.channels()) {
    throw DomainError("kernel input dim " + std::to_string(k.input_dim) + " does not match " +
                      std::to_string(k.config.kernel_size) + "^2 x " +
                      std::to_string(t.channels()) + " input channels");
  }
  check_window_fits(t.height(), t.width(), k.config.kernel_size);
}

}  // namespace detail

/// One Saak stage: DC projection, AC projection onto retained kernels with
/// sign-to-position split (channels 2k-1 / 2k), then optional max pooling.
inline FeatureTensor forward_stage(const FeatureTensor& t, const SaakKernelSet& k) {
  detail::check_stage_input(t, k);
  const std::size_t gh = window_count(t.height(), k.config.kernel_size, k.config.stride);
  const std::size_t gw = window_count(t.width(), k.config.kernel_size, k.config.stride);
  FeatureTensor out{Tensor({t.count(), gh, gw, k.output_channels()}), t.stage + 1};
  const std::size_t out_stride = gh * gw * k.output_channels();
  parallel_for(t.count(), [&](std::size_t n) {
    thread_local detail::RowMatrixF patches, coeffs;
    detail::project_image(t.image(n).data(), t.height(), t.width(), t.channels(), k, patches,
                          coeffs, out.values.data() + n * out_stride);
  });
  if (k.config.pool == Pooling::max2x2) return max_pool(out);
  return out;
}

/// Stage-by-stage outputs of a cascade.
inline std::vector<FeatureTensor> forward_cascade(const FeatureTensor& input,
                                                  const SaakCascade& cascade) {
  std::vector<FeatureTensor> outputs;
  outputs.reserve(cascade.size());
  const FeatureTensor* current = &input;
  for (std::size_t s = 0; s < cascade.size(); ++s) {
    const auto& k = cascade[s];
    if (current->height() < k.config.kernel_size || current->width() < k.config.kernel_size) {
      throw ConfigError("stage " + std::to_string(s + 1) + ": input spatial dims " +
                        std::to_string(current->height()) + "x" +
                        std::to_string(current->width()) + " are smaller than kernel size " +
                        std::to_string(k.config.kernel_size));
    }
    outputs.push_back(with_context("stage " + std::to_string(s + 1),
                                   [&] { return forward_stage(*current, k); }));
    current = &outputs.back();
  }
  return outputs;
}

inline std::vector<FeatureTensor> forward_cascade(const ImageSet& images, const SaakCascade& cascade) {
  return forward_cascade(images.as_features(), cascade);
}

/// Runs images [first, last) of `input` through the first `depth` stages
/// without materializing the other images.
inline FeatureTensor forward_prefix(const FeatureTensor& input, std::size_t first, std::size_t last,
                                    const SaakCascade& cascade, std::size_t depth) {
  const std::size_t stride = input.height() * input.width() * input.channels();
  FeatureTensor chunk{Tensor({last - first, input.height(), input.width(), input.channels()}),
                      input.stage};
  std::copy_n(input.values.data() + first * stride, (last - first) * stride, chunk.values.data());
  for (std::size_t s = 0; s < depth; ++s) chunk = forward_stage(chunk, cascade[s]);
  return chunk;
}

/// Fits every stage in turn on `input`. The correlation for stage p is
/// accumulated chunk by chunk, pushing each chunk through stages 1..p-1, so
/// intermediate responses for the whole set are never held in memory.
/// `on_stage` (optional) is called after each stage is fitted.
inline SaakCascade fit_cascade(const FeatureTensor& input, std::span<const StageConfig> stages,
                               const std::function<void(std::size_t, const SaakKernelSet&)>&
                                   on_stage = {}) {
  if (input.count() == 0) throw DomainError("fit_cascade needs at least one image");
  const auto shapes = plan_stage_shapes(input.height(), input.width(), stages);
  SaakCascade cascade;
  std::size_t channels = input.channels();
  std::size_t height = input.height(), width = input.width();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageConfig& cfg = stages[s];
    cfg.validate();
    const std::size_t dim = cfg.kernel_size * cfg.kernel_size * channels;
    const std::size_t per_image = shapes[s].grid_height * shapes[s].grid_width;
    auto fit = [&] {
      if (cfg.truncation.mode == Truncation::Mode::top_k && cfg.truncation.kernels > dim) {
        throw ConfigError("top-K truncation K=" + std::to_string(cfg.truncation.kernels) +
                          " exceeds patch dimension " + std::to_string(dim));
      }
      auto acc = accumulate_over_chunks(
          input.count(), dim,
          [&](std::size_t first, std::size_t last, CorrelationAccumulator& local,
              Eigen::MatrixXd& scratch) {
            const FeatureTensor chunk = [&] {
              if (s == 0) {
                const std::size_t stride = height * width * channels;
                FeatureTensor c{Tensor({last - first, height, width, channels})};
                std::copy_n(input.values.data() + first * stride, (last - first) * stride,
                            c.values.data());
                return c;
              }
              return forward_prefix(input, first, last, cascade, s);
            }();
            std::vector<float> patches(per_image * dim);
            for (std::size_t n = 0; n < chunk.count(); ++n) {
              extract_image_patches(chunk.image(n).data(), height, width, channels,
                                    cfg.kernel_size, cfg.stride, patches.data());
              local.add_raw_patches(patches.data(), per_image, scratch);
            }
          });
      return kernels_from_correlation(acc, cfg, channels);
    };
    cascade.push_back(with_context("stage " + std::to_string(s + 1), fit));
    if (on_stage) on_stage(s, cascade.back());
    channels = cascade.back().output_channels();
    height = shapes[s].out_height;
    width = shapes[s].out_width;
  }
  return cascade;
}

inline SaakCascade fit_cascade(const ImageSet& images, std::span<const StageConfig> stages,
                               const std::function<void(std::size_t, const SaakKernelSet&)>&
                                   on_stage = {}) {
  return fit_cascade(images.as_features(), stages, on_stage);
}

/// Inverse of a lossless stage (stride = kernel size, no pooling, every AC
/// kernel kept): p_k = g_{2k-1} - g_{2k}, f~ = a0 p0 + sum_k b_k p_k, re-tiled.
inline FeatureTensor inverse_stage(const FeatureTensor& t, const SaakKernelSet& k) {
  require_rank(t.values, 4, "inverse_stage");
  if (k.config.stride != k.config.kernel_size || k.config.pool != Pooling::none || !k.keeps_all()) {
    throw UnsupportedError("inverse_stage needs a non-overlapping, unpooled, keep-all stage (got " +
                           to_string(k.config) + ", " + std::to_string(k.retained()) + " of " +
                           std::to_string(k.input_dim - 1) + " AC kernels)");
  }
  if (t.channels() != k.output_channels()) {
    throw DomainError("inverse_stage expects " + std::to_string(k.output_channels()) +
                      " channels, got " + std::to_string(t.channels()));
  }
  const std::size_t ks = k.config.kernel_size;
  const std::size_t kin = k.input_channels;
  const std::size_t r = k.retained();
  FeatureTensor out{Tensor({t.count(), t.height() * ks, t.width() * ks, kin}),
                    std::max(0, t.stage - 1)};
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(k.input_dim));
  parallel_for(t.count(), [&](std::size_t n) {
    std::vector<double> patch(k.input_dim);
    for (std::size_t i = 0; i < t.height(); ++i) {
      for (std::size_t j = 0; j < t.width(); ++j) {
        const float* g = &t.values.at(n, i, j, 0);
        std::fill(patch.begin(), patch.end(), g[0] * inv_sqrt);
        for (std::size_t a = 0; a < r; ++a) {
          const double p = static_cast<double>(g[2 * a + 1]) - g[2 * a + 2];
          if (p == 0.0) continue;
          const auto row = k.basis_row(a);
          for (std::size_t d = 0; d < k.input_dim; ++d) patch[d] += p * row[d];
        }
        std::size_t d = 0;
        for (std::size_t di = 0; di < ks; ++di) {
          for (std::size_t dj = 0; dj < ks; ++dj) {
            float* dst = &out.values.at(n, i * ks + di, j * ks + dj, 0);
            for (std::size_t c = 0; c < kin; ++c) dst[c] = static_cast<float>(patch[d++]);
          }
        }
      }
    }
  });
  return out;
}

/// Inverts a whole lossless cascade back to the input domain.
inline FeatureTensor inverse_cascade(const FeatureTensor& t, const SaakCascade& cascade) {
  FeatureTensor current = t;
  for (std::size_t s = cascade.size(); s-- > 0;) current = inverse_stage(current, cascade[s]);
  return current;
}

struct RmseCurve {
  std::vector<double> values;       // one per spectral channel
  std::vector<bool> degenerate;     // normalized curve only: clean channel is all zero
};

/// Per-channel sqrt(mean (clean - attacked)^2) over images and positions;
/// the normalized variant divides by the clean channel's RMS.
inline RmseCurve rmse_per_spectral(const FeatureTensor& clean, const FeatureTensor& attacked,
                                   bool normalize) {
  require_rank(clean.values, 4, "rmse_per_spectral");
  if (clean.values.shape() != attacked.values.shape()) {
    throw DomainError("rmse_per_spectral: shapes " + shape_string(clean.values.shape()) + " and " +
                      shape_string(attacked.values.shape()) + " differ");
  }
  const std::size_t k = clean.channels();
  std::vector<double> diff(k, 0.0), energy(k, 0.0);
  const auto a = clean.values.values();
  const auto b = attacked.values.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    diff[i % k] += d * d;
    energy[i % k] += static_cast<double>(a[i]) * a[i];
  }
  const double count = static_cast<double>(a.size() / std::max<std::size_t>(k, 1));
  RmseCurve curve;
  curve.values.resize(k);
  curve.degenerate.assign(k, false);
  for (std::size_t c = 0; c < k; ++c) {
    const double rmse = count > 0 ? std::sqrt(diff[c] / count) : 0.0;
    if (!normalize) {
      curve.values[c] = rmse;
      continue;
    }
    const double rms = count > 0 ? std::sqrt(energy[c] / count) : 0.0;
    if (rms > 0.0) {
      curve.values[c] = rmse / rms;
    } else {
      curve.values[c] = 0.0;
      curve.degenerate[c] = true;
    }
  }
  return curve;
}

}  // namespace saak
