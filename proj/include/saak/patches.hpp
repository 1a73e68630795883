#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "saak/error.hpp"
#include "saak/tensor.hpp"

namespace saak {

/// Output grid length along one axis for valid (unpadded) windows.
constexpr std::size_t window_count(std::size_t extent, std::size_t window, std::size_t stride) {
  return extent < window ? 0 : (extent - window) / stride + 1;
}

/// Flattened local cuboids, one per row. Columns run over the window in
/// row-major spatial order with the channel innermost.
struct PatchMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t grid_height = 0;
  std::size_t grid_width = 0;
  std::vector<float> values;

  const float* row(std::size_t r) const { return values.data() + r * cols; }
};

/// Copies every window of one H x W x K image into `out`
/// (grid_h * grid_w rows of ks*ks*K values).
inline void extract_image_patches(const float* image, std::size_t height, std::size_t width,
                                  std::size_t channels, std::size_t kernel_size,
                                  std::size_t stride, float* out) {
  const std::size_t grid_h = window_count(height, kernel_size, stride);
  const std::size_t grid_w = window_count(width, kernel_size, stride);
  const std::size_t run = kernel_size * channels;
  for (std::size_t gi = 0; gi < grid_h; ++gi) {
    for (std::size_t gj = 0; gj < grid_w; ++gj) {
      for (std::size_t di = 0; di < kernel_size; ++di) {
        const float* src = image + ((gi * stride + di) * width + gj * stride) * channels;
        std::copy_n(src, run, out);
        out += run;
      }
    }
  }
}

inline void check_window_fits(std::size_t height, std::size_t width, std::size_t kernel_size) {
  if (height < kernel_size || width < kernel_size) {
    throw DomainError("spatial dims " + std::to_string(height) + "x" + std::to_string(width) +
                      " are smaller than kernel size " + std::to_string(kernel_size));
  }
}

/// All windows of all images, image-major then grid row-major.
inline PatchMatrix extract_patches(const FeatureTensor& t, std::size_t kernel_size,
                                   std::size_t stride) {
  require_rank(t.values, 4, "extract_patches");
  if (kernel_size == 0 || stride == 0) throw DomainError("kernel size and stride must be positive");
  check_window_fits(t.height(), t.width(), kernel_size);
  PatchMatrix p;
  p.grid_height = window_count(t.height(), kernel_size, stride);
  p.grid_width = window_count(t.width(), kernel_size, stride);
  p.cols = kernel_size * kernel_size * t.channels();
  const std::size_t per_image = p.grid_height * p.grid_width;
  p.rows = t.count() * per_image;
  p.values.resize(p.rows * p.cols);
  for (std::size_t n = 0; n < t.count(); ++n) {
    extract_image_patches(t.image(n).data(), t.height(), t.width(), t.channels(), kernel_size,
                          stride, p.values.data() + n * per_image * p.cols);
  }
  return p;
}

}  // namespace saak
