#pragma once

// Dataset ingestion (MNIST IDX, CIFAR-10 / STL-10 binary), the TensorFile
// container and grayscale heatmap export.
//
// TensorFile layout, all integers little-endian:
//   bytes 0..3   magic "SAAK"
//   bytes 4..5   u16 version (1)
//   byte  6      u8 dtype (1 = float32 little-endian)
//   byte  7      u8 ndim
//   then         ndim x u32 dims
//   then         prod(dims) x float32, row-major

#include <png.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "saak/error.hpp"
#include "saak/tensor.hpp"

namespace saak {

/// N labeled images, values in [0,1], layout N x H x W x K0 (channel-last).
struct ImageSet {
  Tensor data;
  std::vector<int> labels;
  int class_count = 0;

  std::size_t count() const { return labels.size(); }
  std::size_t height() const { return data.dim(1); }
  std::size_t width() const { return data.dim(2); }
  std::size_t channels() const { return data.dim(3); }

  void validate() const {
    require_rank(data, 4, "image set");
    if (data.dim(0) != labels.size()) {
      throw ConsistencyError("image set has " + std::to_string(data.dim(0)) + " images but " +
                             std::to_string(labels.size()) + " labels");
    }
    for (const int label : labels) {
      if (label < 0 || label >= class_count) {
        throw FormatError("label " + std::to_string(label) + " outside [0, " +
                          std::to_string(class_count) + ")");
      }
    }
    for (const float v : data.values()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw DomainError("image value outside [0,1]");
    }
  }

  /// Copies the images at `indices` (in that order).
  ImageSet subset(std::span<const std::size_t> indices) const {
    const std::size_t stride = height() * width() * channels();
    ImageSet out;
    out.class_count = class_count;
    out.data = Tensor({indices.size(), height(), width(), channels()});
    out.labels.reserve(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const std::size_t src = indices[r];
      std::copy_n(data.data() + src * stride, stride, out.data.data() + r * stride);
      out.labels.push_back(labels.at(src));
    }
    return out;
  }

  FeatureTensor as_features() const { return FeatureTensor{data, 0}; }
};

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("failed reading " + path.string());
  }
  return bytes;
}

inline std::uint32_t read_be_u32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

inline std::uint32_t read_le_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

inline void append_le_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

// Checks a fixed-size header plus payload against the file length.
inline void check_payload(const std::filesystem::path& path, std::size_t file_size,
                          std::size_t header, std::size_t payload) {
  if (file_size < header + payload) {
    throw IoError(path.string() + ": truncated payload, header declares " +
                  std::to_string(payload) + " bytes but " +
                  std::to_string(file_size - std::min(file_size, header)) + " present");
  }
  if (file_size > header + payload) {
    throw FormatError(path.string() + ": " + std::to_string(file_size - header - payload) +
                      " bytes beyond the declared payload");
  }
}


inline float byte_to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair (MNIST layout). Pixel bytes become b/255.
inline ImageSet load_mnist(const std::filesystem::path& image_path,
                           const std::filesystem::path& label_path, int class_count = 10) {
  const auto images = detail::read_file(image_path);
  if (images.size() < 16) throw IoError(image_path.string() + ": truncated IDX header");
  if (detail::read_be_u32(images.data()) != kIdxImageMagic) {
    throw FormatError(image_path.string() + ": bad IDX image magic");
  }
  const std::size_t n = detail::read_be_u32(images.data() + 4);
  const std::size_t rows = detail::read_be_u32(images.data() + 8);
  const std::size_t cols = detail::read_be_u32(images.data() + 12);
  detail::check_payload(image_path, images.size(), 16, n * rows * cols);

  const auto labels = detail::read_file(label_path);
  if (labels.size() < 8) throw IoError(label_path.string() + ": truncated IDX header");
  if (detail::read_be_u32(labels.data()) != kIdxLabelMagic) {
    throw FormatError(label_path.string() + ": bad IDX label magic");
  }
  const std::size_t label_count = detail::read_be_u32(labels.data() + 4);
  detail::check_payload(label_path, labels.size(), 8, label_count);
  if (label_count != n) {
    throw ConsistencyError(image_path.string() + " holds " + std::to_string(n) + " images but " +
                           label_path.string() + " holds " + std::to_string(label_count) +
                           " labels");
  }

  ImageSet set;
  set.class_count = class_count;
  set.data = Tensor({n, rows, cols, 1});
  std::transform(images.begin() + 16, images.end(), set.data.data(), detail::byte_to_unit);
  set.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[8 + i];
    if (label >= class_count) {
      throw FormatError(label_path.string() + ": label " + std::to_string(label) + " at index " +
                        std::to_string(i) + " is not below " + std::to_string(class_count));
    }
    set.labels.push_back(label);
  }
  return set;
}

namespace detail {

// Copies one channel-planar image (K planes of side x side bytes) into
// channel-last floats. `column_major` planes are stored transposed (STL-10).
inline void planar_to_channel_last(const std::uint8_t* src, std::size_t side, std::size_t channels,
                                   bool column_major, float* dst) {
  for (std::size_t k = 0; k < channels; ++k) {
    const std::uint8_t* plane = src + k * side * side;
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) {
        const std::uint8_t b = column_major ? plane[j * side + i] : plane[i * side + j];
        dst[(i * side + j) * channels + k] = byte_to_unit(b);
      }
    }
  }
}

}  // namespace detail

/// Reads CIFAR-10 binary batches: rows of 1 label byte + 3x32x32 planar pixels.
inline ImageSet load_cifar10(std::span<const std::filesystem::path> batch_paths) {
  constexpr std::size_t side = 32, channels = 3;
  constexpr std::size_t pixels = side * side * channels;
  constexpr std::size_t row = pixels + 1;

  std::vector<std::vector<std::uint8_t>> files;
  std::size_t n = 0;
  for (const auto& path : batch_paths) {
    auto bytes = detail::read_file(path);
    if (bytes.size() % row != 0) {
      throw FormatError(path.string() + ": size " + std::to_string(bytes.size()) +
                        " is not a multiple of " + std::to_string(row));
    }
    n += bytes.size() / row;
    files.push_back(std::move(bytes));
  }

  ImageSet set;
  set.class_count = 10;
  set.data = Tensor({n, side, side, channels});
  set.labels.reserve(n);
  std::size_t index = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const auto& bytes = files[f];
    for (std::size_t offset = 0; offset < bytes.size(); offset += row, ++index) {
      const int label = bytes[offset];
      if (label >= 10) {
        throw FormatError(batch_paths[f].string() + ": label byte " + std::to_string(label) +
                          " at record " + std::to_string(offset / row));
      }
      set.labels.push_back(label);
      detail::planar_to_channel_last(bytes.data() + offset + 1, side, channels, false,
                                     set.data.data() + index * pixels);
    }
  }
  return set;
}

inline ImageSet load_cifar10(const std::vector<std::filesystem::path>& batch_paths) {
  return load_cifar10(std::span<const std::filesystem::path>(batch_paths));
}

/// Reads the STL-10 binary distribution: 96x96x3 channel-planar images with
/// column-major planes, labels 1..10 in a separate byte file.
inline ImageSet load_stl10(const std::filesystem::path& image_path,
                           const std::filesystem::path& label_path) {
  constexpr std::size_t side = 96, channels = 3;
  constexpr std::size_t pixels = side * side * channels;
  const auto images = detail::read_file(image_path);
  if (images.size() % pixels != 0) {
    throw FormatError(image_path.string() + ": size is not a multiple of " + std::to_string(pixels));
  }
  const std::size_t n = images.size() / pixels;
  const auto labels = detail::read_file(label_path);
  if (labels.size() != n) {
    throw ConsistencyError(image_path.string() + " holds " + std::to_string(n) + " images but " +
                           label_path.string() + " holds " + std::to_string(labels.size()) +
                           " labels");
  }
  ImageSet set;
  set.class_count = 10;
  set.data = Tensor({n, side, side, channels});
  set.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 1 || labels[i] > 10) {
      throw FormatError(label_path.string() + ": label " + std::to_string(labels[i]) +
                        " outside 1..10 at index " + std::to_string(i));
    }
    set.labels.push_back(labels[i] - 1);
    detail::planar_to_channel_last(images.data() + i * pixels, side, channels, true,
                                   set.data.data() + i * pixels);
  }
  return set;
}

inline constexpr std::array<char, 4> kTensorMagic{'S', 'A', 'A', 'K'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 1;

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.rank() > 255) throw DomainError("tensor rank exceeds 255");
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(static_cast<std::uint8_t>(kTensorVersion & 0xff));
  out.push_back(static_cast<std::uint8_t>(kTensorVersion >> 8));
  out.push_back(kDtypeFloat32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (const std::size_t d : t.shape()) {
    if (d > UINT32_MAX) throw DomainError("tensor dimension exceeds u32");
    detail::append_le_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const float v : t.values()) detail::append_le_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& name) {
  if (bytes.size() < 8) throw IoError(name + ": truncated tensor header");
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) {
    throw FormatError(name + ": bad tensor magic");
  }
  const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kTensorVersion) {
    throw FormatError(name + ": unsupported tensor version " + std::to_string(version));
  }
  if (bytes[6] != kDtypeFloat32) {
    throw FormatError(name + ": unsupported dtype code " + std::to_string(bytes[6]));
  }
  const std::size_t ndim = bytes[7];
  const std::size_t header = 8 + 4 * ndim;
  if (bytes.size() < header) throw IoError(name + ": truncated tensor header");
  std::vector<std::size_t> shape(ndim);
  for (std::size_t d = 0; d < ndim; ++d) shape[d] = detail::read_le_u32(bytes.data() + 8 + 4 * d);
  const std::size_t count = Tensor::element_count(shape);
  detail::check_payload(name, bytes.size(), header, count * 4);
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    values[i] = std::bit_cast<float>(detail::read_le_u32(bytes.data() + header + 4 * i));
  }
  return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

/// Writes a rank-2 tensor as an 8-bit grayscale PNG, min-max scaled to
/// [0,255] with round-half-up. A constant input gives an all-zero image.
inline void export_heatmap(const Tensor& channel, const std::filesystem::path& path) {
  require_rank(channel, 2, "heatmap");
  const auto values = channel.values();
  if (std::any_of(values.begin(), values.end(), [](float v) { return !std::isfinite(v); })) {
    throw DomainError("heatmap input contains non-finite values");
  }
  std::vector<std::uint8_t> pixels(values.size(), 0);
  if (!values.empty()) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi > lo) {
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double scaled = (static_cast<double>(values[i]) - lo) / (hi - lo) * 255.0;
        pixels[i] = static_cast<std::uint8_t>(std::min(255.0, std::floor(scaled + 0.5)));
      }
    }
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  }
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(channel.dim(1));
  image.height = static_cast<png_uint_32>(channel.dim(0));
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string reason = image.message;
    png_image_free(&image);
    throw IoError("cannot write " + path.string() + ": " + reason);
  }
}

/// Reads an 8-bit grayscale PNG into a rank-2 tensor of raw byte values.
inline Tensor read_gray_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw IoError("cannot read " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    const std::string reason = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode " + path.string() + ": " + reason);
  }
  Tensor out({image.height, image.width});
  std::transform(pixels.begin(), pixels.end(), out.data(),
                 [](std::uint8_t b) { return static_cast<float>(b); });
  return out;
}

}  // namespace saak
