#pragma once

#include <gtest/gtest.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "saak/saak.hpp"

namespace testing_support {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "saak_test_";
    if (info) name += std::string(info->test_suite_name()) + "_" + info->name() + "_";
    name += std::to_string(counter++);
    path_ = fs::temp_directory_path() / name;
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void write_bytes(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void push_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

/// IDX image file with `count` images of side x side bytes.
inline std::vector<std::uint8_t> idx_images(std::uint32_t count, std::uint32_t side,
                                            const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> out;
  push_be32(out, 0x00000803);
  push_be32(out, count);
  push_be32(out, side);
  push_be32(out, side);
  out.insert(out.end(), pixels.begin(), pixels.end());
  return out;
}

inline std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> out;
  push_be32(out, 0x00000801);
  push_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

/// Synthetic digits: class c draws a bright bar whose position depends on c,
/// plus seeded noise, so simple features separate the classes.
struct SyntheticMnist {
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;
};

inline SyntheticMnist synthetic_digits(std::size_t count, std::size_t side, int classes,
                                       std::uint64_t seed) {
  SyntheticMnist s;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(0, 60);
  for (std::size_t n = 0; n < count; ++n) {
    const int label = static_cast<int>(n % static_cast<std::size_t>(classes));
    s.labels.push_back(static_cast<std::uint8_t>(label));
    const std::size_t row = 1 + static_cast<std::size_t>(label) * (side - 2) / static_cast<std::size_t>(classes);
    for (std::size_t i = 0; i < side; ++i) {
      for (std::size_t j = 0; j < side; ++j) {
        int v = noise(rng);
        if (i == row || (label % 2 == 1 && j == row)) v = 200 + noise(rng) / 2;
        s.pixels.push_back(static_cast<std::uint8_t>(v));
      }
    }
  }
  return s;
}

/// Writes a train/test pair of synthetic IDX files under `dir` with MNIST names.
inline void write_synthetic_mnist(const fs::path& dir, std::size_t train, std::size_t test,
                                  std::size_t side, std::uint64_t seed = 7) {
  fs::create_directories(dir);
  const auto tr = synthetic_digits(train, side, 10, seed);
  const auto te = synthetic_digits(test, side, 10, seed + 1);
  write_bytes(dir / "train-images-idx3-ubyte", idx_images(static_cast<std::uint32_t>(train), static_cast<std::uint32_t>(side), tr.pixels));
  write_bytes(dir / "train-labels-idx1-ubyte", idx_labels(tr.labels));
  write_bytes(dir / "t10k-images-idx3-ubyte", idx_images(static_cast<std::uint32_t>(test), static_cast<std::uint32_t>(side), te.pixels));
  write_bytes(dir / "t10k-labels-idx1-ubyte", idx_labels(te.labels));
}

inline saak::Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed, float lo = 0.0f,
                                  float hi = 1.0f) {
  saak::Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  for (float& v : t.values()) v = dist(rng);
  return t;
}

inline saak::FeatureTensor random_features(std::size_t n, std::size_t h, std::size_t w, std::size_t k,
                                           std::uint64_t seed) {
  return saak::FeatureTensor{random_tensor({n, h, w, k}, seed), 0};
}

inline saak::StageConfig stage(std::size_t ks, std::size_t stride, saak::Pooling pool,
                               saak::Truncation t = saak::Truncation::keep_all()) {
  saak::StageConfig c;
  c.kernel_size = ks;
  c.stride = stride;
  c.pool = pool;
  c.truncation = t;
  return c;
}

/// The ErrorKind `fn` throws, or nullopt if it returns normally.
template <typename Fn>
std::optional<saak::ErrorKind> error_kind(Fn&& fn) {
  try {
    fn();
  } catch (const saak::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

}  // namespace testing_support
