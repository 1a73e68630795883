#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "support.hpp"

using namespace saak;
using testing_support::error_kind;
using testing_support::TempDir;
using testing_support::write_bytes;

namespace {

std::vector<std::uint8_t> cifar_row(std::uint8_t label, std::uint8_t fill) {
  std::vector<std::uint8_t> row{label};
  row.insert(row.end(), 3072, fill);
  return row;
}

}  // namespace

TEST(Mnist, ConstantBytesNormalizeToZeroAndOne) {
  TempDir dir;
  std::vector<std::uint8_t> pixels(2 * 28 * 28, 0);
  std::fill(pixels.begin() + 28 * 28, pixels.end(), 255);
  write_bytes(dir / "img", testing_support::idx_images(2, 28, pixels));
  write_bytes(dir / "lbl", testing_support::idx_labels({3, 7}));
  const ImageSet s = load_mnist(dir / "img", dir / "lbl");
  ASSERT_EQ(s.data.shape(), (std::vector<std::size_t>{2, 28, 28, 1}));
  EXPECT_EQ(s.class_count, 10);
  EXPECT_EQ(s.labels, (std::vector<int>{3, 7}));
  for (std::size_t i = 0; i < 28 * 28; ++i) {
    EXPECT_EQ(s.data[i], 0.0f);
    EXPECT_EQ(s.data[28 * 28 + i], 1.0f);
  }
}

TEST(Mnist, ByteRecoversAsRoundedScaledValue) {
  TempDir dir;
  std::vector<std::uint8_t> pixels(28 * 28);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = static_cast<std::uint8_t>(i % 256);
  write_bytes(dir / "img", testing_support::idx_images(1, 28, pixels));
  write_bytes(dir / "lbl", testing_support::idx_labels({0}));
  const ImageSet s = load_mnist(dir / "img", dir / "lbl");
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    EXPECT_EQ(std::lround(255.0 * s.data[i]), pixels[i]);
  }
}

TEST(Mnist, TruncatedPayloadIsIoError) {
  TempDir dir;
  write_bytes(dir / "img", testing_support::idx_images(10, 28, std::vector<std::uint8_t>(9 * 28 * 28)));
  write_bytes(dir / "lbl", testing_support::idx_labels(std::vector<std::uint8_t>(10, 1)));
  EXPECT_EQ(error_kind([&] { load_mnist(dir / "img", dir / "lbl"); }), ErrorKind::io);
}

TEST(Mnist, BadMagicIsFormatError) {
  TempDir dir;
  auto bytes = testing_support::idx_images(1, 28, std::vector<std::uint8_t>(28 * 28));
  bytes[3] = 0x04;
  write_bytes(dir / "img", bytes);
  write_bytes(dir / "lbl", testing_support::idx_labels({1}));
  EXPECT_EQ(error_kind([&] { load_mnist(dir / "img", dir / "lbl"); }), ErrorKind::format);
}

TEST(Mnist, CountMismatchIsConsistencyError) {
  TempDir dir;
  write_bytes(dir / "img", testing_support::idx_images(2, 28, std::vector<std::uint8_t>(2 * 28 * 28)));
  write_bytes(dir / "lbl", testing_support::idx_labels({1, 2, 3}));
  EXPECT_EQ(error_kind([&] { load_mnist(dir / "img", dir / "lbl"); }), ErrorKind::consistency);
}

TEST(Mnist, ExtraPayloadIsRejected) {
  TempDir dir;
  write_bytes(dir / "img", testing_support::idx_images(1, 28, std::vector<std::uint8_t>(28 * 28 + 5)));
  write_bytes(dir / "lbl", testing_support::idx_labels({1}));
  EXPECT_TRUE(error_kind([&] { load_mnist(dir / "img", dir / "lbl"); }).has_value());
}

TEST(Mnist, MissingFileIsIoError) {
  TempDir dir;
  EXPECT_EQ(error_kind([&] { load_mnist(dir / "nope", dir / "nope2"); }), ErrorKind::io);
}

TEST(Cifar, SingleWhiteRow) {
  TempDir dir;
  write_bytes(dir / "b.bin", cifar_row(3, 255));
  const ImageSet s = load_cifar10(std::vector<std::filesystem::path>{dir / "b.bin"});
  ASSERT_EQ(s.data.shape(), (std::vector<std::size_t>{1, 32, 32, 3}));
  EXPECT_EQ(s.labels, std::vector<int>{3});
  for (const float v : s.data.values()) EXPECT_EQ(v, 1.0f);
}

TEST(Cifar, PlanarChannelsBecomeChannelLast) {
  TempDir dir;
  std::vector<std::uint8_t> row{1};
  for (int plane = 0; plane < 3; ++plane) {
    for (int p = 0; p < 1024; ++p) row.push_back(static_cast<std::uint8_t>(plane * 50 + p % 7));
  }
  write_bytes(dir / "b.bin", row);
  const ImageSet s = load_cifar10(std::vector<std::filesystem::path>{dir / "b.bin"});
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      for (std::size_t k = 0; k < 3; ++k) {
        const int expected = static_cast<int>(k) * 50 + static_cast<int>((i * 32 + j) % 7);
        EXPECT_EQ(std::lround(255.0 * s.data.at(0, i, j, k)), expected);
      }
    }
  }
}

TEST(Cifar, MultipleBatchesConcatenate) {
  TempDir dir;
  auto a = cifar_row(0, 10);
  const auto b = cifar_row(9, 20);
  a.insert(a.end(), b.begin(), b.end());
  write_bytes(dir / "a.bin", a);
  write_bytes(dir / "b.bin", cifar_row(5, 30));
  const ImageSet s = load_cifar10(std::vector<std::filesystem::path>{dir / "a.bin", dir / "b.bin"});
  EXPECT_EQ(s.labels, (std::vector<int>{0, 9, 5}));
  EXPECT_EQ(s.count(), 3u);
}

TEST(Cifar, SizeNotMultipleOfRowIsFormatError) {
  TempDir dir;
  write_bytes(dir / "b.bin", std::vector<std::uint8_t>(3072, 0));
  EXPECT_EQ(error_kind([&] { load_cifar10(std::vector<std::filesystem::path>{dir / "b.bin"}); }),
            ErrorKind::format);
}

TEST(Cifar, LabelOutOfRangeIsFormatError) {
  TempDir dir;
  write_bytes(dir / "b.bin", cifar_row(10, 0));
  EXPECT_EQ(error_kind([&] { load_cifar10(std::vector<std::filesystem::path>{dir / "b.bin"}); }),
            ErrorKind::format);
}

TEST(Stl10, ColumnMajorPlanesAndOneBasedLabels) {
  TempDir dir;
  const std::size_t side = 96, plane = side * side;
  std::vector<std::uint8_t> img(3 * plane);
  // Column-major planes: byte at (row i, col j) of channel k sits at k*plane + j*side + i.
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t j = 0; j < side; ++j) {
      for (std::size_t i = 0; i < side; ++i) img[k * plane + j * side + i] = static_cast<std::uint8_t>((i + 2 * j + 3 * k) % 256);
    }
  }
  write_bytes(dir / "x.bin", img);
  write_bytes(dir / "y.bin", {10});
  const ImageSet s = load_stl10(dir / "x.bin", dir / "y.bin");
  ASSERT_EQ(s.data.shape(), (std::vector<std::size_t>{1, 96, 96, 3}));
  EXPECT_EQ(s.labels, std::vector<int>{9});
  EXPECT_EQ(std::lround(255.0 * s.data.at(0, 5, 7, 2)), static_cast<long>((5 + 14 + 6) % 256));
  EXPECT_EQ(std::lround(255.0 * s.data.at(0, 90, 1, 0)), static_cast<long>((90 + 2) % 256));
}

TEST(TensorFile, ZerosRoundTrip) {
  TempDir dir;
  const Tensor t({2, 3});
  save_tensor(dir / "z.saak", t);
  EXPECT_EQ(load_tensor(dir / "z.saak"), t);
}

TEST(TensorFile, StageFeatureTensorRoundTripsBitExactly) {
  TempDir dir;
  const Tensor t = testing_support::random_tensor({10, 30, 30, 13}, 42, -3.0f, 3.0f);
  save_tensor(dir / "f.saak", t);
  const Tensor back = load_tensor(dir / "f.saak");
  ASSERT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * sizeof(float)), 0);
}

TEST(TensorFile, HeaderLayout) {
  const Tensor t({2, 1}, std::vector<float>{1.0f, -2.0f});
  const auto bytes = encode_tensor(t);
  ASSERT_EQ(bytes.size(), 4u + 2 + 1 + 1 + 2 * 4 + 2 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SAAK");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 1);  // float32
  EXPECT_EQ(bytes[7], 2);  // ndim
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[12], 1);
  float first;
  std::memcpy(&first, bytes.data() + 16, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(TensorFile, WrongMagicIsFormatError) {
  auto bytes = encode_tensor(Tensor({1}));
  bytes[0] = 'K';
  bytes[3] = 'S';
  EXPECT_EQ(error_kind([&] { decode_tensor(bytes, "x"); }), ErrorKind::format);
}

TEST(TensorFile, WrongVersionOrDtypeIsFormatError) {
  auto v = encode_tensor(Tensor({1}));
  v[4] = 2;
  EXPECT_EQ(error_kind([&] { decode_tensor(v, "x"); }), ErrorKind::format);
  auto d = encode_tensor(Tensor({1}));
  d[6] = 7;
  EXPECT_EQ(error_kind([&] { decode_tensor(d, "x"); }), ErrorKind::format);
}

TEST(TensorFile, TruncatedPayloadIsIoError) {
  auto bytes = encode_tensor(Tensor({4}));
  bytes.pop_back();
  EXPECT_EQ(error_kind([&] { decode_tensor(bytes, "x"); }), ErrorKind::io);
}

TEST(Heatmap, MinMaxScalingRoundsHalfUp) {
  TempDir dir;
  const Tensor t({2, 2}, std::vector<float>{0.0f, 1.0f, 0.5f, 0.25f});
  export_heatmap(t, dir / "h.png");
  const Tensor back = read_gray_png(dir / "h.png");
  ASSERT_EQ(back.shape(), (std::vector<std::size_t>{2, 2}));
  const std::vector<float> expected{0, 255, 128, 64};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(back[i], expected[i]);
}

TEST(Heatmap, MatchesIndependentScaling) {
  TempDir dir;
  const Tensor t = testing_support::random_tensor({7, 5}, 3, -2.0f, 5.0f);
  export_heatmap(t, dir / "h.png");
  const Tensor back = read_gray_png(dir / "h.png");
  const auto expected = oracle::heatmap_bytes(std::vector<double>(t.values().begin(), t.values().end()));
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(back[i], expected[i]) << i;
}

TEST(Heatmap, ConstantIsAllZero) {
  TempDir dir;
  export_heatmap(Tensor({3, 4}, 0.7f), dir / "h.png");
  const Tensor back = read_gray_png(dir / "h.png");
  for (const float v : back.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Heatmap, NanIsRejected) {
  TempDir dir;
  Tensor t({2, 2});
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_TRUE(error_kind([&] { export_heatmap(t, dir / "h.png"); }).has_value());
}

TEST(Heatmap, UnwritablePathIsIoError) {
  TempDir dir;
  write_bytes(dir / "file", {1});
  EXPECT_EQ(error_kind([&] { export_heatmap(Tensor({2, 2}), dir / "file" / "h.png"); }), ErrorKind::io);
}

TEST(ImageSet, SubsetCopiesInOrder) {
  ImageSet s;
  s.class_count = 3;
  s.data = testing_support::random_tensor({4, 2, 2, 1}, 5);
  s.labels = {0, 1, 2, 1};
  const std::vector<std::size_t> idx{3, 0};
  const ImageSet sub = s.subset(idx);
  EXPECT_EQ(sub.labels, (std::vector<int>{1, 0}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(sub.data[i], s.data[12 + i]);
    EXPECT_EQ(sub.data[4 + i], s.data[i]);
  }
}
