#pragma once

// Cross-entropy feature selection. For every location (i, j, k) the N
// training responses are histogrammed into B equal-width bins, each bin
// votes for its majority class, p_c is the share of bins won by class c and
//   H = sum_n log(1 / p_{label(n)}).
// Low H means the location separates classes well.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/kv_text.hpp"
#include "saak/parallel.hpp"
#include "saak/tensor.hpp"

namespace saak {

inline constexpr double kEntropyEpsilon = 1e-8;

struct EntropyMap {
  std::size_t height = 0, width = 0, channels = 0;
  std::size_t bins = 10;
  int class_count = 0;
  std::size_t sample_count = 0;
  std::vector<double> values;  // height x width x channels, row-major

  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return values[(i * width + j) * channels + k];
  }
  std::size_t positions() const { return height * width; }

  Tensor to_tensor() const {
    Tensor t({height, width, channels});
    std::transform(values.begin(), values.end(), t.data(),
                   [](double v) { return static_cast<float>(v); });
    return t;
  }
};

/// Entropy of one location given its N responses.
inline double location_entropy(std::span<const float> responses, std::span<const int> labels,
                               int class_count, std::size_t bins, std::vector<int>& counts) {
  const std::size_t n = responses.size();
  const auto [lo_it, hi_it] = std::minmax_element(responses.begin(), responses.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) return static_cast<double>(n) * std::log(1.0 / kEntropyEpsilon);

  // Bin b holds edge(b) <= v < edge(b+1); the last bin also takes v = max.
  // The floor is only a first guess, corrected against the edges themselves.
  counts.assign(bins * static_cast<std::size_t>(class_count), 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  const auto edge = [&](std::size_t b) { return lo + static_cast<double>(b) * width; };
  for (std::size_t s = 0; s < n; ++s) {
    const double v = responses[s];
    auto b = std::min(bins - 1, static_cast<std::size_t>(std::floor((v - lo) / width)));
    while (b > 0 && v < edge(b)) --b;
    while (b + 1 < bins && v >= edge(b + 1)) ++b;
    ++counts[b * static_cast<std::size_t>(class_count) + static_cast<std::size_t>(labels[s])];
  }
  std::vector<int> bins_won(static_cast<std::size_t>(class_count), 0);
  for (std::size_t b = 0; b < bins; ++b) {
    const int* row = counts.data() + b * static_cast<std::size_t>(class_count);
    int best = 0;
    for (int c = 1; c < class_count; ++c) {
      if (row[c] > row[best]) best = c;
    }
    if (row[best] > 0) ++bins_won[static_cast<std::size_t>(best)];
  }
  std::vector<double> cost(static_cast<std::size_t>(class_count));
  for (int c = 0; c < class_count; ++c) {
    const double p = static_cast<double>(bins_won[static_cast<std::size_t>(c)]) / static_cast<double>(bins);
    cost[static_cast<std::size_t>(c)] = std::log(1.0 / std::max(p, kEntropyEpsilon));
  }
  double h = 0.0;
  for (std::size_t s = 0; s < n; ++s) h += cost[static_cast<std::size_t>(labels[s])];
  return h;
}

/// Cross-entropy at every location of a feature tensor.
inline EntropyMap entropy_map(const FeatureTensor& features, std::span<const int> labels,
                              int class_count, std::size_t bins = 10) {
  require_rank(features.values, 4, "entropy_map");
  if (class_count < 2) throw DomainError("entropy_map needs at least 2 classes");
  if (bins < 1) throw DomainError("entropy_map needs at least 1 bin");
  const std::size_t n = features.count();
  if (labels.size() != n) {
    throw DomainError("entropy_map: " + std::to_string(n) + " samples but " +
                      std::to_string(labels.size()) + " labels");
  }
  if (n < static_cast<std::size_t>(class_count)) {
    throw DomainError("entropy_map needs N >= C samples");
  }
  for (const int label : labels) {
    if (label < 0 || label >= class_count) {
      throw DomainError("label " + std::to_string(label) + " outside [0, " +
                        std::to_string(class_count) + ")");
    }
  }
  EntropyMap map;
  map.height = features.height();
  map.width = features.width();
  map.channels = features.channels();
  map.bins = bins;
  map.class_count = class_count;
  map.sample_count = n;
  const std::size_t locations = map.height * map.width * map.channels;
  map.values.resize(locations);
  const auto all = features.values.values();
  parallel_for(locations, [&](std::size_t loc) {
    thread_local std::vector<float> responses;
    thread_local std::vector<int> counts;
    responses.resize(n);
    for (std::size_t s = 0; s < n; ++s) responses[s] = all[s * locations + loc];
    map.values[loc] = location_entropy(responses, labels, class_count, bins, counts);
  });
  return map;
}

inline EntropyMap entropy_map(const FeatureTensor& features, const std::vector<int>& labels,
                              int class_count, std::size_t bins = 10) {
  return entropy_map(features, std::span<const int>(labels), class_count, bins);
}

/// Rebuilds a map from its persisted H x W x K float tensor.
inline EntropyMap entropy_from_tensor(const Tensor& t, std::size_t bins, int class_count,
                                      std::size_t sample_count) {
  require_rank(t, 3, "entropy map");
  EntropyMap map;
  map.height = t.dim(0);
  map.width = t.dim(1);
  map.channels = t.dim(2);
  map.bins = bins;
  map.class_count = class_count;
  map.sample_count = sample_count;
  map.values.assign(t.values().begin(), t.values().end());
  return map;
}

/// Retained channels and, per retained channel, retained positions
/// (flattened i * width + j, ascending).
struct SelectionMask {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<std::size_t> spectral_keep;
  std::vector<std::vector<std::size_t>> spatial_keep;

  std::size_t feature_count() const {
    std::size_t total = 0;
    for (const auto& p : spatial_keep) total += p.size();
    return total;
  }

  void validate() const {
    if (spatial_keep.size() != spectral_keep.size()) {
      throw DomainError("mask has " + std::to_string(spectral_keep.size()) + " channels but " +
                        std::to_string(spatial_keep.size()) + " position lists");
    }
    for (std::size_t c = 0; c < spectral_keep.size(); ++c) {
      if (spectral_keep[c] >= channels || (c > 0 && spectral_keep[c] <= spectral_keep[c - 1])) {
        throw DomainError("mask channel list must be strictly increasing and below " +
                          std::to_string(channels));
      }
      const auto& pos = spatial_keep[c];
      for (std::size_t i = 0; i < pos.size(); ++i) {
        if (pos[i] >= height * width || (i > 0 && pos[i] <= pos[i - 1])) {
          throw DomainError("mask positions of channel " + std::to_string(spectral_keep[c]) +
                            " must be strictly increasing and inside the grid");
        }
      }
    }
  }

  static SelectionMask keep_all(std::size_t height, std::size_t width, std::size_t channels) {
    SelectionMask m{height, width, channels, {}, {}};
    m.spectral_keep.resize(channels);
    std::iota(m.spectral_keep.begin(), m.spectral_keep.end(), std::size_t{0});
    std::vector<std::size_t> all(height * width);
    std::iota(all.begin(), all.end(), std::size_t{0});
    m.spatial_keep.assign(channels, all);
    return m;
  }
};

/// Count for a fraction of `total`: round-half-up, at least 1.
inline std::size_t budget_count(double fraction, std::size_t total) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("selection fraction must lie in (0, 1]");
  }
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(total) + 0.5));
  return std::clamp<std::size_t>(n, 1, total);
}

/// Mean entropy of each channel over the spatial grid.
inline std::vector<double> channel_mean_entropy(const EntropyMap& e) {
  std::vector<double> mean(e.channels, 0.0);
  for (std::size_t p = 0; p < e.positions(); ++p) {
    for (std::size_t k = 0; k < e.channels; ++k) mean[k] += e.values[p * e.channels + k];
  }
  for (double& m : mean) m /= static_cast<double>(e.positions());
  return mean;
}

/// The `keep` channels with the lowest spatially averaged entropy (ties to
/// the lower index), returned in ascending index order.
inline std::vector<std::size_t> rank_spectral(const EntropyMap& e, std::size_t keep) {
  if (keep < 1 || keep > e.channels) {
    throw ConfigError("spectral keep " + std::to_string(keep) + " outside [1, " +
                      std::to_string(e.channels) + "]");
  }
  const auto mean = channel_mean_entropy(e);
  std::vector<std::size_t> order(e.channels);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mean[a] < mean[b]; });
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

/// For each listed channel, the `keep` lowest-entropy positions (ties in
/// row-major order), each list ascending.
inline std::vector<std::vector<std::size_t>> rank_spatial(const EntropyMap& e,
                                                          std::span<const std::size_t> channels,
                                                          std::size_t keep) {
  if (keep > e.positions()) {
    throw ConfigError("spatial keep " + std::to_string(keep) + " exceeds grid of " +
                      std::to_string(e.positions()));
  }
  std::vector<std::vector<std::size_t>> out;
  out.reserve(channels.size());
  for (const std::size_t k : channels) {
    if (k >= e.channels) throw ConfigError("channel " + std::to_string(k) + " outside entropy map");
    std::vector<std::size_t> order(e.positions());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return e.values[a * e.channels + k] < e.values[b * e.channels + k];
    });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    out.push_back(std::move(order));
  }
  return out;
}

struct SelectionBudget {
  double spectral_fraction = 0.75;
  double spatial_fraction = 0.5;
};

/// Spectral ranking followed by per-channel spatial ranking.
inline SelectionMask select_features(const EntropyMap& e, const SelectionBudget& budget) {
  SelectionMask m{e.height, e.width, e.channels, {}, {}};
  m.spectral_keep = rank_spectral(e, budget_count(budget.spectral_fraction, e.channels));
  m.spatial_keep =
      rank_spatial(e, m.spectral_keep, budget_count(budget.spatial_fraction, e.positions()));
  return m;
}

inline void check_mask_fits(const FeatureTensor& t, const SelectionMask& mask) {
  require_rank(t.values, 4, "apply_selection");
  mask.validate();
  if (t.height() != mask.height || t.width() != mask.width || t.channels() != mask.channels) {
    throw DomainError("mask for " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                      "x" + std::to_string(mask.channels) + " applied to " +
                      shape_string(t.values.shape()));
  }
}

/// Same shape as the input with every unselected entry set to zero.
inline FeatureTensor apply_selection_zeroed(const FeatureTensor& t, const SelectionMask& mask) {
  check_mask_fits(t, mask);
  FeatureTensor out{Tensor(t.values.shape()), t.stage};
  const std::size_t k = t.channels();
  for (std::size_t n = 0; n < t.count(); ++n) {
    const auto src = t.image(n);
    float* dst = out.values.data() + n * src.size();
    for (std::size_t c = 0; c < mask.spectral_keep.size(); ++c) {
      const std::size_t ch = mask.spectral_keep[c];
      for (const std::size_t p : mask.spatial_keep[c]) dst[p * k + ch] = src[p * k + ch];
    }
  }
  return out;
}

/// Retained values of each image concatenated channel by channel (ascending),
/// positions row-major within a channel: N x feature_count().
inline Tensor apply_selection_packed(const FeatureTensor& t, const SelectionMask& mask) {
  check_mask_fits(t, mask);
  const std::size_t f = mask.feature_count();
  const std::size_t k = t.channels();
  Tensor out({t.count(), f});
  for (std::size_t n = 0; n < t.count(); ++n) {
    const auto src = t.image(n);
    float* dst = out.data() + n * f;
    for (std::size_t c = 0; c < mask.spectral_keep.size(); ++c) {
      const std::size_t ch = mask.spectral_keep[c];
      for (const std::size_t p : mask.spatial_keep[c]) *dst++ = src[p * k + ch];
    }
  }
  return out;
}

enum class SelectionMode { zeroed_tensor, packed_vector };

/// Zeroed mode returns an N x D1 x D2 x K tensor, packed mode N x F.
inline Tensor apply_selection(const FeatureTensor& t, const SelectionMask& mask, SelectionMode mode) {
  return mode == SelectionMode::zeroed_tensor ? apply_selection_zeroed(t, mask).values
                                              : apply_selection_packed(t, mask);
}

inline void save_mask(const std::filesystem::path& path, const SelectionMask& mask) {
  KvDocument doc("saak-mask", 1);
  doc.set("height", mask.height);
  doc.set("width", mask.width);
  doc.set("channels", mask.channels);
  doc.set_list("spectral_keep", mask.spectral_keep);
  for (std::size_t c = 0; c < mask.spectral_keep.size(); ++c) {
    doc.set_list("positions." + std::to_string(mask.spectral_keep[c]), mask.spatial_keep[c]);
  }
  doc.write(path);
}

inline SelectionMask load_mask(const std::filesystem::path& path) {
  const KvDocument doc = KvDocument::read(path);
  return with_context(path.string(), [&] {
    doc.expect_format("saak-mask", 1);
    SelectionMask m;
    m.height = doc.number<std::size_t>("height");
    m.width = doc.number<std::size_t>("width");
    m.channels = doc.number<std::size_t>("channels");
    m.spectral_keep = doc.list<std::size_t>("spectral_keep");
    for (const std::size_t ch : m.spectral_keep) {
      m.spatial_keep.push_back(doc.list<std::size_t>("positions." + std::to_string(ch)));
    }
    m.validate();
    return m;
  });
}

}  // namespace saak
