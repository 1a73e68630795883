#pragma once

// End-to-end experiments: fit the cascade on training images, rank and
// select features, train a classifier, then evaluate on the test split.
// Every fitted artifact is written before the test split is opened.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "saak/classifier.hpp"
#include "saak/dataset_io.hpp"
#include "saak/error.hpp"
#include "saak/feature_select.hpp"
#include "saak/kernel_fit.hpp"
#include "saak/kv_text.hpp"
#include "saak/random.hpp"
#include "saak/tensor.hpp"
#include "saak/transform.hpp"

namespace saak {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- logging

inline bool& verbose_logging() {
  static bool on = false;
  return on;
}

inline void log_line(const std::string& message) {
  if (verbose_logging()) std::cerr << "[saak] " << message << '\n';
}

/// Wall-clock per phase, kept out of the reports so they stay reproducible.
class PhaseTimer {
 public:
  template <typename Fn>
  decltype(auto) run(const std::string& phase, Fn&& fn) {
    log_line(phase + " ...");
    const auto start = std::chrono::steady_clock::now();
    struct Record {
      PhaseTimer* self;
      std::string phase;
      std::chrono::steady_clock::time_point start;
      ~Record() {
        const std::chrono::duration<double> d = std::chrono::steady_clock::now() - start;
        self->entries_.emplace_back(phase, d.count());
        log_line(phase + " done in " + format_double(d.count()) + " s");
      }
    } record{this, phase, start};
    return fn();
  }

  const std::vector<std::pair<std::string, double>>& entries() const { return entries_; }

  double total() const {
    double t = 0.0;
    for (const auto& e : entries_) t += e.second;
    return t;
  }

  void write(const fs::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& [phase, seconds] : entries_) out << phase << " = " << format_double(seconds) << '\n';
    out << "total = " << format_double(total()) << '\n';
  }

 private:
  std::vector<std::pair<std::string, double>> entries_;
};

// ---------------------------------------------------------------- config

enum class StageScope { final_only, concat };

inline std::string to_string(StageScope s) { return s == StageScope::final_only ? "final" : "concat"; }

inline StageScope parse_stage_scope(std::string_view s) {
  if (s == "final" || s == "final-only") return StageScope::final_only;
  if (s == "concat") return StageScope::concat;
  throw ConfigError("unknown stage_scope '" + std::string(s) + "' (expected final or concat)");
}

struct DatasetSource {
  std::string name = "mnist";  // mnist | cifar10 | stl10
  fs::path dir;                // empty: $SAAK_DATA_DIR/<name>
  fs::path train_images, train_labels, test_images, test_labels;
  std::vector<fs::path> train_batches, test_batches;  // cifar10

  fs::path root() const {
    if (!dir.empty()) return dir;
    const char* env = std::getenv("SAAK_DATA_DIR");
    if (env == nullptr || *env == '\0') {
      throw ConfigError("dataset '" + name + "': no data_dir given and SAAK_DATA_DIR is unset");
    }
    return fs::path(env) / name;
  }
};

struct ExperimentConfig {
  DatasetSource data;
  std::size_t train_size = 0;  // 0: the whole split
  std::size_t test_size = 0;
  std::uint64_t seed = 1;
  std::vector<StageConfig> stages;
  std::size_t bins = 10;
  SelectionBudget budget;
  StageScope scope = StageScope::final_only;
  ClassifierKind classifier = ClassifierKind::mlp;
  TrainParams train = default_mlp_params();
  fs::path out_dir = "saak_run";

  void validate() const {
    if (data.name != "mnist" && data.name != "cifar10" && data.name != "stl10") {
      throw ConfigError("unknown dataset '" + data.name + "' (expected mnist, cifar10 or stl10)");
    }
    if (stages.empty()) throw ConfigError("at least one stage is required");
    for (std::size_t s = 0; s < stages.size(); ++s) {
      with_context("stage." + std::to_string(s + 1), [&] { stages[s].validate(); });
    }
    if (bins < 1) throw ConfigError("bins must be at least 1");
    for (const double f : {budget.spectral_fraction, budget.spatial_fraction}) {
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("selection fractions must lie in (0, 1]");
    }
    if (classifier == ClassifierKind::mlp && train.hidden == 0) {
      throw ConfigError("MLP hidden width must be positive");
    }
    train.validate();
  }

  /// Cascade must fit the image size; checked before any compute.
  std::vector<StageShape> check_dimensions(std::size_t height, std::size_t width) const {
    return plan_stage_shapes(height, width, stages);
  }

  static ExperimentConfig from_document(const KvDocument& doc) {
    return with_context("config", [&] {
      doc.expect_format("saak-experiment", 1);
      ExperimentConfig c;
      const auto path_or = [&](std::string_view key) {
        return fs::path(doc.string_or(key, ""));
      };
      c.data.name = doc.string_or("dataset", "mnist");
      c.data.dir = path_or("data_dir");
      c.data.train_images = path_or("train_images");
      c.data.train_labels = path_or("train_labels");
      c.data.test_images = path_or("test_images");
      c.data.test_labels = path_or("test_labels");
      const auto paths = [&](std::string_view key) {
        std::vector<fs::path> out;
        if (const auto v = doc.get(key)) {
          for (const auto& part : split(*v, ',')) {
            if (!trim(part).empty()) out.emplace_back(trim(part));
          }
        }
        return out;
      };
      c.data.train_batches = paths("train_batches");
      c.data.test_batches = paths("test_batches");
      try {
        c.train_size = doc.number_or<std::size_t>("train_size", 0);
        c.test_size = doc.number_or<std::size_t>("test_size", 0);
        c.seed = doc.number_or<std::uint64_t>("seed", 1);
        const auto count = doc.number<std::size_t>("stages");
        for (std::size_t s = 1; s <= count; ++s) {
          const std::string key = "stage." + std::to_string(s);
          c.stages.push_back(with_context(key, [&] { return parse_stage_config(doc.require(key)); }));
        }
        c.bins = doc.number_or<std::size_t>("bins", 10);
        c.budget.spectral_fraction = doc.number_or("spectral_fraction", c.budget.spectral_fraction);
        c.budget.spatial_fraction = doc.number_or("spatial_fraction", c.budget.spatial_fraction);
        c.scope = parse_stage_scope(doc.string_or("stage_scope", "final"));
        c.classifier = parse_classifier_kind(doc.string_or("classifier", "mlp"));
        c.train = c.classifier == ClassifierKind::mlp ? default_mlp_params() : default_logistic_params();
        c.train.hidden = doc.number_or("hidden", c.train.hidden);
        c.train.learning_rate = doc.number_or("learning_rate", c.train.learning_rate);
        c.train.epochs = doc.number_or("epochs", c.train.epochs);
        c.train.batch = doc.number_or("batch", c.train.batch);
        c.train.l2 = doc.number_or("l2", c.train.l2);
        c.train.momentum = doc.number_or("momentum", c.train.momentum);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::format) throw;
        throw ConfigError(e.what());
      }
      c.out_dir = doc.string_or("out_dir", c.out_dir.string());
      c.train.seed = c.seed;
      c.validate();
      return c;
    });
  }

  static ExperimentConfig read(const fs::path& path) {
    const KvDocument doc = KvDocument::read(path);
    try {
      return from_document(doc);
    } catch (const Error& e) {
      rethrow_with_context(e, path.string());
    }
  }

  KvDocument to_document() const {
    KvDocument doc("saak-experiment", 1);
    doc.set("dataset", data.name);
    if (!data.dir.empty()) doc.set("data_dir", data.dir.string());
    const auto put = [&](const char* key, const fs::path& p) {
      if (!p.empty()) doc.set(key, p.string());
    };
    put("train_images", data.train_images);
    put("train_labels", data.train_labels);
    put("test_images", data.test_images);
    put("test_labels", data.test_labels);
    const auto join = [](const std::vector<fs::path>& ps) {
      std::string s;
      for (const auto& p : ps) s += (s.empty() ? "" : ",") + p.string();
      return s;
    };
    if (!data.train_batches.empty()) doc.set("train_batches", join(data.train_batches));
    if (!data.test_batches.empty()) doc.set("test_batches", join(data.test_batches));
    doc.set("train_size", train_size);
    doc.set("test_size", test_size);
    doc.set("seed", seed);
    doc.set("stages", stages.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
      doc.set("stage." + std::to_string(s + 1), to_string(stages[s]));
    }
    doc.set("bins", bins);
    doc.set("spectral_fraction", budget.spectral_fraction);
    doc.set("spatial_fraction", budget.spatial_fraction);
    doc.set("stage_scope", to_string(scope));
    doc.set("classifier", to_string(classifier));
    if (classifier == ClassifierKind::mlp) doc.set("hidden", train.hidden);
    doc.set("learning_rate", train.learning_rate);
    doc.set("epochs", train.epochs);
    doc.set("batch", train.batch);
    doc.set("l2", train.l2);
    doc.set("momentum", train.momentum);
    doc.set("out_dir", out_dir.string());
    return doc;
  }
};

// ---------------------------------------------------------------- data

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

/// Reads the whole split named by the config.
inline ImageSet load_split(const DatasetSource& d, Split split) {
  const bool train = split == Split::train;
  const auto pick = [&](const fs::path& given, const char* fallback) {
    return given.empty() ? d.root() / fallback : given;
  };
  return with_context(d.name + " " + to_string(split) + " split", [&] {
    if (d.name == "mnist") {
      return train ? load_mnist(pick(d.train_images, "train-images-idx3-ubyte"),
                                pick(d.train_labels, "train-labels-idx1-ubyte"))
                   : load_mnist(pick(d.test_images, "t10k-images-idx3-ubyte"),
                                pick(d.test_labels, "t10k-labels-idx1-ubyte"));
    }
    if (d.name == "cifar10") {
      std::vector<fs::path> batches = train ? d.train_batches : d.test_batches;
      if (batches.empty()) {
        if (train) {
          for (int b = 1; b <= 5; ++b) batches.push_back(d.root() / ("data_batch_" + std::to_string(b) + ".bin"));
        } else {
          batches.push_back(d.root() / "test_batch.bin");
        }
      }
      return load_cifar10(batches);
    }
    if (d.name == "stl10") {
      return train ? load_stl10(pick(d.train_images, "train_X.bin"), pick(d.train_labels, "train_y.bin"))
                   : load_stl10(pick(d.test_images, "test_X.bin"), pick(d.test_labels, "test_y.bin"));
    }
    throw ConfigError("unknown dataset '" + d.name + "'");
  });
}

/// Class-balanced subset: quotas differ by at most one between classes that
/// have enough samples, members of a class are drawn by a seeded shuffle,
/// and the result is sorted by index. size 0 or N returns everything.
inline std::vector<std::size_t> stratified_indices(std::span<const int> labels, int class_count,
                                                   std::size_t size, std::uint64_t seed) {
  const std::size_t n = labels.size();
  if (size > n) {
    throw ConfigError("requested " + std::to_string(size) + " samples but only " +
                      std::to_string(n) + " are available");
  }
  std::vector<std::size_t> out;
  if (size == 0 || size == n) {
    out.resize(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  const auto classes = static_cast<std::size_t>(class_count);
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < n; ++i) members.at(static_cast<std::size_t>(labels[i])).push_back(i);

  std::vector<std::size_t> quota(classes, 0);
  std::size_t remaining = size;
  while (remaining > 0) {
    std::vector<std::size_t> open;
    for (std::size_t c = 0; c < classes; ++c) {
      if (quota[c] < members[c].size()) open.push_back(c);
    }
    const std::size_t share = remaining / open.size();
    if (share == 0) {
      for (std::size_t i = 0; i < remaining; ++i) ++quota[open[i]];
      break;
    }
    for (const std::size_t c : open) {
      const std::size_t give = std::min(share, members[c].size() - quota[c]);
      quota[c] += give;
      remaining -= give;
    }
  }
  for (std::size_t c = 0; c < classes; ++c) {
    Rng rng(splitmix64(seed + c));
    rng.shuffle(std::span<std::size_t>(members[c]));
    out.insert(out.end(), members[c].begin(), members[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Loads a split and draws the configured stratified subset.
inline ImageSet load_sampled(const ExperimentConfig& cfg, Split split) {
  ImageSet full = load_split(cfg.data, split);
  const std::size_t size = split == Split::train ? cfg.train_size : cfg.test_size;
  const Stream stream = split == Split::train ? Stream::train_sampling : Stream::test_sampling;
  const auto idx = with_context(to_string(split) + " sampling", [&] {
    return stratified_indices(full.labels, full.class_count, size, derive_seed(cfg.seed, stream));
  });
  if (idx.size() == full.count()) return full;
  return full.subset(idx);
}

/// Adds seeded uniform noise in [-amplitude, amplitude] to every value.
inline Tensor add_uniform_noise(const Tensor& images, double amplitude, std::uint64_t seed) {
  Tensor out = images;
  Rng rng(derive_seed(seed, Stream::noise));
  for (float& v : out.values()) v += static_cast<float>(rng.uniform(-amplitude, amplitude));
  return out;
}

// ---------------------------------------------------------------- artifacts

struct ArtifactLayout {
  fs::path root;

  fs::path kernels(std::size_t stage) const { return root / "kernels" / ("stage_" + std::to_string(stage) + ".saak"); }
  fs::path mask(std::size_t stage) const { return root / "masks" / ("stage_" + std::to_string(stage) + ".mask"); }
  fs::path entropy(std::size_t stage) const { return root / "entropy" / ("stage_" + std::to_string(stage) + ".saak"); }
  fs::path model() const { return root / "model.saak"; }
  fs::path training() const { return root / "training.kv"; }
  fs::path report_text() const { return root / "report.txt"; }
  fs::path report_kv() const { return root / "report.kv"; }
  fs::path timings() const { return root / "timings.txt"; }
  fs::path test_images() const { return root / "test_images.saak"; }
  fs::path test_labels() const { return root / "test_labels.saak"; }
};

inline void save_cascade(const ArtifactLayout& a, const SaakCascade& cascade) {
  for (std::size_t s = 0; s < cascade.size(); ++s) save_kernels(a.kernels(s + 1), cascade[s], static_cast<int>(s + 1));
}

inline SaakCascade load_cascade(const ArtifactLayout& a, std::size_t stages) {
  SaakCascade cascade;
  for (std::size_t s = 1; s <= stages; ++s) cascade.push_back(load_kernels(a.kernels(s)));
  for (std::size_t s = 1; s < cascade.size(); ++s) {
    if (cascade[s].input_channels != cascade[s - 1].output_channels()) {
      throw ConsistencyError("kernels of stage " + std::to_string(s + 1) + " expect " +
                             std::to_string(cascade[s].input_channels) + " channels, stage " +
                             std::to_string(s) + " produces " +
                             std::to_string(cascade[s - 1].output_channels()));
    }
  }
  return cascade;
}

inline void save_entropy(const fs::path& path, const EntropyMap& e, int stage) {
  save_tensor(path, e.to_tensor());
  KvDocument meta("saak-entropy", 1);
  meta.set("stage", stage);
  meta.set("bins", e.bins);
  meta.set("classes", e.class_count);
  meta.set("samples", e.sample_count);
  meta.write(sidecar_path(path));
}

inline EntropyMap load_entropy(const fs::path& path) {
  const KvDocument meta = KvDocument::read(sidecar_path(path));
  return with_context(path.string(), [&] {
    meta.expect_format("saak-entropy", 1);
    return entropy_from_tensor(load_tensor(path), meta.number<std::size_t>("bins"),
                               meta.number<int>("classes"), meta.number<std::size_t>("samples"));
  });
}

/// Labels as a rank-1 float tensor (exact for small integers).
inline Tensor labels_to_tensor(std::span<const int> labels) {
  Tensor t({labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<float>(labels[i]);
  return t;
}

inline std::vector<int> labels_from_tensor(const Tensor& t) {
  require_rank(t, 1, "labels");
  std::vector<int> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<int>(t[i]);
  return out;
}

/// FNV-1a over the bytes of the fitted artifacts, in a fixed file order.
inline std::string artifact_fingerprint(const ArtifactLayout& a, std::size_t stages) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](const fs::path& p) {
    for (const std::uint8_t b : detail::read_file(p)) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  };
  for (std::size_t s = 1; s <= stages; ++s) {
    mix(a.kernels(s));
    mix(sidecar_path(a.kernels(s)));
    mix(a.entropy(s));
    mix(a.mask(s));
  }
  mix(a.model());
  mix(StandardClassifier::sidecar_for(a.model()));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------- phases

/// Entropy maps are ranked as persisted (float), so phase-by-phase CLI runs
/// and in-memory runs select identically.
inline EntropyMap stage_entropy(const FeatureTensor& features, std::span<const int> labels,
                                int class_count, std::size_t bins) {
  const EntropyMap exact = entropy_map(features, labels, class_count, bins);
  return entropy_from_tensor(exact.to_tensor(), bins, class_count, exact.sample_count);
}

/// Packed classifier input: the final stage only, or every stage appended.
inline RowMatrix<float> classifier_features(const std::vector<FeatureTensor>& outputs,
                                            const std::vector<SelectionMask>& masks,
                                            StageScope scope) {
  const std::size_t first = scope == StageScope::final_only ? outputs.size() - 1 : 0;
  std::vector<Tensor> parts;
  std::size_t width = 0;
  for (std::size_t s = first; s < outputs.size(); ++s) {
    parts.push_back(with_context("stage " + std::to_string(s + 1) + " selection",
                                 [&] { return apply_selection_packed(outputs[s], masks[s]); }));
    width += parts.back().dim(1);
  }
  const std::size_t n = outputs.front().count();
  RowMatrix<float> x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(width));
  Eigen::Index col = 0;
  for (const Tensor& p : parts) {
    const auto f = static_cast<Eigen::Index>(p.dim(1));
    x.middleCols(col, f) = Eigen::Map<const RowMatrix<float>>(p.data(), static_cast<Eigen::Index>(n), f);
    col += f;
  }
  return x;
}

inline std::vector<FeatureTensor> transform_images(const ImageSet& images, const SaakCascade& cascade) {
  return forward_cascade(images, cascade);
}

struct StageSummary {
  std::size_t in_height = 0, in_width = 0, in_channels = 0;
  std::size_t grid_height = 0, grid_width = 0;
  std::size_t out_height = 0, out_width = 0;
  std::size_t kernels = 0, out_channels = 0;
  std::size_t patch_count = 0;
  double energy_kept = 0.0;
  std::size_t selected_channels = 0, selected_features = 0;
};

struct ExperimentReport {
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t train_count = 0, test_count = 0;
  int class_count = 0;
  std::vector<StageSummary> stages;
  std::string scope;
  std::size_t feature_count = 0;
  std::string classifier;
  double final_loss = 0.0;
  double train_accuracy = 0.0, test_accuracy = 0.0;
  std::string fingerprint;

  KvDocument to_document() const {
    KvDocument doc("saak-report", 1);
    doc.set("dataset", dataset);
    doc.set("seed", seed);
    doc.set("train_count", train_count);
    doc.set("test_count", test_count);
    doc.set("classes", class_count);
    doc.set("stages", stages.size());
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      const std::string p = "stage." + std::to_string(s + 1) + ".";
      doc.set(p + "input", std::to_string(st.in_height) + "x" + std::to_string(st.in_width) + "x" + std::to_string(st.in_channels));
      doc.set(p + "grid", std::to_string(st.grid_height) + "x" + std::to_string(st.grid_width));
      doc.set(p + "output", std::to_string(st.out_height) + "x" + std::to_string(st.out_width) + "x" + std::to_string(st.out_channels));
      doc.set(p + "kernels", st.kernels);
      doc.set(p + "patch_count", st.patch_count);
      doc.set(p + "energy_kept", st.energy_kept);
      doc.set(p + "selected_channels", st.selected_channels);
      doc.set(p + "selected_features", st.selected_features);
    }
    doc.set("stage_scope", scope);
    doc.set("feature_count", feature_count);
    doc.set("classifier", classifier);
    doc.set("final_loss", final_loss);
    doc.set("train_accuracy", train_accuracy);
    doc.set("test_accuracy", test_accuracy);
    doc.set("artifact_fingerprint", fingerprint);
    return doc;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "dataset      " << dataset << " (" << class_count << " classes)\n";
    out << "samples      train " << train_count << ", test " << test_count << ", seed " << seed << "\n\n";
    out << "stage  input        grid     output       K     selected (channels / features)\n";
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      char line[200];
      std::snprintf(line, sizeof line, "%-6zu %-12s %-8s %-12s %-5zu %zu / %zu\n", s + 1,
                    (std::to_string(st.in_height) + "x" + std::to_string(st.in_width) + "x" + std::to_string(st.in_channels)).c_str(),
                    (std::to_string(st.grid_height) + "x" + std::to_string(st.grid_width)).c_str(),
                    (std::to_string(st.out_height) + "x" + std::to_string(st.out_width) + "x" + std::to_string(st.out_channels)).c_str(),
                    st.kernels, st.selected_channels, st.selected_features);
      out << line;
    }
    out << "\nclassifier   " << classifier << " on " << feature_count << " features (scope " << scope << ")\n";
    out << "final loss   " << format_double(final_loss) << "\n";
    out << "train acc    " << format_double(train_accuracy) << "\n";
    out << "test acc     " << format_double(test_accuracy) << "\n";
    out << "artifacts    " << fingerprint << "\n";
    return out.str();
  }

  void write(const ArtifactLayout& a) const {
    to_document().write(a.report_kv());
    std::ofstream out(a.report_text(), std::ios::trunc);
    if (!out) throw IoError("cannot write " + a.report_text().string());
    out << to_text();
  }
};

/// Fraction of the AC energy the retained kernels carry.
inline double energy_kept(const SaakKernelSet& k) {
  const double total = std::accumulate(k.eigenvalues.begin(), k.eigenvalues.end(), 0.0);
  if (total <= 0.0) return 1.0;
  const double kept = std::accumulate(k.eigenvalues.begin(),
                                      k.eigenvalues.begin() + static_cast<std::ptrdiff_t>(k.retained()), 0.0);
  return kept / total;
}

inline std::vector<StageSummary> summarize_stages(std::size_t height, std::size_t width,
                                                  std::size_t channels, const SaakCascade& cascade,
                                                  const std::vector<SelectionMask>& masks) {
  std::vector<StageConfig> configs;
  for (const auto& k : cascade) configs.push_back(k.config);
  const auto shapes = plan_stage_shapes(height, width, configs);
  std::vector<StageSummary> out;
  for (std::size_t s = 0; s < cascade.size(); ++s) {
    StageSummary st;
    st.in_height = shapes[s].in_height;
    st.in_width = shapes[s].in_width;
    st.in_channels = s == 0 ? channels : cascade[s - 1].output_channels();
    st.grid_height = shapes[s].grid_height;
    st.grid_width = shapes[s].grid_width;
    st.out_height = shapes[s].out_height;
    st.out_width = shapes[s].out_width;
    st.kernels = cascade[s].kernel_count();
    st.out_channels = cascade[s].output_channels();
    st.patch_count = cascade[s].patch_count;
    st.energy_kept = energy_kept(cascade[s]);
    if (s < masks.size()) {
      st.selected_channels = masks[s].spectral_keep.size();
      st.selected_features = masks[s].feature_count();
    }
    out.push_back(st);
  }
  return out;
}

/// Everything fitted from training data alone.
struct FittedPipeline {
  SaakCascade cascade;
  std::vector<EntropyMap> entropy;
  std::vector<SelectionMask> masks;
  std::unique_ptr<StandardClassifier> classifier;
  std::size_t train_count = 0;
  double train_accuracy = 0.0;
};

inline SaakCascade fit_kernels_phase(const ExperimentConfig& cfg, const ImageSet& train) {
  cfg.check_dimensions(train.height(), train.width());
  return fit_cascade(train, cfg.stages, [](std::size_t s, const SaakKernelSet& k) {
    log_line("stage " + std::to_string(s + 1) + ": kept " + std::to_string(k.kernel_count()) +
             " of " + std::to_string(k.input_dim) + " kernels");
  });
}

inline std::vector<EntropyMap> entropy_phase(const ExperimentConfig& cfg, const ImageSet& train,
                                             const std::vector<FeatureTensor>& outputs) {
  std::vector<EntropyMap> maps;
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    maps.push_back(with_context("stage " + std::to_string(s + 1) + " entropy", [&] {
      return stage_entropy(outputs[s], train.labels, train.class_count, cfg.bins);
    }));
  }
  return maps;
}

inline std::vector<SelectionMask> select_phase(const ExperimentConfig& cfg,
                                               const std::vector<EntropyMap>& maps) {
  std::vector<SelectionMask> masks;
  for (const auto& e : maps) masks.push_back(select_features(e, cfg.budget));
  return masks;
}

inline std::unique_ptr<StandardClassifier> train_phase(const ExperimentConfig& cfg,
                                                       const RowMatrix<float>& x,
                                                       const ImageSet& train) {
  auto c = std::make_unique<StandardClassifier>(cfg.classifier, cfg.train);
  with_context("classifier", [&] { c->fit(x, train.labels, train.class_count); });
  return c;
}

inline void write_training_summary(const ArtifactLayout& a, const FittedPipeline& f) {
  KvDocument doc("saak-training", 1);
  doc.set("train_count", f.train_count);
  doc.set("train_accuracy", f.train_accuracy);
  doc.set("final_loss", f.classifier->final_loss());
  doc.write(a.training());
}

inline void save_fitted(const ArtifactLayout& a, const FittedPipeline& f) {
  save_cascade(a, f.cascade);
  for (std::size_t s = 0; s < f.masks.size(); ++s) {
    save_entropy(a.entropy(s + 1), f.entropy[s], static_cast<int>(s + 1));
    save_mask(a.mask(s + 1), f.masks[s]);
  }
  f.classifier->save(a.model());
  write_training_summary(a, f);
}

/// fit -> transform -> entropy -> select -> train, on training images only.
inline FittedPipeline fit_pipeline(const ExperimentConfig& cfg, const ImageSet& train,
                                   PhaseTimer& timer) {
  FittedPipeline f;
  f.train_count = train.count();
  f.cascade = timer.run("fit-kernels", [&] { return fit_kernels_phase(cfg, train); });
  auto outputs = timer.run("transform-train", [&] { return transform_images(train, f.cascade); });
  f.entropy = timer.run("entropy", [&] { return entropy_phase(cfg, train, outputs); });
  f.masks = select_phase(cfg, f.entropy);
  const RowMatrix<float> x = classifier_features(outputs, f.masks, cfg.scope);
  outputs.clear();
  f.classifier = timer.run("train", [&] { return train_phase(cfg, x, train); });
  f.train_accuracy = f.classifier->evaluate(x, train.labels);
  return f;
}

inline FittedPipeline load_fitted(const ExperimentConfig& cfg, const ArtifactLayout& a) {
  FittedPipeline f;
  f.cascade = load_cascade(a, cfg.stages.size());
  for (std::size_t s = 1; s <= cfg.stages.size(); ++s) {
    f.entropy.push_back(load_entropy(a.entropy(s)));
    f.masks.push_back(load_mask(a.mask(s)));
  }
  f.classifier = std::make_unique<StandardClassifier>(StandardClassifier::load(a.model()));
  const KvDocument t = KvDocument::read(a.training());
  f.train_count = t.number<std::size_t>("train_count");
  f.train_accuracy = t.number<double>("train_accuracy");
  return f;
}

inline double evaluate_fitted(const FittedPipeline& f, const ExperimentConfig& cfg,
                              const ImageSet& test) {
  if (test.count() == 0) throw DomainError("evaluate: empty test set");
  const auto outputs = transform_images(test, f.cascade);
  return f.classifier->evaluate(classifier_features(outputs, f.masks, cfg.scope), test.labels);
}

inline ExperimentReport make_report(const ExperimentConfig& cfg, const FittedPipeline& f,
                                    const ImageSet& test, double test_accuracy,
                                    const std::string& fingerprint) {
  ExperimentReport r;
  r.dataset = cfg.data.name;
  r.seed = cfg.seed;
  r.train_count = f.train_count;
  r.test_count = test.count();
  r.class_count = test.class_count;
  r.stages = summarize_stages(test.height(), test.width(), test.channels(), f.cascade, f.masks);
  r.scope = to_string(cfg.scope);
  r.feature_count = f.classifier->features();
  r.classifier = to_string(cfg.classifier);
  r.final_loss = f.classifier->final_loss();
  r.train_accuracy = f.train_accuracy;
  r.test_accuracy = test_accuracy;
  r.fingerprint = fingerprint;
  return r;
}

/// Loads the test split, saves it next to the artifacts, evaluates and
/// writes the report. The fitted artifacts must not change in the process.
inline ExperimentReport evaluate_phase(const ExperimentConfig& cfg, const FittedPipeline& f,
                                       PhaseTimer& timer) {
  const ArtifactLayout a{cfg.out_dir};
  const std::string before = artifact_fingerprint(a, cfg.stages.size());
  const ImageSet test = timer.run("load-test", [&] { return load_sampled(cfg, Split::test); });
  save_tensor(a.test_images(), test.data);
  save_tensor(a.test_labels(), labels_to_tensor(test.labels));
  const double acc = timer.run("evaluate", [&] { return evaluate_fitted(f, cfg, test); });
  const std::string after = artifact_fingerprint(a, cfg.stages.size());
  if (before != after) {
    throw ConsistencyError("leakage guard: fitted artifacts changed while evaluating the test set");
  }
  ExperimentReport r = make_report(cfg, f, test, acc, after);
  r.write(a);
  return r;
}

/// The full classification experiment.
inline ExperimentReport run_classification(const ExperimentConfig& cfg) {
  cfg.validate();
  const ArtifactLayout a{cfg.out_dir};
  fs::create_directories(a.root);
  PhaseTimer timer;
  const ImageSet train = timer.run("load-train", [&] { return load_sampled(cfg, Split::train); });
  cfg.check_dimensions(train.height(), train.width());
  const FittedPipeline f = fit_pipeline(cfg, train, timer);
  timer.run("save-artifacts", [&] { save_fitted(a, f); });
  const ExperimentReport r = evaluate_phase(cfg, f, timer);
  timer.write(a.timings());
  return r;
}

// ---------------------------------------------------------------- stability

struct StabilityRow {
  std::size_t size = 0;
  std::vector<double> mean_cosine;  // per stage
  double final_mean = 0.0, final_variance = 0.0;
};

struct StabilityReport {
  std::size_t full_size = 0;
  std::vector<std::size_t> retained;  // AC kernels per stage of the full-set fit
  double full_final_mean = 0.0, full_final_variance = 0.0;
  std::vector<StabilityRow> rows;

  KvDocument to_document() const {
    KvDocument doc("saak-stability", 1);
    doc.set("full_size", full_size);
    doc.set_list("retained", retained);
    doc.set("full.final_mean", full_final_mean);
    doc.set("full.final_variance", full_final_variance);
    doc.set_list("sizes", [&] {
      std::vector<std::size_t> s;
      for (const auto& r : rows) s.push_back(r.size);
      return s;
    }());
    for (const auto& r : rows) {
      const std::string p = "size." + std::to_string(r.size) + ".";
      doc.set_list(p + "mean_cosine", r.mean_cosine);
      doc.set(p + "final_mean", r.final_mean);
      doc.set(p + "final_variance", r.final_variance);
    }
    return doc;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "mean |cos| of AC kernels against the " << full_size << "-image fit\n\n";
    out << "size    ";
    for (std::size_t s = 0; s < retained.size(); ++s) out << "stage " << s + 1 << "   ";
    out << "final mean      final variance\n";
    for (const auto& r : rows) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%-8zu", r.size);
      out << buf;
      for (const double c : r.mean_cosine) {
        std::snprintf(buf, sizeof buf, "%-10.6f", c);
        out << buf;
      }
      std::snprintf(buf, sizeof buf, "%-15.6e %.6e\n", r.final_mean, r.final_variance);
      out << buf;
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "full    final mean %.6e, variance %.6e\n", full_final_mean,
                  full_final_variance);
    out << '\n' << buf;
    return out.str();
  }
};

/// Mean and variance over all entries of a stage's AC kernels.
inline std::pair<double, double> kernel_entry_moments(const SaakKernelSet& k) {
  const auto v = k.ac_basis.values();
  if (v.empty()) return {0.0, 0.0};
  double sum = 0.0;
  for (const float x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double var = 0.0;
  for (const float x : v) var += (x - mean) * (x - mean);
  return {mean, var / static_cast<double>(v.size())};
}

/// Fits the cascade on the whole training sample and on stratified subsets.
/// Subset cascades keep exactly as many kernels per stage as the full fit so
/// that components can be compared one to one.
inline StabilityReport run_stability(const ExperimentConfig& cfg, std::vector<std::size_t> sizes) {
  cfg.validate();
  if (sizes.empty()) throw ConfigError("stability needs at least one subset size");
  const ArtifactLayout a{cfg.out_dir / "stability"};
  PhaseTimer timer;
  const ImageSet train = timer.run("load-train", [&] { return load_sampled(cfg, Split::train); });
  cfg.check_dimensions(train.height(), train.width());
  for (const std::size_t s : sizes) {
    if (s == 0 || s > train.count()) {
      throw ConfigError("subset size " + std::to_string(s) + " outside [1, " +
                        std::to_string(train.count()) + "]");
    }
  }
  const SaakCascade full = timer.run("fit-full", [&] { return fit_kernels_phase(cfg, train); });
  const ArtifactLayout full_dir{a.root / "full"};
  save_cascade(full_dir, full);

  StabilityReport report;
  report.full_size = train.count();
  for (const auto& k : full) report.retained.push_back(k.retained());
  std::tie(report.full_final_mean, report.full_final_variance) = kernel_entry_moments(full.back());

  std::vector<StageConfig> forced = cfg.stages;
  for (std::size_t s = 0; s < forced.size(); ++s) forced[s].truncation = Truncation::top_k(full[s].kernel_count());

  for (const std::size_t size : sizes) {
    const auto idx = stratified_indices(train.labels, train.class_count, size,
                                        derive_seed(cfg.seed, Stream::stability_sampling, size));
    const ImageSet subset = train.subset(idx);
    const SaakCascade part = timer.run("fit-" + std::to_string(size), [&] {
      return fit_cascade(subset, forced);
    });
    save_cascade(ArtifactLayout{a.root / ("size_" + std::to_string(size))}, part);
    StabilityRow row;
    row.size = size;
    for (std::size_t s = 0; s < full.size(); ++s) {
      row.mean_cosine.push_back(kernel_cosine_similarity(part[s], full[s]).mean);
    }
    std::tie(row.final_mean, row.final_variance) = kernel_entry_moments(part.back());
    log_line("subset " + std::to_string(size) + ": final stage mean |cos| " +
             format_double(row.mean_cosine.back()));
    report.rows.push_back(std::move(row));
  }
  report.to_document().write(a.root / "report.kv");
  {
    std::ofstream out(a.root / "report.txt", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (a.root / "report.txt").string());
    out << report.to_text();
  }
  timer.write(a.root / "timings.txt");
  return report;
}

// ---------------------------------------------------------------- adversarial

struct AdversarialReport {
  std::size_t count = 0;
  double clean_accuracy = 0.0, attacked_accuracy = 0.0;
  std::vector<RmseCurve> rmse, normalized;  // per stage

  KvDocument to_document() const {
    KvDocument doc("saak-adversarial", 1);
    doc.set("note", "kernels, masks and classifier reused from the clean run; nothing refit");
    doc.set("images", count);
    doc.set("clean_accuracy", clean_accuracy);
    doc.set("attacked_accuracy", attacked_accuracy);
    for (std::size_t s = 0; s < rmse.size(); ++s) {
      const std::string p = "stage." + std::to_string(s + 1) + ".";
      doc.set_list(p + "rmse", rmse[s].values);
      doc.set_list(p + "normalized_rmse", normalized[s].values);
    }
    return doc;
  }

  std::string to_text() const {
    std::ostringstream out;
    out << "attacked images were transformed with the kernels, masks and classifier\n"
           "fitted on clean training data; nothing was refit\n\n";
    out << "images            " << count << "\n";
    out << "clean accuracy    " << format_double(clean_accuracy) << "\n";
    out << "attacked accuracy " << format_double(attacked_accuracy) << "\n";
    for (std::size_t s = 0; s < rmse.size(); ++s) {
      double peak = 0.0;
      for (const double v : rmse[s].values) peak = std::max(peak, v);
      out << "stage " << s + 1 << " max channel RMSE " << format_double(peak) << "\n";
    }
    return out.str();
  }
};

/// RMSE over images and channels at each position: D1 x D2.
inline Tensor spatial_rmse(const FeatureTensor& clean, const FeatureTensor& attacked) {
  Tensor map({clean.height(), clean.width()});
  const std::size_t k = clean.channels();
  const std::size_t positions = clean.height() * clean.width();
  std::vector<double> acc(positions, 0.0);
  const auto a = clean.values.values();
  const auto b = attacked.values.values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc[(i / k) % positions] += d * d;
  }
  const double denom = static_cast<double>(clean.count() * k);
  for (std::size_t p = 0; p < positions; ++p) map[p] = static_cast<float>(std::sqrt(acc[p] / denom));
  return map;
}

inline void write_curve(const fs::path& path, const RmseCurve& raw, const RmseCurve& norm) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "# channel rmse normalized_rmse degenerate\n";
  for (std::size_t c = 0; c < raw.values.size(); ++c) {
    out << c << ' ' << format_double(raw.values[c]) << ' ' << format_double(norm.values[c]) << ' '
        << (norm.degenerate[c] ? 1 : 0) << '\n';
  }
}

/// Evaluates externally attacked copies of the saved test images with the
/// clean run's artifacts and writes per-stage RMSE curves and heatmaps.
inline AdversarialReport run_adversarial_eval(const ExperimentConfig& cfg, const fs::path& attacked_path) {
  const ArtifactLayout a{cfg.out_dir};
  const FittedPipeline f = load_fitted(cfg, a);
  const Tensor clean_images = load_tensor(a.test_images());
  const std::vector<int> labels = labels_from_tensor(load_tensor(a.test_labels()));
  const Tensor attacked = load_tensor(attacked_path);
  if (attacked.shape() != clean_images.shape()) {
    throw DomainError("attacked tensor " + attacked_path.string() + " has shape " +
                      shape_string(attacked.shape()) + ", the clean test set is " +
                      shape_string(clean_images.shape()));
  }
  if (labels.size() != clean_images.dim(0)) throw ConsistencyError("saved test labels do not match images");
  const auto clean_out = forward_cascade(FeatureTensor{clean_images, 0}, f.cascade);
  const auto attacked_out = forward_cascade(FeatureTensor{attacked, 0}, f.cascade);

  AdversarialReport r;
  r.count = labels.size();
  r.clean_accuracy = f.classifier->evaluate(classifier_features(clean_out, f.masks, cfg.scope), labels);
  r.attacked_accuracy = f.classifier->evaluate(classifier_features(attacked_out, f.masks, cfg.scope), labels);
  const fs::path dir = cfg.out_dir / "adversarial";
  fs::create_directories(dir);
  for (std::size_t s = 0; s < clean_out.size(); ++s) {
    r.rmse.push_back(rmse_per_spectral(clean_out[s], attacked_out[s], false));
    r.normalized.push_back(rmse_per_spectral(clean_out[s], attacked_out[s], true));
    const std::string stem = "stage_" + std::to_string(s + 1);
    write_curve(dir / (stem + "_rmse.txt"), r.rmse.back(), r.normalized.back());
    export_heatmap(spatial_rmse(clean_out[s], attacked_out[s]), dir / (stem + "_rmse.png"));
  }
  r.to_document().write(dir / "report.kv");
  std::ofstream out(dir / "report.txt", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "report.txt").string());
  out << r.to_text();
  return r;
}

// ---------------------------------------------------------------- visualization

/// One channel of one image's stage response, as a D1 x D2 tensor.
inline Tensor stage_response(const Tensor& images, std::size_t image, const SaakCascade& cascade,
                             std::size_t stage, std::size_t channel) {
  require_rank(images, 4, "visualize input");
  if (image >= images.dim(0)) {
    throw DomainError("image " + std::to_string(image) + " outside [0, " + std::to_string(images.dim(0)) + ")");
  }
  if (stage < 1 || stage > cascade.size()) {
    throw DomainError("stage " + std::to_string(stage) + " outside [1, " + std::to_string(cascade.size()) + "]");
  }
  const FeatureTensor input{images, 0};
  const FeatureTensor out = forward_prefix(input, image, image + 1, cascade, stage);
  if (channel >= out.channels()) {
    throw DomainError("channel " + std::to_string(channel) + " outside [0, " + std::to_string(out.channels()) + ")");
  }
  Tensor map({out.height(), out.width()});
  for (std::size_t i = 0; i < out.height(); ++i) {
    for (std::size_t j = 0; j < out.width(); ++j) map.at(i, j) = out.values.at(0, i, j, channel);
  }
  return map;
}

}  // namespace saak
