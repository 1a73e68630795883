#pragma once

// `saak` command line: one subcommand per pipeline phase plus the studies.
// Exit codes: 0 ok, 1 usage or config error, 2 data/format error,
// 3 numeric/training error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "saak/parallel.hpp"
#include "saak/pipeline.hpp"

namespace saak {

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return 1;
    case ErrorKind::numeric:
    case ErrorKind::training:
      return 3;
    default:
      return 2;
  }
}

namespace detail {

struct CliState {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  unsigned threads = 0;
  bool verbose = false;

  // per-subcommand
  std::size_t stage = 0;
  std::size_t image = 0;
  std::size_t channel = 0;
  std::string input, output, attacked;
  std::vector<std::size_t> sizes;
  std::optional<double> spectral, spatial;
  std::vector<std::string> files;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline ExperimentConfig load_config(const CliState& st) {
  if (st.config.empty()) throw UsageError("--config is required");
  ExperimentConfig cfg = ExperimentConfig::read(st.config);
  if (st.seed) {
    cfg.seed = *st.seed;
    cfg.train.seed = *st.seed;
  }
  if (!st.out.empty()) cfg.out_dir = st.out;
  if (st.spectral) cfg.budget.spectral_fraction = *st.spectral;
  if (st.spatial) cfg.budget.spatial_fraction = *st.spatial;
  cfg.validate();
  return cfg;
}

inline ImageSet load_train_checked(const ExperimentConfig& cfg) {
  ImageSet train = load_sampled(cfg, Split::train);
  cfg.check_dimensions(train.height(), train.width());
  return train;
}

inline void print_kernel_summary(std::ostream& out, std::size_t stage, const SaakKernelSet& k) {
  out << "stage " << stage << ": " << to_string(k.config) << "\n";
  out << "  input channels " << k.input_channels << ", patch dim " << k.input_dim << ", kernels "
      << k.kernel_count() << ", output channels " << k.output_channels() << ", patches "
      << k.patch_count << "\n";
  out << "  energy kept " << format_double(energy_kept(k)) << "\n";
  out << "  eigenvalues";
  for (std::size_t i = 0; i < k.eigenvalues.size(); ++i) {
    if (i % 6 == 0) out << "\n   ";
    char buf[32];
    std::snprintf(buf, sizeof buf, " %.6e", k.eigenvalues[i]);
    out << buf;
  }
  out << "\n";
}

inline int cmd_fit_kernels(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  const ImageSet train = load_train_checked(cfg);
  const SaakCascade cascade = fit_kernels_phase(cfg, train);
  save_cascade(a, cascade);
  for (std::size_t s = 0; s < cascade.size(); ++s) {
    out << "stage " << s + 1 << ": " << cascade[s].kernel_count() << " kernels -> "
        << a.kernels(s + 1).string() << "\n";
  }
  return 0;
}

inline int cmd_transform(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  const SaakCascade cascade = load_cascade(a, cfg.stages.size());
  const std::size_t stage = st.stage == 0 ? cascade.size() : st.stage;
  if (stage > cascade.size()) {
    throw ConfigError("--stage " + std::to_string(stage) + " exceeds the " +
                      std::to_string(cascade.size()) + "-stage cascade");
  }
  const Tensor images = st.input.empty() ? load_train_checked(cfg).data : load_tensor(st.input);
  require_rank(images, 4, "transform input");
  const FeatureTensor result =
      forward_prefix(FeatureTensor{images, 0}, 0, images.dim(0), cascade, stage);
  const fs::path target = st.output.empty()
                              ? a.root / "features" / ("stage_" + std::to_string(stage) + ".saak")
                              : fs::path(st.output);
  save_tensor(target, result.values);
  out << "stage " << stage << " features " << shape_string(result.values.shape()) << " -> "
      << target.string() << "\n";
  return 0;
}

inline int cmd_entropy(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  const SaakCascade cascade = load_cascade(a, cfg.stages.size());
  const ImageSet train = load_train_checked(cfg);
  const auto outputs = transform_images(train, cascade);
  const auto maps = entropy_phase(cfg, train, outputs);
  for (std::size_t s = 0; s < maps.size(); ++s) {
    save_entropy(a.entropy(s + 1), maps[s], static_cast<int>(s + 1));
    out << "stage " << s + 1 << " entropy " << maps[s].height << "x" << maps[s].width << "x"
        << maps[s].channels << " -> " << a.entropy(s + 1).string() << "\n";
  }
  return 0;
}

inline int cmd_select(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  for (std::size_t s = 1; s <= cfg.stages.size(); ++s) {
    const SelectionMask m = select_features(load_entropy(a.entropy(s)), cfg.budget);
    save_mask(a.mask(s), m);
    out << "stage " << s << ": " << m.spectral_keep.size() << " of " << m.channels
        << " channels, " << m.feature_count() << " features -> " << a.mask(s).string() << "\n";
  }
  return 0;
}

inline int cmd_train(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  FittedPipeline f;
  f.cascade = load_cascade(a, cfg.stages.size());
  for (std::size_t s = 1; s <= cfg.stages.size(); ++s) f.masks.push_back(load_mask(a.mask(s)));
  const ImageSet train = load_train_checked(cfg);
  f.train_count = train.count();
  const RowMatrix<float> x = classifier_features(transform_images(train, f.cascade), f.masks, cfg.scope);
  f.classifier = train_phase(cfg, x, train);
  f.train_accuracy = f.classifier->evaluate(x, train.labels);
  f.classifier->save(a.model());
  write_training_summary(a, f);
  out << to_string(cfg.classifier) << " on " << x.cols() << " features, train accuracy "
      << format_double(f.train_accuracy) << " -> " << a.model().string() << "\n";
  return 0;
}

inline int cmd_evaluate(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  const FittedPipeline f = load_fitted(cfg, a);
  PhaseTimer timer;
  const ExperimentReport r = evaluate_phase(cfg, f, timer);
  timer.write(a.timings());
  out << r.to_text();
  return 0;
}

inline int cmd_run(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  out << run_classification(cfg).to_text();
  return 0;
}

inline int cmd_stability(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  if (st.sizes.empty()) throw UsageError("--sizes is required");
  out << run_stability(cfg, st.sizes).to_text();
  return 0;
}

inline int cmd_adversarial(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  if (st.attacked.empty()) throw UsageError("--attacked is required");
  out << run_adversarial_eval(cfg, st.attacked).to_text();
  return 0;
}

inline int cmd_visualize(const CliState& st, std::ostream& out) {
  const ExperimentConfig cfg = load_config(st);
  const ArtifactLayout a{cfg.out_dir};
  if (st.stage == 0) throw UsageError("--stage is required");
  const SaakCascade cascade = load_cascade(a, cfg.stages.size());
  const Tensor images = load_tensor(st.input.empty() ? a.test_images() : fs::path(st.input));
  const Tensor map = stage_response(images, st.image, cascade, st.stage, st.channel);
  const fs::path target =
      st.output.empty() ? a.root / "visualize" /
                              ("stage_" + std::to_string(st.stage) + "_image_" +
                               std::to_string(st.image) + "_channel_" + std::to_string(st.channel) + ".png")
                        : fs::path(st.output);
  export_heatmap(map, target);
  out << map.dim(0) << "x" << map.dim(1) << " heatmap -> " << target.string() << "\n";
  return 0;
}

inline int cmd_inspect(const CliState& st, std::ostream& out) {
  std::vector<fs::path> files(st.files.begin(), st.files.end());
  if (files.empty()) {
    const ExperimentConfig cfg = load_config(st);
    const ArtifactLayout a{cfg.out_dir};
    for (std::size_t s = 1; s <= cfg.stages.size(); ++s) files.push_back(a.kernels(s));
  }
  for (const auto& f : files) {
    if (fs::exists(sidecar_path(f)) &&
        KvDocument::read(sidecar_path(f)).string_or("format", "") == "saak-kernel") {
      const SaakKernelSet k = load_kernels(f);
      const int stage = KvDocument::read(sidecar_path(f)).number<int>("stage");
      out << f.string() << "\n";
      print_kernel_summary(out, static_cast<std::size_t>(stage), k);
    } else {
      out << f.string() << ": tensor " << shape_string(load_tensor(f).shape()) << "\n";
    }
  }
  return 0;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  detail::CliState st;
  CLI::App app{"Saak transform: fit, select, classify and study multi-stage Saak features", "saak"};
  app.fallthrough();
  app.require_subcommand(1);
  app.add_option("--config", st.config, "experiment config file");
  app.add_option("--seed", st.seed, "override the config seed");
  app.add_option("--out", st.out, "override the output directory");
  app.add_option("--threads", st.threads, "worker threads (0: all cores)");
  app.add_flag("--verbose", st.verbose, "progress on stderr");

  auto* fit = app.add_subcommand("fit-kernels", "fit the Saak cascade on training images");
  auto* transform = app.add_subcommand("transform", "write stage responses of a tensor file");
  transform->add_option("--stage", st.stage, "stage (default: last)");
  transform->add_option("--input", st.input, "N x H x W x K tensor (default: training sample)");
  transform->add_option("--output", st.output, "output tensor file");
  auto* entropy = app.add_subcommand("entropy", "cross-entropy maps of every stage");
  auto* select = app.add_subcommand("select", "spectral/spatial masks from entropy maps");
  select->add_option("--spectral-fraction", st.spectral, "fraction of channels kept");
  select->add_option("--spatial-fraction", st.spatial, "fraction of positions kept per channel");
  auto* train = app.add_subcommand("train", "train the classifier on selected features");
  auto* evaluate = app.add_subcommand("evaluate", "evaluate on the test split and write the report");
  auto* run = app.add_subcommand("run", "full experiment: fit, select, train, evaluate");
  run->add_option("--spectral-fraction", st.spectral, "fraction of channels kept");
  run->add_option("--spatial-fraction", st.spatial, "fraction of positions kept per channel");
  auto* stability = app.add_subcommand("stability", "kernel stability across subset sizes");
  stability->add_option("--sizes", st.sizes, "subset sizes")->delimiter(',');
  auto* adversarial = app.add_subcommand("adversarial", "evaluate attacked copies of the test set");
  adversarial->add_option("--attacked", st.attacked, "attacked test images (tensor file)");
  auto* visualize = app.add_subcommand("visualize", "heatmap of one stage response channel");
  visualize->add_option("--stage", st.stage, "stage number (1-based)");
  visualize->add_option("--image", st.image, "image index");
  visualize->add_option("--channel", st.channel, "channel index");
  visualize->add_option("--input", st.input, "image tensor (default: saved test images)");
  visualize->add_option("--output", st.output, "PNG path");
  auto* inspect = app.add_subcommand("inspect", "print kernel spectra and tensor dims");
  inspect->add_option("files", st.files, "kernel or tensor files (default: the run's kernels)");

  CLI::App* active = nullptr;
  try {
    app.parse(argc, argv);
    active = app.get_subcommands().front();
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  verbose_logging() = st.verbose;
  set_thread_count(st.threads);
  const std::string name = active->get_name();
  try {
    if (active == fit) return detail::cmd_fit_kernels(st, out);
    if (active == transform) return detail::cmd_transform(st, out);
    if (active == entropy) return detail::cmd_entropy(st, out);
    if (active == select) return detail::cmd_select(st, out);
    if (active == train) return detail::cmd_train(st, out);
    if (active == evaluate) return detail::cmd_evaluate(st, out);
    if (active == run) return detail::cmd_run(st, out);
    if (active == stability) return detail::cmd_stability(st, out);
    if (active == adversarial) return detail::cmd_adversarial(st, out);
    if (active == visualize) return detail::cmd_visualize(st, out);
    if (active == inspect) return detail::cmd_inspect(st, out);
  } catch (const detail::UsageError& e) {
    err << "error: " << name << ": " << e.what() << "\n\n" << active->help();
    return 1;
  } catch (const Error& e) {
    err << "error: " << name << ": " << to_string(e.kind()) << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << name << ": io: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace saak
