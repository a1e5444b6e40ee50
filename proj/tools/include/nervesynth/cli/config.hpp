#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nervesynth/adapt/adapters.hpp"
#include "nervesynth/model/mmdit.hpp"

namespace nervesynth::cli {

struct DataConfig {
  std::filesystem::path dir = "data";
  int n_per_class = 40;
  std::size_t image_size = 384;
  std::string extension = ".png";
  double test_fraction = 0.2;
};

struct AdapterConfig {
  std::string kind = "wdlora";
  std::size_t rank = 8;
  double scale = 1.0;
  std::vector<std::string> targets{"q", "k", "v", "out_proj"};
};

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 50;
  double cycles = 0.5;
  std::size_t max_steps = 4000;
  std::size_t batch_size = 8;
  // Smoothing factor of the logged loss EMA.
  double ema = 0.98;
};

struct DiffusionConfig {
  std::size_t steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t sample_stride = 20;
  double foreground_weight = 2.0;
  double background_weight = 1.0;
};

struct SampleConfig {
  std::string class_name = "all";       // control, t1nodpn, t1dpn or all
  std::string mask_source = "dataset";  // dataset (held-out masks) or procedural
  int n = 4;                            // per class
  std::size_t batch_size = 16;
};

struct EvalConfig {
  std::vector<int> pillars{1, 2};
  std::uint64_t feature_seed = 20240917;
  int downstream_seeds = 5;
  int downstream_epochs = 30;
  double hybrid_ratio = 1.0;
  int segmenter_epochs = 30;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  DataConfig data;
  model::MmditConfig model;
  AdapterConfig adapter;
  OptimConfig optim;
  DiffusionConfig diffusion;
  SampleConfig sample;
  EvalConfig eval;

  // Throws ConfigError on out-of-range values.
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
// Fields absent from `j` keep their current values; unknown keys are errors.
void merge_json(ExperimentConfig& config, const nlohmann::json& j);

// Defaults, then the file (if any). The seed falls back to NERVESYNTH_SEED
// when the file does not set one.
ExperimentConfig load_config(const std::optional<std::filesystem::path>& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

// Archives the resolved config as <dir>/config.json.
void archive_config(const ExperimentConfig& config, const std::filesystem::path& dir);

adapt::AdapterKind parse_adapter_kind(const std::string& name);

}  // namespace nervesynth::cli
