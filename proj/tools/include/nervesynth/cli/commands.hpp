#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nervesynth/cli/config.hpp"

namespace nervesynth::cli {

// Progress sink; the executable prints to stderr. Nothing passed here ends up
// in an output file.
using Log = std::function<void(const std::string&)>;

// Metric JSON encodes non-finite values as the strings "inf", "-inf", "nan".
nlohmann::json number(double v);
double number_from_json(const nlohmann::json& j);

// Writes a dataset under config.data.dir: images/, masks/, manifest.json,
// config.json and summary.json. Returns the summary.
nlohmann::json run_gen_data(const ExperimentConfig& config, const Log& log = {});

// Fine-tunes adapters on the training split of config.data.dir. Writes
// config.json, loss.csv, model.json/.bin and train_summary.json under
// config.output_dir. Returns the summary.
nlohmann::json run_train(const ExperimentConfig& config, const Log& log = {});

// Samples config.sample.n images per requested class from a checkpoint stem
// (e.g. run/model). Writes images/, masks/, manifest.json, config.json and
// sample_summary.json under config.output_dir.
nlohmann::json run_sample(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
                          const Log& log = {});

// Compares a generated manifest against a real one on the pillars listed in
// config.eval.pillars. Writes config.json, report.json and report.txt under
// config.output_dir. Returns the report.
nlohmann::json run_eval(const ExperimentConfig& config, const std::filesystem::path& real_manifest,
                        const std::filesystem::path& generated_manifest, const Log& log = {});

// Plain-text tables for a report produced by run_eval.
std::string render_report(const nlohmann::json& report);

}  // namespace nervesynth::cli
