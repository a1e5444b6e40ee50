#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>

#include "doctest.h"
#include "nervesynth/cli/commands.hpp"
#include "nervesynth/cli/config.hpp"
#include "nervesynth/common/error.hpp"

using namespace nervesynth;
using namespace nervesynth::cli;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("nervesynth_test_cli_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const json& j) {
  const auto p = dir / "config.json";
  write_json(p, j);
  return p;
}

}  // namespace

TEST_CASE("defaults validate and round-trip through JSON") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.adapter.kind == "wdlora");
  CHECK(c.adapter.rank == 8);
  CHECK(c.optim.warmup_steps == 50);
  CHECK(c.optim.max_steps == 4000);
  CHECK(c.diffusion.foreground_weight == 2.0);

  ExperimentConfig d;
  d.seed = 1;
  d.adapter.rank = 2;
  merge_json(d, to_json(c));
  CHECK(to_json(d) == to_json(c));
}

TEST_CASE("partial files override only what they name") {
  ExperimentConfig c;
  merge_json(c, {{"optim", {{"lr", 5e-4}}}, {"adapter", {{"kind", "lora"}}}});
  CHECK(c.optim.lr == 5e-4);
  CHECK(c.optim.max_steps == 4000);
  CHECK(c.adapter.kind == "lora");
  CHECK(c.adapter.rank == 8);
}

TEST_CASE("unknown keys, wrong types and bad values are config errors") {
  ExperimentConfig c;
  CHECK_THROWS_AS(merge_json(c, {{"optim", {{"learning_rate", 1.0}}}}), ConfigError);
  CHECK_THROWS_AS(merge_json(c, {{"colour", 1}}), ConfigError);
  CHECK_THROWS_AS(merge_json(c, {{"adapter", {{"rank", "eight"}}}}), ConfigError);

  ExperimentConfig bad;
  bad.adapter.kind = "dora";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ExperimentConfig{};
  bad.adapter.targets = {"q", "proj"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ExperimentConfig{};
  bad.sample.mask_source = "file";
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ExperimentConfig{};
  bad.eval.pillars = {4};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ExperimentConfig{};
  bad.data.image_size = 100;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("seed precedence: file, then NERVESYNTH_SEED, then zero") {
  const auto dir = scratch("seed");
  const auto with_seed = write_config(dir, {{"seed", 5}});

  ::unsetenv("NERVESYNTH_SEED");
  CHECK(load_config(std::nullopt).seed == 0);

  ::setenv("NERVESYNTH_SEED", "42", 1);
  CHECK(load_config(std::nullopt).seed == 42);
  CHECK(load_config(with_seed).seed == 5);

  const auto without = dir / "plain.json";
  write_json(without, {{"optim", {{"max_steps", 10}}}});
  CHECK(load_config(without).seed == 42);

  ::setenv("NERVESYNTH_SEED", "forty", 1);
  CHECK_THROWS_AS(load_config(std::nullopt), ConfigError);
  ::unsetenv("NERVESYNTH_SEED");
}

TEST_CASE("missing or malformed config files") {
  const auto dir = scratch("files");
  CHECK_THROWS_AS(load_config(dir / "absent.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{\"seed\": ";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
}

TEST_CASE("non-finite metrics are encoded as strings") {
  CHECK(number(1.5) == json(1.5));
  CHECK(number(std::numeric_limits<double>::infinity()) == json("inf"));
  CHECK(number(-std::numeric_limits<double>::infinity()) == json("-inf"));
  CHECK(number(std::nan("")) == json("nan"));
  CHECK(std::isinf(number_from_json(json("inf"))));
  CHECK(number_from_json(json(2.0)) == 2.0);
  CHECK_THROWS_AS(number_from_json(json("big")), DataError);
}

TEST_CASE("archived config reproduces the resolved settings") {
  const auto dir = scratch("archive");
  ExperimentConfig c;
  c.seed = 9;
  c.output_dir = dir;
  c.adapter.targets = {"q", "v"};
  archive_config(c, dir);
  const auto back = load_config(dir / "config.json");
  CHECK(to_json(back) == to_json(c));
}

TEST_CASE("report rendering rejects foreign JSON") {
  CHECK_THROWS_AS(render_report({{"format", "something-else"}}), DataError);
}

TEST_CASE("evaluating a dataset against itself") {
  const auto dir = scratch("self");
  ExperimentConfig c;
  c.seed = 4;
  c.data.dir = dir / "data";
  c.data.n_per_class = 4;
  c.output_dir = dir / "eval";
  c.eval.pillars = {1};
  run_gen_data(c);
  const auto manifest = c.data.dir / "manifest.json";
  const auto report = run_eval(c, manifest, manifest);
  const auto& overall = report.at("fidelity").at("overall");
  CHECK(overall.at("psnr") == json("inf"));
  CHECK(number_from_json(overall.at("ssim")) == doctest::Approx(1.0));
  CHECK(number_from_json(overall.at("fid")) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(render_report(report).find("overall") != std::string::npos);
}
