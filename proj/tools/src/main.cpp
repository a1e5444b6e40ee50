#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nervesynth/cli/commands.hpp"
#include "nervesynth/cli/config.hpp"
#include "nervesynth/common/error.hpp"

namespace {

namespace cli = nervesynth::cli;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumerical = 4 };

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  // gen-data
  std::optional<int> n_per_class;
  std::optional<std::size_t> image_size;
  std::optional<std::string> extension;
  // train
  std::optional<std::size_t> steps;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<std::string> adapter;
  std::optional<std::size_t> rank;
  std::optional<double> scale;
  std::vector<std::string> targets;
  // sample
  std::optional<std::string> checkpoint;
  std::optional<std::string> class_name;
  std::optional<std::string> mask_source;
  std::optional<int> n;
  std::optional<std::size_t> stride;
  // eval
  std::optional<std::string> real;
  std::optional<std::string> generated;
  std::vector<int> pillars;
  std::optional<int> downstream_seeds;
  // report
  std::optional<std::string> input;
};

cli::ExperimentConfig resolve(const Overrides& o) {
  auto c = cli::load_config(o.config ? std::optional<std::filesystem::path>(*o.config) : std::nullopt);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.data) c.data.dir = *o.data;
  if (o.n_per_class) c.data.n_per_class = *o.n_per_class;
  if (o.image_size) c.data.image_size = *o.image_size;
  if (o.extension) c.data.extension = *o.extension;
  if (o.steps) c.optim.max_steps = *o.steps;
  if (o.lr) c.optim.lr = *o.lr;
  if (o.batch) c.optim.batch_size = *o.batch;
  if (o.adapter) c.adapter.kind = *o.adapter;
  if (o.rank) c.adapter.rank = *o.rank;
  if (o.scale) c.adapter.scale = *o.scale;
  if (!o.targets.empty()) c.adapter.targets = o.targets;
  if (o.class_name) c.sample.class_name = *o.class_name;
  if (o.mask_source) c.sample.mask_source = *o.mask_source;
  if (o.n) c.sample.n = *o.n;
  if (o.stride) c.diffusion.sample_stride = *o.stride;
  if (!o.pillars.empty()) c.eval.pillars = o.pillars;
  if (o.downstream_seeds) c.eval.downstream_seeds = *o.downstream_seeds;
  c.validate();
  return c;
}

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-conditioned synthesis of corneal nerve images with weight-decomposed adapters"};
  app.require_subcommand(1);
  Overrides o;
  app.add_option("-c,--config", o.config, "JSON config; command-line flags take precedence");
  app.add_option("--seed", o.seed, "Global seed (falls back to NERVESYNTH_SEED, then 0)");

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic real-like dataset");
  gen->add_option("-o,--out", o.data, "Dataset directory");
  gen->add_option("--n-per-class", o.n_per_class, "Samples per class");
  gen->add_option("--image-size", o.image_size, "Image side in pixels");
  gen->add_option("--ext", o.extension, "Image extension (.png or .pgm)");

  auto* train = app.add_subcommand("train", "Fine-tune adapters on a dataset");
  train->add_option("-d,--data", o.data, "Dataset directory");
  train->add_option("-o,--out", o.out, "Run directory");
  train->add_option("--steps", o.steps, "Maximum optimizer steps");
  train->add_option("--lr", o.lr, "Peak learning rate");
  train->add_option("--batch", o.batch, "Batch size");
  train->add_option("--adapter", o.adapter, "lora or wdlora");
  train->add_option("--rank", o.rank, "Adapter rank");
  train->add_option("--scale", o.scale, "Adapter scale");
  train->add_option("--targets", o.targets, "Adapted layers (q k v out_proj mlp_in mlp_out)")->delimiter(',');

  auto* sample = app.add_subcommand("sample", "Generate images from a trained checkpoint");
  sample->add_option("--checkpoint", o.checkpoint, "Checkpoint stem (default <run>/model)");
  sample->add_option("-d,--data", o.data, "Dataset directory providing held-out masks");
  sample->add_option("-o,--out", o.out, "Output directory");
  sample->add_option("--class", o.class_name, "control, t1nodpn, t1dpn or all");
  sample->add_option("--mask-source", o.mask_source, "dataset or procedural");
  sample->add_option("-n,--n", o.n, "Images per class");
  sample->add_option("--stride", o.stride, "Sampler timestep stride");

  auto* eval = app.add_subcommand("eval", "Score generated images against real ones");
  eval->add_option("--real", o.real, "Real manifest (default <data>/manifest.json)");
  eval->add_option("--generated", o.generated, "Generated manifest")->required();
  eval->add_option("-d,--data", o.data, "Dataset directory");
  eval->add_option("-o,--out", o.out, "Output directory");
  eval->add_option("--pillar", o.pillars, "Pillars to run (1 fidelity, 2 biomarkers, 3 downstream)")->delimiter(',');
  eval->add_option("--downstream-seeds", o.downstream_seeds, "Seeds per downstream regime");

  auto* report = app.add_subcommand("report", "Render a report.json as text");
  report->add_option("-i,--input", o.input, "report.json from eval")->required();
  report->add_option("-o,--out", o.out, "Write the text here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      print(cli::run_gen_data(resolve(o), log_line));
    } else if (*train) {
      print(cli::run_train(resolve(o), log_line));
    } else if (*sample) {
      const auto c = resolve(o);
      const std::filesystem::path ckpt = o.checkpoint ? std::filesystem::path(*o.checkpoint) : c.output_dir / "model";
      print(cli::run_sample(c, ckpt, log_line));
    } else if (*eval) {
      const auto c = resolve(o);
      const std::filesystem::path real = o.real ? std::filesystem::path(*o.real) : c.data.dir / "manifest.json";
      const auto r = cli::run_eval(c, real, *o.generated, log_line);
      std::cout << cli::render_report(r);
    } else if (*report) {
      const auto text = cli::render_report(cli::read_json(*o.input));
      if (o.out) {
        std::ofstream f(*o.out, std::ios::binary);
        f << text;
        if (!f) throw nervesynth::DataError("failed writing " + *o.out);
      } else {
        std::cout << text;
      }
    }
  } catch (const nervesynth::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const nervesynth::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const nervesynth::DimensionError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const nervesynth::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}
