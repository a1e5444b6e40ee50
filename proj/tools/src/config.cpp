#include "nervesynth/cli/config.hpp"

#include <cstdlib>
#include <fstream>
#include <initializer_list>
#include <set>

#include "nervesynth/common/error.hpp"

namespace nervesynth::cli {

using nlohmann::json;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& section) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'");
    }
  }
}

template <typename T>
void take(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + section + "." + key + "' has the wrong type");
  }
}

void take_path(const json& j, const char* key, std::filesystem::path& out, const std::string& section) {
  std::string s;
  if (!j.contains(key)) return;
  take(j, key, s, section);
  out = s;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  if (data.n_per_class < 1) throw ConfigError("data.n_per_class must be positive");
  if (data.image_size < 32 || data.image_size % model.image_size != 0) {
    throw ConfigError("data.image_size must be a multiple of model.image_size");
  }
  if (data.extension != ".png" && data.extension != ".pgm") {
    throw ConfigError("data.extension must be .png or .pgm");
  }
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) {
    throw ConfigError("data.test_fraction must lie in (0, 1)");
  }
  parse_adapter_kind(adapter.kind);
  if (adapter.rank < 1) throw ConfigError("adapter.rank must be positive");
  if (adapter.targets.empty()) throw ConfigError("adapter.targets is empty");
  try {
    adapt::parse_layer_roles(adapter.targets);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (optim.max_steps < 1 || optim.batch_size < 1) throw ConfigError("optim steps and batch must be positive");
  if (!(optim.ema >= 0.0 && optim.ema < 1.0)) throw ConfigError("optim.ema must lie in [0, 1)");
  if (diffusion.steps < 2) throw ConfigError("diffusion.steps must be at least 2");
  if (!(diffusion.beta_start > 0.0 && diffusion.beta_start < diffusion.beta_end && diffusion.beta_end < 1.0)) {
    throw ConfigError("diffusion betas must satisfy 0 < beta_start < beta_end < 1");
  }
  if (diffusion.sample_stride < 1) throw ConfigError("diffusion.sample_stride must be positive");
  if (diffusion.foreground_weight < 0.0 || diffusion.background_weight < 0.0 ||
      diffusion.foreground_weight + diffusion.background_weight <= 0.0) {
    throw ConfigError("loss weights must be non-negative and not both zero");
  }
  if (sample.class_name != "all") {
    try {
      model::parse_class_name(sample.class_name);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (sample.mask_source != "dataset" && sample.mask_source != "procedural") {
    throw ConfigError("sample.mask_source must be 'dataset' or 'procedural'");
  }
  if (sample.n < 1 || sample.batch_size < 1) throw ConfigError("sample.n and sample.batch_size must be positive");
  for (int p : eval.pillars) {
    if (p < 1 || p > 3) throw ConfigError("eval.pillars entries must be 1, 2 or 3");
  }
  if (eval.downstream_seeds < 1 || eval.downstream_epochs < 1 || eval.segmenter_epochs < 1) {
    throw ConfigError("eval seeds and epochs must be positive");
  }
  if (eval.hybrid_ratio < 0.0) throw ConfigError("eval.hybrid_ratio must be non-negative");
}

json to_json(const ExperimentConfig& c) {
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir.generic_string()},
      {"data",
       {{"dir", c.data.dir.generic_string()},
        {"n_per_class", c.data.n_per_class},
        {"image_size", c.data.image_size},
        {"extension", c.data.extension},
        {"test_fraction", c.data.test_fraction}}},
      {"model",
       {{"image_size", c.model.image_size},
        {"patch_size", c.model.patch_size},
        {"embed_dim", c.model.embed_dim},
        {"n_blocks", c.model.n_blocks},
        {"n_heads", c.model.n_heads},
        {"mlp_ratio", c.model.mlp_ratio},
        {"position_encoding", c.model.position_encoding},
        {"head_init_std", c.model.head_init_std}}},
      {"adapter",
       {{"kind", c.adapter.kind},
        {"rank", c.adapter.rank},
        {"scale", c.adapter.scale},
        {"targets", c.adapter.targets}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"weight_decay", c.optim.weight_decay},
        {"warmup_steps", c.optim.warmup_steps},
        {"cycles", c.optim.cycles},
        {"max_steps", c.optim.max_steps},
        {"batch_size", c.optim.batch_size},
        {"ema", c.optim.ema}}},
      {"diffusion",
       {{"steps", c.diffusion.steps},
        {"beta_start", c.diffusion.beta_start},
        {"beta_end", c.diffusion.beta_end},
        {"sample_stride", c.diffusion.sample_stride},
        {"foreground_weight", c.diffusion.foreground_weight},
        {"background_weight", c.diffusion.background_weight}}},
      {"sample",
       {{"class", c.sample.class_name},
        {"mask_source", c.sample.mask_source},
        {"n", c.sample.n},
        {"batch_size", c.sample.batch_size}}},
      {"eval",
       {{"pillars", c.eval.pillars},
        {"feature_seed", c.eval.feature_seed},
        {"downstream_seeds", c.eval.downstream_seeds},
        {"downstream_epochs", c.eval.downstream_epochs},
        {"segmenter_epochs", c.eval.segmenter_epochs},
        {"hybrid_ratio", c.eval.hybrid_ratio}}},
  };
}

void merge_json(ExperimentConfig& c, const json& j) {
  check_keys(j, {"seed", "output_dir", "data", "model", "adapter", "optim", "diffusion", "sample", "eval"}, "");
  take(j, "seed", c.seed, "");
  take_path(j, "output_dir", c.output_dir, "");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"dir", "n_per_class", "image_size", "extension", "test_fraction"}, "data");
    take_path(d, "dir", c.data.dir, "data");
    take(d, "n_per_class", c.data.n_per_class, "data");
    take(d, "image_size", c.data.image_size, "data");
    take(d, "extension", c.data.extension, "data");
    take(d, "test_fraction", c.data.test_fraction, "data");
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"image_size", "patch_size", "embed_dim", "n_blocks", "n_heads", "mlp_ratio",
                   "position_encoding", "head_init_std"},
               "model");
    take(m, "image_size", c.model.image_size, "model");
    take(m, "patch_size", c.model.patch_size, "model");
    take(m, "embed_dim", c.model.embed_dim, "model");
    take(m, "n_blocks", c.model.n_blocks, "model");
    take(m, "n_heads", c.model.n_heads, "model");
    take(m, "mlp_ratio", c.model.mlp_ratio, "model");
    take(m, "position_encoding", c.model.position_encoding, "model");
    take(m, "head_init_std", c.model.head_init_std, "model");
  }
  if (j.contains("adapter")) {
    const auto& a = j.at("adapter");
    check_keys(a, {"kind", "rank", "scale", "targets"}, "adapter");
    take(a, "kind", c.adapter.kind, "adapter");
    take(a, "rank", c.adapter.rank, "adapter");
    take(a, "scale", c.adapter.scale, "adapter");
    take(a, "targets", c.adapter.targets, "adapter");
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    check_keys(o, {"lr", "beta1", "beta2", "eps", "weight_decay", "warmup_steps", "cycles", "max_steps",
                   "batch_size", "ema"},
               "optim");
    take(o, "lr", c.optim.lr, "optim");
    take(o, "beta1", c.optim.beta1, "optim");
    take(o, "beta2", c.optim.beta2, "optim");
    take(o, "eps", c.optim.eps, "optim");
    take(o, "weight_decay", c.optim.weight_decay, "optim");
    take(o, "warmup_steps", c.optim.warmup_steps, "optim");
    take(o, "cycles", c.optim.cycles, "optim");
    take(o, "max_steps", c.optim.max_steps, "optim");
    take(o, "batch_size", c.optim.batch_size, "optim");
    take(o, "ema", c.optim.ema, "optim");
  }
  if (j.contains("diffusion")) {
    const auto& d = j.at("diffusion");
    check_keys(d, {"steps", "beta_start", "beta_end", "sample_stride", "foreground_weight", "background_weight"},
               "diffusion");
    take(d, "steps", c.diffusion.steps, "diffusion");
    take(d, "beta_start", c.diffusion.beta_start, "diffusion");
    take(d, "beta_end", c.diffusion.beta_end, "diffusion");
    take(d, "sample_stride", c.diffusion.sample_stride, "diffusion");
    take(d, "foreground_weight", c.diffusion.foreground_weight, "diffusion");
    take(d, "background_weight", c.diffusion.background_weight, "diffusion");
  }
  if (j.contains("sample")) {
    const auto& s = j.at("sample");
    check_keys(s, {"class", "mask_source", "n", "batch_size"}, "sample");
    take(s, "class", c.sample.class_name, "sample");
    take(s, "mask_source", c.sample.mask_source, "sample");
    take(s, "n", c.sample.n, "sample");
    take(s, "batch_size", c.sample.batch_size, "sample");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, {"pillars", "feature_seed", "downstream_seeds", "downstream_epochs", "segmenter_epochs",
                   "hybrid_ratio"},
               "eval");
    take(e, "pillars", c.eval.pillars, "eval");
    take(e, "feature_seed", c.eval.feature_seed, "eval");
    take(e, "downstream_seeds", c.eval.downstream_seeds, "eval");
    take(e, "downstream_epochs", c.eval.downstream_epochs, "eval");
    take(e, "segmenter_epochs", c.eval.segmenter_epochs, "eval");
    take(e, "hybrid_ratio", c.eval.hybrid_ratio, "eval");
  }
}

ExperimentConfig load_config(const std::optional<std::filesystem::path>& path) {
  ExperimentConfig config;
  bool seed_set = false;
  if (path) {
    std::ifstream f(*path);
    if (!f) throw ConfigError("cannot open config " + path->string());
    json j;
    try {
      f >> j;
    } catch (const json::exception& e) {
      throw ConfigError("malformed config " + path->string() + ": " + e.what());
    }
    merge_json(config, j);
    seed_set = j.contains("seed");
  }
  if (!seed_set) {
    if (const char* env = std::getenv("NERVESYNTH_SEED"); env && *env) {
      try {
        std::size_t used = 0;
        config.seed = std::stoull(env, &used);
        if (env[used] != '\0') throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError(std::string("NERVESYNTH_SEED is not an unsigned integer: ") + env);
      }
    }
  }
  return config;
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << j.dump(2) << '\n';
  if (!f) throw DataError("failed writing " + path.string());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path.string());
  try {
    json j;
    f >> j;
    return j;
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void archive_config(const ExperimentConfig& config, const std::filesystem::path& dir) {
  write_json(dir / "config.json", to_json(config));
}

adapt::AdapterKind parse_adapter_kind(const std::string& name) {
  try {
    return adapt::parse_adapter_kind(name);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace nervesynth::cli
