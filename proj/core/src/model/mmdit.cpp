#include "nervesynth/model/mmdit.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/tensor/ops.hpp"
#include "nervesynth/tensor/serialize.hpp"

namespace nervesynth::model {

namespace {

constexpr const char* kClassNames[] = {"control", "t1nodpn", "t1dpn"};

Tensor xavier(std::size_t out, std::size_t in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(out * in);
  for (auto& x : w) x = uniform(rng, -bound, bound);
  return Tensor({out, in}, std::move(w), true);
}

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng, 0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

adapt::AdaptableLinear make_linear(std::size_t out, std::size_t in, Rng& rng) {
  return adapt::AdaptableLinear(xavier(out, in, rng), Tensor::zeros({out}, true));
}

LayerNormParams make_norm(std::size_t dim) {
  return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)};
}

}  // namespace

std::string class_name(int class_id) {
  if (class_id < 0 || class_id >= kNumClasses) {
    throw ConfigError("class id " + std::to_string(class_id) + " outside {0, 1, 2}");
  }
  return kClassNames[class_id];
}

int parse_class_name(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  for (int i = 0; i < kNumClasses; ++i) {
    if (lower == kClassNames[i]) return i;
  }
  throw ConfigError("unknown class '" + std::string(name) +
                    "' (expected one of control, t1nodpn, t1dpn)");
}

void MmditConfig::validate() const {
  if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image_size must be a positive multiple of patch_size");
  }
  if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
    throw ConfigError("embed_dim must be a positive multiple of n_heads");
  }
  if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
  if (n_classes == 0) throw ConfigError("n_classes must be positive");
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
}

void ConditionBundle::validate(const MmditConfig& config) const {
  if (class_id < 0 || class_id >= static_cast<int>(config.n_classes)) {
    throw ConfigError("class id " + std::to_string(class_id) + " outside [0, " +
                      std::to_string(config.n_classes) + ")");
  }
  if (mask.size() != config.pixels()) {
    throw DimensionError("mask has " + std::to_string(mask.size()) + " entries, expected " +
                         std::to_string(config.pixels()));
  }
  for (double m : mask) {
    if (m != 0.0 && m != 1.0) throw DataError("mask entries must be 0 or 1");
  }
  if (timestep < 0) throw ConfigError("timestep must be non-negative");
}

std::vector<std::size_t> patch_index(std::size_t batch, std::size_t channels, std::size_t size,
                                     std::size_t patch) {
  if (patch == 0 || size % patch != 0) {
    throw DimensionError("image size " + std::to_string(size) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t g = size / patch;
  std::vector<std::size_t> idx;
  idx.reserve(batch * channels * size * size);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px) {
              const std::size_t y = gy * patch + py, x = gx * patch + px;
              idx.push_back(((b * channels + c) * size + y) * size + x);
            }
  return idx;
}

Tensor to_patches(const Tensor& images, std::size_t patch) {
  if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
    throw DimensionError("to_patches expects [batch x channels x size x size], got " +
                         shape_to_string(images.shape()));
  }
  const std::size_t b = images.dim(0), c = images.dim(1), s = images.dim(2);
  const auto idx = patch_index(b, c, s, patch);
  const std::size_t n = (s / patch) * (s / patch);
  return gather(images, idx, {b * n, c * patch * patch});
}

Tensor from_patches(const Tensor& tokens, std::size_t batch, std::size_t channels, std::size_t size,
                    std::size_t patch) {
  const auto idx = patch_index(batch, channels, size, patch);
  if (tokens.numel() != idx.size()) {
    throw DimensionError("from_patches: token count does not match the image geometry");
  }
  // Invert the permutation so that gathering from tokens yields the image.
  std::vector<std::size_t> inverse(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) inverse[idx[i]] = i;
  return gather(tokens, inverse, {batch, channels, size, size});
}

Tensor sinusoidal_embedding(std::span<const int> timesteps, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(timesteps.size() * dim, 0.0);
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
      const double arg = static_cast<double>(timesteps[i]) * freq;
      out[i * dim + j] = std::cos(arg);
      out[i * dim + half + j] = std::sin(arg);
    }
  }
  return Tensor({timesteps.size(), dim}, std::move(out));
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

TransformerBlock::TransformerBlock(std::size_t dim, std::size_t mlp_hidden, Rng& rng)
    : norm1(make_norm(dim)),
      norm2(make_norm(dim)),
      q(make_linear(dim, dim, rng)),
      k(make_linear(dim, dim, rng)),
      v(make_linear(dim, dim, rng)),
      out_proj(make_linear(dim, dim, rng)),
      mlp_in(make_linear(mlp_hidden, dim, rng)),
      mlp_out(make_linear(dim, mlp_hidden, rng)) {}

Tensor TransformerBlock::attend(const Tensor& x, std::size_t seq_len, std::size_t n_heads,
                                std::vector<double>* probs) const {
  Tensor a = multi_head_attention(q.forward(x), k.forward(x), v.forward(x), seq_len, n_heads, probs);
  return out_proj.forward(a);
}

Tensor TransformerBlock::forward(const Tensor& x, std::size_t seq_len, std::size_t n_heads,
                                 std::vector<double>* probs) const {
  Tensor h = add(x, attend(norm1(x), seq_len, n_heads, probs));
  return add(h, mlp_out.forward(gelu(mlp_in.forward(norm2(h)))));
}

JointAttentionOutput joint_attention(const TransformerBlock& block, const Tensor& image_tokens,
                                     const Tensor& cond_tokens, std::size_t batch,
                                     std::size_t n_heads) {
  if (image_tokens.rank() != 2 || cond_tokens.rank() != 2 ||
      image_tokens.dim(1) != cond_tokens.dim(1)) {
    throw DimensionError("joint attention needs 2-D token matrices with a shared width, got " +
                         shape_to_string(image_tokens.shape()) + " and " +
                         shape_to_string(cond_tokens.shape()));
  }
  if (batch == 0 || image_tokens.dim(0) % batch != 0 || cond_tokens.dim(0) % batch != 0) {
    throw DimensionError("joint attention: token rows not divisible by batch");
  }
  const std::size_t d = image_tokens.dim(1);
  const std::size_t ni = image_tokens.dim(0) / batch, nc = cond_tokens.dim(0) / batch;
  const std::size_t s = ni + nc;
  Tensor seq = reshape(concat({reshape(image_tokens, {batch, ni, d}), reshape(cond_tokens, {batch, nc, d})}, 1),
                       {batch * s, d});
  JointAttentionOutput out;
  Tensor y = reshape(block.attend(seq, s, n_heads, &out.probs), {batch, s, d});
  out.image = reshape(slice(y, 1, 0, ni), {batch * ni, d});
  out.cond = reshape(slice(y, 1, ni, s), {batch * nc, d});
  return out;
}

Mmdit::Mmdit(MmditConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t d = config_.embed_dim;
  const std::size_t p2 = config_.patch_size * config_.patch_size;
  patch_embed_ = make_linear(d, p2 * MmditConfig::kInputChannels, rng);
  pos_embed_ = gaussian({config_.n_patches(), d}, 0.02, rng);
  cond_pos_embed_ = gaussian({MmditConfig::kCondTokens, d}, 0.02, rng);
  class_embed_ = gaussian({config_.n_classes, d}, 1.0, rng);
  time_mlp_in_ = make_linear(d, d, rng);
  time_mlp_out_ = make_linear(d, d, rng);
  blocks_.reserve(config_.n_blocks);
  for (std::size_t i = 0; i < config_.n_blocks; ++i) {
    blocks_.emplace_back(d, d * config_.mlp_ratio, rng);
  }
  final_norm_ = make_norm(d);
  head_ = adapt::AdaptableLinear(gaussian({p2, d}, config_.head_init_std, rng),
                                 Tensor::zeros({p2}, true));
}

Tensor Mmdit::patchify(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != MmditConfig::kInputChannels ||
      images.dim(2) != config_.image_size || images.dim(3) != config_.image_size) {
    throw DimensionError("patchify expects [batch x " +
                         std::to_string(MmditConfig::kInputChannels) + " x " +
                         std::to_string(config_.image_size) + " x " +
                         std::to_string(config_.image_size) + "], got " +
                         shape_to_string(images.shape()));
  }
  return patch_embed_.forward(to_patches(images, config_.patch_size));
}

Tensor Mmdit::condition_tokens(std::span<const int> class_ids, std::span<const int> timesteps) const {
  if (class_ids.size() != timesteps.size()) {
    throw DimensionError("class ids and timesteps differ in length");
  }
  for (int c : class_ids) {
    if (c < 0 || c >= static_cast<int>(config_.n_classes)) {
      throw ConfigError("class id " + std::to_string(c) + " outside [0, " +
                        std::to_string(config_.n_classes) + ")");
    }
  }
  const std::size_t b = class_ids.size(), d = config_.embed_dim;
  Tensor cls = embedding(class_embed_, class_ids);
  Tensor time = time_mlp_out_.forward(silu(time_mlp_in_.forward(sinusoidal_embedding(timesteps, d))));
  Tensor tokens = concat({reshape(cls, {b, 1, d}), reshape(time, {b, 1, d})}, 1);
  if (config_.position_encoding) tokens = add(tokens, cond_pos_embed_);
  return reshape(tokens, {b * MmditConfig::kCondTokens, d});
}

Tensor Mmdit::forward(const Tensor& x_t, const Tensor& masks, std::span<const int> class_ids,
                      std::span<const int> timesteps) const {
  const std::size_t px = config_.pixels(), s = config_.image_size, d = config_.embed_dim;
  if (x_t.rank() != 2 || x_t.dim(1) != px || masks.shape() != x_t.shape()) {
    throw DimensionError("forward expects x_t and masks shaped [batch x " + std::to_string(px) +
                         "], got " + shape_to_string(x_t.shape()) + " and " +
                         shape_to_string(masks.shape()));
  }
  const std::size_t b = x_t.dim(0);
  if (class_ids.size() != b || timesteps.size() != b) {
    throw DimensionError("one class id and timestep per batch row required");
  }
  Tensor images = concat({reshape(x_t, {b, 1, s, s}), reshape(masks, {b, 1, s, s})}, 1);
  const std::size_t n = config_.n_patches(), nc = MmditConfig::kCondTokens, len = config_.seq_len();
  Tensor img = reshape(patchify(images), {b, n, d});
  if (config_.position_encoding) img = add(img, pos_embed_);
  Tensor cond = reshape(condition_tokens(class_ids, timesteps), {b, nc, d});
  Tensor h = reshape(concat({img, cond}, 1), {b * len, d});
  for (const auto& block : blocks_) h = block.forward(h, len, config_.n_heads);
  Tensor img_out = reshape(slice(reshape(h, {b, len, d}), 1, 0, n), {b * n, d});
  Tensor pred = head_.forward(final_norm_(img_out));
  return reshape(from_patches(pred, b, 1, s, config_.patch_size), {b, px});
}

Tensor Mmdit::denoise_predict(std::span<const double> x_t, const ConditionBundle& bundle) const {
  bundle.validate(config_);
  const std::size_t px = config_.pixels();
  if (x_t.size() != px) {
    throw DimensionError("x_t has " + std::to_string(x_t.size()) + " entries, expected " +
                         std::to_string(px));
  }
  Tensor x({1, px}, std::vector<double>(x_t.begin(), x_t.end()));
  Tensor m({1, px}, bundle.mask);
  const int cls = bundle.class_id, t = bundle.timestep;
  return reshape(forward(x, m, std::span<const int>(&cls, 1), std::span<const int>(&t, 1)), {px});
}

std::vector<std::pair<std::string, Tensor>> Mmdit::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  auto lin = [&](const std::string& name, adapt::AdaptableLinear& l) {
    out.emplace_back(name + ".weight", l.weight());
    out.emplace_back(name + ".bias", l.bias());
  };
  auto norm = [&](const std::string& name, LayerNormParams& n) {
    out.emplace_back(name + ".gamma", n.gamma);
    out.emplace_back(name + ".beta", n.beta);
  };
  lin("patch_embed", patch_embed_);
  out.emplace_back("pos_embed", pos_embed_);
  out.emplace_back("cond_pos_embed", cond_pos_embed_);
  out.emplace_back("class_embed", class_embed_);
  lin("time_mlp_in", time_mlp_in_);
  lin("time_mlp_out", time_mlp_out_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    norm(p + "norm1", blk.norm1);
    lin(p + "attn.q", blk.q);
    lin(p + "attn.k", blk.k);
    lin(p + "attn.v", blk.v);
    lin(p + "attn.out_proj", blk.out_proj);
    norm(p + "norm2", blk.norm2);
    lin(p + "mlp_in", blk.mlp_in);
    lin(p + "mlp_out", blk.mlp_out);
  }
  norm("final_norm", final_norm_);
  lin("head", head_);
  return out;
}

std::vector<adapt::LayerSlot> Mmdit::adaptable_layers() {
  using adapt::LayerRole;
  std::vector<adapt::LayerSlot> slots;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& blk = blocks_[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    slots.push_back({p + "attn.q", LayerRole::q, &blk.q});
    slots.push_back({p + "attn.k", LayerRole::k, &blk.k});
    slots.push_back({p + "attn.v", LayerRole::v, &blk.v});
    slots.push_back({p + "attn.out_proj", LayerRole::out_proj, &blk.out_proj});
    slots.push_back({p + "mlp_in", LayerRole::mlp_in, &blk.mlp_in});
    slots.push_back({p + "mlp_out", LayerRole::mlp_out, &blk.mlp_out});
  }
  return slots;
}

std::vector<Tensor> Mmdit::base_parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Mmdit::base_parameter_count() { return adapt::count_parameters(base_parameters()); }

std::uint64_t Mmdit::base_hash() {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto& t : base_parameters()) h = hash_values(t.data(), h);
  // Adapters keep their own frozen copy of the base weight.
  for (auto& slot : adaptable_layers()) {
    if (const auto& ad = slot.layer->adapter()) h = hash_values(adapt::frozen_tensor(*ad).data(), h);
  }
  return h;
}

namespace {

using nlohmann::json;

json config_to_json(const MmditConfig& c) {
  return json{{"image_size", c.image_size},   {"patch_size", c.patch_size},
              {"embed_dim", c.embed_dim},     {"n_blocks", c.n_blocks},
              {"n_heads", c.n_heads},         {"n_classes", c.n_classes},
              {"mlp_ratio", c.mlp_ratio},     {"position_encoding", c.position_encoding},
              {"head_init_std", c.head_init_std}, {"seed", c.seed}};
}

MmditConfig config_from_json(const json& j) {
  MmditConfig c;
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.position_encoding = j.at("position_encoding").get<bool>();
  c.head_init_std = j.at("head_init_std").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// Adapter tensors written after the base parameters, per attached layer.
std::vector<std::pair<std::string, Tensor>> adapter_tensors(Mmdit& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& slot : model.adaptable_layers()) {
    const auto& ad = slot.layer->adapter();
    if (!ad) continue;
    if (const auto* l = std::get_if<adapt::LoraAdapter>(&*ad)) {
      out.emplace_back(slot.name + ".lora.a", l->a);
      out.emplace_back(slot.name + ".lora.b", l->b);
    } else {
      const auto& w = std::get<adapt::WdLoraAdapter>(*ad);
      out.emplace_back(slot.name + ".wdlora.m", w.m);
      out.emplace_back(slot.name + ".wdlora.a", w.a);
      out.emplace_back(slot.name + ".wdlora.b", w.b);
    }
  }
  return out;
}

void copy_into(Tensor& dst, const std::vector<double>& src, const std::string& name) {
  auto v = dst.mutable_data();
  if (v.size() != src.size()) throw DataError("checkpoint tensor " + name + " has the wrong size");
  std::copy(src.begin(), src.end(), v.begin());
}

}  // namespace

void save_model(Mmdit& model, const std::optional<AdapterSetup>& setup,
                const std::filesystem::path& stem) {
  json manifest;
  manifest["format"] = "nervesynth-mmdit";
  manifest["config"] = config_to_json(model.config());
  auto tensors = model.named_parameters();
  if (setup) {
    const auto& o = setup->options;
    manifest["adapters"] = json{{"kind", adapt::to_string(o.kind)}, {"rank", o.rank},
                                {"scale", o.scale},                 {"seed", o.seed},
                                {"norm_axis", adapt::to_string(o.axis)},
                                {"targets", setup->targets}};
    for (auto& t : adapter_tensors(model)) tensors.push_back(t);
  } else {
    manifest["adapters"] = nullptr;
  }
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : tensors) {
    manifest["tensors"].push_back(json{{"name", name}, {"shape", t.shape()}});
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(model.base_hash()));
  manifest["base_hash"] = hash;
  manifest["payload"] = stem.filename().string() + ".bin";

  auto json_path = stem;
  json_path += ".json";
  auto bin_path = stem;
  bin_path += ".bin";
  std::ofstream js(json_path);
  if (!js) throw DataError("cannot write " + json_path.string());
  js << manifest.dump(2) << '\n';
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("cannot write " + bin_path.string());
  for (const auto& [name, t] : tensors) write_raw(bin, t.data());
  if (!bin) throw DataError("failed writing " + bin_path.string());
}

LoadedModel load_model(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw DataError("cannot open checkpoint " + json_path.string());
  json manifest;
  try {
    manifest = json::parse(js);
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  try {
    LoadedModel out{Mmdit(config_from_json(manifest.at("config"))), std::nullopt};
    if (!manifest.at("adapters").is_null()) {
      const auto& a = manifest.at("adapters");
      AdapterSetup setup;
      setup.options.kind = adapt::parse_adapter_kind(a.at("kind").get<std::string>());
      setup.options.rank = a.at("rank").get<std::size_t>();
      setup.options.scale = a.at("scale").get<double>();
      setup.options.seed = a.at("seed").get<std::uint64_t>();
      setup.options.axis = adapt::parse_norm_axis(a.at("norm_axis").get<std::string>());
      setup.targets = a.at("targets").get<std::vector<std::string>>();
      out.setup = setup;
    }
    const auto bin_path = stem.parent_path() / manifest.at("payload").get<std::string>();
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw DataError("cannot open " + bin_path.string());

    // Base weights first, then re-attach adapters from them and fill the
    // trained adapter tensors.
    auto base = out.model.named_parameters();
    const auto& entries = manifest.at("tensors");
    std::size_t e = 0;
    auto next = [&](const std::string& expected, Tensor& dst) {
      const auto& entry = entries.at(e++);
      if (entry.at("name").get<std::string>() != expected) {
        throw DataError("checkpoint lists '" + entry.at("name").get<std::string>() + "' where '" +
                        expected + "' was expected");
      }
      if (entry.at("shape").get<Shape>() != dst.shape()) {
        throw DataError("checkpoint tensor " + expected + " has shape " +
                        shape_to_string(entry.at("shape").get<Shape>()) + ", expected " +
                        shape_to_string(dst.shape()));
      }
      copy_into(dst, read_raw(bin, dst.numel()), expected);
    };
    for (auto& [name, t] : base) next(name, t);
    if (out.setup) {
      adapt::attach_adapters(out.model, out.setup->targets, out.setup->options);
      for (auto& [name, t] : adapter_tensors(out.model)) next(name, t);
    }
    if (e != entries.size()) throw DataError("checkpoint lists unused tensors");
    return out;
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace nervesynth::model
