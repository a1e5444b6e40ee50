#include "nervesynth/adapt/adapters.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/tensor/ops.hpp"
#include "nervesynth/tensor/serialize.hpp"

namespace nervesynth::adapt {

namespace {

void validate(const Tensor& w0, std::size_t rank) {
  if (!w0.defined() || w0.rank() != 2) throw DimensionError("adapters wrap 2-D weights");
  const std::size_t limit = std::min(w0.dim(0), w0.dim(1));
  if (rank < 1 || rank > limit) {
    throw ConfigError("adapter rank " + std::to_string(rank) + " outside [1, " +
                      std::to_string(limit) + "]");
  }
}

Tensor init_down_projection(std::size_t rank, std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(k));
  std::vector<double> a(rank * k);
  for (auto& x : a) x = uniform(rng, -bound, bound);
  return Tensor({rank, k}, std::move(a), true);
}

Tensor low_rank_update(const Tensor& a, const Tensor& b, double scale) {
  Tensor ba = matmul(b, a);
  return scale == 1.0 ? ba : nervesynth::scale(ba, scale);
}

Tensor normalized(const Tensor& w, NormAxis axis) {
  if (axis == NormAxis::columns) return div(w, column_norms(w));
  Tensor wt = transpose(w);
  return transpose(div(wt, column_norms(wt)));
}

Tensor apply_magnitude(const Tensor& dir, const Tensor& m, NormAxis axis) {
  if (axis == NormAxis::columns) return mul(dir, m);
  return transpose(mul(transpose(dir), m));
}

}  // namespace

std::string to_string(AdapterKind kind) { return kind == AdapterKind::lora ? "lora" : "wdlora"; }

AdapterKind parse_adapter_kind(std::string_view name) {
  if (name == "lora") return AdapterKind::lora;
  if (name == "wdlora") return AdapterKind::wdlora;
  throw ConfigError("unknown adapter kind '" + std::string(name) + "' (expected lora or wdlora)");
}

std::string to_string(NormAxis axis) { return axis == NormAxis::columns ? "columns" : "rows"; }

NormAxis parse_norm_axis(std::string_view name) {
  if (name == "columns") return NormAxis::columns;
  if (name == "rows") return NormAxis::rows;
  throw ConfigError("unknown norm axis '" + std::string(name) + "' (expected columns or rows)");
}

LoraAdapter init_lora(const Tensor& w0, std::size_t rank, std::uint64_t seed, double scale) {
  validate(w0, rank);
  LoraAdapter ad;
  ad.w0 = w0.detach();
  ad.a = init_down_projection(rank, w0.dim(1), seed);
  ad.b = Tensor::zeros({w0.dim(0), rank}, true);
  ad.rank = rank;
  ad.scale = scale;
  ad.seed = seed;
  return ad;
}

WdLoraAdapter init_wdlora(const Tensor& w0, std::size_t rank, std::uint64_t seed, double scale,
                          NormAxis axis) {
  validate(w0, rank);
  WdLoraAdapter ad;
  ad.v = w0.detach();
  {
    NoGradGuard guard;
    Tensor norms = axis == NormAxis::columns ? column_norms(w0) : column_norms(transpose(w0));
    ad.m = norms.detach();
  }
  ad.m.set_requires_grad(true);
  ad.a = init_down_projection(rank, w0.dim(1), seed);
  ad.b = Tensor::zeros({w0.dim(0), rank}, true);
  ad.rank = rank;
  ad.scale = scale;
  ad.seed = seed;
  ad.axis = axis;
  return ad;
}

Adapter init_adapter(AdapterKind kind, const Tensor& w0, std::size_t rank, std::uint64_t seed,
                     double scale, NormAxis axis) {
  if (kind == AdapterKind::lora) return init_lora(w0, rank, seed, scale);
  return init_wdlora(w0, rank, seed, scale, axis);
}

Tensor compose(const LoraAdapter& ad) { return add(ad.w0, low_rank_update(ad.a, ad.b, ad.scale)); }

Tensor direction(const WdLoraAdapter& ad) {
  return normalized(add(ad.v, low_rank_update(ad.a, ad.b, ad.scale)), ad.axis);
}

Tensor compose(const WdLoraAdapter& ad) { return apply_magnitude(direction(ad), ad.m, ad.axis); }

Tensor compose(const Adapter& ad) {
  return std::visit([](const auto& x) { return compose(x); }, ad);
}

Tensor merge(const Adapter& ad) {
  NoGradGuard guard;
  return compose(ad).detach();
}

std::size_t lora_param_count(std::size_t d, std::size_t k, std::size_t rank) {
  return rank * (d + k);
}

std::size_t wdlora_param_count(std::size_t d, std::size_t k, std::size_t rank) {
  return rank * (d + k) + k;
}

std::size_t param_count(const LoraAdapter& ad) { return ad.a.numel() + ad.b.numel(); }

std::size_t param_count(const WdLoraAdapter& ad) {
  return ad.a.numel() + ad.b.numel() + ad.m.numel();
}

std::size_t param_count(const Adapter& ad) {
  return std::visit([](const auto& x) { return param_count(x); }, ad);
}

std::vector<Tensor> trainable_tensors(const Adapter& ad) {
  if (const auto* l = std::get_if<LoraAdapter>(&ad)) return {l->a, l->b};
  const auto& w = std::get<WdLoraAdapter>(ad);
  return {w.m, w.a, w.b};
}

const Tensor& frozen_tensor(const Adapter& ad) {
  if (const auto* l = std::get_if<LoraAdapter>(&ad)) return l->w0;
  return std::get<WdLoraAdapter>(ad).v;
}

AdapterKind kind_of(const Adapter& ad) {
  return std::holds_alternative<LoraAdapter>(ad) ? AdapterKind::lora : AdapterKind::wdlora;
}

std::size_t rank_of(const Adapter& ad) {
  return std::visit([](const auto& x) { return x.rank; }, ad);
}

namespace {

using nlohmann::json;

json tensor_entry(const char* name, const Tensor& t) {
  return json{{"name", name}, {"shape", t.shape()}};
}

Tensor take(const json& entry, const char* expected, std::istream& payload, bool trainable) {
  if (entry.at("name").get<std::string>() != expected) {
    throw DataError("adapter manifest lists '" + entry.at("name").get<std::string>() +
                    "' where '" + expected + "' was expected");
  }
  Shape shape = entry.at("shape").get<Shape>();
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), read_raw(payload, n), trainable);
}

}  // namespace

void save_adapter(const Adapter& ad, const std::filesystem::path& stem) {
  json manifest;
  manifest["kind"] = to_string(kind_of(ad));
  manifest["rank"] = rank_of(ad);
  std::vector<std::pair<const char*, Tensor>> order;
  if (const auto* l = std::get_if<LoraAdapter>(&ad)) {
    manifest["scale"] = l->scale;
    manifest["seed"] = l->seed;
    order = {{"w0", l->w0}, {"a", l->a}, {"b", l->b}};
  } else {
    const auto& w = std::get<WdLoraAdapter>(ad);
    manifest["scale"] = w.scale;
    manifest["seed"] = w.seed;
    manifest["norm_axis"] = to_string(w.axis);
    order = {{"m", w.m}, {"v", w.v}, {"a", w.a}, {"b", w.b}};
  }
  manifest["tensors"] = json::array();
  for (const auto& [name, t] : order) manifest["tensors"].push_back(tensor_entry(name, t));
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
  for (const auto& [name, t] : order) write_raw(bin, t.data());
}

Adapter load_adapter(const std::filesystem::path& stem) {
  auto json_path = stem;
  json_path += ".json";
  std::ifstream js(json_path);
  if (!js) throw DataError("cannot open " + json_path.string());
  json manifest;
  try {
    manifest = json::parse(js);
  } catch (const json::exception& e) {
    throw DataError("malformed adapter manifest: " + std::string(e.what()));
  }
  const auto bin_path = stem.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("cannot open " + bin_path.string());
  const auto& tensors = manifest.at("tensors");
  const auto kind = parse_adapter_kind(manifest.at("kind").get<std::string>());
  if (kind == AdapterKind::lora) {
    LoraAdapter ad;
    ad.rank = manifest.at("rank").get<std::size_t>();
    ad.scale = manifest.at("scale").get<double>();
    ad.seed = manifest.at("seed").get<std::uint64_t>();
    ad.w0 = take(tensors.at(0), "w0", bin, false);
    ad.a = take(tensors.at(1), "a", bin, true);
    ad.b = take(tensors.at(2), "b", bin, true);
    return ad;
  }
  WdLoraAdapter ad;
  ad.rank = manifest.at("rank").get<std::size_t>();
  ad.scale = manifest.at("scale").get<double>();
  ad.seed = manifest.at("seed").get<std::uint64_t>();
  ad.axis = parse_norm_axis(manifest.value("norm_axis", std::string("columns")));
  ad.m = take(tensors.at(0), "m", bin, true);
  ad.v = take(tensors.at(1), "v", bin, false);
  ad.a = take(tensors.at(2), "a", bin, true);
  ad.b = take(tensors.at(3), "b", bin, true);
  return ad;
}

}  // namespace nervesynth::adapt
