#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth::adapt {

enum class AdapterKind { lora, wdlora };

// Which axis the WDLoRA magnitude lives on. `columns` normalizes each of the
// k columns of a d x k weight and is the default; `rows` is an alternative
// with one magnitude per output unit.
enum class NormAxis { columns, rows };

std::string to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view name);
std::string to_string(NormAxis axis);
NormAxis parse_norm_axis(std::string_view name);

// W' = W0 + scale * B A with W0 frozen.
struct LoraAdapter {
  Tensor w0;  // [d x k], frozen
  Tensor a;   // [r x k]
  Tensor b;   // [d x r]
  std::size_t rank = 0;
  double scale = 1.0;
  std::uint64_t seed = 0;
};

// W' = m * (V + scale * B A) / ||V + scale * B A||_c with V frozen and the
// magnitude m trained directly.
struct WdLoraAdapter {
  Tensor m;  // [k] (columns) or [d] (rows)
  Tensor v;  // [d x k], frozen
  Tensor a;  // [r x k]
  Tensor b;  // [d x r]
  std::size_t rank = 0;
  double scale = 1.0;
  std::uint64_t seed = 0;
  NormAxis axis = NormAxis::columns;
};

using Adapter = std::variant<LoraAdapter, WdLoraAdapter>;

// b starts at zero and a ~ U(-1/sqrt(k), 1/sqrt(k)) from `seed`, so the
// composed weight at initialization equals w0.
LoraAdapter init_lora(const Tensor& w0, std::size_t rank, std::uint64_t seed, double scale = 1.0);
WdLoraAdapter init_wdlora(const Tensor& w0, std::size_t rank, std::uint64_t seed,
                          double scale = 1.0, NormAxis axis = NormAxis::columns);
Adapter init_adapter(AdapterKind kind, const Tensor& w0, std::size_t rank, std::uint64_t seed,
                     double scale = 1.0, NormAxis axis = NormAxis::columns);

// Differentiable with respect to every trainable tensor of the adapter.
Tensor compose(const LoraAdapter& adapter);
Tensor compose(const WdLoraAdapter& adapter);
Tensor compose(const Adapter& adapter);

// Unit-norm direction matrix (V + scale * B A) / ||.||, before magnitude scaling.
Tensor direction(const WdLoraAdapter& adapter);

// Plain dense weight equal to compose(), detached from any graph.
Tensor merge(const Adapter& adapter);

// LoRA: r(d+k). WDLoRA: r(d+k) + len(m).
std::size_t param_count(const LoraAdapter& adapter);
std::size_t param_count(const WdLoraAdapter& adapter);
std::size_t param_count(const Adapter& adapter);
std::size_t lora_param_count(std::size_t d, std::size_t k, std::size_t rank);
std::size_t wdlora_param_count(std::size_t d, std::size_t k, std::size_t rank);

std::vector<Tensor> trainable_tensors(const Adapter& adapter);
// The tensor that must never change during training (w0 or v).
const Tensor& frozen_tensor(const Adapter& adapter);
AdapterKind kind_of(const Adapter& adapter);
std::size_t rank_of(const Adapter& adapter);

// Checkpoint: `<stem>.json` manifest plus `<stem>.bin` holding the raw
// float64 buffers concatenated in the manifest's declared order.
void save_adapter(const Adapter& adapter, const std::filesystem::path& stem);
Adapter load_adapter(const std::filesystem::path& stem);

}  // namespace nervesynth::adapt
