#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nervesynth/adapt/adapters.hpp"

namespace nervesynth::adapt {

enum class LayerRole { q, k, v, out_proj, mlp_in, mlp_out };

std::string to_string(LayerRole role);
LayerRole parse_layer_role(std::string_view name);
std::set<LayerRole> parse_layer_roles(const std::vector<std::string>& names);
const std::set<LayerRole>& default_targets();  // q, k, v, out_proj
const std::set<LayerRole>& all_roles();

// Linear map y = x W^T + bias whose weight may be replaced by an adapter.
class AdaptableLinear {
 public:
  AdaptableLinear() = default;
  AdaptableLinear(Tensor weight, Tensor bias);

  Tensor forward(const Tensor& x) const;
  // The weight the forward pass uses: compose(adapter) when attached.
  Tensor effective_weight() const;

  std::size_t out_features() const { return weight_.dim(0); }
  std::size_t in_features() const { return weight_.dim(1); }

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  void attach(Adapter adapter);
  void detach_adapter() { adapter_.reset(); }
  const std::optional<Adapter>& adapter() const { return adapter_; }
  std::optional<Adapter>& adapter() { return adapter_; }

  // Bakes the adapter into a plain dense weight and drops it.
  void merge_adapter();

 private:
  Tensor weight_;  // [out x in]
  Tensor bias_;    // [out]
  std::optional<Adapter> adapter_;
};

struct LayerSlot {
  std::string name;  // e.g. "blocks.0.attn.q"
  LayerRole role;
  AdaptableLinear* layer;
};

// A model whose linear layers can be wrapped with adapters.
class AdaptableModel {
 public:
  virtual ~AdaptableModel() = default;
  virtual std::vector<LayerSlot> adaptable_layers() = 0;
  // Every base (pre-adapter) parameter, including those of adaptable layers.
  virtual std::vector<Tensor> base_parameters() = 0;
};

struct LayerParamCount {
  std::string name;
  std::size_t d = 0, k = 0, trainable = 0;
};

struct AttachReport {
  std::size_t trainable = 0;
  std::size_t base_total = 0;
  std::vector<LayerParamCount> layers;
  // trainable / (base_total + trainable)
  double trainable_fraction() const;
};

struct AttachOptions {
  AdapterKind kind = AdapterKind::wdlora;
  std::size_t rank = 8;
  double scale = 1.0;
  std::uint64_t seed = 0;
  NormAxis axis = NormAxis::columns;
};

// Wraps every layer whose role is in `targets` and freezes all base
// parameters. Layer i's adapter is seeded with derive_seed(seed, i).
AttachReport attach_adapters(AdaptableModel& model, const std::set<LayerRole>& targets,
                             const AttachOptions& options);
AttachReport attach_adapters(AdaptableModel& model, const std::vector<std::string>& targets,
                             const AttachOptions& options);

// Parameters an optimizer should update: adapter tensors when any adapter is
// attached, otherwise every base parameter that requires grad.
std::vector<Tensor> trainable_parameters(AdaptableModel& model);
std::size_t count_parameters(const std::vector<Tensor>& params);

}  // namespace nervesynth::adapt
