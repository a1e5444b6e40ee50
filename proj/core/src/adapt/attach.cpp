#include "nervesynth/adapt/attach.hpp"

#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/tensor/ops.hpp"

namespace nervesynth::adapt {

std::string to_string(LayerRole role) {
  switch (role) {
    case LayerRole::q: return "q";
    case LayerRole::k: return "k";
    case LayerRole::v: return "v";
    case LayerRole::out_proj: return "out_proj";
    case LayerRole::mlp_in: return "mlp_in";
    case LayerRole::mlp_out: return "mlp_out";
  }
  return "?";
}

LayerRole parse_layer_role(std::string_view name) {
  for (auto role : all_roles()) {
    if (to_string(role) == name) return role;
  }
  throw ConfigError("unknown adapter target '" + std::string(name) +
                    "' (expected one of q, k, v, out_proj, mlp_in, mlp_out)");
}

std::set<LayerRole> parse_layer_roles(const std::vector<std::string>& names) {
  std::set<LayerRole> roles;
  for (const auto& n : names) roles.insert(parse_layer_role(n));
  return roles;
}

const std::set<LayerRole>& default_targets() {
  static const std::set<LayerRole> roles{LayerRole::q, LayerRole::k, LayerRole::v,
                                         LayerRole::out_proj};
  return roles;
}

const std::set<LayerRole>& all_roles() {
  static const std::set<LayerRole> roles{LayerRole::q,        LayerRole::k,      LayerRole::v,
                                         LayerRole::out_proj, LayerRole::mlp_in, LayerRole::mlp_out};
  return roles;
}

AdaptableLinear::AdaptableLinear(Tensor weight, Tensor bias)
    : weight_(std::move(weight)), bias_(std::move(bias)) {
  if (weight_.rank() != 2) throw DimensionError("linear weight must be 2-D");
  if (bias_.defined() && (bias_.rank() != 1 || bias_.dim(0) != weight_.dim(0))) {
    throw DimensionError("linear bias must have one entry per output");
  }
}

Tensor AdaptableLinear::effective_weight() const {
  return adapter_ ? compose(*adapter_) : weight_;
}

Tensor AdaptableLinear::forward(const Tensor& x) const {
  return linear(x, effective_weight(), bias_);
}

void AdaptableLinear::attach(Adapter adapter) {
  const Tensor& frozen = frozen_tensor(adapter);
  if (frozen.shape() != weight_.shape()) {
    throw DimensionError("adapter shape " + shape_to_string(frozen.shape()) +
                         " does not match layer weight " + shape_to_string(weight_.shape()));
  }
  adapter_ = std::move(adapter);
}

void AdaptableLinear::merge_adapter() {
  if (!adapter_) return;
  const bool trainable = weight_.requires_grad();
  weight_ = merge(*adapter_);
  weight_.set_requires_grad(trainable);
  adapter_.reset();
}

double AttachReport::trainable_fraction() const {
  const double total = static_cast<double>(base_total + trainable);
  return total > 0.0 ? static_cast<double>(trainable) / total : 0.0;
}

std::size_t count_parameters(const std::vector<Tensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

AttachReport attach_adapters(AdaptableModel& model, const std::set<LayerRole>& targets,
                             const AttachOptions& options) {
  AttachReport report;
  auto base = model.base_parameters();
  for (auto& p : base) {
    p.set_requires_grad(false);
  }
  report.base_total = count_parameters(base);
  auto slots = model.adaptable_layers();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto& slot = slots[i];
    slot.layer->detach_adapter();
    if (!targets.contains(slot.role)) continue;
    const auto& w = slot.layer->weight();
    slot.layer->attach(init_adapter(options.kind, w, options.rank, derive_seed(options.seed, i),
                                    options.scale, options.axis));
    const std::size_t n = param_count(*slot.layer->adapter());
    report.layers.push_back({slot.name, w.dim(0), w.dim(1), n});
    report.trainable += n;
  }
  return report;
}

AttachReport attach_adapters(AdaptableModel& model, const std::vector<std::string>& targets,
                             const AttachOptions& options) {
  return attach_adapters(model, parse_layer_roles(targets), options);
}

std::vector<Tensor> trainable_parameters(AdaptableModel& model) {
  std::vector<Tensor> out;
  bool any_adapter = false;
  for (auto& slot : model.adaptable_layers()) {
    if (const auto& ad = slot.layer->adapter()) {
      any_adapter = true;
      for (auto& t : trainable_tensors(*ad)) out.push_back(t);
    }
  }
  if (any_adapter) return out;
  for (auto& p : model.base_parameters()) {
    if (p.requires_grad()) out.push_back(p);
  }
  return out;
}

}  // namespace nervesynth::adapt
