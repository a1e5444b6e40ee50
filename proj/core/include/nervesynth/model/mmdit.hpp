#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nervesynth/adapt/attach.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth::model {

// Diagnostic stratification used as the class prompt.
enum class ClassId : int { control = 0, t1nodpn = 1, t1dpn = 2 };
inline constexpr int kNumClasses = 3;

std::string class_name(int class_id);
// Accepts control / t1nodpn / t1dpn (case-insensitive).
int parse_class_name(std::string_view name);

struct MmditConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t n_classes = 3;
  std::size_t mlp_ratio = 4;
  // Learned absolute positions for image and condition tokens.
  bool position_encoding = true;
  // Std of the output head's initial weights. Small enough that the untrained
  // model predicts near-zero noise, large enough that adapters on the
  // attention layers get a usable gradient through the frozen head.
  double head_init_std = 0.03;
  std::uint64_t seed = 0;

  // Noisy image channel + mask channel.
  static constexpr std::size_t kInputChannels = 2;
  // Class token + timestep token.
  static constexpr std::size_t kCondTokens = 2;

  void validate() const;
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t n_patches() const { return grid() * grid(); }
  std::size_t seq_len() const { return n_patches() + kCondTokens; }
  std::size_t pixels() const { return image_size * image_size; }
};

struct ConditionBundle {
  std::vector<double> mask;  // image_size^2 entries in {0, 1}
  int class_id = 0;
  int timestep = 0;

  void validate(const MmditConfig& config) const;
};

// Index map taking a [batch x channels x size x size] image to
// [batch * n_patches x patch^2 * channels] tokens (feature order: channel,
// row, column). Patches are enumerated row-major over the grid.
std::vector<std::size_t> patch_index(std::size_t batch, std::size_t channels, std::size_t size,
                                     std::size_t patch);
Tensor to_patches(const Tensor& images, std::size_t patch);
Tensor from_patches(const Tensor& tokens, std::size_t batch, std::size_t channels, std::size_t size,
                    std::size_t patch);

Tensor sinusoidal_embedding(std::span<const int> timesteps, std::size_t dim);

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor operator()(const Tensor& x) const;
};

class TransformerBlock {
 public:
  TransformerBlock(std::size_t dim, std::size_t mlp_hidden, Rng& rng);

  // Pre-norm self-attention + MLP over rows grouped into sequences of seq_len.
  Tensor forward(const Tensor& x, std::size_t seq_len, std::size_t n_heads,
                 std::vector<double>* probs = nullptr) const;

  // Attention sublayer only (q/k/v, softmax attention, output projection),
  // without normalization or residual.
  Tensor attend(const Tensor& x, std::size_t seq_len, std::size_t n_heads,
                std::vector<double>* probs = nullptr) const;

  LayerNormParams norm1, norm2;
  adapt::AdaptableLinear q, k, v, out_proj, mlp_in, mlp_out;
};

struct JointAttentionOutput {
  Tensor image;  // [batch * n_img x dim]
  Tensor cond;   // [batch * n_cond x dim]
  std::vector<double> probs;  // [batch][heads][S][S]
};

// Joint multimodal attention: each sample's image and condition tokens are
// concatenated into one sequence, attended all-to-all, and split back.
JointAttentionOutput joint_attention(const TransformerBlock& block, const Tensor& image_tokens,
                                     const Tensor& cond_tokens, std::size_t batch,
                                     std::size_t n_heads);

// Toy multimodal diffusion transformer predicting the noise in x_t given a
// nerve mask, a diagnostic class and a timestep.
class Mmdit : public adapt::AdaptableModel {
 public:
  explicit Mmdit(MmditConfig config);

  const MmditConfig& config() const { return config_; }

  // x_t and masks are [batch x pixels]; returns predicted noise [batch x pixels].
  Tensor forward(const Tensor& x_t, const Tensor& masks, std::span<const int> class_ids,
                 std::span<const int> timesteps) const;

  // Single-sample convenience wrapper.
  Tensor denoise_predict(std::span<const double> x_t, const ConditionBundle& bundle) const;

  // [batch x channels x size x size] -> [batch * n_patches x embed_dim],
  // the linear patch projection without positional terms.
  Tensor patchify(const Tensor& images) const;
  Tensor condition_tokens(std::span<const int> class_ids, std::span<const int> timesteps) const;

  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  std::vector<TransformerBlock>& blocks() { return blocks_; }

  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<adapt::LayerSlot> adaptable_layers() override;
  std::vector<Tensor> base_parameters() override;
  std::size_t base_parameter_count();

  // FNV-1a over every base parameter; unchanged by adapter training.
  std::uint64_t base_hash();

  Tensor& class_table() { return class_embed_; }
  adapt::AdaptableLinear& patch_embed() { return patch_embed_; }
  adapt::AdaptableLinear& head() { return head_; }

 private:
  MmditConfig config_;
  adapt::AdaptableLinear patch_embed_;
  Tensor pos_embed_;       // [n_patches x D]
  Tensor cond_pos_embed_;  // [2 x D]
  Tensor class_embed_;     // [n_classes x D]
  adapt::AdaptableLinear time_mlp_in_, time_mlp_out_;
  std::vector<TransformerBlock> blocks_;
  LayerNormParams final_norm_;
  adapt::AdaptableLinear head_;  // D -> patch^2
};

// Adapter attachment recorded alongside a checkpoint.
struct AdapterSetup {
  adapt::AttachOptions options;
  std::vector<std::string> targets;
};

// `<stem>.json` manifest (config, adapter setup, tensor list, base hash) and
// `<stem>.bin` with the concatenated float64 buffers.
void save_model(Mmdit& model, const std::optional<AdapterSetup>& setup,
                const std::filesystem::path& stem);

struct LoadedModel {
  Mmdit model;
  std::optional<AdapterSetup> setup;
};
LoadedModel load_model(const std::filesystem::path& stem);

}  // namespace nervesynth::model
