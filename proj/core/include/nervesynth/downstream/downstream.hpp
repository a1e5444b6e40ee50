#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/datagen/datagen.hpp"
#include "nervesynth/io/image.hpp"
#include "nervesynth/tensor/tensor.hpp"

namespace nervesynth::downstream {

enum class RegimeKind { real_only, hybrid, synthetic_only };

std::string regime_name(RegimeKind kind);  // "A_real_only", "B_hybrid", "C_synthetic_only"
RegimeKind parse_regime(const std::string& name);

struct Regime {
  RegimeKind kind = RegimeKind::real_only;
  std::filesystem::path real_manifest;
  std::filesystem::path synthetic_manifest;  // unused for real_only
  // Synthetic samples added per real training sample in the hybrid regime.
  double hybrid_ratio = 1.0;
};

struct Example {
  io::GrayImage image;
  biomarkers::Mask mask;
  int label = 0;
};

// Loads a split at `size` x `size`, block-averaging larger images.
std::vector<Example> load_examples(const datagen::Manifest& manifest, datagen::Split split,
                                   std::size_t size = 32);

struct TrainingSet {
  std::vector<Example> train;
  std::vector<Example> test;    // always the real held-out split
  std::uint64_t test_hash = 0;  // recorded before any training
};

// Assembles the regime's training data. Hybrid draws a seeded subset of the
// synthetic pool, up to hybrid_ratio times the real training size.
TrainingSet assemble(const Regime& regime, std::uint64_t seed, std::size_t size = 32);

struct TrainOptions {
  int epochs = 30;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  // Permutes training labels; a chance-level control.
  bool shuffle_labels = false;
};

// conv(1->8, s2) -> conv(8->16, s2) -> conv(16->32, s2), ReLU, global mean
// pool, linear to 3 logits.
class Classifier {
 public:
  explicit Classifier(std::uint64_t seed, int n_classes = 3);
  Tensor forward(const Tensor& images) const;  // [b x 1 x s x s] -> [b x classes]
  std::vector<Tensor> parameters() const;
  std::size_t param_count() const;

 private:
  Tensor c1_, b1_, c2_, b2_, c3_, b3_, fc_, fcb_;
};

// Two-level encoder-decoder with one skip connection; per-pixel logits for
// background and fiber.
class Segmenter {
 public:
  explicit Segmenter(std::uint64_t seed);
  Tensor forward(const Tensor& images) const;  // [b x 1 x s x s] -> [b x 2 x s x s]
  std::vector<Tensor> parameters() const;
  std::size_t param_count() const;

 private:
  Tensor e1_, eb1_, e2_, eb2_, e3_, eb3_, d1_, db1_, d2_, db2_;
};

Tensor images_tensor(const std::vector<Example>& examples, std::span<const std::size_t> index);

struct ClassifierResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::size_t param_count = 0;
  double final_loss = 0.0;
};

struct SegmenterResult {
  double miou = 0.0;
  double foreground_iou = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  std::size_t param_count = 0;
  double final_loss = 0.0;
};

ClassifierResult train_classifier(const std::vector<Example>& train, const std::vector<Example>& test,
                                  std::uint64_t seed, const TrainOptions& options = {});
SegmenterResult train_segmenter(const std::vector<Example>& train, const std::vector<Example>& test,
                                std::uint64_t seed, const TrainOptions& options = {});

// Trains a segmenter without scoring it; writes the last epoch's mean loss
// to `final_loss` when given.
Segmenter fit_segmenter(const std::vector<Example>& train, std::uint64_t seed, const TrainOptions& options = {},
                        double* final_loss = nullptr);
// Per-pixel argmax of a trained segmenter.
biomarkers::Mask segment(const Segmenter& model, const io::GrayImage& image);

// Throws ContractError if the real test split no longer hashes to `recorded`.
void verify_isolation(const Regime& regime, std::uint64_t recorded);

// Regime-level entry points: assemble, train, then confirm the test split
// hash is unchanged before scoring.
ClassifierResult train_classifier(const Regime& regime, std::uint64_t seed, const TrainOptions& options = {});
SegmenterResult train_segmenter(const Regime& regime, std::uint64_t seed, const TrainOptions& options = {});

}  // namespace nervesynth::downstream
