#include "nervesynth/downstream/downstream.hpp"

#include <algorithm>
#include <cmath>

#include "nervesynth/common/error.hpp"
#include "nervesynth/metrics/metrics.hpp"
#include "nervesynth/optim/adam.hpp"
#include "nervesynth/tensor/ops.hpp"

namespace nervesynth::downstream {

namespace {

Tensor he_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(in * k * k));
  std::vector<double> w(out * in * k * k);
  for (auto& v : w) v = normal(rng, 0.0, sd);
  return Tensor({out, in, k, k}, std::move(w), true);
}

Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

std::size_t count(const std::vector<Tensor>& ps) {
  std::size_t n = 0;
  for (const auto& p : ps) n += p.numel();
  return n;
}

// [b x c x h x w] -> [b*h*w x c]
Tensor pixels_as_rows(const Tensor& x) {
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<std::size_t> idx(b * hw * c);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) idx[(i * hw + p) * c + ch] = i * c * hw + ch * hw + p;
  return gather(x, idx, {b * hw, c});
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  auto d = logits.data();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (d[i * c + j] > d[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

void check_examples(const std::vector<Example>& examples, const char* what, bool need_masks) {
  if (examples.empty()) throw DataError(std::string(what) + " set is empty");
  const std::size_t s = examples.front().image.width;
  for (const auto& e : examples) {
    if (e.image.width != s || e.image.height != s) throw DimensionError(std::string(what) + " images differ in size");
    if (need_masks && (e.mask.width != s || e.mask.height != s)) {
      throw DataError(std::string(what) + " example lacks a mask of matching size");
    }
  }
}

// Seeded minibatch loop shared by both models. `loss_fn` builds the loss for
// a batch of example indices.
template <class LossFn>
double fit(const std::vector<Tensor>& params, std::size_t n, std::uint64_t seed, const TrainOptions& o,
           LossFn&& loss_fn) {
  if (o.epochs < 1 || o.batch_size == 0) throw ConfigError("epochs and batch size must be positive");
  optim::Adam adam(params, {.lr = o.lr});
  Rng rng(derive_seed(seed, 0xB47C));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  double last = 0.0;
  for (int e = 0; e < o.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += o.batch_size) {
      const std::size_t end = std::min(n, start + o.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      adam.zero_grad();
      Tensor loss = loss_fn(idx);
      if (!std::isfinite(loss.item())) throw NumericalError("non-finite downstream training loss");
      loss.backward();
      adam.step();
      epoch_loss += loss.item();
      ++batches;
    }
    last = epoch_loss / static_cast<double>(batches);
  }
  return last;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

}  // namespace

std::string regime_name(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::real_only: return "A_real_only";
    case RegimeKind::hybrid: return "B_hybrid";
    case RegimeKind::synthetic_only: return "C_synthetic_only";
  }
  return "";
}

RegimeKind parse_regime(const std::string& name) {
  if (name == "A" || name == "A_real_only" || name == "real_only") return RegimeKind::real_only;
  if (name == "B" || name == "B_hybrid" || name == "hybrid") return RegimeKind::hybrid;
  if (name == "C" || name == "C_synthetic_only" || name == "synthetic_only") return RegimeKind::synthetic_only;
  throw ConfigError("unknown regime '" + name + "' (expected A_real_only, B_hybrid or C_synthetic_only)");
}

std::vector<Example> load_examples(const datagen::Manifest& manifest, datagen::Split split, std::size_t size) {
  std::vector<Example> out;
  for (const auto* r : manifest.select(split)) {
    auto s = datagen::load_sample(manifest, *r);
    if (s.image.width != s.image.height || s.image.width % size != 0) {
      throw DataError("image " + r->id + " is not a square multiple of " + std::to_string(size));
    }
    const std::size_t f = s.image.width / size;
    Example e;
    e.label = r->class_id;
    e.image = f == 1 ? std::move(s.image) : datagen::downsample_image(s.image, f);
    if (!s.mask.data.empty()) e.mask = f == 1 ? std::move(s.mask) : datagen::downsample_mask(s.mask, f);
    out.push_back(std::move(e));
  }
  return out;
}

TrainingSet assemble(const Regime& regime, std::uint64_t seed, std::size_t size) {
  const auto real = datagen::load_manifest(regime.real_manifest);
  TrainingSet ts;
  ts.test_hash = datagen::manifest_hash(real, datagen::Split::test);
  ts.test = load_examples(real, datagen::Split::test, size);
  if (ts.test.empty()) throw DataError("real manifest has no test split");

  std::vector<Example> synthetic;
  if (regime.kind != RegimeKind::real_only) {
    const auto syn = datagen::load_manifest(regime.synthetic_manifest);
    synthetic = load_examples(syn, datagen::Split::train, size);
    auto more = load_examples(syn, datagen::Split::test, size);
    synthetic.insert(synthetic.end(), std::make_move_iterator(more.begin()), std::make_move_iterator(more.end()));
  }
  if (regime.kind != RegimeKind::synthetic_only) ts.train = load_examples(real, datagen::Split::train, size);
  if (regime.kind == RegimeKind::hybrid) {
    if (regime.hybrid_ratio < 0.0) throw ConfigError("hybrid ratio must be non-negative");
    Rng rng(derive_seed(seed, 0x4B1D));
    std::shuffle(synthetic.begin(), synthetic.end(), rng);
    const auto want = static_cast<std::size_t>(std::lround(regime.hybrid_ratio * static_cast<double>(ts.train.size())));
    synthetic.resize(std::min(want, synthetic.size()));
  }
  ts.train.insert(ts.train.end(), std::make_move_iterator(synthetic.begin()), std::make_move_iterator(synthetic.end()));
  if (ts.train.empty()) throw DataError("regime " + regime_name(regime.kind) + " has no training samples");
  return ts;
}

Classifier::Classifier(std::uint64_t seed, int n_classes) {
  Rng rng(seed);
  c1_ = he_conv(8, 1, 3, rng);
  b1_ = zeros(8);
  c2_ = he_conv(16, 8, 3, rng);
  b2_ = zeros(16);
  c3_ = he_conv(32, 16, 3, rng);
  b3_ = zeros(32);
  const auto k = static_cast<std::size_t>(n_classes);
  std::vector<double> w(k * 32);
  for (auto& v : w) v = normal(rng, 0.0, 1.0 / std::sqrt(32.0));
  fc_ = Tensor({k, 32}, std::move(w), true);
  fcb_ = zeros(k);
}

Tensor Classifier::forward(const Tensor& x) const {
  Tensor h = relu(conv2d(x, c1_, b1_, 2, 1));
  h = relu(conv2d(h, c2_, b2_, 2, 1));
  h = relu(conv2d(h, c3_, b3_, 2, 1));
  const std::size_t b = h.dim(0), c = h.dim(1), hw = h.dim(2) * h.dim(3);
  Tensor pooled = mean_axis(reshape(h, {b * c, hw}), 1);
  return linear(reshape(pooled, {b, c}), fc_, fcb_);
}

std::vector<Tensor> Classifier::parameters() const { return {c1_, b1_, c2_, b2_, c3_, b3_, fc_, fcb_}; }
std::size_t Classifier::param_count() const { return count(parameters()); }

Segmenter::Segmenter(std::uint64_t seed) {
  Rng rng(seed);
  e1_ = he_conv(8, 1, 3, rng);
  eb1_ = zeros(8);
  e2_ = he_conv(16, 8, 3, rng);
  eb2_ = zeros(16);
  e3_ = he_conv(16, 16, 3, rng);
  eb3_ = zeros(16);
  d1_ = he_conv(8, 24, 3, rng);
  db1_ = zeros(8);
  d2_ = he_conv(2, 8, 1, rng);
  db2_ = zeros(2);
}

Tensor Segmenter::forward(const Tensor& x) const {
  if (x.dim(2) % 2 || x.dim(3) % 2) throw DimensionError("segmenter input size must be even");
  Tensor s1 = relu(conv2d(x, e1_, eb1_, 1, 1));
  Tensor h = relu(conv2d(s1, e2_, eb2_, 2, 1));
  h = relu(conv2d(h, e3_, eb3_, 1, 1));
  h = upsample_nearest(h, 2);
  h = relu(conv2d(concat({h, s1}, 1), d1_, db1_, 1, 1));
  return conv2d(h, d2_, db2_, 1, 0);
}

std::vector<Tensor> Segmenter::parameters() const {
  return {e1_, eb1_, e2_, eb2_, e3_, eb3_, d1_, db1_, d2_, db2_};
}
std::size_t Segmenter::param_count() const { return count(parameters()); }

Tensor images_tensor(const std::vector<Example>& ex, std::span<const std::size_t> index) {
  const std::size_t s = ex.front().image.width;
  std::vector<double> d;
  d.reserve(index.size() * s * s);
  for (auto i : index)
    for (double v : ex[i].image.pixels) d.push_back(2.0 * v - 1.0);
  return Tensor({index.size(), 1, s, s}, std::move(d));
}

ClassifierResult train_classifier(const std::vector<Example>& train, const std::vector<Example>& test,
                                  std::uint64_t seed, const TrainOptions& o) {
  check_examples(train, "training", false);
  check_examples(test, "test", false);
  std::vector<int> labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) labels[i] = train[i].label;
  if (o.shuffle_labels) {
    Rng rng(derive_seed(seed, 0x5AFF1E));
    std::shuffle(labels.begin(), labels.end(), rng);
  }
  Classifier model(derive_seed(seed, 1));
  ClassifierResult r;
  r.final_loss = fit(model.parameters(), train.size(), seed, o, [&](std::span<const std::size_t> idx) {
    std::vector<int> y;
    for (auto i : idx) y.push_back(labels[i]);
    return cross_entropy(model.forward(images_tensor(train, idx)), y);
  });
  NoGradGuard ng;
  const auto all = all_indices(test.size());
  r.predictions = argmax_rows(model.forward(images_tensor(test, all)));
  std::vector<int> truth;
  for (const auto& e : test) truth.push_back(e.label);
  r.accuracy = metrics::accuracy(r.predictions, truth);
  r.train_size = train.size();
  r.test_size = test.size();
  r.param_count = model.param_count();
  return r;
}

Segmenter fit_segmenter(const std::vector<Example>& train, std::uint64_t seed, const TrainOptions& o,
                        double* final_loss) {
  check_examples(train, "training", true);
  Segmenter model(derive_seed(seed, 2));
  const double loss = fit(model.parameters(), train.size(), seed, o, [&](std::span<const std::size_t> idx) {
    std::vector<int> y;
    for (auto i : idx)
      for (auto v : train[i].mask.data) y.push_back(v ? 1 : 0);
    return cross_entropy(pixels_as_rows(model.forward(images_tensor(train, idx))), y);
  });
  if (final_loss) *final_loss = loss;
  return model;
}

biomarkers::Mask segment(const Segmenter& model, const io::GrayImage& image) {
  NoGradGuard ng;
  std::vector<Example> one_example(1);
  one_example[0].image = image;
  const std::size_t one[1] = {0};
  biomarkers::Mask out(image.width, image.height);
  const auto labels = argmax_rows(pixels_as_rows(model.forward(images_tensor(one_example, one))));
  for (std::size_t i = 0; i < labels.size(); ++i) out.data[i] = labels[i] ? 1 : 0;
  return out;
}

SegmenterResult train_segmenter(const std::vector<Example>& train, const std::vector<Example>& test,
                                std::uint64_t seed, const TrainOptions& o) {
  check_examples(test, "test", true);
  SegmenterResult r;
  const Segmenter model = fit_segmenter(train, seed, o, &r.final_loss);
  std::vector<std::uint8_t> pred, truth;
  for (const auto& e : test) {
    const auto m = segment(model, e.image);
    pred.insert(pred.end(), m.data.begin(), m.data.end());
    truth.insert(truth.end(), e.mask.data.begin(), e.mask.data.end());
  }
  r.miou = metrics::miou(pred, truth, 2);
  const bool fg = std::any_of(pred.begin(), pred.end(), [](auto v) { return v == 1; }) ||
                  std::any_of(truth.begin(), truth.end(), [](auto v) { return v == 1; });
  r.foreground_iou = fg ? metrics::class_iou(pred, truth, 1) : 1.0;
  r.train_size = train.size();
  r.test_size = test.size();
  r.param_count = model.param_count();
  return r;
}

void verify_isolation(const Regime& regime, std::uint64_t recorded) {
  const auto m = datagen::load_manifest(regime.real_manifest);
  if (datagen::manifest_hash(m, datagen::Split::test) != recorded) {
    throw ContractError("real test split changed during training");
  }
}

ClassifierResult train_classifier(const Regime& regime, std::uint64_t seed, const TrainOptions& o) {
  const auto ts = assemble(regime, seed);
  auto r = train_classifier(ts.train, ts.test, seed, o);
  verify_isolation(regime, ts.test_hash);
  return r;
}

SegmenterResult train_segmenter(const Regime& regime, std::uint64_t seed, const TrainOptions& o) {
  const auto ts = assemble(regime, seed);
  auto r = train_segmenter(ts.train, ts.test, seed, o);
  verify_isolation(regime, ts.test_hash);
  return r;
}

}  // namespace nervesynth::downstream
