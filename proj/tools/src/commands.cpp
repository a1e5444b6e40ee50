#include "nervesynth/cli/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "nervesynth/adapt/attach.hpp"
#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/datagen/datagen.hpp"
#include "nervesynth/diffusion/ddpm.hpp"
#include "nervesynth/downstream/downstream.hpp"
#include "nervesynth/metrics/metrics.hpp"
#include "nervesynth/model/mmdit.hpp"
#include "nervesynth/optim/adam.hpp"

namespace nervesynth::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Salts for the streams derived from the experiment seed.
constexpr std::uint64_t kBaseModelSalt = 0x11;
constexpr std::uint64_t kAdapterSalt = 0x22;
constexpr std::uint64_t kBatchSalt = 0x33;
constexpr std::uint64_t kProceduralMaskSalt = 0x44;
constexpr std::uint64_t kSamplerSalt = 0x55;
constexpr std::uint64_t kSegmenterSalt = 0x66;
constexpr std::uint64_t kDownstreamSalt = 0x77;

void say(const Log& log, const std::string& msg) {
  if (log) log(msg);
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<int> requested_classes(const std::string& name) {
  if (name == "all") return {0, 1, 2};
  return {model::parse_class_name(name)};
}

json stat_json(const biomarkers::Stat& s) { return {{"mean", number(s.mean)}, {"sd", number(s.sd)}, {"n", s.n}}; }

biomarkers::Stat mean_sd(const std::vector<double>& v) { return biomarkers::summarize(v); }

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw UndefinedValueError("mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

biomarkers::Mask downsample_to(const biomarkers::Mask& m, std::size_t size) {
  if (m.width == size) return m;
  if (m.width % size != 0) throw DataError("mask size is not a multiple of " + std::to_string(size));
  return datagen::downsample_mask(m, m.width / size);
}

io::GrayImage downsample_to(const io::GrayImage& img, std::size_t size) {
  if (img.width == size) return img;
  if (img.width % size != 0) throw DataError("image size is not a multiple of " + std::to_string(size));
  return datagen::downsample_image(img, img.width / size);
}

// Biomarker thresholds are set for 384 px fields; scale them to `size`.
biomarkers::ReportOptions report_options_for(std::size_t size) {
  const double f = static_cast<double>(size) / 384.0;
  biomarkers::ReportOptions o;
  o.trunk_min_len_px = biomarkers::kDefaultTrunkMinLengthPx * f;
  o.graph.spur_length_px = std::max(1.0, o.graph.spur_length_px * f);
  o.graph.junction_merge_px = std::max(1.5, o.graph.junction_merge_px * f);
  o.graph.chord_stride_px =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(o.graph.chord_stride_px) * f)));
  return o;
}

biomarkers::Geometry geometry_for(std::size_t size) {
  biomarkers::Geometry g;
  g.width = size;
  g.height = size;
  g.pixel_pitch_um = 400.0 / static_cast<double>(size);
  return g;
}

// Mean intensity inside the mask minus mean outside; undefined when either
// side is empty.
std::optional<double> foreground_contrast(std::span<const double> pixels, const biomarkers::Mask& mask) {
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (mask.data[i]) {
      in += pixels[i];
      ++n_in;
    } else {
      out += pixels[i];
      ++n_out;
    }
  }
  if (n_in == 0 || n_out == 0) return std::nullopt;
  return in / static_cast<double>(n_in) - out / static_cast<double>(n_out);
}

std::string format_csv_row(std::size_t step, double lr, double loss, double ema) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", step, lr, loss, ema);
  return buf;
}

struct LoadedSet {
  std::vector<const datagen::SampleRecord*> records;
  std::vector<io::GrayImage> images;
  std::vector<biomarkers::Mask> masks;
  std::vector<int> labels;
};

// Loads every sample of a manifest (optionally one split) at `size`.
LoadedSet load_set(const datagen::Manifest& m, std::optional<datagen::Split> split, std::size_t size) {
  LoadedSet out;
  for (const auto& r : m.samples) {
    if (split && r.split != *split) continue;
    auto s = datagen::load_sample(m, r);
    out.records.push_back(&r);
    out.images.push_back(downsample_to(s.image, size));
    out.masks.push_back(s.mask.data.empty() ? biomarkers::Mask(size, size) : downsample_to(s.mask, size));
    out.labels.push_back(r.class_id);
  }
  return out;
}

std::vector<std::size_t> indices_of_class(const std::vector<int>& labels, int c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

}  // namespace

json number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double number_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw DataError("expected a number in report JSON");
}

// --------------------------------------------------------------- gen-data

json run_gen_data(const ExperimentConfig& config, const Log& log) {
  config.validate();
  const fs::path dir = config.data.dir;
  say(log, "generating " + std::to_string(config.data.n_per_class) + " samples per class in " + dir.string());
  datagen::DatasetOptions opts;
  opts.image_size = config.data.image_size;
  opts.extension = config.data.extension;
  opts.test_fraction = config.data.test_fraction;
  const auto manifest = datagen::gen_dataset(config.data.n_per_class, config.seed, dir, opts);
  archive_config(config, dir);

  json classes = json::object();
  for (int c = 0; c < model::kNumClasses; ++c) {
    json entry;
    entry["train"] = manifest.select(datagen::Split::train, c).size();
    entry["test"] = manifest.select(datagen::Split::test, c).size();
    std::vector<double> len;
    for (const auto& r : manifest.samples)
      if (r.class_id == c && r.truth) len.push_back(r.truth->length_px);
    entry["mean_length_px"] = len.empty() ? json(nullptr) : number(mean_of(len));
    classes[model::class_name(c)] = entry;
  }
  json summary = {{"format", "nervesynth-data-summary"},
                  {"version", 1},
                  {"seed", config.seed},
                  {"image_size", manifest.image_size},
                  {"samples", manifest.samples.size()},
                  {"classes", classes},
                  {"manifest_hash", hex(datagen::manifest_hash(manifest))},
                  {"train_hash", hex(datagen::manifest_hash(manifest, datagen::Split::train))},
                  {"test_hash", hex(datagen::manifest_hash(manifest, datagen::Split::test))}};
  write_json(dir / "summary.json", summary);
  return summary;
}

// ------------------------------------------------------------------ train

json run_train(const ExperimentConfig& config, const Log& log) {
  config.validate();
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  archive_config(config, out);

  const auto manifest = datagen::load_manifest(config.data.dir / "manifest.json");
  const auto train = downstream::load_examples(manifest, datagen::Split::train, config.model.image_size);
  if (train.empty()) throw DataError("training split is empty");
  const std::size_t pixels = config.model.pixels();

  model::MmditConfig mc = config.model;
  mc.seed = derive_seed(config.seed, kBaseModelSalt);
  model::Mmdit net(mc);

  adapt::AttachOptions ao;
  ao.kind = parse_adapter_kind(config.adapter.kind);
  ao.rank = config.adapter.rank;
  ao.scale = config.adapter.scale;
  ao.seed = derive_seed(config.seed, kAdapterSalt);
  const auto attach = adapt::attach_adapters(net, config.adapter.targets, ao);
  const std::uint64_t base_hash = net.base_hash();
  say(log, "trainable " + std::to_string(attach.trainable) + " of " +
               std::to_string(attach.base_total + attach.trainable) + " parameters");

  optim::AdamOptions adam_opts;
  adam_opts.lr = config.optim.lr;
  adam_opts.beta1 = config.optim.beta1;
  adam_opts.beta2 = config.optim.beta2;
  adam_opts.eps = config.optim.eps;
  adam_opts.weight_decay = config.optim.weight_decay;
  optim::Adam adam(adapt::trainable_parameters(net), adam_opts);
  const optim::CosineWarmup lr_schedule(config.optim.lr, config.optim.warmup_steps, config.optim.max_steps,
                                        config.optim.cycles);
  const auto schedule =
      diffusion::make_schedule(config.diffusion.steps, config.diffusion.beta_start, config.diffusion.beta_end);
  const diffusion::LossWeights weights{config.diffusion.foreground_weight, config.diffusion.background_weight};

  Rng rng(derive_seed(config.seed, kBatchSalt));
  const std::size_t bs = config.optim.batch_size;
  std::ofstream csv(out / "loss.csv", std::ios::binary);
  csv << "step,lr,loss,ema\n";
  std::vector<double> losses;
  losses.reserve(config.optim.max_steps);
  double ema = 0.0;
  for (std::size_t step = 0; step < config.optim.max_steps; ++step) {
    std::vector<double> x, mk;
    std::vector<int> cls;
    x.reserve(bs * pixels);
    mk.reserve(bs * pixels);
    for (std::size_t b = 0; b < bs; ++b) {
      const auto& e = train[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(train.size()) - 1))];
      for (double v : e.image.pixels) x.push_back(diffusion::to_model_range(v));
      for (auto v : e.mask.data) mk.push_back(v ? 1.0 : 0.0);
      cls.push_back(e.label);
    }
    diffusion::Batch batch{Tensor({bs, pixels}, std::move(x)), Tensor({bs, pixels}, std::move(mk)), std::move(cls)};
    adam.zero_grad();
    Tensor loss = diffusion::training_loss(net, batch, schedule, rng, weights);
    const double l = loss.item();
    if (!std::isfinite(l)) throw NumericalError("non-finite training loss at step " + std::to_string(step));
    loss.backward();
    const double lr = lr_schedule.lr(step);
    adam.step(lr);
    ema = step == 0 ? l : config.optim.ema * ema + (1.0 - config.optim.ema) * l;
    losses.push_back(l);
    csv << format_csv_row(step, lr, l, ema);
    if ((step + 1) % 250 == 0 || step + 1 == config.optim.max_steps) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "step %zu loss %.4f ema %.4f", step + 1, l, ema);
      say(log, buf);
    }
  }
  csv.close();
  if (!csv) throw DataError("failed writing " + (out / "loss.csv").string());

  if (net.base_hash() != base_hash) throw ContractError("base weights changed during adapter training");

  model::AdapterSetup setup{ao, config.adapter.targets};
  model::save_model(net, setup, out / "model");

  const std::size_t n = losses.size();
  const std::size_t head = std::min<std::size_t>(50, n), tail = std::min<std::size_t>(200, n);
  const double initial = mean_of(std::vector<double>(losses.begin(), losses.begin() + static_cast<long>(head)));
  const double final_loss = mean_of(std::vector<double>(losses.end() - static_cast<long>(tail), losses.end()));
  json summary = {{"format", "nervesynth-train-summary"},
                  {"version", 1},
                  {"seed", config.seed},
                  {"steps", n},
                  {"train_samples", train.size()},
                  {"adapter", config.adapter.kind},
                  {"rank", config.adapter.rank},
                  {"targets", config.adapter.targets},
                  {"trainable_params", attach.trainable},
                  {"base_params", attach.base_total},
                  {"trainable_fraction", number(attach.trainable_fraction())},
                  {"base_hash", hex(base_hash)},
                  {"data_hash", hex(datagen::manifest_hash(manifest, datagen::Split::train))},
                  {"initial_loss", number(initial)},
                  {"final_loss", number(final_loss)},
                  {"final_ema", number(ema)},
                  {"loss_reduction", number(1.0 - final_loss / initial)}};
  write_json(out / "train_summary.json", summary);
  return summary;
}

// ----------------------------------------------------------------- sample

json run_sample(const ExperimentConfig& config, const fs::path& checkpoint, const Log& log) {
  config.validate();
  auto loaded = model::load_model(checkpoint);
  const auto& net = loaded.model;
  const std::size_t size = net.config().image_size;
  const fs::path out = config.output_dir;
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  archive_config(config, out);

  const auto schedule =
      diffusion::make_schedule(config.diffusion.steps, config.diffusion.beta_start, config.diffusion.beta_end);
  const bool from_dataset = config.sample.mask_source == "dataset";
  std::optional<datagen::Manifest> real;
  if (from_dataset) real = datagen::load_manifest(config.data.dir / "manifest.json");

  datagen::Manifest manifest;
  manifest.image_size = size;
  manifest.pixel_pitch_um = 400.0 / static_cast<double>(size);
  manifest.seed = config.seed;
  manifest.root = out;

  json classes = json::object();
  for (int c : requested_classes(config.sample.class_name)) {
    const std::string cname = model::class_name(c);
    std::vector<biomarkers::Mask> masks;
    std::vector<std::string> sources;
    std::vector<std::uint64_t> seeds;
    if (from_dataset) {
      const auto held_out = real->select(datagen::Split::test, c);
      if (held_out.empty()) throw DataError("no held-out masks for class " + cname);
      for (int i = 0; i < config.sample.n; ++i) {
        const auto* r = held_out[static_cast<std::size_t>(i) % held_out.size()];
        masks.push_back(downsample_to(datagen::load_sample(*real, *r).mask, size));
        sources.push_back(r->id);
        seeds.push_back(r->seed);
      }
    } else {
      for (int i = 0; i < config.sample.n; ++i) {
        const auto s = derive_seed(config.seed, kProceduralMaskSalt * 1000000 + static_cast<std::uint64_t>(c) * 100000 +
                                                    static_cast<std::uint64_t>(i));
        masks.push_back(downsample_to(datagen::gen_mask(c, s, config.data.image_size, config.data.image_size).mask, size));
        sources.emplace_back();
        seeds.push_back(s);
      }
    }

    std::vector<double> contrast;
    for (std::size_t start = 0; start < masks.size(); start += config.sample.batch_size) {
      const std::size_t end = std::min(masks.size(), start + config.sample.batch_size);
      std::vector<model::ConditionBundle> bundles;
      for (std::size_t i = start; i < end; ++i) {
        model::ConditionBundle b;
        b.mask.assign(masks[i].data.begin(), masks[i].data.end());
        b.class_id = c;
        bundles.push_back(std::move(b));
      }
      diffusion::SampleOptions so;
      so.stride = config.diffusion.sample_stride;
      so.seed = derive_seed(config.seed, kSamplerSalt * 1000000 + static_cast<std::uint64_t>(c) * 100000 + start);
      const auto images = diffusion::sample(net, bundles, schedule, so);
      for (std::size_t k = 0; k < images.size(); ++k) {
        const std::size_t i = start + k;
        char id[64];
        std::snprintf(id, sizeof id, "gen_%s_%04zu", cname.c_str(), i);
        datagen::SampleRecord r;
        r.id = id;
        r.class_id = c;
        r.split = datagen::Split::train;
        r.image = fs::path("images") / (r.id + ".png");
        r.mask = fs::path("masks") / (r.id + ".png");
        r.seed = seeds[i];
        r.source = sources[i];
        io::GrayImage img{size, size, images[k]};
        io::write_image(out / r.image, img);
        io::write_image(out / r.mask, datagen::image_from_mask(masks[i]));
        // Score what was written, after 8-bit quantization.
        const auto stored = io::read_image(out / r.image);
        if (auto fc = foreground_contrast(stored.pixels, masks[i])) contrast.push_back(*fc);
        manifest.samples.push_back(std::move(r));
      }
      say(log, cname + ": " + std::to_string(end) + "/" + std::to_string(masks.size()) + " sampled");
    }
    classes[cname] = {{"n", masks.size()},
                      {"foreground_contrast", contrast.empty() ? json(nullptr) : stat_json(mean_sd(contrast))}};
  }
  datagen::write_manifest(manifest, out / "manifest.json");
  const auto reloaded = datagen::load_manifest(out / "manifest.json");
  json summary = {{"format", "nervesynth-sample-summary"},
                  {"version", 1},
                  {"seed", config.seed},
                  {"mask_source", config.sample.mask_source},
                  {"sample_stride", config.diffusion.sample_stride},
                  {"image_size", size},
                  {"checkpoint_base_hash", hex(loaded.model.base_hash())},
                  {"classes", classes},
                  {"manifest_hash", hex(datagen::manifest_hash(reloaded))}};
  write_json(out / "sample_summary.json", summary);
  return summary;
}

// ------------------------------------------------------------------- eval

namespace {

json pillar_fidelity(const LoadedSet& real, const LoadedSet& gen, const metrics::FeatureExtractor& fx,
                     const std::vector<int>& classes) {
  const auto real_feat = fx.extract(real.images);
  const auto gen_feat = fx.extract(gen.images);

  std::map<std::string, std::size_t> real_by_id;
  for (std::size_t i = 0; i < real.records.size(); ++i) real_by_id[real.records[i]->id] = i;

  auto fid_of = [&](const std::vector<std::size_t>& ri, const std::vector<std::size_t>& gi) -> json {
    if (ri.size() < 2 || gi.size() < 2) return nullptr;
    std::vector<metrics::FeatureVec> a, b;
    for (auto i : ri) a.push_back(real_feat[i]);
    for (auto i : gi) b.push_back(gen_feat[i]);
    return number(metrics::fid(metrics::gaussian_stats(a), metrics::gaussian_stats(b)));
  };

  json per_class = json::object();
  std::vector<std::size_t> all_r, all_g;
  std::vector<double> all_psnr, all_ssim;
  for (int c : classes) {
    const auto ri = indices_of_class(real.labels, c);
    const auto gi = indices_of_class(gen.labels, c);
    all_r.insert(all_r.end(), ri.begin(), ri.end());
    all_g.insert(all_g.end(), gi.begin(), gi.end());
    std::vector<double> ps, ss;
    for (auto g : gi) {
      const auto& rec = *gen.records[g];
      auto it = real_by_id.find(rec.source.empty() ? rec.id : rec.source);
      if (it == real_by_id.end()) continue;
      ps.push_back(metrics::psnr(real.images[it->second], gen.images[g]));
      ss.push_back(metrics::ssim(real.images[it->second], gen.images[g]));
    }
    all_psnr.insert(all_psnr.end(), ps.begin(), ps.end());
    all_ssim.insert(all_ssim.end(), ss.begin(), ss.end());
    per_class[model::class_name(c)] = {{"n_real", ri.size()},
                                       {"n_generated", gi.size()},
                                       {"n_pairs", ps.size()},
                                       {"fid", fid_of(ri, gi)},
                                       {"psnr", ps.empty() ? json(nullptr) : number(mean_of(ps))},
                                       {"ssim", ss.empty() ? json(nullptr) : number(mean_of(ss))}};
  }
  json overall = {{"n_real", all_r.size()},
                  {"n_generated", all_g.size()},
                  {"n_pairs", all_psnr.size()},
                  {"fid", fid_of(all_r, all_g)},
                  {"psnr", all_psnr.empty() ? json(nullptr) : number(mean_of(all_psnr))},
                  {"ssim", all_ssim.empty() ? json(nullptr) : number(mean_of(all_ssim))}};

  // Feature-space spread within and between classes.
  auto diversity = [&](const std::vector<metrics::FeatureVec>& feat, const std::vector<int>& labels) {
    json d = json::object();
    std::map<int, double> intra;
    std::vector<metrics::FeatureVec> f;
    std::vector<int> l;
    for (std::size_t i = 0; i < feat.size(); ++i) {
      if (std::find(classes.begin(), classes.end(), labels[i]) == classes.end()) continue;
      f.push_back(feat[i]);
      l.push_back(labels[i]);
    }
    if (!f.empty()) intra = metrics::intra_class_diversity(f, l);
    json per = json::object();
    for (int c : classes) per[model::class_name(c)] = intra.count(c) ? number(intra.at(c)) : json(nullptr);
    d["intra_class"] = per;
    std::set<int> present(l.begin(), l.end());
    d["separability"] = present.size() >= 2 ? number(metrics::inter_class_separability(f, l)) : json(nullptr);
    return d;
  };
  json dr = diversity(real_feat, real.labels);
  json dg = diversity(gen_feat, gen.labels);
  json rel = json::object();
  for (int c : classes) {
    const auto name = model::class_name(c);
    const auto& a = dr["intra_class"][name];
    const auto& b = dg["intra_class"][name];
    rel[name] = a.is_null() || b.is_null() ? json(nullptr)
                                           : number(metrics::relative_difference(number_from_json(a),
                                                                                 number_from_json(b)));
  }
  json rel_sep = dr["separability"].is_null() || dg["separability"].is_null()
                     ? json(nullptr)
                     : number(metrics::relative_difference(number_from_json(dr["separability"]),
                                                           number_from_json(dg["separability"])));
  return {{"classes", per_class},
          {"overall", overall},
          {"diversity",
           {{"real", dr},
            {"generated", dg},
            {"relative_difference", {{"intra_class", rel}, {"separability", rel_sep}}}}}};
}

json cohort_json(const biomarkers::CohortSummary& s) {
  return {{"n", s.cnfl.n},
          {"cnfl", stat_json(s.cnfl)},
          {"cnfd", stat_json(s.cnfd)},
          {"cnbd", stat_json(s.cnbd)},
          {"cnfw", stat_json(s.cnfw)},
          {"undefined_cnfw", s.undefined_cnfw}};
}

json pillar_biomarkers(const ExperimentConfig& config, const datagen::Manifest& real_m, const LoadedSet& real_test,
                       const LoadedSet& gen, const std::vector<int>& classes, const Log& log) {
  const std::size_t size = config.model.image_size;
  const auto opts = report_options_for(size);
  const auto geom = geometry_for(size);

  say(log, "training the evaluation segmenter");
  const auto real_train = downstream::load_examples(real_m, datagen::Split::train, size);
  downstream::TrainOptions to;
  to.epochs = config.eval.segmenter_epochs;
  const auto seg = downstream::fit_segmenter(real_train, derive_seed(config.seed, kSegmenterSalt), to);

  json per_class = json::object();
  for (int c : classes) {
    const std::string name = model::class_name(c);
    std::vector<biomarkers::BiomarkerReport> annotated, real_seg, gen_seg;
    for (auto i : indices_of_class(real_test.labels, c)) {
      const auto full = datagen::load_sample(real_m, *real_test.records[i]).mask;
      biomarkers::Geometry fg = geometry_for(full.width);
      fg.pixel_pitch_um = real_m.pixel_pitch_um;
      annotated.push_back(biomarkers::report(full, fg, report_options_for(full.width)));
      real_seg.push_back(biomarkers::report(downstream::segment(seg, real_test.images[i]), geom, opts));
    }
    for (auto i : indices_of_class(gen.labels, c)) {
      gen_seg.push_back(biomarkers::report(downstream::segment(seg, gen.images[i]), geom, opts));
    }
    const auto a = biomarkers::summarize_cohort(name, "real_annotation", annotated);
    const auto r = biomarkers::summarize_cohort(name, "real_segmented", real_seg);
    const auto g = biomarkers::summarize_cohort(name, "generated_segmented", gen_seg);
    auto rel = [](const biomarkers::Stat& x, const biomarkers::Stat& y) -> json {
      if (x.n == 0 || y.n == 0) return nullptr;
      return number(metrics::relative_difference(x.mean, y.mean));
    };
    per_class[name] = {{"real_annotation", cohort_json(a)},
                       {"real_segmented", cohort_json(r)},
                       {"generated_segmented", cohort_json(g)},
                       {"relative_difference",
                        {{"cnfl", rel(r.cnfl, g.cnfl)},
                         {"cnfd", rel(r.cnfd, g.cnfd)},
                         {"cnbd", rel(r.cnbd, g.cnbd)},
                         {"cnfw", rel(r.cnfw, g.cnfw)}}}};
  }
  return {{"resolution_px", size}, {"classes", per_class}};
}

json pillar_downstream(const ExperimentConfig& config, const fs::path& real_manifest, const fs::path& gen_manifest,
                       const Log& log) {
  downstream::TrainOptions to;
  to.epochs = config.eval.downstream_epochs;
  json regimes = json::object();
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> scores;
  for (auto kind : {downstream::RegimeKind::real_only, downstream::RegimeKind::hybrid,
                    downstream::RegimeKind::synthetic_only}) {
    downstream::Regime regime;
    regime.kind = kind;
    regime.real_manifest = real_manifest;
    regime.synthetic_manifest = gen_manifest;
    regime.hybrid_ratio = config.eval.hybrid_ratio;
    const auto name = downstream::regime_name(kind);
    json runs = json::array();
    std::vector<double> acc, miou;
    std::size_t train_size = 0;
    for (int s = 0; s < config.eval.downstream_seeds; ++s) {
      const auto seed = derive_seed(config.seed, kDownstreamSalt * 1000 + static_cast<std::uint64_t>(s));
      const auto cr = downstream::train_classifier(regime, seed, to);
      const auto sr = downstream::train_segmenter(regime, seed, to);
      acc.push_back(cr.accuracy);
      miou.push_back(sr.miou);
      train_size = cr.train_size;
      runs.push_back({{"seed_index", s}, {"accuracy", number(cr.accuracy)}, {"miou", number(sr.miou)}});
      say(log, name + " seed " + std::to_string(s) + ": acc " + std::to_string(cr.accuracy) + " mIoU " +
                   std::to_string(sr.miou));
    }
    regimes[name] = {{"train_size", train_size},
                     {"accuracy", stat_json(mean_sd(acc))},
                     {"miou", stat_json(mean_sd(miou))},
                     {"runs", runs}};
    scores[name] = {acc, miou};
  }
  const auto& a = scores.at(downstream::regime_name(downstream::RegimeKind::real_only));
  const auto& b = scores.at(downstream::regime_name(downstream::RegimeKind::hybrid));
  return {{"regimes", regimes},
          {"hybrid_minus_real",
           {{"accuracy", number(mean_of(b.first) - mean_of(a.first))},
            {"miou", number(mean_of(b.second) - mean_of(a.second))}}}};
}

}  // namespace

json run_eval(const ExperimentConfig& config, const fs::path& real_manifest, const fs::path& generated_manifest,
              const Log& log) {
  config.validate();
  const fs::path out = config.output_dir;
  fs::create_directories(out);
  archive_config(config, out);

  const auto real_m = datagen::load_manifest(real_manifest);
  const auto gen_m = datagen::load_manifest(generated_manifest);
  const std::size_t size = config.model.image_size;
  const auto real_all = load_set(real_m, std::nullopt, size);
  const auto gen = load_set(gen_m, std::nullopt, size);
  if (real_all.images.empty() || gen.images.empty()) throw DataError("evaluation needs non-empty manifests");

  std::set<int> present(gen.labels.begin(), gen.labels.end());
  const std::vector<int> classes(present.begin(), present.end());
  std::set<int> pillars(config.eval.pillars.begin(), config.eval.pillars.end());

  json report = {{"format", "nervesynth-report"},
                 {"version", 1},
                 {"seed", config.seed},
                 {"resolution_px", size},
                 {"feature_seed", config.eval.feature_seed},
                 {"real_manifest_hash", hex(datagen::manifest_hash(real_m))},
                 {"generated_manifest_hash", hex(datagen::manifest_hash(gen_m))},
                 {"pillars", std::vector<int>(pillars.begin(), pillars.end())}};
  if (pillars.count(1)) {
    say(log, "pillar 1: fidelity and diversity");
    report["fidelity"] = pillar_fidelity(real_all, gen, metrics::FeatureExtractor(config.eval.feature_seed), classes);
  }
  if (pillars.count(2)) {
    say(log, "pillar 2: biomarkers");
    const auto real_test = load_set(real_m, datagen::Split::test, size);
    report["biomarkers"] = pillar_biomarkers(config, real_m, real_test, gen, classes, log);
  }
  if (pillars.count(3)) {
    say(log, "pillar 3: downstream regimes");
    report["downstream"] = pillar_downstream(config, real_manifest, generated_manifest, log);
  }
  write_json(out / "report.json", report);
  std::ofstream txt(out / "report.txt", std::ios::binary);
  txt << render_report(report);
  if (!txt) throw DataError("failed writing " + (out / "report.txt").string());
  return report;
}

}  // namespace nervesynth::cli
