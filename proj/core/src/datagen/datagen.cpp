#include "nervesynth/datagen/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "nervesynth/common/error.hpp"
#include "nervesynth/common/rng.hpp"
#include "nervesynth/model/mmdit.hpp"

namespace nervesynth::datagen {

using biomarkers::Mask;
using nlohmann::json;

namespace {

// Trunk spline control points are spaced this far apart in x.
constexpr double kKnotSpacing = 64.0;
constexpr int kSamplesPerPiece = 128;
// Clear space kept between the edges of neighbouring fibers, px.
constexpr double kTrunkGap = 10.0;
constexpr double kBranchGap = 5.0;
// Distance between candidate branch sites along a trunk, px.
constexpr double kSiteSpacing = 40.0;
constexpr double kBorderMargin = 6.0;

// Uniform quadratic B-spline through a control polygon.
std::vector<Point> quadratic_bspline(const std::vector<Point>& c) {
  std::vector<Point> out;
  for (std::size_t i = 0; i + 2 < c.size(); ++i) {
    for (int s = 0; s < kSamplesPerPiece; ++s) {
      const double t = static_cast<double>(s) / kSamplesPerPiece;
      const double b0 = 0.5 * (1 - t) * (1 - t), b1 = 0.5 + t * (1 - t), b2 = 0.5 * t * t;
      out.push_back({b0 * c[i].x + b1 * c[i + 1].x + b2 * c[i + 2].x,
                     b0 * c[i].y + b1 * c[i + 1].y + b2 * c[i + 2].y});
    }
  }
  const std::size_t n = c.size();
  out.push_back({0.5 * (c[n - 2].x + c[n - 1].x), 0.5 * (c[n - 2].y + c[n - 1].y)});
  return out;
}

// Length of the part of an x-monotone polyline with x in [x0, x1].
double clipped_length(const std::vector<Point>& p, double x0, double x1) {
  double len = 0.0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    Point a = p[i], b = p[i + 1];
    if (a.x > b.x) std::swap(a, b);
    if (b.x <= x0 || a.x >= x1) continue;
    const double dx = b.x - a.x;
    const auto lerp = [&](double x) { return Point{x, a.y + (b.y - a.y) * (x - a.x) / dx}; };
    if (a.x < x0) a = lerp(x0);
    if (b.x > x1) b = lerp(x1);
    len += std::hypot(b.x - a.x, b.y - a.y);
  }
  return len;
}

double polyline_length(const std::vector<Point>& p) {
  double len = 0.0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) len += std::hypot(p[i + 1].x - p[i].x, p[i + 1].y - p[i].y);
  return len;
}

// y of an x-monotone polyline at x.
double y_at(const std::vector<Point>& p, double x) {
  auto it = std::lower_bound(p.begin(), p.end(), x, [](const Point& q, double v) { return q.x < v; });
  if (it == p.begin()) return p.front().y;
  if (it == p.end()) return p.back().y;
  const Point& b = *it;
  const Point& a = *(it - 1);
  return b.x == a.x ? a.y : a.y + (b.y - a.y) * (x - a.x) / (b.x - a.x);
}

// Bucketed centerline samples for clearance queries.
class PointIndex {
 public:
  PointIndex(double width, double height, double cell)
      : cell_(cell),
        nx_(static_cast<long>(std::ceil(width / cell)) + 1),
        ny_(static_cast<long>(std::ceil(height / cell)) + 1),
        cells_(static_cast<std::size_t>(nx_ * ny_)) {}

  void add(const Fiber& f, int id) {
    for (const auto& p : f.centerline) {
      const long cx = cell_x(p.x), cy = cell_y(p.y);
      cells_[static_cast<std::size_t>(cy * nx_ + cx)].push_back({p, id, f.width_px});
    }
  }

  // Smallest edge-to-edge gap between p (half width hw) and any indexed
  // fiber accepted by `keep`, searched up to `radius`.
  template <class Keep>
  double gap(Point p, double hw, double radius, Keep&& keep) const {
    double best = radius;
    const long r = static_cast<long>(std::ceil(radius / cell_));
    const long cx = cell_x(p.x), cy = cell_y(p.y);
    for (long y = std::max(0L, cy - r); y <= std::min(ny_ - 1, cy + r); ++y)
      for (long x = std::max(0L, cx - r); x <= std::min(nx_ - 1, cx + r); ++x)
        for (const auto& e : cells_[static_cast<std::size_t>(y * nx_ + x)]) {
          if (!keep(e.id)) continue;
          best = std::min(best, std::hypot(e.p.x - p.x, e.p.y - p.y) - hw - 0.5 * e.width);
        }
    return best;
  }

 private:
  struct Entry {
    Point p;
    int id;
    double width;
  };
  long cell_x(double x) const { return std::clamp(static_cast<long>(std::floor(x / cell_)), 0L, nx_ - 1); }
  long cell_y(double y) const { return std::clamp(static_cast<long>(std::floor(y / cell_)), 0L, ny_ - 1); }
  double cell_;
  long nx_, ny_;
  std::vector<std::vector<Entry>> cells_;
};

std::optional<Fiber> make_trunk(const MorphParams& mp, Rng& rng, double W, double H) {
  Fiber f;
  f.width_px = uniform(rng, mp.width_min_px, mp.width_max_px);
  const double tilt = std::tan(uniform(rng, -mp.max_tilt_deg, mp.max_tilt_deg) * std::numbers::pi / 180.0);
  const double y0 = uniform(rng, 0.0, H);
  std::vector<Point> ctrl;
  for (double x = -2.0 * kKnotSpacing; x <= W + 2.0 * kKnotSpacing; x += kKnotSpacing) {
    const double jitter = mp.tortuosity > 0.0 ? normal(rng, 0.0, mp.tortuosity) : 0.0;
    ctrl.push_back({x, y0 + tilt * (x - 0.5 * W) + jitter});
  }
  f.centerline = quadratic_bspline(ctrl);
  const double margin = 0.5 * f.width_px + kBorderMargin;
  for (const auto& p : f.centerline) {
    if (p.x < -1.0 || p.x > W + 1.0) continue;
    if (p.y < margin || p.y > H - margin) return std::nullopt;
  }
  f.length_px = clipped_length(f.centerline, 0.0, W);
  return f;
}

bool trunks_clear(const Fiber& a, const Fiber& b, double W) {
  const double need = 0.5 * (a.width_px + b.width_px) + kTrunkGap;
  for (double x = 0.0; x <= W; x += 1.0)
    if (std::abs(y_at(a.centerline, x) - y_at(b.centerline, x)) < need) return false;
  return true;
}

// A branch leaves trunk `parent` at x_root, curves away on one side with a
// quadratic offset profile (45 degrees at the root), then follows the
// trunk's course at a fixed lateral offset.
Fiber make_branch(const Fiber& trunk, int parent, double x_root, int side, int dir, double offset,
                  double run, double width) {
  Fiber f;
  f.width_px = width;
  f.parent = parent;
  const double ramp = 2.0 * offset;
  for (double t = 0.0; t <= run + 1e-9; t += 0.5) {
    const double u = std::min(t / ramp, 1.0);
    const double off = offset * (1.0 - (1.0 - u) * (1.0 - u));
    const double x = x_root + dir * t;
    f.centerline.push_back({x, y_at(trunk.centerline, x) + side * off});
  }
  f.length_px = polyline_length(f.centerline);
  return f;
}

void blur(std::vector<double>& img, std::size_t w, std::size_t h, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;
  std::vector<double> tmp(img.size());
  const auto clampi = [](long v, long hi) { return static_cast<std::size_t>(std::clamp(v, 0L, hi - 1)); };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * img[y * w + clampi(static_cast<long>(x) + i, static_cast<long>(w))];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i)
        acc += k[static_cast<std::size_t>(i + r)] * tmp[clampi(static_cast<long>(y) + i, static_cast<long>(h)) * w + x];
      img[y * w + x] = acc;
    }
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

json truth_to_json(const Truth& t) {
  return {{"trunks", t.trunks},
          {"branch_points", t.branch_points},
          {"length_px", t.length_px},
          {"mean_width_px", t.mean_width_px}};
}

Truth truth_from_json(const json& j) {
  Truth t;
  t.trunks = j.at("trunks").get<int>();
  t.branch_points = j.at("branch_points").get<int>();
  t.length_px = j.at("length_px").get<double>();
  t.mean_width_px = j.at("mean_width_px").get<double>();
  return t;
}

json manifest_to_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    json j = {{"id", s.id},
              {"class", model::class_name(s.class_id)},
              {"split", split_name(s.split)},
              {"image", s.image.generic_string()},
              {"mask", s.mask.generic_string()},
              {"seed", s.seed}};
    j["truth"] = s.truth ? truth_to_json(*s.truth) : json(nullptr);
    if (!s.source.empty()) j["source"] = s.source;
    samples.push_back(std::move(j));
  }
  return {{"format", "nervesynth-dataset"},
          {"version", m.version},
          {"image_size", m.image_size},
          {"pixel_pitch_um", m.pixel_pitch_um},
          {"seed", m.seed},
          {"samples", std::move(samples)}};
}

}  // namespace

void MorphParams::validate() const {
  if (trunks_min < 0 || trunks_max < trunks_min) throw ConfigError("trunk count range is empty");
  if (branch_prob < 0.0 || branch_prob > 1.0) throw ConfigError("branch_prob outside [0, 1]");
  if (tortuosity < 0.0) throw ConfigError("tortuosity must be non-negative");
  if (max_tilt_deg < 0.0 || max_tilt_deg >= 45.0) throw ConfigError("max_tilt_deg outside [0, 45)");
  if (width_min_px <= 0.0 || width_max_px < width_min_px) throw ConfigError("width range is empty");
}

MorphParams MorphParams::for_class(int class_id) {
  switch (class_id) {
    case 0: return {5, 7, 0.26, 4.0, 6.0, 2.5, 3.5};
    case 1: return {4, 5, 0.26, 6.0, 8.0, 2.3, 3.3};
    case 2: return {2, 4, 0.18, 9.0, 10.0, 2.0, 3.0};
    default: break;
  }
  throw ConfigError("class id " + std::to_string(class_id) + " outside {0, 1, 2}");
}

MaskSample gen_mask(const MorphParams& mp, std::uint64_t seed, std::size_t height, std::size_t width) {
  mp.validate();
  if (height == 0 || width == 0) throw ConfigError("mask dimensions must be positive");
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  Rng rng(seed);
  MaskSample out;
  auto& fibers = out.fibers;

  const int want = uniform_int(rng, mp.trunks_min, mp.trunks_max);
  for (int k = 0; k < want; ++k) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      auto t = make_trunk(mp, rng, W, H);
      if (!t) continue;
      const bool clear = std::all_of(fibers.begin(), fibers.end(),
                                     [&](const Fiber& o) { return trunks_clear(*t, o, W); });
      if (!clear) continue;
      fibers.push_back(std::move(*t));
      break;
    }
  }
  const int trunks = static_cast<int>(fibers.size());

  PointIndex index(W, H, 8.0);
  for (int i = 0; i < trunks; ++i) index.add(fibers[static_cast<std::size_t>(i)], i);

  int branches = 0;
  for (int ti = 0; ti < trunks && mp.branch_prob > 0.0; ++ti) {
    for (double site = kSiteSpacing; site < W - kSiteSpacing / 2; site += kSiteSpacing) {
      // Draws happen for every site so one rejection does not shift the rest.
      const bool take = uniform(rng, 0.0, 1.0) < mp.branch_prob;
      const double x_root = site + uniform(rng, -8.0, 8.0);
      const int side = uniform(rng, 0.0, 1.0) < 0.5 ? -1 : 1;
      const int dir = uniform(rng, 0.0, 1.0) < 0.5 ? -1 : 1;
      const double offset = uniform(rng, 10.0, 18.0);
      const double run = uniform(rng, 40.0, 110.0);
      const double bw = uniform(rng, mp.width_min_px, mp.width_max_px) * 0.85;
      if (!take) continue;
      const Fiber& trunk = fibers[static_cast<std::size_t>(ti)];
      Fiber b = make_branch(trunk, ti, x_root, side, dir, offset, run, bw);
      const double margin = 0.5 * bw + kBorderMargin;
      bool ok = true;
      double arc = 0.0;
      for (std::size_t i = 0; i < b.centerline.size() && ok; ++i) {
        const Point p = b.centerline[i];
        if (i > 0) arc += std::hypot(p.x - b.centerline[i - 1].x, p.y - b.centerline[i - 1].y);
        if (p.x < margin || p.x > W - margin || p.y < margin || p.y > H - margin) ok = false;
        const bool near_root = arc < 2.0 * offset + 2.0;
        // Near the root only fibers other than the parent count; further out
        // the parent must stay clear too.
        const double g = index.gap(p, 0.5 * bw, 40.0, [&](int id) { return !near_root || id != ti; });
        const double need = near_root && arc < 0.5 * trunk.width_px + bw + 4.0 ? -1e9 : kBranchGap;
        if (g < need) ok = false;
      }
      if (!ok) continue;
      index.add(b, static_cast<int>(fibers.size()));
      fibers.push_back(std::move(b));
      ++branches;
    }
  }

  out.mask = Mask(width, height);
  double wsum = 0.0;
  for (const auto& f : fibers) {
    rasterize(f, out.mask);
    out.truth.length_px += f.length_px;
    wsum += f.width_px * f.length_px;
  }
  out.truth.trunks = trunks;
  out.truth.branch_points = branches;
  out.truth.mean_width_px = out.truth.length_px > 0.0 ? wsum / out.truth.length_px : 0.0;
  return out;
}

MaskSample gen_mask(int class_id, std::uint64_t seed, std::size_t height, std::size_t width) {
  return gen_mask(MorphParams::for_class(class_id), seed, height, width);
}

void rasterize(const Fiber& f, Mask& mask) {
  const double hw = 0.5 * f.width_px;
  const auto& c = f.centerline;
  const auto stamp = [&](Point a, Point b) {
    const long x0 = static_cast<long>(std::floor(std::min(a.x, b.x) - hw - 1));
    const long x1 = static_cast<long>(std::ceil(std::max(a.x, b.x) + hw + 1));
    const long y0 = static_cast<long>(std::floor(std::min(a.y, b.y) - hw - 1));
    const long y1 = static_cast<long>(std::ceil(std::max(a.y, b.y) + hw + 1));
    const double dx = b.x - a.x, dy = b.y - a.y, len2 = dx * dx + dy * dy;
    for (long y = std::max(0L, y0); y <= std::min(static_cast<long>(mask.height) - 1, y1); ++y)
      for (long x = std::max(0L, x0); x <= std::min(static_cast<long>(mask.width) - 1, x1); ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        double t = len2 > 0.0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double ex = a.x + t * dx - px, ey = a.y + t * dy - py;
        if (ex * ex + ey * ey <= hw * hw) mask.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = 1;
      }
  };
  if (c.size() == 1) stamp(c[0], c[0]);
  for (std::size_t i = 0; i + 1 < c.size(); ++i) stamp(c[i], c[i + 1]);
}

io::GrayImage render_image(const Mask& mask, std::uint64_t seed) {
  const std::size_t w = mask.width, h = mask.height;
  Rng rng(seed);
  const double base = uniform(rng, 0.30, 0.40);
  const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double grad = uniform(rng, 0.10, 0.25);
  const double vignette = uniform(rng, 0.05, 0.15);
  const double amp = uniform(rng, 0.40, 0.55);

  std::vector<double> speckle(w * h), ridge(w * h), ridge_noise(w * h);
  for (auto& v : speckle) v = normal(rng);
  for (auto& v : ridge_noise) v = normal(rng);
  blur(speckle, w, h, 0.7);
  blur(ridge_noise, w, h, 2.0);
  for (std::size_t i = 0; i < w * h; ++i) ridge[i] = mask.data[i] ? 1.0 : 0.0;
  blur(ridge, w, h, 0.8);

  io::GrayImage img{w, h, std::vector<double>(w * h)};
  const double cx = 0.5 * static_cast<double>(w), cy = 0.5 * static_cast<double>(h);
  const double half = 0.5 * static_cast<double>(std::max(w, h));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - cx) / half, v = (static_cast<double>(y) + 0.5 - cy) / half;
      const double illum = 1.0 + grad * (u * std::cos(phi) + v * std::sin(phi)) - vignette * (u * u + v * v);
      const std::size_t i = y * w + x;
      // Blurred unit noise has sd near 0.4 at sigma 0.7.
      const double stroma = base * illum * (1.0 + 0.35 * speckle[i]);
      const double fiber = amp * ridge[i] * illum * (1.0 + 0.15 * ridge_noise[i]);
      img.pixels[i] = std::clamp(stroma + fiber, 0.0, 1.0);
    }
  return img;
}

io::GrayImage downsample_image(const io::GrayImage& image, std::size_t factor) {
  if (factor == 0 || image.width % factor || image.height % factor) {
    throw DimensionError("downsample factor must divide the image size");
  }
  const std::size_t w = image.width / factor, h = image.height / factor;
  io::GrayImage out{w, h, std::vector<double>(w * h, 0.0)};
  const double norm = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      out.pixels[(y / factor) * w + x / factor] += image.pixels[y * image.width + x] * norm;
  return out;
}

Mask downsample_mask(const Mask& mask, std::size_t factor, double min_coverage) {
  if (factor == 0 || mask.width % factor || mask.height % factor) {
    throw DimensionError("downsample factor must divide the mask size");
  }
  const std::size_t w = mask.width / factor, h = mask.height / factor;
  std::vector<std::size_t> hits(w * h, 0);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(x, y)) ++hits[(y / factor) * w + x / factor];
  Mask out(w, h);
  const double need = min_coverage * static_cast<double>(factor * factor);
  for (std::size_t i = 0; i < w * h; ++i) out.data[i] = hits[i] > 0 && static_cast<double>(hits[i]) >= need;
  return out;
}

Mask mask_from_image(const io::GrayImage& image) {
  Mask m(image.width, image.height);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = image.pixels[i] >= 0.5;
  return m;
}

io::GrayImage image_from_mask(const Mask& mask) {
  io::GrayImage img{mask.width, mask.height, std::vector<double>(mask.data.size())};
  for (std::size_t i = 0; i < mask.data.size(); ++i) img.pixels[i] = mask.data[i] ? 1.0 : 0.0;
  return img;
}

std::string split_name(Split split) { return split == Split::train ? "train" : "test"; }

std::vector<const SampleRecord*> Manifest::select(Split split) const {
  std::vector<const SampleRecord*> out;
  for (const auto& s : samples)
    if (s.split == split) out.push_back(&s);
  return out;
}

std::vector<const SampleRecord*> Manifest::select(Split split, int class_id) const {
  std::vector<const SampleRecord*> out;
  for (const auto& s : samples)
    if (s.split == split && s.class_id == class_id) out.push_back(&s);
  return out;
}

Manifest gen_dataset(int n_per_class, std::uint64_t seed, const std::filesystem::path& out_dir,
                     const DatasetOptions& options) {
  if (n_per_class < 1) throw ConfigError("n_per_class must be at least 1");
  if (options.extension != ".png" && options.extension != ".pgm") {
    throw ConfigError("dataset extension must be .png or .pgm");
  }
  if (options.test_fraction < 0.0 || options.test_fraction >= 1.0) {
    throw ConfigError("test_fraction outside [0, 1)");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (!ec) std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw DataError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());

  Manifest m;
  m.image_size = options.image_size;
  m.pixel_pitch_um = 400.0 / static_cast<double>(options.image_size);
  m.seed = seed;
  m.root = out_dir;
  const auto n = static_cast<std::size_t>(n_per_class);
  for (int c = 0; c < model::kNumClasses; ++c) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng split_rng(derive_seed(seed, 0x5B117000ULL + static_cast<std::uint64_t>(c)));
    std::shuffle(order.begin(), order.end(), split_rng);
    const auto n_test = static_cast<std::size_t>(std::lround(options.test_fraction * static_cast<double>(n)));
    std::vector<Split> split(n, Split::train);
    for (std::size_t i = 0; i < n_test; ++i) split[order[i]] = Split::test;

    for (std::size_t i = 0; i < n; ++i) {
      SampleRecord r;
      std::ostringstream id;
      id << model::class_name(c) << '_';
      id.width(4);
      id.fill('0');
      id << i;
      r.id = id.str();
      r.class_id = c;
      r.split = split[i];
      r.seed = derive_seed(seed, static_cast<std::uint64_t>(c) * 1000000ULL + i);
      r.image = std::filesystem::path("images") / (r.id + options.extension);
      r.mask = std::filesystem::path("masks") / (r.id + options.extension);
      const auto sample = gen_mask(c, r.seed, options.image_size, options.image_size);
      io::write_image(out_dir / r.image, render_image(sample.mask, derive_seed(r.seed, 1)));
      io::write_image(out_dir / r.mask, image_from_mask(sample.mask));
      r.truth = sample.truth;
      m.samples.push_back(std::move(r));
    }
  }
  write_manifest(m, out_dir / "manifest.json");
  return m;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << manifest_to_json(manifest).dump(2) << '\n';
  if (!f) throw DataError("failed writing " + path.string());
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    f >> j;
    Manifest m;
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw DataError("unsupported manifest version " + std::to_string(m.version));
    m.image_size = j.at("image_size").get<std::size_t>();
    m.pixel_pitch_um = j.value("pixel_pitch_um", 400.0 / static_cast<double>(m.image_size));
    m.seed = j.value("seed", std::uint64_t{0});
    m.root = path.parent_path();
    for (const auto& s : j.at("samples")) {
      SampleRecord r;
      r.id = s.at("id").get<std::string>();
      r.class_id = model::parse_class_name(s.at("class").get<std::string>());
      const auto split = s.value("split", std::string("train"));
      if (split != "train" && split != "test") throw DataError("sample " + r.id + " has split '" + split + "'");
      r.split = split == "test" ? Split::test : Split::train;
      r.image = s.at("image").get<std::string>();
      r.mask = s.value("mask", std::string());
      r.seed = s.value("seed", std::uint64_t{0});
      if (s.contains("truth") && !s.at("truth").is_null()) r.truth = truth_from_json(s.at("truth"));
      r.source = s.value("source", std::string());
      m.samples.push_back(std::move(r));
    }
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

std::uint64_t manifest_hash(const Manifest& manifest, std::optional<Split> split) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : manifest.samples) {
    if (split && s.split != *split) continue;
    const std::string head = s.id + '|' + std::to_string(s.class_id) + '|' + split_name(s.split);
    h = fnv1a(head.data(), head.size(), h);
    for (const auto& rel : {s.image, s.mask}) {
      if (rel.empty()) continue;
      std::ifstream f(manifest.root / rel, std::ios::binary);
      if (!f) throw DataError("cannot open " + (manifest.root / rel).string());
      std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
      h = fnv1a(bytes.data(), bytes.size(), h);
    }
  }
  return h;
}

LoadedSample load_sample(const Manifest& manifest, const SampleRecord& record) {
  LoadedSample s;
  s.class_id = record.class_id;
  s.image = io::read_image(manifest.root / record.image);
  if (!record.mask.empty()) {
    s.mask = mask_from_image(io::read_image(manifest.root / record.mask));
    if (s.mask.width != s.image.width || s.mask.height != s.image.height) {
      throw DataError("mask and image of " + record.id + " differ in size");
    }
  }
  return s;
}

}  // namespace nervesynth::datagen
