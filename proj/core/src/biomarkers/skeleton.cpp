#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/error.hpp"

namespace nervesynth::biomarkers {

namespace {

// Neighbour offsets counter-clockwise from east (image y grows downward).
constexpr std::array<int, 8> kDx{1, 1, 0, -1, -1, -1, 0, 1};
constexpr std::array<int, 8> kDy{0, -1, -1, -1, 0, 1, 1, 1};

std::array<int, 8> ring(const Mask& m, std::size_t x, std::size_t y) {
  std::array<int, 8> r{};
  for (int k = 0; k < 8; ++k) {
    const long nx = static_cast<long>(x) + kDx[k], ny = static_cast<long>(y) + kDy[k];
    r[k] = (nx >= 0 && ny >= 0 && nx < static_cast<long>(m.width) && ny < static_cast<long>(m.height))
               ? m.data[static_cast<std::size_t>(ny) * m.width + static_cast<std::size_t>(nx)]
               : 0;
  }
  return r;
}

// One Zhang-Suen sweep; returns whether any pixel was removed.
bool zhang_suen_pass(Mask& m, bool first) {
  std::vector<std::size_t> remove;
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      const auto r = ring(m, x, y);
      // Classic labelling: P2 = N, P3 = NE, ..., P9 = NW.
      const int p2 = r[2], p3 = r[1], p4 = r[0], p5 = r[7], p6 = r[6], p7 = r[5], p8 = r[4],
                p9 = r[3];
      const int b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
      if (b < 2 || b > 6) continue;
      const std::array<int, 9> seq{p2, p3, p4, p5, p6, p7, p8, p9, p2};
      int a = 0;
      for (int k = 0; k < 8; ++k) a += (seq[k] == 0 && seq[k + 1] == 1);
      if (a != 1) continue;
      const bool ok = first ? (p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0)
                            : (p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0);
      if (ok) remove.push_back(y * m.width + x);
    }
  }
  for (auto i : remove) m.data[i] = 0;
  return !remove.empty();
}

// Yokoi connectivity number for 8-connected foreground.
int connectivity8(const std::array<int, 8>& r) {
  int n = 0;
  for (int k = 0; k < 8; k += 2) {
    const int a = 1 - r[k], b = 1 - r[(k + 1) % 8], c = 1 - r[(k + 2) % 8];
    n += a - a * b * c;
  }
  return n;
}

// Deletes pixels whose removal keeps 8-connectivity and that are not line
// ends, leaving a skeleton without staircase corners.
void remove_redundant(Mask& m) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t y = 0; y < m.height; ++y) {
      for (std::size_t x = 0; x < m.width; ++x) {
        if (!m.at(x, y)) continue;
        const auto r = ring(m, x, y);
        int nb = 0;
        for (int v : r) nb += v;
        if (nb < 2) continue;
        if (connectivity8(r) == 1) {
          m.at(x, y) = 0;
          changed = true;
        }
      }
    }
  }
}

// Zhang-Suen eats roughly half a fiber width off every free end. Walk each
// endpoint outward along its last step while inside the mask, for at most
// the local distance to background and only on lines long enough that the
// end is not a blob remnant.
void extend_endpoints(Mask& skel, const Mask& mask) {
  const auto edt = distance_transform(mask);
  std::vector<std::pair<std::size_t, std::size_t>> ends;
  for (std::size_t y = 0; y < skel.height; ++y)
    for (std::size_t x = 0; x < skel.width; ++x) {
      if (!skel.at(x, y)) continue;
      const auto r = ring(skel, x, y);
      int nb = 0;
      for (int v : r) nb += v;
      if (nb == 1) ends.emplace_back(x, y);
    }
  const auto inside = [&](long x, long y) {
    return x >= 0 && y >= 0 && x < static_cast<long>(skel.width) && y < static_cast<long>(skel.height);
  };
  for (auto [ex, ey] : ends) {
    const double reach = std::ceil(edt[ey * skel.width + ex]);
    // Length of the unbranched run behind the endpoint.
    long px = -1, py = -1, cx = static_cast<long>(ex), cy = static_cast<long>(ey);
    int run = 0, dir = -1;
    while (run <= 2 * reach + 2) {
      int next = -1, nb = 0;
      for (int k = 0; k < 8; ++k) {
        const long nx = cx + kDx[k], ny = cy + kDy[k];
        if (!inside(nx, ny) || !skel.at(nx, ny)) continue;
        ++nb;
        if (nx != px || ny != py) next = k;
      }
      if ((run == 0 && nb != 1) || (run > 0 && nb != 2) || next < 0) break;
      if (run == 0) dir = (next + 4) % 8;
      px = cx;
      py = cy;
      cx += kDx[next];
      cy += kDy[next];
      ++run;
    }
    if (dir < 0 || run <= 2 * reach + 2) continue;
    long x = static_cast<long>(ex), y = static_cast<long>(ey);
    for (int step = 0; step < static_cast<int>(reach); ++step) {
      const long nx = x + kDx[dir], ny = y + kDy[dir];
      if (!inside(nx, ny) || !mask.at(nx, ny) || skel.at(nx, ny)) break;
      // The new pixel may touch only the current end.
      bool clear = true;
      for (int k = 0; k < 8 && clear; ++k) {
        const long qx = nx + kDx[k], qy = ny + kDy[k];
        if (inside(qx, qy) && skel.at(qx, qy) && !(qx == x && qy == y)) clear = false;
      }
      if (!clear) break;
      skel.at(nx, ny) = 1;
      x = nx;
      y = ny;
    }
  }
}

}  // namespace

void remove_stubs(Mask& skel, std::vector<std::size_t> seeds) {
  while (!seeds.empty()) {
    const std::size_t i = seeds.back();
    seeds.pop_back();
    const std::size_t x = i % skel.width, y = i / skel.width;
    for (int k = 0; k < 8; ++k) {
      const long nx = static_cast<long>(x) + kDx[k], ny = static_cast<long>(y) + kDy[k];
      if (nx < 0 || ny < 0 || nx >= static_cast<long>(skel.width) || ny >= static_cast<long>(skel.height))
        continue;
      const auto ux = static_cast<std::size_t>(nx), uy = static_cast<std::size_t>(ny);
      if (!skel.at(ux, uy)) continue;
      const auto r = ring(skel, ux, uy);
      int nb = 0;
      for (int v : r) nb += v;
      if (nb >= 2 && connectivity8(r) == 1) {
        skel.at(ux, uy) = 0;
        seeds.push_back(uy * skel.width + ux);
      }
    }
  }
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto v : data) n += v != 0;
  return n;
}

Mask rotate90(const Mask& m, int quarter_turns) {
  quarter_turns = ((quarter_turns % 4) + 4) % 4;
  Mask out = m;
  for (int t = 0; t < quarter_turns; ++t) {
    Mask r(out.height, out.width);
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) r.at(y, out.width - 1 - x) = out.at(x, y);
    out = std::move(r);
  }
  return out;
}

namespace {
Mask canonical_mask(const Mask& mask, int turns) {
  Mask m = rotate90(mask, turns);
  for (auto& v : m.data) v = v ? 1 : 0;
  return m;
}
}  // namespace

Mask skeletonize(const Mask& mask) {
  if (mask.data.size() != mask.width * mask.height) {
    throw DimensionError("mask buffer does not match its dimensions");
  }
  int best = 0;
  Mask canonical = mask;
  for (int t = 1; t < 4; ++t) {
    Mask r = rotate90(mask, t);
    if (std::tie(r.width, r.height, r.data) < std::tie(canonical.width, canonical.height, canonical.data)) {
      canonical = std::move(r);
      best = t;
    }
  }
  for (auto& v : canonical.data) v = v ? 1 : 0;
  for (;;) {
    const bool a = zhang_suen_pass(canonical, true);
    const bool b = zhang_suen_pass(canonical, false);
    if (!a && !b) break;
  }
  remove_redundant(canonical);
  Mask binary = canonical_mask(mask, best);
  extend_endpoints(canonical, binary);
  return rotate90(canonical, 4 - best);
}

std::vector<double> distance_transform(const Mask& mask) {
  const std::size_t w = mask.width, h = mask.height;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(w * h);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = mask.data[i] ? inf : 0.0;

  // Felzenszwalb-Huttenlocher lower envelope of parabolas along one line.
  auto pass = [&](std::size_t n, auto get, auto set) {
    std::vector<double> d(n), g(n);
    std::vector<std::size_t> v(n);
    std::vector<double> z(n + 1);
    for (std::size_t i = 0; i < n; ++i) g[i] = get(i);
    std::size_t k = 0;
    std::size_t first = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::isfinite(g[i])) {
        first = i;
        break;
      }
    }
    if (first == n) return;  // no finite sample on this line
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
      if (!std::isfinite(g[q])) continue;
      double s;
      for (;;) {
        const double p = static_cast<double>(v[k]);
        const double qq = static_cast<double>(q);
        s = ((g[q] + qq * qq) - (g[v[k]] + p * p)) / (2.0 * qq - 2.0 * p);
        if (s <= z[k] && k > 0) {
          --k;
          continue;
        }
        break;
      }
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = inf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
      while (z[k + 1] < static_cast<double>(q)) ++k;
      const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
      d[q] = diff * diff + g[v[k]];
    }
    for (std::size_t i = 0; i < n; ++i) set(i, d[i]);
  };
  for (std::size_t x = 0; x < w; ++x) {
    pass(h, [&](std::size_t i) { return f[i * w + x]; }, [&](std::size_t i, double val) { f[i * w + x] = val; });
  }
  for (std::size_t y = 0; y < h; ++y) {
    pass(w, [&](std::size_t i) { return f[y * w + i]; }, [&](std::size_t i, double val) { f[y * w + i] = val; });
  }
  for (auto& v : f) v = std::sqrt(v);
  return f;
}

}  // namespace nervesynth::biomarkers
