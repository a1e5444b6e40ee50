#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <set>
#include <sstream>

#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/common/error.hpp"

namespace nervesynth::biomarkers {

namespace {

constexpr int kDx[8] = {1, 1, 0, -1, -1, -1, 0, 1};
constexpr int kDy[8] = {0, -1, -1, -1, 0, 1, 1, 1};

struct Grid {
  const Mask& m;
  std::size_t w, h;
  explicit Grid(const Mask& mask) : m(mask), w(mask.width), h(mask.height) {}

  template <class F>
  void for_neighbors(std::size_t p, F&& f) const {
    const long x = static_cast<long>(p % w), y = static_cast<long>(p / w);
    for (int k = 0; k < 8; ++k) {
      const long nx = x + kDx[k], ny = y + kDy[k];
      if (nx < 0 || ny < 0 || nx >= static_cast<long>(w) || ny >= static_cast<long>(h)) continue;
      const std::size_t q = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
      if (m.data[q]) f(q, k % 2 == 1);
    }
  }
  int degree(std::size_t p) const {
    int n = 0;
    for_neighbors(p, [&](std::size_t, bool) { ++n; });
    return n;
  }
};

struct Traced {
  std::vector<Node> nodes;
  std::vector<Segment> segments;
  std::vector<std::vector<std::size_t>> interiors;  // pixels strictly between the ends
};

// Polyline length through every `stride`-th pixel of a chain, averaged over
// both traversal directions. Chords are summed in sorted order so that the
// result does not depend on which end the chain was traced from.
double chain_length(const std::vector<std::size_t>& chain, std::size_t width, std::size_t stride) {
  const std::size_t n = chain.size();
  if (n < 2) return 0.0;
  std::vector<double> chords;
  for (int rev = 0; rev < 2; ++rev) {
    const auto at = [&](std::size_t i) { return chain[rev ? n - 1 - i : i]; };
    std::size_t i = 0;
    while (i + 1 < n) {
      const std::size_t j = std::min(i + stride, n - 1);
      const double dx = static_cast<double>(at(j) % width) - static_cast<double>(at(i) % width);
      const double dy = static_cast<double>(at(j) / width) - static_cast<double>(at(i) / width);
      chords.push_back(std::hypot(dx, dy));
      i = j;
    }
  }
  std::sort(chords.begin(), chords.end());
  double sum = 0.0;
  for (double c : chords) sum += c;
  return 0.5 * sum;
}

int find(std::vector<int>& parent, int i) {
  while (parent[i] != i) i = parent[i] = parent[parent[i]];
  return i;
}

Traced trace(const Mask& s, std::size_t stride) {
  Grid g(s);
  const std::size_t n = s.data.size();
  std::vector<int> deg(n, 0);
  for (std::size_t p = 0; p < n; ++p)
    if (s.data[p]) deg[p] = g.degree(p);

  // Node id per pixel: branch pixels merged into 8-connected clusters.
  std::vector<int> node_of(n, -1);
  Traced t;
  for (std::size_t p = 0; p < n; ++p) {
    if (!s.data[p] || deg[p] == 2 || node_of[p] >= 0) continue;
    const int id = static_cast<int>(t.nodes.size());
    Node node;
    node.kind = deg[p] >= 3 ? NodeKind::branch : NodeKind::endpoint;
    double sx = 0.0, sy = 0.0;
    std::size_t cnt = 0;
    std::vector<std::size_t> stack{p};
    node_of[p] = id;
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      sx += static_cast<double>(q % s.width);
      sy += static_cast<double>(q / s.width);
      ++cnt;
      if (node.kind != NodeKind::branch) continue;
      g.for_neighbors(q, [&](std::size_t r, bool) {
        if (deg[r] >= 3 && node_of[r] < 0) {
          node_of[r] = id;
          stack.push_back(r);
        }
      });
    }
    node.x = sx / static_cast<double>(cnt);
    node.y = sy / static_cast<double>(cnt);
    t.nodes.push_back(node);
  }

  std::set<std::pair<std::size_t, std::size_t>> used;  // directed first steps
  std::vector<char> visited(n, 0);
  auto caps = [&](int node) { return t.nodes[node].kind == NodeKind::endpoint ? 1u : 0u; };

  for (std::size_t p = 0; p < n; ++p) {
    if (node_of[p] < 0) continue;
    if (deg[p] == 0) {
      Segment seg{node_of[p], node_of[p], 0, 0, 2};
      t.segments.push_back(seg);
      t.interiors.emplace_back();
      continue;
    }
    g.for_neighbors(p, [&](std::size_t first, bool diag0) {
      if (node_of[first] >= 0 && node_of[first] == node_of[p]) return;
      if (used.count({p, first})) return;
      Segment seg;
      seg.a = node_of[p];
      std::vector<std::size_t> interior;
      std::size_t prev = p, cur = first;
      std::vector<std::size_t> chain{p};
      (diag0 ? seg.diagonal_steps : seg.axial_steps)++;
      while (node_of[cur] < 0) {
        visited[cur] = 1;
        interior.push_back(cur);
        chain.push_back(cur);
        std::size_t next = cur;
        bool diag = false;
        g.for_neighbors(cur, [&](std::size_t q, bool d) {
          if (q != prev && next == cur) {
            next = q;
            diag = d;
          }
        });
        prev = cur;
        cur = next;
        (diag ? seg.diagonal_steps : seg.axial_steps)++;
      }
      seg.b = node_of[cur];
      chain.push_back(cur);
      seg.path_px = chain_length(chain, s.width, stride);
      used.insert({p, first});
      used.insert({cur, prev});
      seg.end_caps = caps(seg.a) + caps(seg.b);
      t.segments.push_back(seg);
      t.interiors.push_back(std::move(interior));
    });
  }

  // Closed loops made only of degree-2 pixels.
  for (std::size_t p = 0; p < n; ++p) {
    if (!s.data[p] || deg[p] != 2 || visited[p]) continue;
    Segment seg;
    std::vector<std::size_t> interior;
    std::size_t prev = p, cur = p;
    do {
      visited[cur] = 1;
      interior.push_back(cur);
      std::size_t next = cur;
      bool diag = false;
      g.for_neighbors(cur, [&](std::size_t q, bool d) {
        if (q != prev && next == cur) {
          next = q;
          diag = d;
        }
      });
      if (next == cur) break;
      prev = cur;
      cur = next;
      (diag ? seg.diagonal_steps : seg.axial_steps)++;
    } while (cur != p);
    std::vector<std::size_t> chain = interior;
    if (cur == p) chain.push_back(p);
    seg.path_px = chain_length(chain, s.width, stride);
    t.segments.push_back(seg);
    t.interiors.push_back(std::move(interior));
  }
  return t;
}

}  // namespace

double Geometry::field_area_mm2() const {
  return (static_cast<double>(width) * pixel_pitch_um) * (static_cast<double>(height) * pixel_pitch_um) / 1e6;
}

double Segment::length_px() const {
  return path_px + 0.5 * static_cast<double>(end_caps);
}

std::size_t SkeletonGraph::count(NodeKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [&](const Node& n) { return n.kind == kind; }));
}

double SkeletonGraph::total_length_px() const {
  // Sorted so the sum does not depend on traversal order.
  std::vector<double> lengths;
  lengths.reserve(segments.size());
  for (const auto& s : segments) lengths.push_back(s.length_px());
  std::sort(lengths.begin(), lengths.end());
  double sum = 0.0;
  for (double l : lengths) sum += l;
  return sum;
}

SkeletonGraph build_graph(const Mask& skeleton, const GraphOptions& options) {
  if (skeleton.data.size() != skeleton.width * skeleton.height) {
    throw DimensionError("skeleton buffer does not match its dimensions");
  }
  SkeletonGraph g;
  g.skeleton = skeleton;
  for (auto& v : g.skeleton.data) v = v ? 1 : 0;

  Traced t = trace(g.skeleton, options.chord_stride_px);
  for (;;) {
    bool pruned = false;
    for (std::size_t i = 0; i < t.segments.size(); ++i) {
      const auto& s = t.segments[i];
      if (s.a < 0 || s.a == s.b) continue;
      const auto ka = t.nodes[s.a].kind, kb = t.nodes[s.b].kind;
      if (ka == kb || s.length_px() >= options.spur_length_px) continue;
      // Remove the endpoint pixel and the interior, then any junction pixels
      // left dangling.
      std::vector<std::size_t> removed = t.interiors[i];
      const Node& end = ka == NodeKind::endpoint ? t.nodes[s.a] : t.nodes[s.b];
      removed.push_back(static_cast<std::size_t>(end.y) * g.skeleton.width +
                        static_cast<std::size_t>(end.x));
      for (auto p : removed) g.skeleton.data[p] = 0;
      remove_stubs(g.skeleton, std::move(removed));
      pruned = true;
    }
    if (!pruned) break;
    t = trace(g.skeleton, options.chord_stride_px);
  }
  g.nodes = std::move(t.nodes);
  g.segments = std::move(t.segments);

  // Components.
  const std::size_t n = g.skeleton.data.size(), w = g.skeleton.width;
  Grid grid(g.skeleton);
  g.labels.assign(n, -1);
  for (std::size_t p = 0; p < n; ++p) {
    if (!g.skeleton.data[p] || g.labels[p] >= 0) continue;
    const int id = static_cast<int>(g.components.size());
    Component comp;
    std::vector<std::size_t> stack{p}, members;
    g.labels[p] = id;
    while (!stack.empty()) {
      const auto q = stack.back();
      stack.pop_back();
      members.push_back(q);
      grid.for_neighbors(q, [&](std::size_t r, bool) {
        if (g.labels[r] < 0) {
          g.labels[r] = id;
          stack.push_back(r);
        }
      });
    }
    comp.pixels = members.size();
    // Double sweep for the longest geodesic path.
    auto farthest = [&](std::size_t src) {
      std::vector<double> dist(n, std::numeric_limits<double>::infinity());
      using Item = std::pair<double, std::size_t>;
      std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
      dist[src] = 0.0;
      pq.push({0.0, src});
      while (!pq.empty()) {
        auto [d, q] = pq.top();
        pq.pop();
        if (d > dist[q]) continue;
        grid.for_neighbors(q, [&](std::size_t r, bool diag) {
          const double nd = d + (diag ? std::numbers::sqrt2 : 1.0);
          if (nd < dist[r]) {
            dist[r] = nd;
            pq.push({nd, r});
          }
        });
      }
      std::size_t best = src;
      for (auto m : members)
        if (dist[m] > dist[best] || (dist[m] == dist[best] && m < best)) best = m;
      return std::pair{best, dist[best]};
    };
    const auto [u, du] = farthest(*std::min_element(members.begin(), members.end()));
    (void)du;
    const auto [v, dv] = farthest(u);
    (void)v;
    comp.longest_path_px = dv + 1.0;  // half a pixel at each end
    g.components.push_back(comp);
  }
  for (auto& node : g.nodes) {
    node.component = g.labels[static_cast<std::size_t>(node.y + 0.5) * w + static_cast<std::size_t>(node.x + 0.5)];
    if (node.component < 0) {
      // Centroid of a cluster can fall off the skeleton; use any member pixel.
      for (std::size_t p = 0; p < n; ++p) {
        if (g.labels[p] >= 0 && std::abs(static_cast<double>(p % w) - node.x) <= 1.5 &&
            std::abs(static_cast<double>(p / w) - node.y) <= 1.5) {
          node.component = g.labels[p];
          break;
        }
      }
    }
  }

  // Junctions: branch nodes joined by very short segments are one junction.
  std::vector<int> parent(g.nodes.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (const auto& s : g.segments) {
    if (s.a < 0 || s.a == s.b) continue;
    if (g.nodes[s.a].kind == NodeKind::branch && g.nodes[s.b].kind == NodeKind::branch &&
        s.length_px() <= options.junction_merge_px) {
      parent[find(parent, s.a)] = find(parent, s.b);
    }
  }
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    if (g.nodes[i].kind != NodeKind::branch || find(parent, static_cast<int>(i)) != static_cast<int>(i)) continue;
    g.junction_component.push_back(g.nodes[i].component);
    if (g.nodes[i].component >= 0) ++g.components[g.nodes[i].component].branch_nodes;
  }
  return g;
}

double cnfl(const SkeletonGraph& graph, const Geometry& geometry) {
  return graph.total_length_px() * geometry.pixel_pitch_um / 1000.0 / geometry.field_area_mm2();
}

double cnfd(const SkeletonGraph& graph, const Geometry& geometry, double trunk_min_len_px) {
  if (trunk_min_len_px < 0) throw ConfigError("trunk length threshold must be non-negative");
  std::size_t trunks = 0;
  for (const auto& c : graph.components) trunks += c.longest_path_px >= trunk_min_len_px;
  return static_cast<double>(trunks) / geometry.field_area_mm2();
}

double cnbd(const SkeletonGraph& graph, const Geometry& geometry, double trunk_min_len_px,
            bool all_fibers) {
  std::size_t count = 0;
  for (const auto& c : graph.components) {
    if (all_fibers || c.longest_path_px >= trunk_min_len_px) count += c.branch_nodes;
  }
  return static_cast<double>(count) / geometry.field_area_mm2();
}

double cnfw(const Mask& mask, const Mask& skeleton, const Geometry& geometry) {
  if (mask.width != skeleton.width || mask.height != skeleton.height) {
    throw DimensionError("mask and skeleton differ in size");
  }
  const auto dist = distance_transform(mask);
  const std::size_t w = skeleton.width, h = skeleton.height;
  // Pixels closer to a free end than to the fiber wall sample the end cap.
  std::vector<std::uint8_t> cap(skeleton.data.size(), 0);
  double reach = 0.0;
  for (std::size_t p = 0; p < skeleton.data.size(); ++p)
    if (skeleton.data[p]) reach = std::max(reach, dist[p]);
  const long r = static_cast<long>(std::ceil(reach));
  for (std::size_t ey = 0; ey < h; ++ey) {
    for (std::size_t ex = 0; ex < w; ++ex) {
      if (!skeleton.at(ex, ey)) continue;
      int nb = 0;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long x = static_cast<long>(ex) + dx, y = static_cast<long>(ey) + dy;
          if ((dx || dy) && x >= 0 && y >= 0 && x < static_cast<long>(w) && y < static_cast<long>(h))
            nb += skeleton.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) != 0;
        }
      if (nb != 1) continue;
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          const long x = static_cast<long>(ex) + dx, y = static_cast<long>(ey) + dy;
          if (x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) continue;
          const std::size_t q = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          if (skeleton.data[q] && std::hypot(double(dx), double(dy)) < dist[q]) cap[q] = 1;
        }
    }
  }
  double sum = 0.0, sum_all = 0.0;
  std::size_t n = 0, n_all = 0;
  for (std::size_t p = 0; p < skeleton.data.size(); ++p) {
    if (!skeleton.data[p]) continue;
    if (!mask.data[p]) throw ContractError("skeleton pixel outside the mask");
    const double v = 2.0 * (dist[p] - 0.5);
    sum_all += v;
    ++n_all;
    if (cap[p]) continue;
    sum += v;
    ++n;
  }
  if (n == 0) {
    sum = sum_all;
    n = n_all;
  }
  if (n == 0) throw UndefinedValueError("fiber width is undefined for an empty skeleton");
  return sum / static_cast<double>(n) * geometry.pixel_pitch_um;
}

BiomarkerReport report(const Mask& mask, const Geometry& geometry, const ReportOptions& options) {
  if (mask.width != geometry.width || mask.height != geometry.height) {
    throw DimensionError("mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                         " but the geometry describes " + std::to_string(geometry.width) + "x" +
                         std::to_string(geometry.height));
  }
  auto g = build_graph(skeletonize(mask), options.graph);
  BiomarkerReport r;
  r.field_area_mm2 = geometry.field_area_mm2();
  r.pixel_pitch_um = geometry.pixel_pitch_um;
  r.length_px = g.total_length_px();
  r.cnfl = cnfl(g, geometry);
  r.cnfd = cnfd(g, geometry, options.trunk_min_len_px);
  r.cnbd = cnbd(g, geometry, options.trunk_min_len_px, options.branches_on_all_fibers);
  for (const auto& c : g.components) {
    if (c.longest_path_px >= options.trunk_min_len_px) {
      ++r.trunks;
      r.branch_points += c.branch_nodes;
    } else if (options.branches_on_all_fibers) {
      r.branch_points += c.branch_nodes;
    }
  }
  if (g.skeleton.count() > 0) {
    r.cnfw = cnfw(mask, g.skeleton, geometry);
    r.cnfw_per_area = *r.cnfw / r.field_area_mm2;
  }
  return r;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.n = values.size();
  if (s.n == 0) return s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

Stat summarize(const std::vector<std::optional<double>>& values) {
  std::vector<double> defined;
  for (const auto& v : values)
    if (v) defined.push_back(*v);
  return summarize(defined);
}

CohortSummary summarize_cohort(const std::string& group, const std::string& source,
                               const std::vector<BiomarkerReport>& reports) {
  CohortSummary c;
  c.group = group;
  c.source = source;
  std::vector<double> l, d, b;
  std::vector<std::optional<double>> w;
  for (const auto& r : reports) {
    l.push_back(r.cnfl);
    d.push_back(r.cnfd);
    b.push_back(r.cnbd);
    w.push_back(r.cnfw);
    c.undefined_cnfw += !r.cnfw.has_value();
  }
  c.cnfl = summarize(l);
  c.cnfd = summarize(d);
  c.cnbd = summarize(b);
  c.cnfw = summarize(w);
  return c;
}

std::string format_table(const std::vector<CohortSummary>& rows) {
  auto cell = [](const Stat& s) {
    if (s.n == 0) return std::string("undefined");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f +/- %.2f", s.mean, s.sd);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> table{
      {"Group", "Source", "CNFL (mm/mm2)", "CNFD (no./mm2)", "CNBD (no./mm2)", "CNFW (um)"}};
  for (const auto& r : rows) {
    table.push_back({r.group, r.source, cell(r.cnfl), cell(r.cnfd), cell(r.cnbd), cell(r.cnfw)});
  }
  std::vector<std::size_t> width(table[0].size(), 0);
  for (const auto& row : table)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream out;
  for (const auto& row : table) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << std::left << std::setw(static_cast<int>(width[i])) << row[i];
      if (i + 1 < row.size()) out << "  ";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace nervesynth::biomarkers
