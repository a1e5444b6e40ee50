#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace nervesynth::biomarkers {

// Binary image, row-major, entries 0 or 1.
struct Mask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(std::size_t w, std::size_t h) : width(w), height(h), data(w * h, 0) {}
  std::uint8_t at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
  std::size_t count() const;
  bool operator==(const Mask&) const = default;
};

// Quarter turns counter-clockwise.
Mask rotate90(const Mask& m, int quarter_turns = 1);

struct Geometry {
  std::size_t width = 384;
  std::size_t height = 384;
  double pixel_pitch_um = 400.0 / 384.0;
  // (W * pitch) * (H * pitch) / 1e6
  double field_area_mm2() const;
};

// Zhang-Suen thinning followed by removal of pixels that are redundant for
// 8-connectivity. The mask is first brought to a canonical quarter-turn
// orientation so that rotating the input rotates the output exactly.
Mask skeletonize(const Mask& mask);

// Euclidean distance from each foreground pixel centre to the
// nearest background pixel centre (0 on background).
std::vector<double> distance_transform(const Mask& mask);

// Deletes skeleton pixels near `seeds` that became simple, non-end points
// after the seed pixels were removed.
void remove_stubs(Mask& skeleton, std::vector<std::size_t> seeds);

enum class NodeKind { endpoint, branch };

struct Node {
  double x = 0.0, y = 0.0;  // centroid of the node's pixels
  NodeKind kind = NodeKind::endpoint;
  int component = 0;
};

struct Segment {
  int a = -1, b = -1;  // node indices; -1 for a closed loop without nodes
  std::size_t axial_steps = 0;
  std::size_t diagonal_steps = 0;
  // Chord-sampled length of the pixel chain between the two nodes.
  double path_px = 0.0;
  // Half a pixel is added for every endpoint the segment terminates in.
  std::size_t end_caps = 0;
  double length_px() const;
};

struct Component {
  double longest_path_px = 0.0;
  std::size_t branch_nodes = 0;
  std::size_t pixels = 0;
};

struct GraphOptions {
  // Endpoint-terminated segments shorter than this are pruned.
  double spur_length_px = 5.0;
  // Branch nodes joined by a segment at most this long count as one junction.
  double junction_merge_px = 5.0;
  // Pixel stride between chord samples when measuring segment length.
  std::size_t chord_stride_px = 5;
};

struct SkeletonGraph {
  Mask skeleton;  // after spur pruning
  std::vector<Node> nodes;
  std::vector<Segment> segments;
  std::vector<int> labels;  // per pixel: component index or -1
  std::vector<Component> components;
  // Branch nodes after junction merging, one entry per junction.
  std::vector<int> junction_component;

  std::size_t count(NodeKind kind) const;
  std::size_t junctions() const { return junction_component.size(); }
  double total_length_px() const;
};

SkeletonGraph build_graph(const Mask& skeleton, const GraphOptions& options = {});

inline constexpr double kDefaultTrunkMinLengthPx = 50.0;

double cnfl(const SkeletonGraph& graph, const Geometry& geometry);
double cnfd(const SkeletonGraph& graph, const Geometry& geometry,
            double trunk_min_len_px = kDefaultTrunkMinLengthPx);
// Junctions on trunk components, or on every component when all_fibers is set.
double cnbd(const SkeletonGraph& graph, const Geometry& geometry,
            double trunk_min_len_px = kDefaultTrunkMinLengthPx, bool all_fibers = false);
// Mean of 2 * (distance - 0.5 px) * pitch over skeleton pixels, in um.
// Pixels within their own distance value of a free end are skipped unless
// nothing else is left.
// Throws UndefinedValueError on an empty skeleton.
double cnfw(const Mask& mask, const Mask& skeleton, const Geometry& geometry);

struct ReportOptions {
  double trunk_min_len_px = kDefaultTrunkMinLengthPx;
  bool branches_on_all_fibers = false;
  GraphOptions graph;
};

struct BiomarkerReport {
  double cnfl = 0.0;  // mm/mm^2
  double cnfd = 0.0;  // trunks/mm^2
  double cnbd = 0.0;  // branch points/mm^2
  std::optional<double> cnfw;  // um, undefined without fibers
  // Mean width divided by field area (um/mm^2), for comparison with tables
  // that report width in that unit.
  std::optional<double> cnfw_per_area;
  double field_area_mm2 = 0.0;
  double pixel_pitch_um = 0.0;
  double length_px = 0.0;
  std::size_t trunks = 0;
  std::size_t branch_points = 0;
};

BiomarkerReport report(const Mask& mask, const Geometry& geometry, const ReportOptions& options = {});

struct Stat {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (n - 1)
  std::size_t n = 0;
};
// Values that are undefined (nullopt) are skipped.
Stat summarize(const std::vector<std::optional<double>>& values);
Stat summarize(const std::vector<double>& values);

struct CohortSummary {
  std::string group;
  std::string source;
  Stat cnfl, cnfd, cnbd, cnfw;
  std::size_t undefined_cnfw = 0;
};

CohortSummary summarize_cohort(const std::string& group, const std::string& source,
                               const std::vector<BiomarkerReport>& reports);

// Aligned text table: group, source, then mean +- SD for each biomarker.
std::string format_table(const std::vector<CohortSummary>& rows);

}  // namespace nervesynth::biomarkers
