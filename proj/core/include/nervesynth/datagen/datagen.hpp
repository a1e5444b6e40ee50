#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nervesynth/biomarkers/biomarkers.hpp"
#include "nervesynth/io/image.hpp"

namespace nervesynth::datagen {

// Class-dependent nerve morphology. Severity lowers trunk count and
// branching and raises tortuosity.
struct MorphParams {
  int trunks_min = 1;
  int trunks_max = 1;
  double branch_prob = 0.0;
  // Lateral control-point jitter of the trunk splines, px.
  double tortuosity = 0.0;
  // Trunks are tilted by at most this angle from horizontal.
  double max_tilt_deg = 0.0;
  double width_min_px = 3.0;
  double width_max_px = 3.0;

  void validate() const;
  static MorphParams for_class(int class_id);
};

struct Point {
  double x = 0.0;
  double y = 0.0;
};

struct Fiber {
  std::vector<Point> centerline;  // dense polyline, continuous pixel coordinates
  double width_px = 0.0;
  int parent = -1;                // trunk index for branches
  double length_px = 0.0;         // centerline length inside the field
};

// Construction records of one generated mask.
struct Truth {
  int trunks = 0;
  int branch_points = 0;
  double length_px = 0.0;  // total centerline length inside the field
  double mean_width_px = 0.0;

  bool operator==(const Truth&) const = default;
};

struct MaskSample {
  biomarkers::Mask mask;
  Truth truth;
  std::vector<Fiber> fibers;
};

MaskSample gen_mask(const MorphParams& params, std::uint64_t seed, std::size_t height = 384,
                    std::size_t width = 384);
MaskSample gen_mask(int class_id, std::uint64_t seed, std::size_t height = 384,
                    std::size_t width = 384);

// Pixels whose centre lies within width/2 of a fiber centerline.
void rasterize(const Fiber& fiber, biomarkers::Mask& mask);

// CCM-like rendering: mid-gray stroma with illumination gradient and
// multiplicative speckle, fibers as Gaussian-blurred bright ridges.
io::GrayImage render_image(const biomarkers::Mask& mask, std::uint64_t seed);

// Block average by an integer factor.
io::GrayImage downsample_image(const io::GrayImage& image, std::size_t factor);
// A block is foreground when at least `min_coverage` of it is.
biomarkers::Mask downsample_mask(const biomarkers::Mask& mask, std::size_t factor,
                                 double min_coverage = 0.1);

biomarkers::Mask mask_from_image(const io::GrayImage& image);
io::GrayImage image_from_mask(const biomarkers::Mask& mask);

enum class Split { train, test };

struct SampleRecord {
  std::string id;
  int class_id = 0;
  Split split = Split::train;
  std::filesystem::path image;  // relative to the manifest directory
  std::filesystem::path mask;
  std::uint64_t seed = 0;
  std::optional<Truth> truth;   // absent for real data
  // Generated samples: id of the real sample whose mask conditioned them.
  std::string source;
};

struct Manifest {
  int version = 1;
  std::size_t image_size = 384;
  double pixel_pitch_um = 400.0 / 384.0;
  std::uint64_t seed = 0;
  std::vector<SampleRecord> samples;
  std::filesystem::path root;   // directory holding manifest.json

  std::vector<const SampleRecord*> select(Split split) const;
  std::vector<const SampleRecord*> select(Split split, int class_id) const;
};

struct DatasetOptions {
  std::size_t image_size = 384;
  std::string extension = ".png";  // or ".pgm"
  double test_fraction = 0.2;
};

// Writes images/, masks/ and manifest.json under out_dir. The split is drawn
// per class so each class keeps the train/test ratio.
Manifest gen_dataset(int n_per_class, std::uint64_t seed, const std::filesystem::path& out_dir,
                     const DatasetOptions& options = {});

void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest load_manifest(const std::filesystem::path& path);

// Stable digest of a manifest's listed samples and their file contents.
std::uint64_t manifest_hash(const Manifest& manifest, std::optional<Split> split = std::nullopt);

struct LoadedSample {
  io::GrayImage image;
  biomarkers::Mask mask;
  int class_id = 0;
};
LoadedSample load_sample(const Manifest& manifest, const SampleRecord& record);

std::string split_name(Split split);

}  // namespace nervesynth::datagen
