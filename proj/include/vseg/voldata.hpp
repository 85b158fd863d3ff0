#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vseg/rng.hpp"
#include "vseg/tensor.hpp"

namespace vseg::voldata {

// Fixed intensity window mapped onto [0,1] by normalize_intensity. Phantom
// intensities are defined in these raw units.
inline constexpr double kWindowLo = 0.0;
inline constexpr double kWindowHi = 1000.0;

inline constexpr int kNumClasses = 6;
inline const std::array<std::string, 6> kClassNames = {"background", "prostate", "bladder",
                                                       "rectum",     "femur_l",  "femur_r"};

// Single-channel intensity volume, (Z,H,W).
struct CtVolume {
  Tensor<float> data;
  std::array<double, 3> spacing_mm{1.5, 0.97, 0.97};
  bool normalized = false;

  int64_t depth() const { return data.dim(0); }
  int64_t height() const { return data.dim(1); }
  int64_t width() const { return data.dim(2); }
};

// Per-voxel class assignment over {0..num_classes-1}, same (Z,H,W) grid.
struct LabelMap {
  Tensor<uint8_t> classes;
  int num_classes = kNumClasses;
};

// Soft or hard per-class maps, (C,Z,H,W).
struct OneHotMap {
  Tensor<float> data;
  int num_classes = kNumClasses;
};

// Geometry and intensity ranges for one phantom organ. Centers/radii are
// fractions of the grid extent; intensities are raw window units.
struct OrganSpec {
  std::array<double, 3> center;         // (z,h,w) fractional
  std::array<double, 3> center_jitter;  // uniform +- jitter per axis
  std::array<double, 3> radii;          // fractional half-axes (z,h,w)
  double radii_jitter = 0.0;            // relative, uniform +- on each axis
  double mean_intensity = 0.0;
  double intensity_jitter = 0.0;  // per-case uniform +- on the mean
  bool full_depth = false;        // cylinder spanning the whole z extent
};

struct PhantomSpec {
  uint64_t seed = 0;
  std::array<int64_t, 3> grid_shape{16, 32, 32};
  std::array<double, 3> spacing_mm{1.5, 0.97, 0.97};
  double background_intensity = 300.0;
  double noise_sigma = 30.0;  // raw units, additive gaussian
  int max_placement_retries = 20;
  // Index i describes class i+1 (order: prostate, bladder, rectum, femur_l, femur_r).
  std::array<OrganSpec, 5> organs = default_organs();

  static std::array<OrganSpec, 5> default_organs();
};

// Linear map of [lo,hi] onto [0,1], clipping outside the window.
CtVolume normalize_intensity(const CtVolume& raw, double lo = kWindowLo, double hi = kWindowHi);

// Contiguous depth-slab crop at a uniformly random z-offset; labels (when
// present) are cropped at the identical offset.
std::pair<CtVolume, std::optional<LabelMap>> random_crop_subvolume(
    const CtVolume& vol, const std::optional<LabelMap>& labels, int64_t depth, uint64_t rng_seed);

// As above but the offset is drawn from a caller-owned stream.
std::pair<CtVolume, std::optional<LabelMap>> random_crop_subvolume(
    const CtVolume& vol, const std::optional<LabelMap>& labels, int64_t depth, Rng& rng);

// Z/depth non-overlapping consecutive slabs, order preserved.
std::vector<CtVolume> split_for_inference(const CtVolume& vol, int64_t depth);

// Depth-concatenation; inverse of split_for_inference on label volumes.
OneHotMap stack_predictions(const std::vector<OneHotMap>& chunks);

// Deterministic five-organ phantom; returns the raw (un-normalized) volume.
std::pair<CtVolume, LabelMap> generate_phantom(const PhantomSpec& spec);

OneHotMap to_one_hot(const LabelMap& labels);
LabelMap from_one_hot(const OneHotMap& onehot);

// ---- Persistence ------------------------------------------------------------
// A case directory holds volume.f32 (little-endian float32, z-major),
// labels.u8 (optional) and meta.json. See README for the exact schema.

struct CaseMeta {
  std::string id;
  uint64_t seed = 0;
  std::string role;  // "labeled" | "unlabeled" | "unlabeled-synthetic"
  std::string split; // "train" | "val" | "test"
};

void write_case(const std::filesystem::path& dir, const CtVolume& vol,
                const LabelMap* labels, const CaseMeta& meta);

struct LoadedCase {
  CtVolume volume;
  std::optional<LabelMap> labels;
  CaseMeta meta;
};

LoadedCase read_case(const std::filesystem::path& dir);

struct DatasetManifest {
  std::array<int64_t, 3> grid_shape{};
  std::array<double, 3> spacing_mm{};
  std::vector<std::string> class_names;
  std::vector<CaseMeta> cases;
};

void write_manifest(const std::filesystem::path& root, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& root);

}  // namespace vseg::voldata
