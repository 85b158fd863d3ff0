#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "vseg/tensor.hpp"
#include "vseg/voldata.hpp"

namespace vseg::metrics {

// Foreground voxel set on an anisotropic grid; voxel (z,h,w) sits at the
// physical point (z*sz, h*sh, w*sw) mm.
struct BinaryMask {
  Tensor<uint8_t> data;  // (Z,H,W), nonzero = foreground
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};

  int64_t count() const {
    int64_t n = 0;
    for (int64_t i = 0; i < data.size(); ++i) n += data[i] ? 1 : 0;
    return n;
  }
};

// Thrown by distance metrics when a mask is empty ("organ missing"); reports
// surface it as N/A rather than aborting a case.
class OrganMissing : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

// Dice similarity coefficient; both-empty pairs score 1.
double dsc(const BinaryMask& gt, const BinaryMask& pred);

// Average Hausdorff distance (mm) over full voxel sets: the larger of the two
// directed mean nearest-neighbor distances.
double ahd(const BinaryMask& gt, const BinaryMask& pred);

// 6-connectivity boundary voxels (volume-boundary voxels count as surface).
BinaryMask extract_surface(const BinaryMask& mask);

// Average surface Hausdorff distance (mm): symmetric mean of the two directed
// mean surface-to-surface distances.
double ashd(const BinaryMask& gt, const BinaryMask& pred);

// Relative volume difference in percent; negative = under-segmentation.
double volume_difference(const BinaryMask& gt, const BinaryMask& pred);

// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
// foreground voxel (separable parabola-envelope transform).
Tensor<double> edt_squared(const BinaryMask& mask);

struct OrganMetrics {
  double dsc = 0.0;
  double ahd_mm = 0.0;
  double ashd_mm = 0.0;
  double vd_percent = 0.0;
  bool distances_valid = false;  // false = N/A (organ missing on either side)
  bool vd_valid = false;
};

struct MetricReport {
  std::vector<std::string> organ_names;  // classes 1..C-1, manifest order
  std::vector<OrganMetrics> per_organ;

  double mean_foreground_dsc() const;
};

// Per-organ binarization of classes 1..C-1 and all four metrics; per-organ
// errors are recorded as N/A, never aborting the case.
MetricReport evaluate_case(const voldata::LabelMap& gt, const voldata::LabelMap& pred,
                           const std::array<double, 3>& spacing_mm);

// Aggregate across cases: per-organ mean and (population) std, N/A skipped.
struct AggregateReport {
  std::vector<std::string> organ_names;
  // [organ][metric] with metric order dsc, ahd, ashd, vd
  std::vector<std::array<double, 4>> mean;
  std::vector<std::array<double, 4>> stddev;
  std::vector<std::array<int64_t, 4>> samples;
};

AggregateReport aggregate(const std::vector<MetricReport>& cases);

std::string report_to_csv(const AggregateReport& r);
std::string report_to_json(const AggregateReport& r);

// Brute-force O(|X||Y|) oracle implementations, kept as the independent
// route the fast path is verified against.
namespace brute {
double directed_mean_distance(const BinaryMask& from, const BinaryMask& to);
double ahd(const BinaryMask& gt, const BinaryMask& pred);
double ashd(const BinaryMask& gt, const BinaryMask& pred);
}  // namespace brute

}  // namespace vseg::metrics
