#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maml/errors.hpp"
#include "maml/tensor.hpp"

namespace maml {

// Tag identifying an imaging modality (e.g. "AP", "VP"). Ordered by name so
// that maps of modalities iterate in the canonical lexicographic order used
// for channel concatenation and checkpointing.
struct ModalityId {
    std::string name;
    bool operator<(const ModalityId& o) const { return name < o.name; }
    bool operator==(const ModalityId& o) const { return name == o.name; }
    bool operator!=(const ModalityId& o) const { return name != o.name; }
};

// A single-modality image grid. spacing is the voxel size in mm along
// (z, y, x), matching the (D, H, W) data layout.
struct Volume {
    Tensor data;  // (D,H,W)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    ModalityId modality;
};

// Binary segmentation labels on the same grid as the paired volumes.
struct Mask {
    Tensor data;  // (D,H,W), values in {0,1}
};

// All registered modalities of one case plus its ground truth.
struct MultiModalCase {
    std::map<ModalityId, Volume> volumes;
    Mask mask;
    std::string case_id;
};

// Per-voxel class probabilities (background, foreground).
struct ProbMap {
    Tensor data;  // (2,D,H,W)
};

void validate_volume(const Volume& v);
void validate_mask(const Mask& m);
void validate_case(const MultiModalCase& c);

std::vector<ModalityId> modalities_of(const MultiModalCase& c);

// Percentile by linear interpolation between closest ranks: rank p/100*(n-1)
// into the ascending sequence. `sorted` must already be ascending.
double percentile_of_sorted(const std::vector<double>& sorted, double pct);

// Clamps every voxel into [P_lo, P_hi] of the volume's own intensity
// distribution. Non-finite voxels are rejected.
Volume clip_percentile(const Volume& vol, double lo_pct, double hi_pct);

// Shifts to zero mean and scales to unit standard deviation (population
// convention). Constant volumes come back all-zero via the epsilon guard.
Volume zscore_normalize(const Volume& vol);

// 2|P∩G| / (|P|+|G|). Both masks empty counts as perfect agreement (1.0);
// exactly one empty scores 0.0.
double dice_score(const Mask& pred, const Mask& gt);

// Average symmetric surface distance in physical units. Surface voxels are
// foreground voxels with a face-adjacent background or out-of-volume
// neighbor. Returns nullopt when either mask has no foreground, so callers
// can report the case as missing instead of folding in a fake zero.
std::optional<double> assd(const Mask& pred, const Mask& gt,
                           const std::array<double, 3>& spacing = {1.0, 1.0, 1.0});

struct Aggregate {
    double mean = 0.0;
    double std = 0.0;  // population convention
};

Aggregate aggregate_per_case(const std::vector<double>& values);

// Surface voxel coordinates (z,y,x) of a binary mask under 6-connectivity,
// in raster order. Exposed for reuse by metrics and synthetic-data checks.
std::vector<std::array<int, 3>> surface_voxels(const Mask& m);

}  // namespace maml
