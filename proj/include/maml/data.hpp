#pragma once

#include <cstdint>
#include <random>

#include "maml/core.hpp"
#include "maml/io.hpp"

namespace maml {

// Recipe for the complementary two-modality phantom set. Lesions are
// ellipsoids; the body modality raises intensity only inside a shrunken
// core, the rim modality only on the remaining boundary shell, and the
// ground-truth mask covers the whole lesion. Each modality therefore sees
// just part of what must be segmented.
struct SynthSpec {
    int num_cases = 8;
    std::array<int, 3> shape = {32, 32, 32};
    std::array<int, 2> lesion_count_range = {1, 3};
    std::array<double, 2> lesion_radius_range = {4.0, 7.0};
    ModalityId body_modality = {"AP"};
    ModalityId rim_modality = {"VP"};
    double noise_sigma = 6.0;
    uint64_t seed = 7;
};

void validate_synth_spec(const SynthSpec& spec);

struct LesionInfo {
    std::array<double, 3> center;  // voxel coordinates (z,y,x)
    std::array<double, 3> radii;
    int rim_thickness = 2;  // shell depth in voxels, drawn from {1,2}
};

struct SynthCaseInfo {
    std::string case_id;
    std::vector<LesionInfo> lesions;
    size_t mask_voxels = 0;
};

struct SynthDataset {
    std::vector<MultiModalCase> cases;
    std::vector<SynthCaseInfo> infos;
};

// Deterministic in spec.seed; volumes carry raw (unnormalized) intensities.
SynthDataset generate_synthetic(const SynthSpec& spec);

// Core/shell partition of one generated case, rebuilt analytically from the
// recorded lesion geometry. Used to check where attention concentrates.
struct LesionRegions {
    Mask interior;
    Mask rim;
};

LesionRegions synth_regions(const SynthCaseInfo& info, const std::array<int, 3>& shape);

// Intensity boost applied to the visible region of each modality.
double synth_contrast(const SynthSpec& spec);

struct PatchSpec {
    std::array<int, 3> size = {32, 32, 32};
    double foreground_bias = 0.5;
};

void validate_patch_spec(const PatchSpec& spec);

// Crops the same random window out of every modality and the mask. With
// probability foreground_bias the window is forced to contain foreground
// when the case has any.
MultiModalCase sample_patch(const MultiModalCase& c, const PatchSpec& spec,
                            std::mt19937_64& rng);

struct AugmentConfig {
    bool mirror = true;
    bool rotate = true;
    bool gamma = true;
    double gamma_lo = 0.7;
    double gamma_hi = 1.5;
};

// One shared spatial transform (axis mirrors plus an axis-aligned 90-degree
// rotation) for all grids of the case; gamma correction reshapes intensities
// per modality and leaves the mask untouched.
MultiModalCase augment(const MultiModalCase& c, std::mt19937_64& rng,
                       const AugmentConfig& cfg);

// Reads one case from disk and applies the standard preprocessing
// (percentile clip, then z-score) per modality.
MultiModalCase load_case(const std::map<ModalityId, std::string>& volume_paths,
                         const std::string& mask_path, const std::string& case_id,
                         double clip_lo = 0.5, double clip_hi = 99.5);

// Loads every manifest row through load_case.
std::vector<MultiModalCase> load_dataset(const std::string& manifest_path, double clip_lo = 0.5,
                                         double clip_hi = 99.5);

// Writes a generated dataset as NIfTI volumes plus a manifest, mirroring the
// layout load_dataset expects. Returns the manifest path.
std::string write_synth_dataset(const SynthDataset& ds, const std::vector<ModalityId>& modalities,
                                const std::string& dir);

}  // namespace maml
