#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maml/core.hpp"

namespace maml::io {

// On-disk voxel encodings. Doubles are preserved exactly only by f64.
enum class VoxelType { u8, f32, f64 };

// Writes a volume file. Format picked by extension: ".nii" for uncompressed
// NIfTI-1, ".raw" for little-endian raw voxels with a "<path>.meta" text
// sidecar (shape, spacing, modality, dtype). Data order is x-fastest.
void write_volume_file(const std::string& path, const Tensor& data,
                       const std::array<double, 3>& spacing, const std::string& modality_tag,
                       VoxelType vt);

struct LoadedVolume {
    Tensor data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string modality_tag;  // empty when the format carries none (NIfTI)
};

LoadedVolume read_volume_file(const std::string& path);

Volume read_volume(const std::string& path, const ModalityId& modality);
Mask read_mask(const std::string& path);

// Dataset manifest: tab-separated, first line is the header
// "case_id<TAB><modality...><TAB>mask"; paths are relative to the manifest's
// directory.
struct ManifestRow {
    std::string case_id;
    std::map<ModalityId, std::string> volume_paths;
    std::string mask_path;
};

struct Manifest {
    std::vector<ModalityId> modalities;
    std::vector<ManifestRow> rows;
};

void write_manifest(const std::string& path, const Manifest& m);
Manifest read_manifest(const std::string& path);

// Joins a path relative to the directory containing `manifest_path`.
std::string resolve_relative(const std::string& manifest_path, const std::string& rel);

struct MetricsRow {
    std::string case_id;
    double dice = 0.0;
    std::optional<double> assd;
};

// CSV with header "case_id,dice,assd"; a missing ASSD leaves the cell empty.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace maml::io
