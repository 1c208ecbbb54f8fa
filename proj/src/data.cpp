#include "maml/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "maml/errors.hpp"

namespace maml {

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

int lesion_margin(double radius) { return static_cast<int>(std::ceil(radius)) + 1; }

bool inside_ellipsoid(int z, int y, int x, const std::array<double, 3>& c,
                      const std::array<double, 3>& r) {
    const double dz = (z - c[0]) / r[0];
    const double dy = (y - c[1]) / r[1];
    const double dx = (x - c[2]) / r[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
}

// Marks voxels of one lesion in `full`, and in `core` the voxels of the
// ellipsoid shrunk by the rim thickness.
void rasterize_lesion(const LesionInfo& lesion, const std::array<int, 3>& shape,
                      std::vector<uint8_t>& full, std::vector<uint8_t>& core) {
    const auto& c = lesion.center;
    const auto& r = lesion.radii;
    std::array<double, 3> rin{};
    bool has_core = true;
    for (int a = 0; a < 3; ++a) {
        rin[a] = r[a] - lesion.rim_thickness;
        if (rin[a] < 0.5) has_core = false;
    }
    const int z0 = std::max(0, static_cast<int>(std::floor(c[0] - r[0])));
    const int z1 = std::min(shape[0] - 1, static_cast<int>(std::ceil(c[0] + r[0])));
    const int y0 = std::max(0, static_cast<int>(std::floor(c[1] - r[1])));
    const int y1 = std::min(shape[1] - 1, static_cast<int>(std::ceil(c[1] + r[1])));
    const int x0 = std::max(0, static_cast<int>(std::floor(c[2] - r[2])));
    const int x1 = std::min(shape[2] - 1, static_cast<int>(std::ceil(c[2] + r[2])));
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                if (!inside_ellipsoid(z, y, x, c, r)) continue;
                const size_t i =
                    (static_cast<size_t>(z) * shape[1] + y) * shape[2] + x;
                full[i] = 1;
                if (has_core && inside_ellipsoid(z, y, x, c, rin)) core[i] = 1;
            }
}

Tensor crop3(const Tensor& t, const std::array<int, 3>& off, const std::array<int, 3>& size) {
    Tensor out = Tensor::zeros({size[0], size[1], size[2]});
    for (int z = 0; z < size[0]; ++z)
        for (int y = 0; y < size[1]; ++y)
            for (int x = 0; x < size[2]; ++x)
                out.at(z, y, x) = t.at(off[0] + z, off[1] + y, off[2] + x);
    return out;
}

Tensor flip_axis(const Tensor& t, int axis) {
    const auto& s = t.shape();
    Tensor out = Tensor::zeros(s);
    for (int z = 0; z < s[0]; ++z)
        for (int y = 0; y < s[1]; ++y)
            for (int x = 0; x < s[2]; ++x) {
                int i[3] = {z, y, x};
                i[axis] = s[axis] - 1 - i[axis];
                out.at(i[0], i[1], i[2]) = t.at(z, y, x);
            }
    return out;
}

// One 90-degree turn in the plane spanned by axes (a,b): the coordinate
// along a becomes the coordinate along b, mirrored.
Tensor rotate90_once(const Tensor& t, int a, int b) {
    const auto& s = t.shape();
    std::vector<int> os = s;
    os[a] = s[b];
    os[b] = s[a];
    Tensor out = Tensor::zeros(os);
    for (int z = 0; z < s[0]; ++z)
        for (int y = 0; y < s[1]; ++y)
            for (int x = 0; x < s[2]; ++x) {
                int i[3] = {z, y, x};
                int j[3] = {z, y, x};
                j[a] = i[b];
                j[b] = s[a] - 1 - i[a];
                out.at(j[0], j[1], j[2]) = t.at(z, y, x);
            }
    return out;
}

Tensor apply_spatial(const Tensor& t, const std::array<bool, 3>& mirror, int plane, int turns) {
    Tensor out = t;
    for (int a = 0; a < 3; ++a)
        if (mirror[a]) out = flip_axis(out, a);
    static const int planes[3][2] = {{1, 2}, {0, 2}, {0, 1}};
    for (int k = 0; k < turns; ++k)
        out = rotate90_once(out, planes[plane][0], planes[plane][1]);
    return out;
}

Tensor gamma_correct(const Tensor& t, double gamma) {
    double lo = t[0], hi = t[0];
    for (size_t i = 0; i < t.numel(); ++i) {
        lo = std::min(lo, t[i]);
        hi = std::max(hi, t[i]);
    }
    if (!(hi > lo)) return t;
    Tensor out = t;
    const double range = hi - lo;
    for (size_t i = 0; i < out.numel(); ++i)
        out[i] = lo + range * std::pow((out[i] - lo) / range, gamma);
    return out;
}

}  // namespace

void validate_synth_spec(const SynthSpec& spec) {
    if (spec.num_cases < 1) throw ConfigError("synthetic dataset needs at least one case");
    for (int d : spec.shape)
        if (d < 8) throw ConfigError("synthetic volume dimensions must be at least 8");
    if (spec.lesion_count_range[0] < 1 || spec.lesion_count_range[1] < spec.lesion_count_range[0])
        throw ConfigError("invalid lesion count range");
    if (spec.lesion_radius_range[0] < 1.0 ||
        spec.lesion_radius_range[1] < spec.lesion_radius_range[0])
        throw ConfigError("invalid lesion radius range");
    const int margin = lesion_margin(spec.lesion_radius_range[1]);
    for (int d : spec.shape)
        if (2 * margin > d - 1)
            throw ConfigError("largest lesion radius does not fit inside the volume");
    if (spec.noise_sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
    if (spec.body_modality.name.empty() || spec.rim_modality.name.empty())
        throw ConfigError("modality names must be non-empty");
    if (spec.body_modality.name == spec.rim_modality.name)
        throw ConfigError("body and rim modalities must differ");
}

double synth_contrast(const SynthSpec& spec) {
    return std::max(12.0, 5.0 * spec.noise_sigma);
}

SynthDataset generate_synthetic(const SynthSpec& spec) {
    validate_synth_spec(spec);
    const auto& s = spec.shape;
    const double contrast = synth_contrast(spec);
    SynthDataset ds;
    for (int ci = 0; ci < spec.num_cases; ++ci) {
        std::mt19937_64 rng(mix_seed(spec.seed, static_cast<uint64_t>(ci)));
        std::uniform_real_distribution<double> grad_dist(-8.0, 8.0);
        const double gz = grad_dist(rng), gy = grad_dist(rng), gx = grad_dist(rng);

        std::uniform_int_distribution<int> count_dist(spec.lesion_count_range[0],
                                                      spec.lesion_count_range[1]);
        const int lesion_count = count_dist(rng);
        std::uniform_real_distribution<double> radius_dist(spec.lesion_radius_range[0],
                                                           spec.lesion_radius_range[1]);
        std::uniform_int_distribution<int> rim_dist(1, 2);

        SynthCaseInfo info;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case_%04d", ci);
        info.case_id = buf;

        for (int li = 0; li < lesion_count; ++li) {
            LesionInfo lesion;
            for (int a = 0; a < 3; ++a) lesion.radii[a] = radius_dist(rng);
            for (int a = 0; a < 3; ++a) {
                const int m = lesion_margin(lesion.radii[a]);
                std::uniform_real_distribution<double> center_dist(
                    static_cast<double>(m), static_cast<double>(s[a] - 1 - m));
                lesion.center[a] = center_dist(rng);
            }
            lesion.rim_thickness = rim_dist(rng);
            info.lesions.push_back(lesion);
        }

        const size_t n = static_cast<size_t>(s[0]) * s[1] * s[2];
        std::vector<uint8_t> full(n, 0), core(n, 0);
        for (const auto& lesion : info.lesions) rasterize_lesion(lesion, s, full, core);

        Tensor background = Tensor::zeros({s[0], s[1], s[2]});
        for (int z = 0; z < s[0]; ++z)
            for (int y = 0; y < s[1]; ++y)
                for (int x = 0; x < s[2]; ++x)
                    background.at(z, y, x) = 100.0 + gz * (2.0 * z / (s[0] - 1) - 1.0) +
                                             gy * (2.0 * y / (s[1] - 1) - 1.0) +
                                             gx * (2.0 * x / (s[2] - 1) - 1.0);

        Tensor body = background;
        Tensor rim = background;
        Tensor mask_data = Tensor::zeros({s[0], s[1], s[2]});
        for (size_t i = 0; i < n; ++i) {
            if (core[i]) body[i] += contrast;
            if (full[i] && !core[i]) rim[i] += contrast;
            if (full[i]) {
                mask_data[i] = 1.0;
                ++info.mask_voxels;
            }
        }

        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        if (spec.noise_sigma > 0.0) {
            for (size_t i = 0; i < n; ++i) body[i] += noise(rng);
            for (size_t i = 0; i < n; ++i) rim[i] += noise(rng);
        }

        MultiModalCase c;
        c.case_id = info.case_id;
        c.mask = Mask{mask_data};
        c.volumes[spec.body_modality] = Volume{body, {1.0, 1.0, 1.0}, spec.body_modality};
        c.volumes[spec.rim_modality] = Volume{rim, {1.0, 1.0, 1.0}, spec.rim_modality};
        validate_case(c);
        ds.cases.push_back(std::move(c));
        ds.infos.push_back(std::move(info));
    }
    return ds;
}

LesionRegions synth_regions(const SynthCaseInfo& info, const std::array<int, 3>& shape) {
    const size_t n = static_cast<size_t>(shape[0]) * shape[1] * shape[2];
    std::vector<uint8_t> full(n, 0), core(n, 0);
    for (const auto& lesion : info.lesions) rasterize_lesion(lesion, shape, full, core);
    Tensor interior = Tensor::zeros({shape[0], shape[1], shape[2]});
    Tensor rim = Tensor::zeros({shape[0], shape[1], shape[2]});
    for (size_t i = 0; i < n; ++i) {
        if (core[i])
            interior[i] = 1.0;
        else if (full[i])
            rim[i] = 1.0;
    }
    return {Mask{interior}, Mask{rim}};
}

void validate_patch_spec(const PatchSpec& spec) {
    for (int d : spec.size)
        if (d < 1) throw ConfigError("patch dimensions must be positive");
    if (spec.foreground_bias < 0.0 || spec.foreground_bias > 1.0)
        throw ConfigError("foreground bias must lie in [0,1]");
}

MultiModalCase sample_patch(const MultiModalCase& c, const PatchSpec& spec,
                            std::mt19937_64& rng) {
    validate_patch_spec(spec);
    validate_case(c);
    const auto& shape = c.mask.data.shape();
    for (int a = 0; a < 3; ++a)
        if (spec.size[a] > shape[a])
            throw DataError("patch does not fit inside case " + c.case_id);

    std::vector<size_t> fg;
    for (size_t i = 0; i < c.mask.data.numel(); ++i)
        if (c.mask.data[i] != 0.0) fg.push_back(i);

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const bool forced = unit(rng) < spec.foreground_bias && !fg.empty();

    std::array<int, 3> off{};
    if (forced) {
        std::uniform_int_distribution<size_t> pick(0, fg.size() - 1);
        const size_t v = fg[pick(rng)];
        const int vz = static_cast<int>(v / (static_cast<size_t>(shape[1]) * shape[2]));
        const int vy = static_cast<int>(v / shape[2] % shape[1]);
        const int vx = static_cast<int>(v % shape[2]);
        const int vox[3] = {vz, vy, vx};
        for (int a = 0; a < 3; ++a) {
            const int lo = std::max(0, vox[a] - spec.size[a] + 1);
            const int hi = std::min(shape[a] - spec.size[a], vox[a]);
            std::uniform_int_distribution<int> pos(lo, hi);
            off[a] = pos(rng);
        }
    } else {
        for (int a = 0; a < 3; ++a) {
            std::uniform_int_distribution<int> pos(0, shape[a] - spec.size[a]);
            off[a] = pos(rng);
        }
    }

    MultiModalCase out;
    out.case_id = c.case_id;
    out.mask = Mask{crop3(c.mask.data, off, spec.size)};
    for (const auto& [id, vol] : c.volumes)
        out.volumes[id] = Volume{crop3(vol.data, off, spec.size), vol.spacing, id};
    return out;
}

MultiModalCase augment(const MultiModalCase& c, std::mt19937_64& rng,
                       const AugmentConfig& cfg) {
    validate_case(c);
    if (cfg.gamma && !(cfg.gamma_lo > 0.0 && cfg.gamma_hi >= cfg.gamma_lo))
        throw ConfigError("invalid gamma range");

    std::array<bool, 3> mirror = {false, false, false};
    int plane = 0, turns = 0;
    if (cfg.mirror) {
        std::uniform_int_distribution<int> coin(0, 1);
        for (int a = 0; a < 3; ++a) mirror[a] = coin(rng) == 1;
    }
    if (cfg.rotate) {
        std::uniform_int_distribution<int> plane_dist(0, 2);
        std::uniform_int_distribution<int> turn_dist(0, 3);
        plane = plane_dist(rng);
        turns = turn_dist(rng);
    }

    MultiModalCase out;
    out.case_id = c.case_id;
    out.mask = Mask{apply_spatial(c.mask.data, mirror, plane, turns)};
    for (const auto& [id, vol] : c.volumes) {
        Tensor t = apply_spatial(vol.data, mirror, plane, turns);
        if (cfg.gamma) {
            std::uniform_real_distribution<double> gamma_dist(cfg.gamma_lo, cfg.gamma_hi);
            t = gamma_correct(t, gamma_dist(rng));
        }
        out.volumes[id] = Volume{std::move(t), vol.spacing, id};
    }
    validate_case(out);
    return out;
}

MultiModalCase load_case(const std::map<ModalityId, std::string>& volume_paths,
                         const std::string& mask_path, const std::string& case_id,
                         double clip_lo, double clip_hi) {
    if (volume_paths.empty()) throw DataError("case " + case_id + " lists no volumes");
    MultiModalCase c;
    c.case_id = case_id;
    for (const auto& [id, path] : volume_paths) c.volumes[id] = io::read_volume(path, id);
    c.mask = io::read_mask(mask_path);

    const Volume& first = c.volumes.begin()->second;
    for (const auto& [id, vol] : c.volumes) {
        if (!vol.data.same_shape(first.data) || vol.spacing != first.spacing)
            throw DataError("case " + case_id + " has misaligned volumes; modalities must share one voxel grid");
    }
    if (!c.mask.data.same_shape(first.data))
        throw DataError("case " + case_id + " mask does not match the volume grid");
    validate_case(c);

    for (auto& [id, vol] : c.volumes)
        vol = zscore_normalize(clip_percentile(vol, clip_lo, clip_hi));
    return c;
}

std::vector<MultiModalCase> load_dataset(const std::string& manifest_path, double clip_lo,
                                         double clip_hi) {
    const io::Manifest manifest = io::read_manifest(manifest_path);
    std::vector<MultiModalCase> cases;
    for (const auto& row : manifest.rows) {
        std::map<ModalityId, std::string> vols;
        for (const auto& [id, rel] : row.volume_paths)
            vols[id] = io::resolve_relative(manifest_path, rel);
        cases.push_back(load_case(vols, io::resolve_relative(manifest_path, row.mask_path),
                                  row.case_id, clip_lo, clip_hi));
    }
    return cases;
}

std::string write_synth_dataset(const SynthDataset& ds, const std::vector<ModalityId>& modalities,
                                const std::string& dir) {
    std::filesystem::create_directories(dir);
    io::Manifest manifest;
    manifest.modalities = modalities;
    for (size_t i = 0; i < ds.cases.size(); ++i) {
        const MultiModalCase& c = ds.cases[i];
        io::ManifestRow row;
        row.case_id = c.case_id;
        for (const auto& id : modalities) {
            const auto it = c.volumes.find(id);
            if (it == c.volumes.end())
                throw DataError("case " + c.case_id + " is missing modality " + id.name);
            const std::string file = c.case_id + "_" + id.name + ".nii";
            io::write_volume_file(dir + "/" + file, it->second.data, it->second.spacing,
                                  id.name, io::VoxelType::f32);
            row.volume_paths[id] = file;
        }
        const std::string mask_file = c.case_id + "_mask.nii";
        io::write_volume_file(dir + "/" + mask_file, c.mask.data,
                              c.volumes.begin()->second.spacing, "mask", io::VoxelType::u8);
        row.mask_path = mask_file;
        manifest.rows.push_back(row);
    }
    const std::string manifest_path = dir + "/manifest.tsv";
    io::write_manifest(manifest_path, manifest);
    return manifest_path;
}

}  // namespace maml
