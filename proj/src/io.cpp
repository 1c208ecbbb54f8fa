#include "maml/io.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace maml::io {

namespace {

namespace fs = std::filesystem;

std::vector<char> read_all_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    f.seekg(0, std::ios::end);
    const std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<char> buf(static_cast<size_t>(n));
    if (n > 0) f.read(buf.data(), n);
    if (!f) throw IoError("failed reading '" + path + "'");
    return buf;
}

void write_all_bytes(const std::string& path, const char* data, size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(data, static_cast<std::streamsize>(n));
    if (!f) throw IoError("failed writing '" + path + "'");
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
T load_scalar(const char* p, bool swap) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    if (swap) {
        char* b = reinterpret_cast<char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    return v;
}

template <typename T>
void store_scalar(char* p, T v) {
    std::memcpy(p, &v, sizeof(T));
}

constexpr int16_t kNiftiU8 = 2;
constexpr int16_t kNiftiI16 = 4;
constexpr int16_t kNiftiI32 = 8;
constexpr int16_t kNiftiF32 = 16;
constexpr int16_t kNiftiF64 = 64;

int16_t nifti_code(VoxelType vt) {
    switch (vt) {
        case VoxelType::u8: return kNiftiU8;
        case VoxelType::f32: return kNiftiF32;
        case VoxelType::f64: return kNiftiF64;
    }
    throw std::logic_error("unreachable voxel type");
}

int bitpix_of(int16_t code) {
    switch (code) {
        case kNiftiU8: return 8;
        case kNiftiI16: return 16;
        case kNiftiI32: return 32;
        case kNiftiF32: return 32;
        case kNiftiF64: return 64;
        default: return 0;
    }
}

void write_nifti(const std::string& path, const Tensor& data,
                 const std::array<double, 3>& spacing, VoxelType vt) {
    const int D = data.dim(0), H = data.dim(1), W = data.dim(2);
    const int16_t code = nifti_code(vt);
    std::vector<char> hdr(352, 0);
    store_scalar<int32_t>(hdr.data() + 0, 348);
    const int16_t dims[8] = {3, static_cast<int16_t>(W), static_cast<int16_t>(H),
                             static_cast<int16_t>(D), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store_scalar<int16_t>(hdr.data() + 40 + 2 * i, dims[i]);
    store_scalar<int16_t>(hdr.data() + 70, code);
    store_scalar<int16_t>(hdr.data() + 72, static_cast<int16_t>(bitpix_of(code)));
    const float pixdim[8] = {1.0f, static_cast<float>(spacing[2]), static_cast<float>(spacing[1]),
                             static_cast<float>(spacing[0]), 0, 0, 0, 0};
    for (int i = 0; i < 8; ++i) store_scalar<float>(hdr.data() + 76 + 4 * i, pixdim[i]);
    store_scalar<float>(hdr.data() + 108, 352.0f);  // vox_offset
    store_scalar<float>(hdr.data() + 112, 1.0f);    // scl_slope
    store_scalar<float>(hdr.data() + 116, 0.0f);    // scl_inter
    hdr[123] = 2;                                   // spatial units: mm
    std::memcpy(hdr.data() + 344, "n+1\0", 4);

    std::vector<char> payload;
    const size_t n = data.numel();
    switch (vt) {
        case VoxelType::u8: {
            payload.resize(n);
            for (size_t i = 0; i < n; ++i) payload[i] = static_cast<char>(
                static_cast<uint8_t>(data[i]));
            break;
        }
        case VoxelType::f32: {
            payload.resize(n * 4);
            for (size_t i = 0; i < n; ++i)
                store_scalar<float>(payload.data() + 4 * i, static_cast<float>(data[i]));
            break;
        }
        case VoxelType::f64: {
            payload.resize(n * 8);
            for (size_t i = 0; i < n; ++i) store_scalar<double>(payload.data() + 8 * i, data[i]);
            break;
        }
    }
    std::vector<char> all;
    all.reserve(hdr.size() + payload.size());
    all.insert(all.end(), hdr.begin(), hdr.end());
    all.insert(all.end(), payload.begin(), payload.end());
    write_all_bytes(path, all.data(), all.size());
}

LoadedVolume read_nifti(const std::string& path) {
    const std::vector<char> buf = read_all_bytes(path);
    if (buf.size() < 352) throw IoError("'" + path + "': truncated NIfTI header");
    bool swap = false;
    int32_t hdr_size = load_scalar<int32_t>(buf.data(), false);
    if (hdr_size != 348) {
        hdr_size = load_scalar<int32_t>(buf.data(), true);
        if (hdr_size != 348) throw IoError("'" + path + "': not a NIfTI-1 file");
        swap = true;
    }
    const char* magic = buf.data() + 344;
    if (std::memcmp(magic, "ni1", 3) == 0)
        throw IoError("'" + path + "': two-file NIfTI (.hdr/.img) is not supported");
    if (std::memcmp(magic, "n+1", 3) != 0)
        throw IoError("'" + path + "': missing NIfTI magic");

    int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = load_scalar<int16_t>(buf.data() + 40 + 2 * i, swap);
    if (dim[0] < 1 || dim[0] > 7) throw IoError("'" + path + "': bad dimension count");
    for (int i = 4; i <= dim[0]; ++i)
        if (dim[i] > 1) throw IoError("'" + path + "': only 3D volumes are supported");
    const int W = dim[0] >= 1 ? dim[1] : 1;
    const int H = dim[0] >= 2 ? dim[2] : 1;
    const int D = dim[0] >= 3 ? dim[3] : 1;
    if (W < 1 || H < 1 || D < 1) throw IoError("'" + path + "': nonpositive dimensions");

    const int16_t code = load_scalar<int16_t>(buf.data() + 70, swap);
    const int bp = bitpix_of(code);
    if (bp == 0) throw IoError("'" + path + "': unsupported NIfTI datatype " + std::to_string(code));

    float pixdim[4];
    for (int i = 0; i < 4; ++i) pixdim[i] = load_scalar<float>(buf.data() + 76 + 4 * i, swap);
    float vox_offset = load_scalar<float>(buf.data() + 108, swap);
    if (vox_offset < 348.0f) vox_offset = 352.0f;
    float slope = load_scalar<float>(buf.data() + 112, swap);
    const float inter = load_scalar<float>(buf.data() + 116, swap);
    if (slope == 0.0f) slope = 1.0f;

    const size_t n = static_cast<size_t>(D) * H * W;
    const size_t off = static_cast<size_t>(vox_offset);
    const size_t esz = static_cast<size_t>(bp) / 8;
    if (buf.size() < off + n * esz) throw IoError("'" + path + "': truncated voxel data");

    LoadedVolume out;
    out.data = Tensor({D, H, W});
    const char* p = buf.data() + off;
    for (size_t i = 0; i < n; ++i, p += esz) {
        double raw;
        switch (code) {
            case kNiftiU8: raw = static_cast<double>(static_cast<uint8_t>(*p)); break;
            case kNiftiI16: raw = load_scalar<int16_t>(p, swap); break;
            case kNiftiI32: raw = load_scalar<int32_t>(p, swap); break;
            case kNiftiF32: raw = load_scalar<float>(p, swap); break;
            default: raw = load_scalar<double>(p, swap); break;
        }
        out.data[i] = (slope == 1.0f && inter == 0.0f) ? raw : slope * raw + inter;
    }
    const double sx = pixdim[1] > 0 ? pixdim[1] : 1.0;
    const double sy = pixdim[2] > 0 ? pixdim[2] : 1.0;
    const double sz = pixdim[3] > 0 ? pixdim[3] : 1.0;
    out.spacing = {sz, sy, sx};
    return out;
}

const char* dtype_name(VoxelType vt) {
    switch (vt) {
        case VoxelType::u8: return "uint8";
        case VoxelType::f32: return "float32";
        case VoxelType::f64: return "float64";
    }
    throw std::logic_error("unreachable voxel type");
}

void write_raw(const std::string& path, const Tensor& data,
               const std::array<double, 3>& spacing, const std::string& modality_tag,
               VoxelType vt) {
    const size_t n = data.numel();
    std::vector<char> payload;
    switch (vt) {
        case VoxelType::u8:
            payload.resize(n);
            for (size_t i = 0; i < n; ++i)
                payload[i] = static_cast<char>(static_cast<uint8_t>(data[i]));
            break;
        case VoxelType::f32:
            payload.resize(n * 4);
            for (size_t i = 0; i < n; ++i)
                store_scalar<float>(payload.data() + 4 * i, static_cast<float>(data[i]));
            break;
        case VoxelType::f64:
            payload.resize(n * 8);
            for (size_t i = 0; i < n; ++i) store_scalar<double>(payload.data() + 8 * i, data[i]);
            break;
    }
    write_all_bytes(path, payload.data(), payload.size());

    std::ostringstream meta;
    meta << "shape: " << data.dim(0) << " " << data.dim(1) << " " << data.dim(2) << "\n";
    char sp[96];
    std::snprintf(sp, sizeof(sp), "spacing: %.17g %.17g %.17g\n", spacing[0], spacing[1],
                  spacing[2]);
    meta << sp;
    meta << "modality: " << modality_tag << "\n";
    meta << "dtype: " << dtype_name(vt) << "\n";
    write_text_file(path + ".meta", meta.str());
}

LoadedVolume read_raw(const std::string& path) {
    const std::string meta_text = read_text_file(path + ".meta");
    std::istringstream in(meta_text);
    std::string line;
    std::vector<int> shape;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string modality, dtype;
    while (std::getline(in, line)) {
        const size_t colon = line.find(':');
        if (colon == std::string::npos) continue;
        const std::string key = line.substr(0, colon);
        std::istringstream rest(line.substr(colon + 1));
        if (key == "shape") {
            int v;
            while (rest >> v) shape.push_back(v);
        } else if (key == "spacing") {
            rest >> spacing[0] >> spacing[1] >> spacing[2];
        } else if (key == "modality") {
            rest >> modality;
        } else if (key == "dtype") {
            rest >> dtype;
        }
    }
    if (shape.size() != 3) throw IoError("'" + path + ".meta': shape must have 3 dimensions");
    if (dtype != "uint8" && dtype != "float32" && dtype != "float64")
        throw IoError("'" + path + ".meta': unsupported dtype '" + dtype + "'");

    const std::vector<char> buf = read_all_bytes(path);
    LoadedVolume out;
    out.data = Tensor({shape[0], shape[1], shape[2]});
    out.spacing = spacing;
    out.modality_tag = modality;
    const size_t n = out.data.numel();
    const size_t esz = dtype == "uint8" ? 1 : dtype == "float32" ? 4 : 8;
    if (buf.size() != n * esz)
        throw IoError("'" + path + "': size " + std::to_string(buf.size()) +
                      " does not match meta shape");
    const char* p = buf.data();
    for (size_t i = 0; i < n; ++i, p += esz) {
        if (esz == 1)
            out.data[i] = static_cast<double>(static_cast<uint8_t>(*p));
        else if (esz == 4)
            out.data[i] = load_scalar<float>(p, false);
        else
            out.data[i] = load_scalar<double>(p, false);
    }
    return out;
}

}  // namespace

void write_volume_file(const std::string& path, const Tensor& data,
                       const std::array<double, 3>& spacing, const std::string& modality_tag,
                       VoxelType vt) {
    if (data.rank() != 3) throw DataError("write_volume_file: data must be rank 3");
    if (ends_with(path, ".nii"))
        write_nifti(path, data, spacing, vt);
    else if (ends_with(path, ".raw"))
        write_raw(path, data, spacing, modality_tag, vt);
    else
        throw IoError("'" + path + "': unknown volume extension (expected .nii or .raw)");
}

LoadedVolume read_volume_file(const std::string& path) {
    if (ends_with(path, ".nii")) return read_nifti(path);
    if (ends_with(path, ".raw")) return read_raw(path);
    throw IoError("'" + path + "': unknown volume extension (expected .nii or .raw)");
}

Volume read_volume(const std::string& path, const ModalityId& modality) {
    LoadedVolume lv = read_volume_file(path);
    Volume v;
    v.data = std::move(lv.data);
    v.spacing = lv.spacing;
    v.modality = modality;
    validate_volume(v);
    return v;
}

Mask read_mask(const std::string& path) {
    LoadedVolume lv = read_volume_file(path);
    Mask m;
    m.data = std::move(lv.data);
    validate_mask(m);
    return m;
}

void write_manifest(const std::string& path, const Manifest& m) {
    std::ostringstream out;
    out << "case_id";
    for (const auto& id : m.modalities) out << "\t" << id.name;
    out << "\tmask\n";
    for (const auto& row : m.rows) {
        out << row.case_id;
        for (const auto& id : m.modalities) {
            auto it = row.volume_paths.find(id);
            if (it == row.volume_paths.end())
                throw IoError("manifest row '" + row.case_id + "' is missing modality '" +
                              id.name + "'");
            out << "\t" << it->second;
        }
        out << "\t" << row.mask_path << "\n";
    }
    write_text_file(path, out.str());
}

Manifest read_manifest(const std::string& path) {
    std::istringstream in(read_text_file(path));
    std::string line;
    if (!std::getline(in, line)) throw IoError("'" + path + "': empty manifest");
    std::vector<std::string> header;
    {
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, '\t')) header.push_back(cell);
    }
    if (header.size() < 3 || header.front() != "case_id" || header.back() != "mask")
        throw IoError("'" + path + "': manifest header must be case_id<TAB>...<TAB>mask");
    Manifest m;
    for (size_t i = 1; i + 1 < header.size(); ++i) m.modalities.push_back({header[i]});
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, '\t')) cells.push_back(cell);
        if (cells.size() != header.size())
            throw IoError("'" + path + "': manifest row has " + std::to_string(cells.size()) +
                          " cells, expected " + std::to_string(header.size()));
        ManifestRow row;
        row.case_id = cells[0];
        for (size_t i = 0; i < m.modalities.size(); ++i)
            row.volume_paths[m.modalities[i]] = cells[i + 1];
        row.mask_path = cells.back();
        m.rows.push_back(std::move(row));
    }
    return m;
}

std::string resolve_relative(const std::string& manifest_path, const std::string& rel) {
    if (rel.empty()) return rel;
    fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(manifest_path).parent_path() / p).string();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ostringstream out;
    out << "case_id,dice,assd\n";
    char num[64];
    for (const auto& r : rows) {
        std::snprintf(num, sizeof(num), "%.17g", r.dice);
        out << r.case_id << "," << num << ",";
        if (r.assd) {
            std::snprintf(num, sizeof(num), "%.17g", *r.assd);
            out << num;
        }
        out << "\n";
    }
    write_text_file(path, out.str());
}

void write_text_file(const std::string& path, const std::string& content) {
    write_all_bytes(path, content.data(), content.size());
}

std::string read_text_file(const std::string& path) {
    const std::vector<char> buf = read_all_bytes(path);
    return std::string(buf.begin(), buf.end());
}

}  // namespace maml::io
