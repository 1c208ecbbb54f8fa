#include "maml/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace maml {

void validate_volume(const Volume& v) {
    if (v.data.rank() != 3) throw DataError("volume must be a 3D array");
    for (double s : v.spacing)
        if (!(s > 0.0)) throw DataError("volume spacing must be positive");
    for (size_t i = 0; i < v.data.numel(); ++i)
        if (!std::isfinite(v.data[i]))
            throw DataError("volume '" + v.modality.name + "' contains non-finite voxels");
}

void validate_mask(const Mask& m) {
    if (m.data.rank() != 3) throw DataError("mask must be a 3D array");
    for (size_t i = 0; i < m.data.numel(); ++i) {
        const double x = m.data[i];
        if (x != 0.0 && x != 1.0) throw DataError("mask voxels must be 0 or 1");
    }
}

void validate_case(const MultiModalCase& c) {
    if (c.volumes.empty()) throw DataError("case '" + c.case_id + "' has no volumes");
    const Volume& first = c.volumes.begin()->second;
    for (const auto& [id, vol] : c.volumes) {
        validate_volume(vol);
        if (vol.modality != id) throw DataError("volume modality tag disagrees with its key");
        if (!vol.data.same_shape(first.data))
            throw DataError("case '" + c.case_id + "': modality shapes differ");
        if (vol.spacing != first.spacing)
            throw DataError("case '" + c.case_id + "': modality spacings differ");
    }
    validate_mask(c.mask);
    if (!c.mask.data.same_shape(first.data))
        throw DataError("case '" + c.case_id + "': mask shape differs from volumes");
}

std::vector<ModalityId> modalities_of(const MultiModalCase& c) {
    std::vector<ModalityId> out;
    out.reserve(c.volumes.size());
    for (const auto& [id, vol] : c.volumes) out.push_back(id);
    return out;
}

double percentile_of_sorted(const std::vector<double>& sorted, double pct) {
    if (sorted.empty()) throw std::invalid_argument("percentile of empty sequence");
    if (sorted.size() == 1) return sorted[0];
    const double rank = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Volume clip_percentile(const Volume& vol, double lo_pct, double hi_pct) {
    if (!(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 100.0))
        throw ConfigError("clip_percentile: need 0 <= lo < hi <= 100");
    validate_volume(vol);
    std::vector<double> sorted(vol.data.data(), vol.data.data() + vol.data.numel());
    std::sort(sorted.begin(), sorted.end());
    const double lo = percentile_of_sorted(sorted, lo_pct);
    const double hi = percentile_of_sorted(sorted, hi_pct);
    Volume out = vol;
    for (size_t i = 0; i < out.data.numel(); ++i)
        out.data[i] = std::clamp(out.data[i], lo, hi);
    return out;
}

Volume zscore_normalize(const Volume& vol) {
    const size_t n = vol.data.numel();
    if (n < 2) throw DataError("zscore_normalize: volume must have more than one voxel");
    double mean = 0.0;
    for (size_t i = 0; i < n; ++i) mean += vol.data[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = vol.data[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double sd = std::max(std::sqrt(var), 1e-8);
    Volume out = vol;
    for (size_t i = 0; i < n; ++i) out.data[i] = (vol.data[i] - mean) / sd;
    return out;
}

double dice_score(const Mask& pred, const Mask& gt) {
    if (!pred.data.same_shape(gt.data)) throw DataError("dice_score: shape mismatch");
    size_t p = 0, g = 0, inter = 0;
    for (size_t i = 0; i < pred.data.numel(); ++i) {
        const bool a = pred.data[i] != 0.0;
        const bool b = gt.data[i] != 0.0;
        p += a;
        g += b;
        inter += a && b;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + g);
}

std::vector<std::array<int, 3>> surface_voxels(const Mask& m) {
    const int D = m.data.dim(0), H = m.data.dim(1), W = m.data.dim(2);
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (m.data.at(z, y, x) == 0.0) continue;
                bool exposed = false;
                static const int nb[6][3] = {{-1, 0, 0}, {1, 0, 0},  {0, -1, 0},
                                             {0, 1, 0},  {0, 0, -1}, {0, 0, 1}};
                for (const auto& d : nb) {
                    const int nz = z + d[0], ny = y + d[1], nx = x + d[2];
                    if (nz < 0 || nz >= D || ny < 0 || ny >= H || nx < 0 || nx >= W ||
                        m.data.at(nz, ny, nx) == 0.0) {
                        exposed = true;
                        break;
                    }
                }
                if (exposed) out.push_back({z, y, x});
            }
    return out;
}

namespace {

double sum_nearest_distances(const std::vector<std::array<int, 3>>& from,
                             const std::vector<std::array<int, 3>>& to,
                             const std::array<double, 3>& spacing) {
    double total = 0.0;
    for (const auto& a : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& b : to) {
            const double dz = (a[0] - b[0]) * spacing[0];
            const double dy = (a[1] - b[1]) * spacing[1];
            const double dx = (a[2] - b[2]) * spacing[2];
            const double d2 = dz * dz + dy * dy + dx * dx;
            if (d2 < best) best = d2;
        }
        total += std::sqrt(best);
    }
    return total;
}

}  // namespace

std::optional<double> assd(const Mask& pred, const Mask& gt,
                           const std::array<double, 3>& spacing) {
    if (!pred.data.same_shape(gt.data)) throw DataError("assd: shape mismatch");
    const auto sp = surface_voxels(pred);
    const auto sg = surface_voxels(gt);
    if (sp.empty() || sg.empty()) return std::nullopt;
    const double total =
        sum_nearest_distances(sp, sg, spacing) + sum_nearest_distances(sg, sp, spacing);
    return total / static_cast<double>(sp.size() + sg.size());
}

Aggregate aggregate_per_case(const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("aggregate_per_case: empty list");
    Aggregate a;
    for (double v : values) a.mean += v;
    a.mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) {
        const double d = v - a.mean;
        var += d * d;
    }
    a.std = std::sqrt(var / static_cast<double>(values.size()));
    return a;
}

}  // namespace maml
