#include "maml/fusion.hpp"

#include <algorithm>

#include "maml/io.hpp"

namespace maml {

FusionNet build_fusion(ParamStore& store, const std::vector<ModalityId>& modalities,
                       const BackboneConfig& backbone, const FusionConfig& cfg,
                       std::mt19937_64& rng) {
    if (modalities.size() < 2) throw ConfigError("fusion: at least 2 modalities required");
    if (cfg.dual_kernel != 1 && cfg.dual_kernel != 3)
        throw ConfigError("fusion: dual_kernel must be 1 or 3");
    if (cfg.fa_mid_channels < 1) throw ConfigError("fusion: fa_mid_channels must be >= 1");

    FusionNet net;
    net.cfg = cfg;
    net.feature_channels = backbone.feature_channels;
    net.norm_epsilon = backbone.norm_epsilon;
    net.leaky_slope = backbone.leaky_slope;
    net.order = modalities;
    std::sort(net.order.begin(), net.order.end());
    for (size_t i = 1; i < net.order.size(); ++i)
        if (net.order[i] == net.order[i - 1])
            throw ConfigError("fusion: duplicate modality '" + net.order[i].name + "'");

    const int C = net.feature_channels;
    const int n = static_cast<int>(net.order.size());
    net.dual = add_conv(store, "fusion.dual", n * C, C, cfg.dual_kernel, rng);
    for (const auto& id : net.order) {
        const std::string base = "fusion.fa." + id.name;
        net.fa[id] = {add_conv(store, base + ".c0", 2 * C, cfg.fa_mid_channels, 3, rng),
                      add_conv(store, base + ".c1", cfg.fa_mid_channels, 1, 1, rng)};
    }
    net.joint_head = add_conv(store, "fusion.joint_head", C, 2, 1, rng);
    return net;
}

ad::Value make_dual_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                      const std::map<ModalityId, ad::Value>& features) {
    if (features.size() != net.order.size())
        throw ConfigError("make_dual: expected " + std::to_string(net.order.size()) +
                          " modalities, got " + std::to_string(features.size()));
    std::vector<ad::Value> ordered;
    for (const auto& id : net.order) {
        auto it = features.find(id);
        if (it == features.end())
            throw ConfigError("make_dual: missing modality '" + id.name + "'");
        const Tensor& f = tape.val(it->second);
        if (f.rank() != 4 || f.dim(0) != net.feature_channels)
            throw DataError("make_dual: feature for '" + id.name + "' has wrong channel count");
        ordered.push_back(it->second);
    }
    ad::Value cat = ad::concat_channels(ordered);
    return ad::conv3d(cat, tp.values[static_cast<size_t>(net.dual.w)],
                      tp.values[static_cast<size_t>(net.dual.b)], 1);
}

ad::Value attention_for_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                          const ModalityId& modality, ad::Value dual, ad::Value feat) {
    auto it = net.fa.find(modality);
    if (it == net.fa.end())
        throw ConfigError("attention_for: unknown modality '" + modality.name + "'");
    const Tensor& d = tape.val(dual);
    const Tensor& f = tape.val(feat);
    if (!d.same_shape(f)) throw DataError("attention_for: dual/feature shape mismatch");

    ad::Value x = ad::concat_channels({dual, feat});
    const auto& [c0, c1] = it->second;
    x = ad::conv3d(x, tp.values[static_cast<size_t>(c0.w)], tp.values[static_cast<size_t>(c0.b)], 1);
    x = ad::instance_norm(x, net.norm_epsilon);
    x = ad::leaky_relu(x, net.leaky_slope);
    x = ad::conv3d(x, tp.values[static_cast<size_t>(c1.w)], tp.values[static_cast<size_t>(c1.b)], 1);
    x = ad::instance_norm(x, net.norm_epsilon);
    x = ad::leaky_relu(x, net.leaky_slope);
    return ad::sigmoid(x);
}

ad::Value weighted_aggregate_t(const std::vector<std::pair<ad::Value, ad::Value>>& pairs) {
    if (pairs.empty()) throw DataError("weighted_aggregate: empty pair list");
    ad::Value acc = ad::broadcast_mul(pairs[0].first, pairs[0].second);
    for (size_t i = 1; i < pairs.size(); ++i)
        acc = ad::add(acc, ad::broadcast_mul(pairs[i].first, pairs[i].second));
    return acc;
}

ad::Value joint_head_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                       ad::Value fused) {
    const Tensor& f = tape.val(fused);
    if (f.rank() != 4 || f.dim(0) != net.feature_channels)
        throw DataError("joint_head: fused feature has wrong channel count");
    ad::Value logits = ad::conv3d(fused, tp.values[static_cast<size_t>(net.joint_head.w)],
                                  tp.values[static_cast<size_t>(net.joint_head.b)], 1);
    return ad::softmax_channels(logits);
}

DualFeature make_dual(const std::map<ModalityId, FeatureMap>& features, const ParamStore& store,
                      const FusionNet& net) {
    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, store, false);
    std::map<ModalityId, ad::Value> vals;
    for (const auto& [id, f] : features) {
        if (f.modality != id) throw DataError("make_dual: feature tagged with wrong modality");
        vals[id] = tape.leaf(f.data, false);
    }
    DualFeature out;
    out.data = tape.val(make_dual_t(tape, tp, net, vals));
    return out;
}

AttentionMap attention_for(const ModalityId& modality, const DualFeature& dual,
                           const FeatureMap& feat, const ParamStore& store,
                           const FusionNet& net) {
    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, store, false);
    ad::Value a = attention_for_t(tape, tp, net, modality, tape.leaf(dual.data, false),
                                  tape.leaf(feat.data, false));
    AttentionMap out;
    out.data = tape.val(a);
    out.modality = modality;
    return out;
}

FusedFeature weighted_aggregate(const std::vector<std::pair<AttentionMap, FeatureMap>>& pairs) {
    if (pairs.empty()) throw DataError("weighted_aggregate: empty pair list");
    // Canonical modality order makes the summation order, and therefore the
    // result, independent of how callers arranged the list.
    std::vector<const std::pair<AttentionMap, FeatureMap>*> sorted;
    sorted.reserve(pairs.size());
    for (const auto& p : pairs) sorted.push_back(&p);
    std::stable_sort(sorted.begin(), sorted.end(), [](const auto* a, const auto* b) {
        return a->first.modality < b->first.modality;
    });

    const Tensor& f0 = sorted[0]->second.data;
    FusedFeature out;
    out.data = Tensor(f0.shape());
    const int C = f0.dim(0);
    const size_t S = f0.spatial();
    for (const auto* p : sorted) {
        const Tensor& a = p->first.data;
        const Tensor& f = p->second.data;
        if (a.rank() != 4 || a.dim(0) != 1) throw DataError("weighted_aggregate: attention must be 1-channel");
        if (!f.same_shape(f0) || a.spatial() != S)
            throw DataError("weighted_aggregate: shape mismatch");
        if (p->first.modality != p->second.modality)
            throw DataError("weighted_aggregate: attention/feature modality mismatch");
        for (int c = 0; c < C; ++c) {
            const double* fc = f.data() + c * S;
            double* oc = out.data.data() + c * S;
            for (size_t i = 0; i < S; ++i) oc[i] += a[i] * fc[i];
        }
    }
    return out;
}

ProbMap joint_head(const FusedFeature& fused, const ParamStore& store, const FusionNet& net) {
    ad::Tape tape(false);
    TapeParams tp = lift_params(tape, store, false);
    ProbMap out;
    out.data = tape.val(joint_head_t(tape, tp, net, tape.leaf(fused.data, false)));
    return out;
}

void export_attention(const AttentionMap& att, const MultiModalCase& c, const std::string& path) {
    if (c.volumes.empty()) throw DataError("export_attention: case has no volumes");
    const Volume& ref = c.volumes.begin()->second;
    if (att.data.rank() != 4 || att.data.dim(0) != 1 || att.data.dim(1) != ref.data.dim(0) ||
        att.data.dim(2) != ref.data.dim(1) || att.data.dim(3) != ref.data.dim(2))
        throw DataError("export_attention: attention grid does not match the case grid");
    Tensor vol({att.data.dim(1), att.data.dim(2), att.data.dim(3)});
    std::copy(att.data.data(), att.data.data() + att.data.numel(), vol.data());
    io::write_volume_file(path, vol, ref.spacing, att.modality.name, io::VoxelType::f64);
}

}  // namespace maml
