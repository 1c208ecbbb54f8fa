#include "maml/model.hpp"

#include <algorithm>

namespace maml {

void validate_model_config(const ModelConfig& cfg) {
    if (cfg.modalities.size() < 2) throw ConfigError("model: at least 2 modalities required");
    validate_backbone_config(cfg.backbone);
    if (cfg.backbone.in_channels != 1)
        throw ConfigError("model: one input channel per modality stream");
    std::vector<ModalityId> sorted = cfg.modalities;
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i] == sorted[i - 1])
            throw ConfigError("model: duplicate modality '" + sorted[i].name + "'");
    for (const auto& id : cfg.modalities)
        if (id.name.empty()) throw ConfigError("model: empty modality name");
}

MamlModel build_model(ModelConfig cfg, uint64_t seed) {
    validate_model_config(cfg);
    std::sort(cfg.modalities.begin(), cfg.modalities.end());
    MamlModel m;
    m.cfg = cfg;
    std::mt19937_64 rng(seed);
    for (const auto& id : cfg.modalities)
        m.backbones.emplace(id, build_backbone(m.store, "backbone." + id.name, cfg.backbone, rng));
    m.fusion = build_fusion(m.store, cfg.modalities, cfg.backbone, cfg.fusion, rng);
    return m;
}

namespace {

ad::Value as_input_node(ad::Tape& tape, const Tensor& vol) {
    if (vol.rank() != 3) throw DataError("model: input tensors must be (D,H,W)");
    Tensor in({1, vol.dim(0), vol.dim(1), vol.dim(2)});
    std::copy(vol.data(), vol.data() + vol.numel(), in.data());
    return tape.leaf(std::move(in), false);
}

}  // namespace

ForwardNodes model_forward_t(ad::Tape& tape, const TapeParams& tp, const MamlModel& model,
                             const std::map<ModalityId, Tensor>& inputs) {
    if (inputs.size() != model.cfg.modalities.size())
        throw ConfigError("model: expected " + std::to_string(model.cfg.modalities.size()) +
                          " modality inputs, got " + std::to_string(inputs.size()));
    ForwardNodes out;
    for (const auto& id : model.cfg.modalities) {
        auto it = inputs.find(id);
        if (it == inputs.end()) throw ConfigError("model: missing input for '" + id.name + "'");
        const BackboneNet& net = model.backbones.at(id);
        ad::Value feat = backbone_forward_t(tape, tp, net, as_input_node(tape, it->second));
        out.features.emplace(id, feat);
        out.intra_probs.emplace(id, modality_head_t(tape, tp, net, feat));
    }
    out.dual = make_dual_t(tape, tp, model.fusion, out.features);
    std::vector<std::pair<ad::Value, ad::Value>> pairs;
    for (const auto& id : model.cfg.modalities) {
        ad::Value att = attention_for_t(tape, tp, model.fusion, id, out.dual, out.features.at(id));
        out.attentions.emplace(id, att);
        pairs.emplace_back(att, out.features.at(id));
    }
    out.fused = weighted_aggregate_t(pairs);
    out.joint_probs = joint_head_t(tape, tp, model.fusion, out.fused);
    return out;
}

ad::Value model_single_forward_t(ad::Tape& tape, const TapeParams& tp, const MamlModel& model,
                                 const ModalityId& modality, const Tensor& input) {
    auto it = model.backbones.find(modality);
    if (it == model.backbones.end())
        throw ConfigError("model: unknown modality '" + modality.name + "'");
    ad::Value feat = backbone_forward_t(tape, tp, it->second, as_input_node(tape, input));
    return modality_head_t(tape, tp, it->second, feat);
}

}  // namespace maml
