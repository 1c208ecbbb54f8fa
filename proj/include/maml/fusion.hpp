#pragma once

#include <map>
#include <utility>
#include <vector>

#include "maml/backbone.hpp"

namespace maml {

struct FusionConfig {
    int dual_kernel = 1;      // kernel of the conv collapsing concatenated features
    int fa_mid_channels = 16; // width between the two attention convs
};

// Per-modality spatial attention in (0,1).
struct AttentionMap {
    Tensor data;  // (1,D,H,W)
    ModalityId modality;
};

// Joint representation distilled from all modalities.
struct DualFeature {
    Tensor data;  // (C,D,H,W)
};

// Attention-weighted sum of the per-modality features.
struct FusedFeature {
    Tensor data;  // (C,D,H,W)
};

// Parameter layout of the fusion stage. Attention parameters are separate
// per modality; `order` is the canonical (lexicographic) concatenation order.
struct FusionNet {
    FusionConfig cfg;
    int feature_channels = 0;
    double norm_epsilon = 1e-5;
    double leaky_slope = 0.01;
    std::vector<ModalityId> order;
    ConvRef dual;                                      // N*C -> C
    std::map<ModalityId, std::array<ConvRef, 2>> fa;   // 3x3x3 2C->mid, 1x1x1 mid->1
    ConvRef joint_head;                                // C -> 2
};

FusionNet build_fusion(ParamStore& store, const std::vector<ModalityId>& modalities,
                       const BackboneConfig& backbone, const FusionConfig& cfg,
                       std::mt19937_64& rng);

// Tape-side stages.
ad::Value make_dual_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                      const std::map<ModalityId, ad::Value>& features);
ad::Value attention_for_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                          const ModalityId& modality, ad::Value dual, ad::Value feat);
ad::Value weighted_aggregate_t(const std::vector<std::pair<ad::Value, ad::Value>>& pairs);
ad::Value joint_head_t(ad::Tape& tape, const TapeParams& tp, const FusionNet& net,
                       ad::Value fused);

// Spec-level wrappers over an inference tape.
DualFeature make_dual(const std::map<ModalityId, FeatureMap>& features, const ParamStore& store,
                      const FusionNet& net);
AttentionMap attention_for(const ModalityId& modality, const DualFeature& dual,
                           const FeatureMap& feat, const ParamStore& store, const FusionNet& net);
FusedFeature weighted_aggregate(const std::vector<std::pair<AttentionMap, FeatureMap>>& pairs);
ProbMap joint_head(const FusedFeature& fused, const ParamStore& store, const FusionNet& net);

// Writes the attention map as a float64 volume on the case's grid so it can
// be overlaid on the inputs. Round-trips bitwise through read_volume_file.
void export_attention(const AttentionMap& att, const MultiModalCase& c, const std::string& path);

}  // namespace maml
