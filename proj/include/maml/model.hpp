#pragma once

#include <cstdint>
#include <map>

#include "maml/fusion.hpp"
#include "maml/objective.hpp"

namespace maml {

struct ModelConfig {
    std::vector<ModalityId> modalities;  // kept sorted canonically
    BackboneConfig backbone;
    FusionConfig fusion;
};

void validate_model_config(const ModelConfig& cfg);

// The full trainable system: one backbone+head per modality plus the fusion
// stage, all parameters in one store so the optimizer and checkpoints see a
// single flat list.
struct MamlModel {
    ModelConfig cfg;
    ParamStore store;
    std::map<ModalityId, BackboneNet> backbones;
    FusionNet fusion;
};

MamlModel build_model(ModelConfig cfg, uint64_t seed);

// Every intermediate the training step and the predictors need.
struct ForwardNodes {
    std::map<ModalityId, ad::Value> features;
    std::map<ModalityId, ad::Value> intra_probs;
    std::map<ModalityId, ad::Value> attentions;
    ad::Value dual;
    ad::Value fused;
    ad::Value joint_probs;
};

// Runs the whole pipeline on one patch. `inputs` maps every configured
// modality to its (D,H,W) intensity tensor.
ForwardNodes model_forward_t(ad::Tape& tape, const TapeParams& tp, const MamlModel& model,
                             const std::map<ModalityId, Tensor>& inputs);

// Single-modality path: that modality's backbone and head only.
ad::Value model_single_forward_t(ad::Tape& tape, const TapeParams& tp, const MamlModel& model,
                                 const ModalityId& modality, const Tensor& input);

}  // namespace maml
