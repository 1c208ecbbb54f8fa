#pragma once

#include <array>
#include <random>
#include <vector>

#include "maml/autodiff.hpp"
#include "maml/core.hpp"
#include "maml/params.hpp"

namespace maml {

struct BackboneConfig {
    int levels = 3;
    int base_channels = 8;
    int feature_channels = 32;  // width of the embedding the fusion stage consumes
    double norm_epsilon = 1e-5;
    double leaky_slope = 0.01;
    int in_channels = 1;
};

void validate_backbone_config(const BackboneConfig& cfg);

// True when every spatial dim is divisible by 2^(levels-1).
bool shape_divisible(const std::vector<int>& dhw, int levels);

// Shape-preserving per-modality embedding.
struct FeatureMap {
    Tensor data;  // (C,D,H,W)
    ModalityId modality;
};

// Parameter layout of one encoder-decoder stream plus its own 2-class head.
// Every cell indexes into the shared ParamStore.
struct BackboneNet {
    BackboneConfig cfg;
    std::vector<std::array<ConvRef, 2>> enc;  // two 3x3x3 convs per level
    std::vector<ConvRef> down;                // strided 3x3x3, enters level l+1
    std::vector<ConvRef> up;                  // 3x3x3 after nearest upsampling
    std::vector<std::array<ConvRef, 2>> dec;  // two 3x3x3 convs per level
    ConvRef proj;                             // 1x1x1 to feature_channels
    ConvRef head;                             // 1x1x1 to 2 classes
};

BackboneNet build_backbone(ParamStore& store, const std::string& prefix,
                           const BackboneConfig& cfg, std::mt19937_64& rng);

// Tape-side forward passes (differentiable; also the inference path with a
// gradient-disabled tape). Input is (in_channels,D,H,W).
ad::Value backbone_forward_t(ad::Tape& tape, const TapeParams& tp, const BackboneNet& net,
                             ad::Value input);
ad::Value modality_head_t(ad::Tape& tape, const TapeParams& tp, const BackboneNet& net,
                          ad::Value feature);

// Volume-level wrappers running on a private inference tape.
FeatureMap backbone_forward(const Volume& vol, const ParamStore& store, const BackboneNet& net);
ProbMap modality_head(const FeatureMap& feat, const ParamStore& store, const BackboneNet& net);

// Plain array transforms, exposed for direct use and testing.
Tensor instance_norm(const Tensor& x, double eps);
Tensor leaky_relu(const Tensor& x, double slope);

}  // namespace maml
