#pragma once

#include <map>

#include "maml/autodiff.hpp"
#include "maml/core.hpp"

namespace maml {

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kLogFloor = 1e-12;

// Per-step view of the training objective: one intra-modality segmentation
// loss per stream, the joint loss on the fused prediction, and their
// weighted total.
struct LossBreakdown {
    std::map<ModalityId, double> intra;
    double joint = 0.0;
    double total = 0.0;
    double lambda = 0.0;
};

// total = lambda * sum(intra) + joint, with the sum taken in canonical
// modality order.
LossBreakdown combine_losses(const std::map<ModalityId, double>& intra, double joint,
                             double lambda);

// Eager scalar losses over probability maps.
double soft_dice_loss(const ProbMap& pred, const Mask& gt, double smooth = kDiceSmooth);
double cross_entropy_loss(const ProbMap& pred, const Mask& gt);
double seg_loss(const ProbMap& pred, const Mask& gt);
LossBreakdown mutual_learning_loss(const std::map<ModalityId, ProbMap>& intra_preds,
                                   const ProbMap& joint_pred, const Mask& gt, double lambda);

// Differentiable counterparts. `pred` is a (2,D,H,W) probability node.
ad::Value soft_dice_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt,
                           double smooth = kDiceSmooth);
ad::Value cross_entropy_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt);
ad::Value seg_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt);

struct MutualLossNodes {
    std::map<ModalityId, ad::Value> intra;
    ad::Value joint;
    ad::Value total;
};

MutualLossNodes mutual_learning_loss_t(ad::Tape& tape,
                                       const std::map<ModalityId, ad::Value>& intra_preds,
                                       ad::Value joint_pred, const Tensor& gt, double lambda);

}  // namespace maml
