#include "maml/objective.hpp"

#include <cmath>

namespace maml {

namespace {

void check_pred_shape(const Tensor& pred, const Tensor& gt, const char* what) {
    if (pred.rank() != 4 || pred.dim(0) != 2)
        throw DataError(std::string(what) + ": prediction must be (2,D,H,W)");
    if (gt.rank() != 3 || pred.dim(1) != gt.dim(0) || pred.dim(2) != gt.dim(1) ||
        pred.dim(3) != gt.dim(2))
        throw DataError(std::string(what) + ": prediction/mask shape mismatch");
}

}  // namespace

LossBreakdown combine_losses(const std::map<ModalityId, double>& intra, double joint,
                             double lambda) {
    if (lambda < 0.0) throw ConfigError("loss lambda must be >= 0");
    LossBreakdown out;
    out.intra = intra;
    out.joint = joint;
    out.lambda = lambda;
    double sum = 0.0;
    for (const auto& [id, v] : intra) sum += v;
    out.total = lambda * sum + joint;
    return out;
}

double soft_dice_loss(const ProbMap& pred, const Mask& gt, double smooth) {
    check_pred_shape(pred.data, gt.data, "soft_dice_loss");
    const size_t S = gt.data.numel();
    const double* fg = pred.data.data() + S;  // foreground channel
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (size_t i = 0; i < S; ++i) {
        inter += fg[i] * gt.data[i];
        psum += fg[i];
        gsum += gt.data[i];
    }
    return 1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth);
}

double cross_entropy_loss(const ProbMap& pred, const Mask& gt) {
    check_pred_shape(pred.data, gt.data, "cross_entropy_loss");
    const size_t S = gt.data.numel();
    const double* bg = pred.data.data();
    const double* fg = pred.data.data() + S;
    double sum = 0.0;
    for (size_t i = 0; i < S; ++i) {
        const double p = gt.data[i] != 0.0 ? fg[i] : bg[i];
        sum -= std::log(std::max(p, kLogFloor));
    }
    return sum / static_cast<double>(S);
}

double seg_loss(const ProbMap& pred, const Mask& gt) {
    return cross_entropy_loss(pred, gt) + soft_dice_loss(pred, gt);
}

LossBreakdown mutual_learning_loss(const std::map<ModalityId, ProbMap>& intra_preds,
                                   const ProbMap& joint_pred, const Mask& gt, double lambda) {
    if (intra_preds.empty()) throw ConfigError("mutual_learning_loss: no intra predictions");
    std::map<ModalityId, double> intra;
    for (const auto& [id, p] : intra_preds) intra[id] = seg_loss(p, gt);
    return combine_losses(intra, seg_loss(joint_pred, gt), lambda);
}

ad::Value soft_dice_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt, double smooth) {
    check_pred_shape(tape.val(pred), gt, "soft_dice_loss");
    ad::Value fg = ad::select_channel(pred, 1);
    ad::Value inter = ad::dot_const(fg, gt);
    ad::Value psum = ad::sum_all(fg);
    double gsum = 0.0;
    for (size_t i = 0; i < gt.numel(); ++i) gsum += gt[i];
    ad::Value num = ad::affine(inter, 2.0, smooth);
    ad::Value den = ad::affine(psum, 1.0, gsum + smooth);
    return ad::affine(ad::div(num, den), -1.0, 1.0);
}

ad::Value cross_entropy_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt) {
    check_pred_shape(tape.val(pred), gt, "cross_entropy_loss");
    const size_t S = gt.numel();
    Tensor w(tape.val(pred).shape());
    const double scale = -1.0 / static_cast<double>(S);
    for (size_t i = 0; i < S; ++i) {
        w[i] = gt[i] != 0.0 ? 0.0 : scale;
        w[S + i] = gt[i] != 0.0 ? scale : 0.0;
    }
    return ad::dot_const(ad::log_clamped(pred, kLogFloor), std::move(w));
}

ad::Value seg_loss_t(ad::Tape& tape, ad::Value pred, const Tensor& gt) {
    return ad::add(cross_entropy_loss_t(tape, pred, gt), soft_dice_loss_t(tape, pred, gt));
}

MutualLossNodes mutual_learning_loss_t(ad::Tape& tape,
                                       const std::map<ModalityId, ad::Value>& intra_preds,
                                       ad::Value joint_pred, const Tensor& gt, double lambda) {
    if (intra_preds.empty()) throw ConfigError("mutual_learning_loss: no intra predictions");
    if (lambda < 0.0) throw ConfigError("loss lambda must be >= 0");
    MutualLossNodes out;
    ad::Value intra_sum;
    bool first = true;
    for (const auto& [id, pred] : intra_preds) {
        ad::Value l = seg_loss_t(tape, pred, gt);
        out.intra.emplace(id, l);
        intra_sum = first ? l : ad::add(intra_sum, l);
        first = false;
    }
    out.joint = seg_loss_t(tape, joint_pred, gt);
    out.total = ad::add(ad::affine(intra_sum, lambda, 0.0), out.joint);
    return out;
}

}  // namespace maml
