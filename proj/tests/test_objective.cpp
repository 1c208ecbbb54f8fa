#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "maml/objective.hpp"

using namespace maml;

namespace {

Tensor random_mask_tensor(std::mt19937_64& rng, std::vector<int> shape, double fg_prob = 0.4) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = u(rng) < fg_prob ? 1.0 : 0.0;
    return t;
}

// Random (2,D,H,W) map with strictly positive per-voxel distributions.
Tensor random_probs(std::mt19937_64& rng, int d, int h, int w) {
    Tensor t({2, d, h, w});
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int z = 0; z < d; ++z)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double fg = u(rng);
                t.at(0, z, y, x) = 1.0 - fg;
                t.at(1, z, y, x) = fg;
            }
    return t;
}

Tensor one_hot_of(const Tensor& gt) {
    const auto& s = gt.shape();
    Tensor t({2, s[0], s[1], s[2]});
    for (size_t i = 0; i < gt.numel(); ++i) {
        t[i] = gt[i] == 0.0 ? 1.0 : 0.0;
        t[gt.numel() + i] = gt[i] == 0.0 ? 0.0 : 1.0;
    }
    return t;
}

using LossFn = std::function<ad::Value(ad::Tape&, const std::vector<ad::Value>&)>;

double pred_fd_worst(const LossFn& fn, std::vector<Tensor> inputs, double h = 1e-6) {
    ad::Tape tape;
    std::vector<ad::Value> leaves;
    for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
    tape.backward(fn(tape, leaves));

    double worst = 0.0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& analytic = tape.grad(leaves[k]);
        for (size_t i = 0; i < inputs[k].numel(); ++i) {
            const double orig = inputs[k][i];
            auto eval = [&](double x) {
                inputs[k][i] = x;
                ad::Tape t(false);
                std::vector<ad::Value> ls;
                for (const Tensor& tin : inputs) ls.push_back(t.leaf(tin, false));
                const double v = t.val(fn(t, ls))[0];
                inputs[k][i] = orig;
                return v;
            };
            const double step = h * std::max(1.0, std::abs(orig));
            const double fd = (eval(orig + step) - eval(orig - step)) / (2.0 * step);
            const double a = analytic[i];
            const double denom = std::max({1e-6, std::abs(a), std::abs(fd)});
            worst = std::max(worst, std::abs(a - fd) / denom);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("weighted combination hits the hand-computed total") {
    std::map<ModalityId, double> intra = {{{"AP"}, 0.4}, {{"VP"}, 0.6}};
    LossBreakdown lb = combine_losses(intra, 0.3, 0.5);
    CHECK(lb.total == 0.8);
    CHECK(lb.joint == 0.3);
    CHECK(lb.lambda == 0.5);
    CHECK_THROWS_AS(combine_losses(intra, 0.3, -0.1), ConfigError);
}

TEST_CASE("total is affine in the weighting factor") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.01, 2.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::map<ModalityId, double> intra = {{{"A"}, u(rng)}, {{"B"}, u(rng)}, {{"C"}, u(rng)}};
        const double joint = u(rng);
        const double l0 = combine_losses(intra, joint, 0.0).total;
        const double l1 = combine_losses(intra, joint, 1.0).total;
        const double lh = combine_losses(intra, joint, 0.5).total;
        CHECK(l0 == joint);
        CHECK(lh == doctest::Approx(l0 + 0.5 * (l1 - l0)).epsilon(1e-14));
        // heavier weighting never lowers the total
        CHECK(l1 >= lh);
        CHECK(lh >= l0);
    }
}

TEST_CASE("soft dice loss on exact, inverted and uniform predictions") {
    std::mt19937_64 rng(2);
    const Tensor gt = random_mask_tensor(rng, {4, 4, 4});
    double fg_count = 0.0;
    for (size_t i = 0; i < gt.numel(); ++i) fg_count += gt[i];
    REQUIRE(fg_count > 0.0);

    ProbMap perfect{one_hot_of(gt)};
    CHECK(soft_dice_loss(perfect, Mask{gt}) == 0.0);

    // all-background prediction only has the smoothing term left
    Tensor none({2, 4, 4, 4});
    for (size_t i = 0; i < gt.numel(); ++i) {
        none[i] = 1.0;
        none[gt.numel() + i] = 0.0;
    }
    CHECK(soft_dice_loss(ProbMap{none}, Mask{gt}) ==
          doctest::Approx(1.0 - kDiceSmooth / (fg_count + kDiceSmooth)).epsilon(1e-12));

    Tensor uniform = Tensor::full({2, 4, 4, 4}, 0.5);
    const double n = 64.0;
    const double expected =
        1.0 - (fg_count + kDiceSmooth) / (0.5 * n + fg_count + kDiceSmooth);
    CHECK(soft_dice_loss(ProbMap{uniform}, Mask{gt}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cross entropy matches a direct loop and its fixed points") {
    std::mt19937_64 rng(3);
    const Tensor gt = random_mask_tensor(rng, {3, 3, 3});

    CHECK(cross_entropy_loss(ProbMap{one_hot_of(gt)}, Mask{gt}) == 0.0);

    Tensor uniform = Tensor::full({2, 3, 3, 3}, 0.5);
    CHECK(cross_entropy_loss(ProbMap{uniform}, Mask{gt}) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-14));

    const Tensor pred = random_probs(rng, 3, 3, 3);
    double acc = 0.0;
    for (size_t i = 0; i < gt.numel(); ++i) {
        const double p = gt[i] == 0.0 ? pred[i] : pred[gt.numel() + i];
        acc += -std::log(std::max(p, kLogFloor));
    }
    acc /= static_cast<double>(gt.numel());
    CHECK(cross_entropy_loss(ProbMap{pred}, Mask{gt}) == doctest::Approx(acc).epsilon(1e-14));

    // certainty about the wrong class stays finite through the floor
    Tensor wrong = one_hot_of(gt);
    for (size_t i = 0; i < wrong.numel(); ++i) wrong[i] = 1.0 - wrong[i];
    const double clamped = cross_entropy_loss(ProbMap{wrong}, Mask{gt});
    CHECK(std::isfinite(clamped));
    CHECK(clamped == doctest::Approx(-std::log(kLogFloor)).epsilon(1e-12));
}

TEST_CASE("segmentation loss is the plain sum of its two terms") {
    std::mt19937_64 rng(4);
    const Tensor gt = random_mask_tensor(rng, {3, 3, 3});
    const Tensor pred = random_probs(rng, 3, 3, 3);
    CHECK(seg_loss(ProbMap{pred}, Mask{gt}) ==
          cross_entropy_loss(ProbMap{pred}, Mask{gt}) + soft_dice_loss(ProbMap{pred}, Mask{gt}));
}

TEST_CASE("mutual learning loss combines per-stream and joint terms") {
    std::mt19937_64 rng(5);
    const Tensor gt = random_mask_tensor(rng, {3, 3, 3});
    std::map<ModalityId, ProbMap> intra;
    intra.emplace(ModalityId{"AP"}, ProbMap{random_probs(rng, 3, 3, 3)});
    intra.emplace(ModalityId{"VP"}, ProbMap{random_probs(rng, 3, 3, 3)});
    const ProbMap joint{random_probs(rng, 3, 3, 3)};

    LossBreakdown lb = mutual_learning_loss(intra, joint, Mask{gt}, 0.5);
    std::map<ModalityId, double> parts;
    for (const auto& [id, p] : intra) parts[id] = seg_loss(p, Mask{gt});
    LossBreakdown expected = combine_losses(parts, seg_loss(joint, Mask{gt}), 0.5);
    CHECK(lb.total == expected.total);
    CHECK(lb.joint == expected.joint);
    CHECK(lb.intra.at({"AP"}) == expected.intra.at({"AP"}));
}

TEST_CASE("tape losses evaluate to the eager values") {
    std::mt19937_64 rng(6);
    const Tensor gt = random_mask_tensor(rng, {3, 3, 3});
    const Tensor pred = random_probs(rng, 3, 3, 3);

    ad::Tape tape(false);
    ad::Value p = tape.leaf(pred, false);
    CHECK(tape.val(soft_dice_loss_t(tape, p, gt))[0] ==
          doctest::Approx(soft_dice_loss(ProbMap{pred}, Mask{gt})).epsilon(1e-14));
    CHECK(tape.val(cross_entropy_loss_t(tape, p, gt))[0] ==
          doctest::Approx(cross_entropy_loss(ProbMap{pred}, Mask{gt})).epsilon(1e-14));
    CHECK(tape.val(seg_loss_t(tape, p, gt))[0] ==
          doctest::Approx(seg_loss(ProbMap{pred}, Mask{gt})).epsilon(1e-14));
}

TEST_CASE("tape mutual loss mirrors the eager breakdown") {
    std::mt19937_64 rng(7);
    const Tensor gt = random_mask_tensor(rng, {2, 2, 2});
    const Tensor pa = random_probs(rng, 2, 2, 2);
    const Tensor pv = random_probs(rng, 2, 2, 2);
    const Tensor pj = random_probs(rng, 2, 2, 2);

    ad::Tape tape(false);
    std::map<ModalityId, ad::Value> intra;
    intra.emplace(ModalityId{"AP"}, tape.leaf(pa, false));
    intra.emplace(ModalityId{"VP"}, tape.leaf(pv, false));
    MutualLossNodes nodes = mutual_learning_loss_t(tape, intra, tape.leaf(pj, false), gt, 0.5);

    std::map<ModalityId, ProbMap> eager_intra;
    eager_intra.emplace(ModalityId{"AP"}, ProbMap{pa});
    eager_intra.emplace(ModalityId{"VP"}, ProbMap{pv});
    LossBreakdown lb = mutual_learning_loss(eager_intra, ProbMap{pj}, Mask{gt}, 0.5);

    CHECK(tape.val(nodes.total)[0] == doctest::Approx(lb.total).epsilon(1e-14));
    CHECK(tape.val(nodes.joint)[0] == doctest::Approx(lb.joint).epsilon(1e-14));
    CHECK(tape.val(nodes.intra.at({"AP"}))[0] ==
          doctest::Approx(lb.intra.at({"AP"})).epsilon(1e-14));
}

TEST_CASE("loss gradients agree with central finite differences") {
    std::mt19937_64 rng(8);
    const Tensor gt = random_mask_tensor(rng, {2, 2, 2});
    const Tensor pred = random_probs(rng, 2, 2, 2);

    CHECK(pred_fd_worst([&](ad::Tape& t, const std::vector<ad::Value>& in) {
              return soft_dice_loss_t(t, in[0], gt);
          },
                        {pred}) < 1e-4);
    CHECK(pred_fd_worst([&](ad::Tape& t, const std::vector<ad::Value>& in) {
              return cross_entropy_loss_t(t, in[0], gt);
          },
                        {pred}) < 1e-4);
    CHECK(pred_fd_worst([&](ad::Tape& t, const std::vector<ad::Value>& in) {
              return seg_loss_t(t, in[0], gt);
          },
                        {pred}) < 1e-4);

    const Tensor pa = random_probs(rng, 2, 2, 2);
    const Tensor pv = random_probs(rng, 2, 2, 2);
    const Tensor pj = random_probs(rng, 2, 2, 2);
    CHECK(pred_fd_worst(
              [&](ad::Tape& t, const std::vector<ad::Value>& in) {
                  std::map<ModalityId, ad::Value> intra;
                  intra.emplace(ModalityId{"AP"}, in[0]);
                  intra.emplace(ModalityId{"VP"}, in[1]);
                  return mutual_learning_loss_t(t, intra, in[2], gt, 0.7).total;
              },
              {pa, pv, pj}) < 1e-4);
}

TEST_CASE("zero weighting sends exactly zero gradient into the streams") {
    std::mt19937_64 rng(9);
    const Tensor gt = random_mask_tensor(rng, {2, 2, 2});
    const Tensor pa = random_probs(rng, 2, 2, 2);
    const Tensor pv = random_probs(rng, 2, 2, 2);
    const Tensor pj = random_probs(rng, 2, 2, 2);

    ad::Tape tape;
    ad::Value la = tape.leaf(pa, true);
    ad::Value lv = tape.leaf(pv, true);
    ad::Value lj = tape.leaf(pj, true);
    std::map<ModalityId, ad::Value> intra = {{{"AP"}, la}, {{"VP"}, lv}};
    MutualLossNodes nodes = mutual_learning_loss_t(tape, intra, lj, gt, 0.0);
    tape.backward(nodes.total);

    const Tensor& ga = tape.grad(la);
    const Tensor& gv = tape.grad(lv);
    for (size_t i = 0; i < ga.numel(); ++i) CHECK(ga[i] == 0.0);
    for (size_t i = 0; i < gv.numel(); ++i) CHECK(gv[i] == 0.0);
    const Tensor& gj = tape.grad(lj);
    double mag = 0.0;
    for (size_t i = 0; i < gj.numel(); ++i) mag += std::abs(gj[i]);
    CHECK(mag > 0.0);
}

TEST_CASE("prediction tensors with the wrong layout are rejected") {
    std::mt19937_64 rng(10);
    const Tensor gt = random_mask_tensor(rng, {2, 2, 2});
    Tensor bad({3, 2, 2, 2});
    CHECK_THROWS_AS(soft_dice_loss(ProbMap{bad}, Mask{gt}), DataError);
    Tensor mismatched = random_probs(rng, 2, 2, 3);
    CHECK_THROWS_AS(cross_entropy_loss(ProbMap{mismatched}, Mask{gt}), DataError);
}
