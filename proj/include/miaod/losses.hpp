#pragma once

#include <vector>

#include "miaod/autodiff.hpp"
#include "miaod/detector.hpp"

namespace miaod::loss {

using ad::Tensor;

struct LossConfig {
    double lambda = 0.5;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
    double clamp_eps = 1e-12;
    enum class InstanceNorm { Sum, Mean };
    /// How the discrepancy losses aggregate over instances. Mean keeps
    /// lambda's scale independent of anchor count; Sum is the plain
    /// per-instance sum.
    InstanceNorm instance_norm = InstanceNorm::Mean;
};

/// Focal classification loss over non-ignored anchors, normalized by
/// max(1, #positive anchors).
Tensor focal_loss(const Tensor& p, const det::AssignmentResult& asg,
                  const LossConfig& cfg);

/// Smooth-L1 regression loss over positive anchors, normalized by
/// max(1, #positives).
Tensor smooth_l1(const Tensor& pred, const det::AssignmentResult& asg,
                 const LossConfig& cfg);

/// FL(y_f1) + FL(y_f2) + SmoothL1(y_fr).
Tensor detection_loss(const det::ForwardOutput& out,
                      const det::AssignmentResult& asg, const LossConfig& cfg);

struct DiscrepancyResult {
    Tensor loss;          // scalar aggregate
    Tensor per_instance;  // N x 1 vector u_i
};

/// u_i = sum_c |y_f1 - y_f2|; aggregate per cfg.instance_norm.
DiscrepancyResult discrepancy(const Tensor& y_f1, const Tensor& y_f2,
                              const LossConfig& cfg);

/// u_i = sum_c |w * (y_f1 - y_f2)|. The weights stay in the graph, so
/// gradients flow through them.
DiscrepancyResult weighted_discrepancy(const Tensor& y_f1, const Tensor& y_f2,
                                       const Tensor& w, const LossConfig& cfg);

/// N x C image classification score: class-softmax of the MIL head times the
/// instance-softmax of the averaged classifier probabilities.
Tensor mil_image_score(const Tensor& y_fmil, const Tensor& y_f1,
                       const Tensor& y_f2);

/// Binary cross-entropy of per-class instance sums against the image label
/// vector; sums are clamped away from 0 and 1 by cfg.clamp_eps.
Tensor image_cls_loss(const Tensor& score, const std::vector<int>& y_cls_image,
                      const LossConfig& cfg);

/// Per-class indicator: 1 iff the maximum averaged classifier score strictly
/// exceeds 0.5.
std::vector<int> pseudo_labels(const Tensor& y_f1, const Tensor& y_f2);

// -- composed objectives ----------------------------------------------------

struct LabeledItem {
    const det::ForwardOutput* out;
    const det::AssignmentResult* asg;
    const std::vector<int>* image_labels;
};

struct UnlabeledItem {
    const det::ForwardOutput* out;
};

/// Discrepancy-maximization objective (returned as the scalar to minimize):
/// labeled detection loss (plus image classification loss when reweighting)
/// minus lambda times the unlabeled (weighted) discrepancy.
Tensor objective_max(const std::vector<LabeledItem>& labeled,
                     const std::vector<UnlabeledItem>& unlabeled,
                     const LossConfig& cfg, bool reweight);

/// Discrepancy-minimization objective; with reweighting the unlabeled side
/// adds the image classification loss under pseudo image labels.
Tensor objective_min(const std::vector<LabeledItem>& labeled,
                     const std::vector<UnlabeledItem>& unlabeled,
                     const LossConfig& cfg, bool reweight);

}  // namespace miaod::loss
