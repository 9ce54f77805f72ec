#include "miaod/losses.hpp"

#include <algorithm>

namespace miaod::loss {

using namespace ad;

namespace {

Tensor ones_like_const(std::size_t rows, std::size_t cols) {
    return Tensor::constant({rows, cols},
                            std::vector<double>(rows * cols, 1.0));
}

Tensor agg_instances(const Tensor& u, const LossConfig& cfg) {
    return cfg.instance_norm == LossConfig::InstanceNorm::Mean ? mean(u) : sum(u);
}

}  // namespace

Tensor focal_loss(const Tensor& p, const det::AssignmentResult& asg,
                  const LossConfig& cfg) {
    if (p.shape().size() != 2 || p.rows() != asg.num_anchors ||
        p.cols() != static_cast<std::size_t>(asg.num_classes))
        throw contract_error("focal_loss: prediction shape does not match targets");
    const std::vector<std::size_t> keep = asg.non_ignored_indices();
    const std::size_t n_pos = asg.positive_indices().size();
    if (keep.empty()) return Tensor::scalar_const(0.0);

    const std::size_t C = p.cols();
    std::vector<double> y(keep.size() * C), ny(keep.size() * C);
    for (std::size_t r = 0; r < keep.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) {
            y[r * C + c] = asg.y_cls[keep[r] * C + c];
            ny[r * C + c] = 1.0 - y[r * C + c];
        }
    Tensor yt = Tensor::constant({keep.size(), C}, std::move(y));
    Tensor nyt = Tensor::constant({keep.size(), C}, std::move(ny));

    Tensor ps = gather_rows(p, keep);
    Tensor one_minus_p = sub(ones_like_const(keep.size(), C), ps);
    Tensor pos = mul(yt, mul(pow_scalar(one_minus_p, cfg.focal_gamma),
                             log_clamped(ps, cfg.clamp_eps)));
    Tensor neg = mul(nyt, mul(pow_scalar(ps, cfg.focal_gamma),
                              log_clamped(one_minus_p, cfg.clamp_eps)));
    Tensor total = add(scale(pos, cfg.focal_alpha), scale(neg, 1.0 - cfg.focal_alpha));
    const double norm = -1.0 / std::max<std::size_t>(1, n_pos);
    return scale(sum(total), norm);
}

Tensor smooth_l1(const Tensor& pred, const det::AssignmentResult& asg,
                 const LossConfig&) {
    if (pred.shape().size() != 2 || pred.rows() != asg.num_anchors ||
        pred.cols() != 4)
        throw contract_error("smooth_l1: prediction shape does not match targets");
    const std::vector<std::size_t> pos = asg.positive_indices();
    if (pos.empty()) return Tensor::scalar_const(0.0);
    std::vector<double> tgt(pos.size() * 4);
    for (std::size_t r = 0; r < pos.size(); ++r)
        for (std::size_t c = 0; c < 4; ++c) tgt[r * 4 + c] = asg.y_loc[pos[r]][c];
    Tensor diff = sub(gather_rows(pred, pos),
                      Tensor::constant({pos.size(), 4}, std::move(tgt)));
    return scale(sum(huber(diff)), 1.0 / static_cast<double>(pos.size()));
}

Tensor detection_loss(const det::ForwardOutput& out,
                      const det::AssignmentResult& asg, const LossConfig& cfg) {
    return add(add(focal_loss(out.y_f1, asg, cfg), focal_loss(out.y_f2, asg, cfg)),
               smooth_l1(out.y_fr, asg, cfg));
}

DiscrepancyResult discrepancy(const Tensor& y_f1, const Tensor& y_f2,
                              const LossConfig& cfg) {
    Tensor u = sum_axis(abs_val(sub(y_f1, y_f2)), 1);
    return {agg_instances(u, cfg), u};
}

DiscrepancyResult weighted_discrepancy(const Tensor& y_f1, const Tensor& y_f2,
                                       const Tensor& w, const LossConfig& cfg) {
    Tensor u = sum_axis(abs_val(mul(w, sub(y_f1, y_f2))), 1);
    return {agg_instances(u, cfg), u};
}

Tensor mil_image_score(const Tensor& y_fmil, const Tensor& y_f1,
                       const Tensor& y_f2) {
    Tensor class_term = softmax(y_fmil, 1);
    Tensor instance_term = softmax(scale(add(y_f1, y_f2), 0.5), 0);
    return mul(class_term, instance_term);
}

Tensor image_cls_loss(const Tensor& score, const std::vector<int>& y_cls_image,
                      const LossConfig& cfg) {
    if (score.shape().size() != 2 ||
        score.cols() != y_cls_image.size())
        throw contract_error("image_cls_loss: label length does not match classes");
    const std::size_t C = score.cols();
    std::vector<double> y(C), ny(C);
    for (std::size_t c = 0; c < C; ++c) {
        y[c] = static_cast<double>(y_cls_image[c]);
        ny[c] = 1.0 - y[c];
    }
    Tensor sums = sum_axis(score, 0);  // {1, C}
    Tensor pos = mul(Tensor::constant({1, C}, std::move(y)),
                     log_clamped(sums, cfg.clamp_eps));
    Tensor neg = mul(Tensor::constant({1, C}, std::move(ny)),
                     log_clamped(sub(ones_like_const(1, C), sums), cfg.clamp_eps));
    return scale(sum(add(pos, neg)), -1.0);
}

std::vector<int> pseudo_labels(const Tensor& y_f1, const Tensor& y_f2) {
    const std::size_t N = y_f1.rows(), C = y_f1.cols();
    std::vector<int> labels(C, 0);
    for (std::size_t c = 0; c < C; ++c) {
        double mx = 0.0;
        for (std::size_t i = 0; i < N; ++i)
            mx = std::max(mx, 0.5 * (y_f1.data()[i * C + c] + y_f2.data()[i * C + c]));
        labels[c] = mx > 0.5 ? 1 : 0;  // strict
    }
    return labels;
}

namespace {

Tensor labeled_side(const std::vector<LabeledItem>& labeled, const LossConfig& cfg,
                    bool reweight) {
    Tensor acc = Tensor::scalar_const(0.0);
    for (const LabeledItem& item : labeled) {
        Tensor term = detection_loss(*item.out, *item.asg, cfg);
        if (reweight) {
            Tensor score =
                mil_image_score(item.out->y_fmil, item.out->y_f1, item.out->y_f2);
            term = add(term, image_cls_loss(score, *item.image_labels, cfg));
        }
        acc = add(acc, term);
    }
    return acc;
}

Tensor unlabeled_discrepancy(const UnlabeledItem& item, const LossConfig& cfg,
                             bool reweight) {
    if (!reweight) return discrepancy(item.out->y_f1, item.out->y_f2, cfg).loss;
    Tensor w = mil_image_score(item.out->y_fmil, item.out->y_f1, item.out->y_f2);
    return weighted_discrepancy(item.out->y_f1, item.out->y_f2, w, cfg).loss;
}

}  // namespace

Tensor objective_max(const std::vector<LabeledItem>& labeled,
                     const std::vector<UnlabeledItem>& unlabeled,
                     const LossConfig& cfg, bool reweight) {
    if (labeled.empty()) throw contract_error("objective_max: empty labeled batch");
    Tensor acc = labeled_side(labeled, cfg, reweight);
    for (const UnlabeledItem& item : unlabeled)
        acc = add(acc, scale(unlabeled_discrepancy(item, cfg, reweight), -cfg.lambda));
    return acc;
}

Tensor objective_min(const std::vector<LabeledItem>& labeled,
                     const std::vector<UnlabeledItem>& unlabeled,
                     const LossConfig& cfg, bool reweight) {
    if (labeled.empty()) throw contract_error("objective_min: empty labeled batch");
    Tensor acc = labeled_side(labeled, cfg, reweight);
    for (const UnlabeledItem& item : unlabeled) {
        Tensor term = scale(unlabeled_discrepancy(item, cfg, reweight), cfg.lambda);
        if (reweight) {
            // pseudo image labels from the current classifier outputs
            std::vector<int> pl = pseudo_labels(item.out->y_f1, item.out->y_f2);
            Tensor score =
                mil_image_score(item.out->y_fmil, item.out->y_f1, item.out->y_f2);
            term = add(term, image_cls_loss(score, pl, cfg));
        }
        acc = add(acc, term);
    }
    return acc;
}

}  // namespace miaod::loss
