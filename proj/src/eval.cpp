#include "miaod/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace miaod::eval {

double average_precision(std::vector<DetectionRecord> detections,
                         const ClassGroundTruth& gts, double iou_threshold,
                         bool eleven_point) {
    std::size_t total_gt = 0;
    for (const auto& [id, boxes] : gts) total_gt += boxes.size();
    if (total_gt == 0) return 0.0;

    std::stable_sort(detections.begin(), detections.end(),
                     [](const DetectionRecord& a, const DetectionRecord& b) {
                         if (a.score != b.score) return a.score > b.score;
                         return a.image_id < b.image_id;
                     });

    std::map<std::string, std::vector<bool>> matched;
    for (const auto& [id, boxes] : gts) matched[id].assign(boxes.size(), false);

    std::vector<double> precision, recall;
    std::size_t tp = 0, fp = 0;
    for (const DetectionRecord& d : detections) {
        bool is_tp = false;
        auto it = gts.find(d.image_id);
        if (it != gts.end()) {
            double best = iou_threshold;
            int arg = -1;
            for (std::size_t g = 0; g < it->second.size(); ++g) {
                if (matched[d.image_id][g]) continue;
                const double iou = compute_iou(d.box, it->second[g]);
                if (iou >= best) {
                    best = iou;
                    arg = static_cast<int>(g);
                }
            }
            if (arg >= 0) {
                matched[d.image_id][static_cast<std::size_t>(arg)] = true;
                is_tp = true;
            }
        }
        is_tp ? ++tp : ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    if (precision.empty()) return 0.0;

    // monotone precision envelope (max precision at recall >= r)
    for (std::size_t i = precision.size() - 1; i > 0; --i)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);

    if (eleven_point) {
        double ap = 0.0;
        for (int j = 0; j <= 10; ++j) {
            const double r = j / 10.0;
            double p = 0.0;
            for (std::size_t i = 0; i < recall.size(); ++i)
                if (recall[i] >= r) {
                    p = precision[i];
                    break;
                }
            ap += p / 11.0;
        }
        return ap;
    }
    double ap = 0.0, prev_r = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        ap += (recall[i] - prev_r) * precision[i];
        prev_r = recall[i];
    }
    return ap;
}

MapResult evaluate_map(const det::DetectorModel& model,
                       const std::vector<synth::ImageSample>& test_set,
                       const det::AnchorGrid& grid, double score_threshold,
                       double nms_iou, double iou_threshold, bool eleven_point) {
    const int C = model.num_classes;
    std::vector<std::vector<DetectionRecord>> dets(static_cast<std::size_t>(C));
    std::vector<ClassGroundTruth> gts(static_cast<std::size_t>(C));

    for (const synth::ImageSample& img : test_set) {
        for (std::size_t g = 0; g < img.gt_boxes.size(); ++g)
            gts[static_cast<std::size_t>(img.gt_classes[g])][img.id].push_back(
                img.gt_boxes[g]);
        det::Tape tape;
        const auto patches = det::extract_patches(img, grid, model.patch);
        det::ForwardOutput out = det::forward_eval(model, tape, patches, grid);
        for (const det::Detection& d :
             det::decode_and_nms(out, grid, score_threshold, nms_iou))
            dets[static_cast<std::size_t>(d.class_index)].push_back(
                {img.id, d.class_index, d.box, d.score});
    }

    MapResult res;
    double total = 0.0;
    int present = 0;
    for (int c = 0; c < C; ++c) {
        const std::size_t ci = static_cast<std::size_t>(c);
        if (gts[ci].empty()) {
            res.per_class_ap.push_back(-1.0);
            continue;
        }
        const double ap =
            average_precision(dets[ci], gts[ci], iou_threshold, eleven_point);
        res.per_class_ap.push_back(ap);
        total += ap;
        ++present;
    }
    res.map = present > 0 ? total / present : 0.0;
    return res;
}

namespace {

/// Unweighted/weighted instance uncertainty plus the summed image
/// classification score, evaluated without recording.
struct InstanceScores {
    std::vector<double> uncertainty;  // N
    std::vector<double> cls_score;    // N, sum over classes of mil score
};

InstanceScores instance_scores(const det::DetectorModel& model,
                               const synth::ImageSample& image,
                               const det::AnchorGrid& grid, bool weighted) {
    det::Tape tape;
    const auto patches = det::extract_patches(image, grid, model.patch);
    det::ForwardOutput out = det::forward_eval(model, tape, patches, grid);
    loss::LossConfig cfg;
    ad::Tensor w = loss::mil_image_score(out.y_fmil, out.y_f1, out.y_f2);
    loss::DiscrepancyResult disc =
        weighted ? loss::weighted_discrepancy(out.y_f1, out.y_f2, w, cfg)
                 : loss::discrepancy(out.y_f1, out.y_f2, cfg);
    InstanceScores s;
    s.uncertainty = disc.per_instance.data();
    const std::size_t N = grid.count(), C = w.cols();
    s.cls_score.assign(N, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) s.cls_score[i] += w.data()[i * C + c];
    return s;
}

void write_normalized_pgm(const std::vector<double>& field, int w, int h,
                          const std::filesystem::path& path) {
    double lo = field[0], hi = field[0];
    for (double v : field) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<double> norm(field.size(), 0.0);
    if (hi > lo)
        for (std::size_t i = 0; i < field.size(); ++i)
            norm[i] = (field[i] - lo) / (hi - lo);
    std::ofstream f(path, std::ios::binary);
    f << synth::encode_pgm(norm, w, h);
    if (!f) throw io_error("failed writing heatmap " + path.string());
}

}  // namespace

int tp_selected(const det::DetectorModel& model,
                const std::vector<const synth::ImageSample*>& selected,
                const det::AnchorGrid& grid, int k) {
    if (selected.empty()) throw contract_error("tp_selected: empty selection");
    int count = 0;
    for (const synth::ImageSample* img : selected) {
        InstanceScores s = instance_scores(model, *img, grid, false);
        std::vector<std::size_t> order(s.uncertainty.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return s.uncertainty[a] > s.uncertainty[b];
        });
        const std::size_t kk =
            std::min<std::size_t>(static_cast<std::size_t>(std::max(1, k)),
                                  order.size());
        for (std::size_t j = 0; j < kk; ++j) {
            const Box ab = grid.anchor_box(order[j]);
            for (const Box& gt : img->gt_boxes)
                if (compute_iou(ab, gt) >= 0.5) {
                    ++count;
                    break;
                }
        }
    }
    return count;
}

void dump_heatmap(const det::DetectorModel& model,
                  const synth::ImageSample& image, const det::AnchorGrid& grid,
                  const std::filesystem::path& path, bool weighted) {
    InstanceScores s = instance_scores(model, image, grid, weighted);
    const int W = image.width, H = image.height;
    std::vector<double> unc(static_cast<std::size_t>(W) * H, 0.0);
    std::vector<double> cls(static_cast<std::size_t>(W) * H, 0.0);
    for (std::size_t i = 0; i < grid.count(); ++i) {
        const Box b = grid.anchor_box(i);
        const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
        const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
        const int x1 = std::min(W, static_cast<int>(std::ceil(b.x_max)));
        const int y1 = std::min(H, static_cast<int>(std::ceil(b.y_max)));
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
                unc[static_cast<std::size_t>(y) * W + x] += s.uncertainty[i];
                cls[static_cast<std::size_t>(y) * W + x] += s.cls_score[i];
            }
    }
    write_normalized_pgm(unc, W, H, path);
    std::filesystem::path cls_path = path;
    cls_path.replace_filename(path.stem().string() + "_cls" +
                              path.extension().string());
    write_normalized_pgm(cls, W, H, cls_path);
}

}  // namespace miaod::eval
