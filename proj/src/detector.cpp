#include "miaod/detector.hpp"

#include <algorithm>
#include <cmath>

namespace miaod::det {

AnchorGrid build_anchors(int image_size, int stride, std::vector<int> sizes) {
    if (stride <= 0 || image_size % stride != 0)
        throw contract_error("build_anchors: stride must divide image_size");
    if (sizes.empty()) throw contract_error("build_anchors: no anchor sizes");
    AnchorGrid grid;
    grid.image_size = image_size;
    grid.stride = stride;
    grid.sizes = std::move(sizes);
    const int cells = image_size / stride;
    for (int gy = 0; gy < cells; ++gy)
        for (int gx = 0; gx < cells; ++gx)
            for (int s : grid.sizes)
                grid.anchors.push_back({(gx + 0.5) * stride, (gy + 0.5) * stride,
                                        static_cast<double>(s),
                                        static_cast<double>(s)});
    return grid;
}

std::vector<std::size_t> AssignmentResult::positive_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i] == AnchorFlag::Positive) idx.push_back(i);
    return idx;
}

std::vector<std::size_t> AssignmentResult::non_ignored_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i] != AnchorFlag::Ignore) idx.push_back(i);
    return idx;
}

std::array<double, 4> encode_box(const Box& gt, const Box& anchor) {
    return {(gt.cx() - anchor.cx()) / anchor.width(),
            (gt.cy() - anchor.cy()) / anchor.height(),
            std::log(gt.width() / anchor.width()),
            std::log(gt.height() / anchor.height())};
}

Box decode_box(const std::array<double, 4>& t, const Box& anchor) {
    const double cx = anchor.cx() + t[0] * anchor.width();
    const double cy = anchor.cy() + t[1] * anchor.height();
    const double w = anchor.width() * std::exp(std::clamp(t[2], -4.0, 4.0));
    const double h = anchor.height() * std::exp(std::clamp(t[3], -4.0, 4.0));
    return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

AssignmentResult assign_targets(const AnchorGrid& grid,
                                const std::vector<Box>& gt_boxes,
                                const std::vector<int>& gt_classes,
                                int num_classes) {
    const std::size_t N = grid.count(), G = gt_boxes.size();
    AssignmentResult res;
    res.num_anchors = N;
    res.num_classes = num_classes;
    res.y_cls.assign(N * static_cast<std::size_t>(num_classes), 0.0);
    res.y_loc.assign(N, {0.0, 0.0, 0.0, 0.0});
    res.flags.assign(N, AnchorFlag::Negative);

    std::vector<int> matched_gt(N, -1);
    std::vector<double> best_iou_per_gt(G, -1.0);
    std::vector<std::size_t> best_anchor_per_gt(G, 0);

    for (std::size_t i = 0; i < N; ++i) {
        const Box ab = grid.anchor_box(i);
        double best = 0.0;
        int arg = -1;
        for (std::size_t g = 0; g < G; ++g) {
            const double iou = compute_iou(ab, gt_boxes[g]);
            if (iou > best) {  // strict: ties keep the lowest gt index
                best = iou;
                arg = static_cast<int>(g);
            }
            if (iou > best_iou_per_gt[g]) {
                best_iou_per_gt[g] = iou;
                best_anchor_per_gt[g] = i;
            }
        }
        if (best >= 0.5) {
            res.flags[i] = AnchorFlag::Positive;
            matched_gt[i] = arg;
        } else if (best >= 0.4) {
            res.flags[i] = AnchorFlag::Ignore;
        }
    }
    // every gt owns at least one positive anchor
    for (std::size_t g = 0; g < G; ++g) {
        const std::size_t i = best_anchor_per_gt[g];
        res.flags[i] = AnchorFlag::Positive;
        matched_gt[i] = static_cast<int>(g);
    }
    for (std::size_t i = 0; i < N; ++i) {
        if (res.flags[i] != AnchorFlag::Positive) continue;
        const int g = matched_gt[i];
        res.y_cls[i * static_cast<std::size_t>(num_classes) +
                  static_cast<std::size_t>(gt_classes[static_cast<std::size_t>(g)])] =
            1.0;
        res.y_loc[i] = encode_box(gt_boxes[static_cast<std::size_t>(g)],
                                  grid.anchor_box(i));
    }
    return res;
}

// -- model ------------------------------------------------------------------

namespace {

ParamBlock make_block(std::string name, ParamGroup group, ad::Shape shape,
                      Rng& rng, double std_dev) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    ParamBlock b;
    b.name = std::move(name);
    b.group = group;
    b.shape = std::move(shape);
    b.value.resize(n);
    b.velocity.assign(n, 0.0);
    for (double& v : b.value) v = std_dev * rng.normal();
    return b;
}

}  // namespace

DetectorModel DetectorModel::init(int num_classes, std::uint64_t seed, int patch,
                                  int hidden, int feature_dim,
                                  int anchors_per_cell) {
    DetectorModel m;
    m.num_classes = num_classes;
    m.patch = patch;
    m.hidden = hidden;
    m.feature_dim = feature_dim;
    m.anchors_per_cell = anchors_per_cell;
    Rng rng(seed);
    const std::size_t P = static_cast<std::size_t>(patch) * patch;
    const std::size_t H = static_cast<std::size_t>(hidden);
    const std::size_t D = static_cast<std::size_t>(feature_dim);
    const std::size_t A = static_cast<std::size_t>(anchors_per_cell);
    const std::size_t C = static_cast<std::size_t>(num_classes);
    auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    m.params.push_back(make_block("g_w1", ParamGroup::Feature, {P, H}, rng, fan(P)));
    m.params.push_back(make_block("g_b1", ParamGroup::Feature, {1, H}, rng, 0.0));
    m.params.push_back(make_block("g_w2", ParamGroup::Feature, {H, D}, rng, fan(H)));
    m.params.push_back(make_block("g_b2", ParamGroup::Feature, {1, D}, rng, 0.0));
    // f1 and f2 are independently initialized draws
    m.params.push_back(make_block("f1_w", ParamGroup::Head1, {D, A * C}, rng, fan(D)));
    m.params.push_back(make_block("f1_b", ParamGroup::Head1, {1, A * C}, rng, 0.0));
    m.params.push_back(make_block("f2_w", ParamGroup::Head2, {D, A * C}, rng, fan(D)));
    m.params.push_back(make_block("f2_b", ParamGroup::Head2, {1, A * C}, rng, 0.0));
    m.params.push_back(make_block("fr_w", ParamGroup::Regressor, {D, A * 4}, rng, fan(D)));
    m.params.push_back(make_block("fr_b", ParamGroup::Regressor, {1, A * 4}, rng, 0.0));
    m.params.push_back(make_block("mil_w", ParamGroup::Mil, {D, A * C}, rng, fan(D)));
    m.params.push_back(make_block("mil_b", ParamGroup::Mil, {1, A * C}, rng, 0.0));
    // classifier biases start at the background prior so the focal loss does
    // not swamp the first epochs with confident false positives
    const double prior = 0.02;
    const double b0 = std::log(prior / (1.0 - prior));
    for (const char* name : {"f1_b", "f2_b"})
        for (double& v : m.block(name).value) v = b0;
    return m;
}

ParamBlock& DetectorModel::block(const std::string& name) {
    for (ParamBlock& b : params)
        if (b.name == name) return b;
    throw contract_error("unknown parameter block " + name);
}

const ParamBlock& DetectorModel::block(const std::string& name) const {
    return const_cast<DetectorModel*>(this)->block(name);
}

Tensor ModelTensors::get(const std::string& name) const {
    for (std::size_t i = 0; i < model->params.size(); ++i)
        if (model->params[i].name == name) return leaves[i];
    throw contract_error("unknown parameter block " + name);
}

ModelTensors attach(const DetectorModel& model, Tape& tape, const TrainMask& mask) {
    ModelTensors mt;
    mt.model = &model;
    for (const ParamBlock& b : model.params)
        mt.leaves.push_back(
            Tensor::leaf(tape, b.shape, b.value, mask.trains(b.group)));
    return mt;
}

void apply_sgd(DetectorModel& model, const ModelTensors& mt, const TrainMask& mask,
               double lr, double momentum) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        ParamBlock& b = model.params[i];
        if (!mask.trains(b.group)) continue;
        const std::vector<double>& g = mt.leaves[i].grad();
        for (std::size_t e = 0; e < b.value.size(); ++e) {
            b.velocity[e] = momentum * b.velocity[e] - lr * g[e];
            b.value[e] += b.velocity[e];
            if (!std::isfinite(b.value[e]))
                throw numeric_fault("non-finite parameter update in " + b.name);
        }
    }
}

// -- forward ----------------------------------------------------------------

std::vector<double> extract_patches(const synth::ImageSample& image,
                                    const AnchorGrid& grid, int patch) {
    const int W = image.width, cells = grid.cells_per_side();
    const std::size_t P = static_cast<std::size_t>(patch) * patch;
    std::vector<double> out(grid.num_cells() * P, 0.0);
    std::size_t row = 0;
    for (int gy = 0; gy < cells; ++gy) {
        for (int gx = 0; gx < cells; ++gx, ++row) {
            const double cx = (gx + 0.5) * grid.stride, cy = (gy + 0.5) * grid.stride;
            const int x0 = static_cast<int>(std::floor(cx - patch / 2.0));
            const int y0 = static_cast<int>(std::floor(cy - patch / 2.0));
            for (int py = 0; py < patch; ++py) {
                const int iy = y0 + py;
                if (iy < 0 || iy >= image.height) continue;
                for (int px = 0; px < patch; ++px) {
                    const int ix = x0 + px;
                    if (ix < 0 || ix >= W) continue;
                    out[row * P + static_cast<std::size_t>(py) * patch + px] =
                        image.pixels[static_cast<std::size_t>(iy) * W + ix];
                }
            }
        }
    }
    return out;
}

ForwardOutput forward(const ModelTensors& mt, const Tensor& patches,
                      const AnchorGrid& grid) {
    using namespace ad;
    const std::size_t S = grid.sizes.size();
    if (S != static_cast<std::size_t>(mt.model->anchors_per_cell))
        throw contract_error("forward: grid/model anchors-per-cell mismatch");
    const std::size_t C = static_cast<std::size_t>(mt.model->num_classes);
    const std::size_t cells = grid.num_cells();
    Tensor h1 = relu(add(matmul(patches, mt.get("g_w1")), mt.get("g_b1")));
    Tensor feat = relu(add(matmul(h1, mt.get("g_w2")), mt.get("g_b2")));
    // heads emit one slot per (anchor size, channel); the cells x (S*k) result
    // is the (cells*S) x k per-anchor layout viewed row-major
    auto head = [&](const char* w, const char* b, std::size_t k) {
        return reshape(add(matmul(feat, mt.get(w)), mt.get(b)), {cells * S, k});
    };
    ForwardOutput out;
    out.features = feat;
    out.y_f1 = sigmoid(head("f1_w", "f1_b", C));
    out.y_f2 = sigmoid(head("f2_w", "f2_b", C));
    out.y_fr = head("fr_w", "fr_b", 4);
    out.y_fmil = head("mil_w", "mil_b", C);
    return out;
}

ForwardOutput forward_eval(const DetectorModel& model, Tape& tape,
                           const std::vector<double>& patches,
                           const AnchorGrid& grid) {
    TrainMask frozen{false, false, false, false, false};
    ModelTensors mt = attach(model, tape, frozen);
    const std::size_t P = static_cast<std::size_t>(model.patch) * model.patch;
    Tensor px = Tensor::constant({grid.num_cells(), P}, patches);
    return forward(mt, px, grid);
}

std::vector<Detection> decode_and_nms(const ForwardOutput& out,
                                      const AnchorGrid& grid,
                                      double score_threshold,
                                      double iou_threshold) {
    if (score_threshold < 0.0 || score_threshold > 1.0 || iou_threshold < 0.0 ||
        iou_threshold > 1.0)
        throw contract_error("decode_and_nms: thresholds must lie in [0,1]");
    const std::size_t N = grid.count();
    const std::size_t C = out.y_f1.cols();
    struct Cand {
        double score;
        std::size_t anchor;
        int cls;
        Box box;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < N; ++i) {
        std::array<double, 4> t{out.y_fr.data()[i * 4 + 0], out.y_fr.data()[i * 4 + 1],
                                out.y_fr.data()[i * 4 + 2], out.y_fr.data()[i * 4 + 3]};
        const Box decoded = decode_box(t, grid.anchor_box(i));
        for (std::size_t c = 0; c < C; ++c) {
            const double s =
                0.5 * (out.y_f1.data()[i * C + c] + out.y_f2.data()[i * C + c]);
            if (s >= score_threshold)
                cands.push_back({s, i, static_cast<int>(c), decoded});
        }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.cls != b.cls) return a.cls < b.cls;
        return a.anchor < b.anchor;
    });
    std::vector<Detection> kept;
    for (const Cand& c : cands) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_index == c.cls && compute_iou(k.box, c.box) >= iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back({c.cls, c.box, c.score});
    }
    return kept;
}

}  // namespace miaod::det
