#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "miaod/autodiff.hpp"
#include "miaod/box.hpp"
#include "miaod/synthdata.hpp"

namespace miaod::det {

using ad::Tape;
using ad::Tensor;

// -- anchors ----------------------------------------------------------------

struct AnchorGrid {
    int image_size = 64;
    int stride = 8;
    std::vector<int> sizes = {8, 12, 16};
    struct Anchor {
        double cx, cy, w, h;
    };
    // row-major over grid cells, sizes innermost
    std::vector<Anchor> anchors;

    std::size_t count() const { return anchors.size(); }
    int cells_per_side() const { return image_size / stride; }
    std::size_t num_cells() const {
        return static_cast<std::size_t>(cells_per_side()) * cells_per_side();
    }
    Box anchor_box(std::size_t i) const {
        const Anchor& a = anchors[i];
        return Box{a.cx - a.w / 2, a.cy - a.h / 2, a.cx + a.w / 2, a.cy + a.h / 2};
    }
};

AnchorGrid build_anchors(int image_size, int stride, std::vector<int> sizes);

// -- target assignment ------------------------------------------------------

enum class AnchorFlag { Negative, Positive, Ignore };

struct AssignmentResult {
    std::size_t num_anchors = 0;
    int num_classes = 0;
    std::vector<double> y_cls;                   // N x C, one-hot or all-zero
    std::vector<std::array<double, 4>> y_loc;    // defined for positives
    std::vector<AnchorFlag> flags;

    std::vector<std::size_t> positive_indices() const;
    std::vector<std::size_t> non_ignored_indices() const;
};

/// IoU >= 0.5 positive (argmax gt, ties to the lowest gt index), < 0.4
/// negative, ignore in between; every gt's best anchor is forced positive.
/// Offsets encode as ((gx-ax)/aw, (gy-ay)/ah, log(gw/aw), log(gh/ah)).
AssignmentResult assign_targets(const AnchorGrid& grid,
                                const std::vector<Box>& gt_boxes,
                                const std::vector<int>& gt_classes,
                                int num_classes);

std::array<double, 4> encode_box(const Box& gt, const Box& anchor);
Box decode_box(const std::array<double, 4>& offsets, const Box& anchor);

// -- model ------------------------------------------------------------------

enum class ParamGroup { Feature, Head1, Head2, Regressor, Mil };

struct ParamBlock {
    std::string name;
    ParamGroup group;
    ad::Shape shape;
    std::vector<double> value;
    std::vector<double> velocity;  // momentum buffer

    std::size_t size() const { return value.size(); }
};

/// Patch-MLP detector: a 16x16 window around each grid cell runs through two
/// affine+relu layers to D features, then four affine heads (the two sigmoid
/// classifiers, the box regressor, the raw-score MIL head). Heads emit
/// A-per-cell outputs so anchors of different sizes get distinct predictions
/// from the shared cell feature.
struct DetectorModel {
    int num_classes = 3;
    int patch = 16;
    int hidden = 128;
    int feature_dim = 64;
    int anchors_per_cell = 3;
    std::vector<ParamBlock> params;

    static DetectorModel init(int num_classes, std::uint64_t seed, int patch = 16,
                              int hidden = 128, int feature_dim = 64,
                              int anchors_per_cell = 3);

    ParamBlock& block(const std::string& name);
    const ParamBlock& block(const std::string& name) const;
};

/// Per-group trainability; frozen groups stay bitwise untouched by updates.
struct TrainMask {
    bool feature = true, f1 = true, f2 = true, fr = true, mil = true;
    bool trains(ParamGroup g) const {
        switch (g) {
        case ParamGroup::Feature: return feature;
        case ParamGroup::Head1: return f1;
        case ParamGroup::Head2: return f2;
        case ParamGroup::Regressor: return fr;
        case ParamGroup::Mil: return mil;
        }
        return false;
    }
};

/// Parameter leaves attached to one tape for one optimization step.
struct ModelTensors {
    const DetectorModel* model = nullptr;
    std::vector<Tensor> leaves;  // aligned with model->params
    Tensor get(const std::string& name) const;
};

ModelTensors attach(const DetectorModel& model, Tape& tape, const TrainMask& mask);

/// SGD with momentum on every trainable leaf; gradients are read from the
/// leaves after backward. Throws numeric_fault on non-finite updates.
void apply_sgd(DetectorModel& model, const ModelTensors& mt, const TrainMask& mask,
               double lr, double momentum);

// -- forward ----------------------------------------------------------------

struct ForwardOutput {
    Tensor y_f1, y_f2;  // N x C sigmoid probabilities
    Tensor y_fr;        // N x 4 offsets
    Tensor y_fmil;      // N x C raw scores
    Tensor features;    // cells x D (one row per grid cell)
};

/// One row per grid cell (anchors of all sizes at a cell share the patch),
/// zero-padded at image borders. Values are constants on the tape.
std::vector<double> extract_patches(const synth::ImageSample& image,
                                    const AnchorGrid& grid, int patch);

ForwardOutput forward(const ModelTensors& mt, const Tensor& patches,
                      const AnchorGrid& grid);

/// Convenience forward with throwaway non-trainable leaves.
ForwardOutput forward_eval(const DetectorModel& model, Tape& tape,
                           const std::vector<double>& patches,
                           const AnchorGrid& grid);

// -- decoding ---------------------------------------------------------------

struct Detection {
    int class_index = 0;
    Box box;
    double score = 0.0;
};

/// Per-class score (y_f1 + y_f2)/2, greedy per-class NMS, result sorted by
/// descending score (ties broken by class then anchor order).
std::vector<Detection> decode_and_nms(const ForwardOutput& out,
                                      const AnchorGrid& grid,
                                      double score_threshold,
                                      double iou_threshold = 0.5);

}  // namespace miaod::det
