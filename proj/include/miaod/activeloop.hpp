#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miaod/detector.hpp"
#include "miaod/eval.hpp"
#include "miaod/losses.hpp"
#include "miaod/synthdata.hpp"

namespace miaod::loop {

enum class Strategy { Random, Entropy, MeanUnc, MaxUnc, Coreset, MiaodIul, MiaodIur };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct CycleConfig {
    double init_fraction = 0.10;
    double step_fraction = 0.05;
    int num_cycles = 5;
    int epochs_label = 10;
    int epochs_max = 2;
    int epochs_min = 2;
    int maxmin_repeats = 3;
    double learning_rate = 0.01;
    double lr_decay = 0.1;       // factor applied after lr_decay_at of epochs
    double lr_decay_at = 0.8;
    double momentum = 0.9;
    int batch_size = 8;
    int top_k = 20;
    Strategy strategy = Strategy::MiaodIur;
    /// Selection normally scores with the unweighted discrepancy even under
    /// IUR; this switches to the re-weighted variant.
    bool weighted_selection = false;
    std::uint64_t seed = 0;
    loss::LossConfig loss;
    // detector geometry
    int stride = 8;
    std::vector<int> anchor_sizes = {8, 12, 16};
    int patch = 16;
    int hidden = 128;
    int feature_dim = 64;
    double score_threshold = 0.05;
    double nms_iou = 0.5;

    void validate() const;
};

/// Dataset with per-image caches (patches, target assignments) shared by all
/// training phases.
struct DatasetView {
    const std::vector<synth::ImageSample>* samples = nullptr;
    det::AnchorGrid grid;
    int num_classes = 0;
    int patch = 16;
    std::vector<std::vector<double>> patches;          // per sample
    std::vector<det::AssignmentResult> assignments;    // per sample

    std::size_t index_of(const std::string& id) const;
    const synth::ImageSample& sample(std::size_t i) const { return (*samples)[i]; }
};

DatasetView make_view(const std::vector<synth::ImageSample>& samples,
                      const CycleConfig& cfg);

struct PoolState {
    std::vector<std::string> labeled_ids;    // sorted
    std::vector<std::string> unlabeled_ids;  // sorted
    int cycle = 0;
    std::vector<std::vector<std::string>> history;  // selected ids per cycle

    void assert_partition(std::size_t total) const;
};

PoolState init_pool(const std::vector<synth::ImageSample>& dataset,
                    const CycleConfig& cfg);

// -- training phases --------------------------------------------------------

/// Mini-batch SGD on the detection loss (plus the image classification loss
/// when with_mil) over all parameters.
void train_label_set(det::DetectorModel& model, const DatasetView& view,
                     const std::vector<std::string>& labeled_ids,
                     const CycleConfig& cfg, bool with_mil, std::uint64_t seed);

/// Discrepancy-maximization phase; the feature extractor stays frozen.
void max_step(det::DetectorModel& model, const DatasetView& view,
              const std::vector<std::string>& labeled_ids,
              const std::vector<std::string>& unlabeled_ids,
              const CycleConfig& cfg, bool reweight, std::uint64_t seed);

/// Discrepancy-minimization phase; both classifiers and the regressor stay
/// frozen, the MIL head trains only when reweighting.
void min_step(det::DetectorModel& model, const DatasetView& view,
              const std::vector<std::string>& labeled_ids,
              const std::vector<std::string>& unlabeled_ids,
              const CycleConfig& cfg, bool reweight, std::uint64_t seed);

/// Summed unweighted discrepancy over a set of images, for before/after
/// comparisons of the max/min phases.
double total_discrepancy(const det::DetectorModel& model, const DatasetView& view,
                         const std::vector<std::string>& ids,
                         const CycleConfig& cfg);

// -- scoring and selection --------------------------------------------------

enum class UncertaintyMode { Mean, Max, TopK };

double image_uncertainty(const det::DetectorModel& model, const DatasetView& view,
                         std::size_t sample_index, const CycleConfig& cfg,
                         UncertaintyMode mode);

/// Mean per-instance binary entropy of the averaged classifier probabilities.
double entropy_score(const det::DetectorModel& model, const DatasetView& view,
                     std::size_t sample_index);

/// Strategy-dependent selection of `count` unlabeled ids (descending score,
/// ties to the lexicographically first id).
std::vector<std::string> select_images(const det::DetectorModel& model,
                                       const DatasetView& view,
                                       const PoolState& pool,
                                       const CycleConfig& cfg, std::size_t count);

// -- cycle driver -----------------------------------------------------------

struct CycleMetrics {
    int cycle = 0;
    double labeled_fraction = 0.0;
    std::vector<double> per_class_ap;
    double map = 0.0;
    int tp_selected = 0;
    double mean_selected_uncertainty = 0.0;
    double wall_seconds = 0.0;
    std::vector<std::string> selected;
};

/// One full cycle: re-initialize and train the model, evaluate on the test
/// set, then select (except in the final cycle, where the budget is spent).
CycleMetrics run_cycle(det::DetectorModel& model, PoolState& pool,
                       const DatasetView& train_view,
                       const std::vector<synth::ImageSample>& test_set,
                       const CycleConfig& cfg, bool record_timing = false);

}  // namespace miaod::loop
