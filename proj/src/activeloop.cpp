#include "miaod/activeloop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

namespace miaod::loop {

Strategy parse_strategy(const std::string& name) {
    if (name == "random") return Strategy::Random;
    if (name == "entropy") return Strategy::Entropy;
    if (name == "mean_unc") return Strategy::MeanUnc;
    if (name == "max_unc") return Strategy::MaxUnc;
    if (name == "coreset") return Strategy::Coreset;
    if (name == "miaod_iul") return Strategy::MiaodIul;
    if (name == "miaod_iur") return Strategy::MiaodIur;
    throw contract_error("unknown strategy '" + name + "'");
}

std::string strategy_name(Strategy s) {
    switch (s) {
    case Strategy::Random: return "random";
    case Strategy::Entropy: return "entropy";
    case Strategy::MeanUnc: return "mean_unc";
    case Strategy::MaxUnc: return "max_unc";
    case Strategy::Coreset: return "coreset";
    case Strategy::MiaodIul: return "miaod_iul";
    case Strategy::MiaodIur: return "miaod_iur";
    }
    return "?";
}

void CycleConfig::validate() const {
    auto fail = [](const std::string& m) { throw contract_error("cycle config: " + m); };
    if (init_fraction <= 0.0 || init_fraction > 1.0) fail("init_fraction outside (0,1]");
    if (step_fraction <= 0.0 || step_fraction > 1.0) fail("step_fraction outside (0,1]");
    if (num_cycles < 1) fail("num_cycles must be >= 1");
    if (init_fraction + num_cycles * step_fraction > 1.0 + 1e-12)
        fail("budget schedule exceeds the dataset");
    if (top_k < 1) fail("k must be >= 1");
    if (epochs_label < 0 || epochs_max < 0 || epochs_min < 0 || maxmin_repeats < 0)
        fail("negative epoch counts");
    if (learning_rate <= 0.0 || batch_size < 1) fail("bad optimizer settings");
    if (loss.lambda < 0.0) fail("lambda must be >= 0");
}

std::size_t DatasetView::index_of(const std::string& id) const {
    for (std::size_t i = 0; i < samples->size(); ++i)
        if ((*samples)[i].id == id) return i;
    throw contract_error("unknown sample id " + id);
}

DatasetView make_view(const std::vector<synth::ImageSample>& samples,
                      const CycleConfig& cfg) {
    if (samples.empty()) throw contract_error("make_view: empty dataset");
    DatasetView view;
    view.samples = &samples;
    view.patch = cfg.patch;
    view.num_classes = static_cast<int>(samples.front().image_labels.size());
    view.grid = det::build_anchors(samples.front().width, cfg.stride,
                                   cfg.anchor_sizes);
    view.patches.reserve(samples.size());
    view.assignments.reserve(samples.size());
    for (const synth::ImageSample& s : samples) {
        view.patches.push_back(det::extract_patches(s, view.grid, cfg.patch));
        view.assignments.push_back(det::assign_targets(view.grid, s.gt_boxes,
                                                       s.gt_classes,
                                                       view.num_classes));
    }
    return view;
}

void PoolState::assert_partition(std::size_t total) const {
    if (labeled_ids.size() + unlabeled_ids.size() != total)
        throw contract_error("pool does not cover the dataset");
    std::vector<std::string> all = labeled_ids;
    all.insert(all.end(), unlabeled_ids.begin(), unlabeled_ids.end());
    std::sort(all.begin(), all.end());
    if (std::adjacent_find(all.begin(), all.end()) != all.end())
        throw contract_error("pool partition overlaps");
}

PoolState init_pool(const std::vector<synth::ImageSample>& dataset,
                    const CycleConfig& cfg) {
    if (dataset.empty()) throw contract_error("init_pool: empty dataset");
    const std::size_t n_init = static_cast<std::size_t>(
        std::llround(cfg.init_fraction * static_cast<double>(dataset.size())));
    if (n_init == 0) throw contract_error("init_pool: init fraction selects zero images");
    std::vector<std::string> ids;
    ids.reserve(dataset.size());
    for (const synth::ImageSample& s : dataset) ids.push_back(s.id);
    std::sort(ids.begin(), ids.end());
    Rng rng(mix_seed(cfg.seed, 0xA110C));
    rng.shuffle(ids);
    PoolState pool;
    pool.labeled_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_init));
    pool.unlabeled_ids.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_init), ids.end());
    std::sort(pool.labeled_ids.begin(), pool.labeled_ids.end());
    std::sort(pool.unlabeled_ids.begin(), pool.unlabeled_ids.end());
    return pool;
}

// -- training ---------------------------------------------------------------

namespace {

enum class Phase { Label, Max, Min };

det::TrainMask phase_mask(Phase phase, bool reweight) {
    switch (phase) {
    case Phase::Label: return {true, true, true, true, true};
    case Phase::Max: return {false, true, true, true, true};
    case Phase::Min: return {true, false, false, false, reweight};
    }
    return {};
}

/// One SGD step over paired labeled/unlabeled batches. The objective is
/// scaled by the labeled batch size so the learning rate is per-image.
void sgd_step(det::DetectorModel& model, const DatasetView& view,
              const std::vector<std::size_t>& labeled,
              const std::vector<std::size_t>& unlabeled, Phase phase,
              bool reweight, double lr, const CycleConfig& cfg) {
    det::Tape tape;
    det::TrainMask mask = phase_mask(phase, reweight);
    det::ModelTensors mt = attach(model, tape, mask);

    std::vector<det::ForwardOutput> outs;
    outs.reserve(labeled.size() + unlabeled.size());
    std::vector<loss::LabeledItem> lab_items;
    std::vector<loss::UnlabeledItem> unl_items;
    const std::size_t P = static_cast<std::size_t>(view.patch) * view.patch;
    for (std::size_t idx : labeled) {
        ad::Tensor px = ad::Tensor::constant({view.grid.num_cells(), P},
                                             view.patches[idx]);
        outs.push_back(det::forward(mt, px, view.grid));
        lab_items.push_back({&outs.back(), &view.assignments[idx],
                             &view.sample(idx).image_labels});
    }
    for (std::size_t idx : unlabeled) {
        ad::Tensor px = ad::Tensor::constant({view.grid.num_cells(), P},
                                             view.patches[idx]);
        outs.push_back(det::forward(mt, px, view.grid));
        unl_items.push_back({&outs.back()});
    }

    ad::Tensor obj;
    switch (phase) {
    case Phase::Label:
        obj = loss::objective_max(lab_items, {}, cfg.loss, reweight);
        break;
    case Phase::Max:
        obj = loss::objective_max(lab_items, unl_items, cfg.loss, reweight);
        break;
    case Phase::Min:
        obj = loss::objective_min(lab_items, unl_items, cfg.loss, reweight);
        break;
    }
    obj = ad::scale(obj, 1.0 / static_cast<double>(labeled.size()));
    tape.backward(obj);
    det::apply_sgd(model, mt, mask, lr, cfg.momentum);
}

std::vector<std::size_t> resolve_ids(const DatasetView& view,
                                     const std::vector<std::string>& ids) {
    std::vector<std::size_t> idx;
    idx.reserve(ids.size());
    for (const std::string& id : ids) idx.push_back(view.index_of(id));
    return idx;
}

/// Run `epochs` passes over the labeled indices, pairing each labeled batch
/// with an equally sized unlabeled batch drawn from a shuffled cycling stream.
void run_epochs(det::DetectorModel& model, const DatasetView& view,
                std::vector<std::size_t> labeled, std::vector<std::size_t> unlabeled,
                Phase phase, bool reweight, int epochs, double lr_of_epoch_base,
                const CycleConfig& cfg, Rng& rng, double decay_at_fraction) {
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double lr = lr_of_epoch_base;
        if (decay_at_fraction > 0.0 &&
            epoch >= static_cast<int>(decay_at_fraction * epochs))
            lr *= cfg.lr_decay;
        rng.shuffle(labeled);
        if (!unlabeled.empty()) rng.shuffle(unlabeled);
        std::size_t u_cursor = 0;
        const std::size_t B = static_cast<std::size_t>(cfg.batch_size);
        for (std::size_t start = 0; start < labeled.size(); start += B) {
            std::vector<std::size_t> lb(labeled.begin() + static_cast<std::ptrdiff_t>(start),
                                        labeled.begin() + static_cast<std::ptrdiff_t>(
                                            std::min(start + B, labeled.size())));
            std::vector<std::size_t> ub;
            for (std::size_t j = 0; j < lb.size() && !unlabeled.empty(); ++j) {
                ub.push_back(unlabeled[u_cursor]);
                u_cursor = (u_cursor + 1) % unlabeled.size();
            }
            sgd_step(model, view, lb, ub, phase, reweight, lr, cfg);
        }
    }
}

}  // namespace

void train_label_set(det::DetectorModel& model, const DatasetView& view,
                     const std::vector<std::string>& labeled_ids,
                     const CycleConfig& cfg, bool with_mil, std::uint64_t seed) {
    if (labeled_ids.empty()) throw contract_error("train_label_set: empty labeled set");
    Rng rng(seed);
    run_epochs(model, view, resolve_ids(view, labeled_ids), {}, Phase::Label,
               with_mil, cfg.epochs_label, cfg.learning_rate, cfg, rng,
               cfg.lr_decay_at);
}

void max_step(det::DetectorModel& model, const DatasetView& view,
              const std::vector<std::string>& labeled_ids,
              const std::vector<std::string>& unlabeled_ids,
              const CycleConfig& cfg, bool reweight, std::uint64_t seed) {
    Rng rng(seed);
    run_epochs(model, view, resolve_ids(view, labeled_ids),
               resolve_ids(view, unlabeled_ids), Phase::Max, reweight,
               cfg.epochs_max, cfg.learning_rate * cfg.lr_decay, cfg, rng, 0.0);
}

void min_step(det::DetectorModel& model, const DatasetView& view,
              const std::vector<std::string>& labeled_ids,
              const std::vector<std::string>& unlabeled_ids,
              const CycleConfig& cfg, bool reweight, std::uint64_t seed) {
    Rng rng(seed);
    run_epochs(model, view, resolve_ids(view, labeled_ids),
               resolve_ids(view, unlabeled_ids), Phase::Min, reweight,
               cfg.epochs_min, cfg.learning_rate * cfg.lr_decay, cfg, rng, 0.0);
}

double total_discrepancy(const det::DetectorModel& model, const DatasetView& view,
                         const std::vector<std::string>& ids,
                         const CycleConfig& cfg) {
    double total = 0.0;
    for (const std::string& id : ids) {
        const std::size_t idx = view.index_of(id);
        det::Tape tape;
        det::ForwardOutput out =
            det::forward_eval(model, tape, view.patches[idx], view.grid);
        total += loss::discrepancy(out.y_f1, out.y_f2, cfg.loss).loss.item();
    }
    return total;
}

// -- scoring ----------------------------------------------------------------

namespace {

std::vector<double> instance_uncertainty(const det::DetectorModel& model,
                                         const DatasetView& view,
                                         std::size_t sample_index,
                                         const CycleConfig& cfg) {
    det::Tape tape;
    det::ForwardOutput out =
        det::forward_eval(model, tape, view.patches[sample_index], view.grid);
    if (cfg.weighted_selection) {
        ad::Tensor w = loss::mil_image_score(out.y_fmil, out.y_f1, out.y_f2);
        return loss::weighted_discrepancy(out.y_f1, out.y_f2, w, cfg.loss)
            .per_instance.data();
    }
    return loss::discrepancy(out.y_f1, out.y_f2, cfg.loss).per_instance.data();
}

}  // namespace

double image_uncertainty(const det::DetectorModel& model, const DatasetView& view,
                         std::size_t sample_index, const CycleConfig& cfg,
                         UncertaintyMode mode) {
    std::vector<double> u = instance_uncertainty(model, view, sample_index, cfg);
    // one code path for all modes, so max == top-1 and mean == top-N hold
    // bitwise, not just approximately
    std::size_t k = u.size();
    if (mode == UncertaintyMode::Max)
        k = 1;
    else if (mode == UncertaintyMode::TopK)
        k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), u.size());
    std::partial_sort(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(k), u.end(),
                      std::greater<double>());
    return std::accumulate(u.begin(), u.begin() + static_cast<std::ptrdiff_t>(k),
                           0.0) /
           static_cast<double>(k);
}

double entropy_score(const det::DetectorModel& model, const DatasetView& view,
                     std::size_t sample_index) {
    det::Tape tape;
    det::ForwardOutput out =
        det::forward_eval(model, tape, view.patches[sample_index], view.grid);
    const std::size_t N = out.y_f1.rows(), C = out.y_f1.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const double p = std::clamp(
                0.5 * (out.y_f1.data()[i * C + c] + out.y_f2.data()[i * C + c]),
                1e-12, 1.0 - 1e-12);
            total += -p * std::log(p) - (1.0 - p) * std::log(1.0 - p);
        }
    return total / static_cast<double>(N);
}

namespace {

std::vector<double> pooled_features(const det::DetectorModel& model,
                                    const DatasetView& view, std::size_t idx) {
    det::Tape tape;
    det::ForwardOutput out =
        det::forward_eval(model, tape, view.patches[idx], view.grid);
    const std::size_t R = out.features.rows(), D = out.features.cols();
    std::vector<double> f(D, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t d = 0; d < D; ++d) f[d] += out.features.data()[r * D + d];
    for (double& v : f) v /= static_cast<double>(R);
    return f;
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

std::vector<std::string> coreset_select(const det::DetectorModel& model,
                                        const DatasetView& view,
                                        const PoolState& pool, std::size_t count) {
    std::vector<std::vector<double>> lab_feats;
    for (const std::string& id : pool.labeled_ids)
        lab_feats.push_back(pooled_features(model, view, view.index_of(id)));
    struct Cand {
        std::string id;
        std::vector<double> feat;
        double min_dist;
    };
    std::vector<Cand> cands;
    for (const std::string& id : pool.unlabeled_ids) {
        Cand c{id, pooled_features(model, view, view.index_of(id)), 0.0};
        c.min_dist = std::numeric_limits<double>::infinity();
        for (const auto& lf : lab_feats) c.min_dist = std::min(c.min_dist, sq_dist(c.feat, lf));
        cands.push_back(std::move(c));
    }
    std::vector<std::string> picked;
    std::vector<bool> taken(cands.size(), false);
    for (std::size_t step = 0; step < count; ++step) {
        std::size_t best = cands.size();
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (taken[i]) continue;
            if (best == cands.size() || cands[i].min_dist > cands[best].min_dist ||
                (cands[i].min_dist == cands[best].min_dist &&
                 cands[i].id < cands[best].id))
                best = i;
        }
        taken[best] = true;
        picked.push_back(cands[best].id);
        for (std::size_t i = 0; i < cands.size(); ++i)
            if (!taken[i])
                cands[i].min_dist =
                    std::min(cands[i].min_dist, sq_dist(cands[i].feat, cands[best].feat));
    }
    std::sort(picked.begin(), picked.end());
    return picked;
}

}  // namespace

std::vector<std::string> select_images(const det::DetectorModel& model,
                                       const DatasetView& view,
                                       const PoolState& pool,
                                       const CycleConfig& cfg, std::size_t count) {
    if (pool.unlabeled_ids.size() < count)
        throw contract_error("select_images: unlabeled pool exhausted");
    if (cfg.strategy == Strategy::Coreset)
        return coreset_select(model, view, pool, count);

    struct Scored {
        std::string id;
        double score;
    };
    std::vector<Scored> scored;
    scored.reserve(pool.unlabeled_ids.size());
    for (const std::string& id : pool.unlabeled_ids) {
        double s = 0.0;
        const std::size_t idx = view.index_of(id);
        switch (cfg.strategy) {
        case Strategy::Random:
            // order-independent per-id draw keyed by (seed, cycle, id)
            s = static_cast<double>(mix_seed(mix_seed(cfg.seed,
                                                      static_cast<std::uint64_t>(pool.cycle)),
                                             fnv1a64(id)) >> 11) * 0x1.0p-53;
            break;
        case Strategy::Entropy:
            s = entropy_score(model, view, idx);
            break;
        case Strategy::MeanUnc:
            s = image_uncertainty(model, view, idx, cfg, UncertaintyMode::Mean);
            break;
        case Strategy::MaxUnc:
            s = image_uncertainty(model, view, idx, cfg, UncertaintyMode::Max);
            break;
        case Strategy::MiaodIul:
        case Strategy::MiaodIur:
            s = image_uncertainty(model, view, idx, cfg, UncertaintyMode::TopK);
            break;
        case Strategy::Coreset:
            break;  // handled above
        }
        scored.push_back({id, s});
    }
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    std::vector<std::string> picked;
    for (std::size_t i = 0; i < count; ++i) picked.push_back(scored[i].id);
    std::sort(picked.begin(), picked.end());
    return picked;
}

// -- cycle driver -----------------------------------------------------------

CycleMetrics run_cycle(det::DetectorModel& model, PoolState& pool,
                       const DatasetView& train_view,
                       const std::vector<synth::ImageSample>& test_set,
                       const CycleConfig& cfg, bool record_timing) {
    cfg.validate();
    pool.assert_partition(train_view.samples->size());
    const auto t0 = std::chrono::steady_clock::now();
    const int cycle = pool.cycle;
    const std::size_t total = train_view.samples->size();

    // retrained from scratch each cycle, seeded per cycle
    model = det::DetectorModel::init(train_view.num_classes,
                                     mix_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(cycle)),
                                     cfg.patch, cfg.hidden, cfg.feature_dim,
                                     static_cast<int>(cfg.anchor_sizes.size()));

    const bool reweight = cfg.strategy == Strategy::MiaodIur;
    const bool adversarial = cfg.strategy == Strategy::MiaodIul ||
                             cfg.strategy == Strategy::MiaodIur ||
                             cfg.strategy == Strategy::MeanUnc ||
                             cfg.strategy == Strategy::MaxUnc;

    train_label_set(model, train_view, pool.labeled_ids, cfg, reweight,
                    mix_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(cycle)));
    if (adversarial) {
        for (int r = 0; r < cfg.maxmin_repeats; ++r) {
            const std::uint64_t base = 3000 + static_cast<std::uint64_t>(cycle) * 100 +
                                       static_cast<std::uint64_t>(r);
            max_step(model, train_view, pool.labeled_ids, pool.unlabeled_ids, cfg,
                     reweight, mix_seed(cfg.seed, base));
            min_step(model, train_view, pool.labeled_ids, pool.unlabeled_ids, cfg,
                     reweight, mix_seed(cfg.seed, base + 50));
        }
    }

    CycleMetrics m;
    m.cycle = cycle;
    m.labeled_fraction =
        static_cast<double>(pool.labeled_ids.size()) / static_cast<double>(total);
    eval::MapResult mr = eval::evaluate_map(model, test_set, train_view.grid,
                                            cfg.score_threshold, cfg.nms_iou);
    m.per_class_ap = mr.per_class_ap;
    m.map = mr.map;

    if (cycle < cfg.num_cycles - 1) {
        const std::size_t step_count = static_cast<std::size_t>(
            std::llround(cfg.step_fraction * static_cast<double>(total)));
        m.selected = select_images(model, train_view, pool, cfg, step_count);

        std::vector<const synth::ImageSample*> sel_samples;
        double unc_sum = 0.0;
        for (const std::string& id : m.selected) {
            const std::size_t idx = train_view.index_of(id);
            sel_samples.push_back(&train_view.sample(idx));
            unc_sum += image_uncertainty(model, train_view, idx, cfg,
                                         UncertaintyMode::TopK);
        }
        m.mean_selected_uncertainty =
            m.selected.empty() ? 0.0 : unc_sum / static_cast<double>(m.selected.size());
        m.tp_selected = sel_samples.empty()
                            ? 0
                            : eval::tp_selected(model, sel_samples, train_view.grid,
                                                cfg.top_k);

        std::vector<std::string> remaining;
        for (const std::string& id : pool.unlabeled_ids)
            if (!std::binary_search(m.selected.begin(), m.selected.end(), id))
                remaining.push_back(id);
        pool.unlabeled_ids = std::move(remaining);
        pool.labeled_ids.insert(pool.labeled_ids.end(), m.selected.begin(),
                                m.selected.end());
        std::sort(pool.labeled_ids.begin(), pool.labeled_ids.end());
    }
    pool.history.push_back(m.selected);
    pool.cycle += 1;
    pool.assert_partition(total);

    if (record_timing)
        m.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
    return m;
}

}  // namespace miaod::loop
