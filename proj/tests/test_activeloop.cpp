#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "miaod/activeloop.hpp"

using namespace miaod;
using namespace miaod::loop;

namespace {

struct Fixture {
    synth::SceneSpec spec;
    std::vector<synth::ImageSample> train;
    CycleConfig cfg;
    DatasetView view;

    explicit Fixture(int n, std::uint64_t seed = 3) {
        train = synth::generate_dataset(spec, n, seed);
        cfg.seed = seed;
        view = make_view(train, cfg);
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& s : train) out.push_back(s.id);
        return out;
    }

    det::DetectorModel fresh_model(std::uint64_t seed = 42) const {
        return det::DetectorModel::init(view.num_classes, seed, cfg.patch,
                                        cfg.hidden, cfg.feature_dim,
                                        static_cast<int>(cfg.anchor_sizes.size()));
    }
};

std::vector<std::vector<double>> snapshot_group(const det::DetectorModel& m,
                                                det::ParamGroup g) {
    std::vector<std::vector<double>> out;
    for (const auto& b : m.params)
        if (b.group == g) out.push_back(b.value);
    return out;
}

}  // namespace

TEST_CASE("pool initialization follows the schedule") {
    Fixture fx(40);
    fx.cfg.init_fraction = 0.10;
    PoolState pool = init_pool(fx.train, fx.cfg);
    CHECK(pool.labeled_ids.size() == 4);
    CHECK(pool.unlabeled_ids.size() == 36);
    pool.assert_partition(40);

    PoolState again = init_pool(fx.train, fx.cfg);
    CHECK(again.labeled_ids == pool.labeled_ids);

    CycleConfig bad = fx.cfg;
    bad.init_fraction = 0.001;
    CHECK_THROWS_AS(init_pool(fx.train, bad), contract_error);
}

TEST_CASE("label-set training is deterministic and reduces the loss") {
    Fixture fx(16);
    fx.cfg.epochs_label = 1;
    auto ids = fx.ids();

    auto m1 = fx.fresh_model();
    auto m2 = fx.fresh_model();
    train_label_set(m1, fx.view, ids, fx.cfg, false, 9);
    train_label_set(m2, fx.view, ids, fx.cfg, false, 9);
    for (std::size_t i = 0; i < m1.params.size(); ++i)
        CHECK(m1.params[i].value == m2.params[i].value);

    auto train_loss = [&](const det::DetectorModel& m) {
        double total = 0;
        for (std::size_t i = 0; i < fx.train.size(); ++i) {
            det::Tape t;
            auto out = det::forward_eval(m, t, fx.view.patches[i], fx.view.grid);
            total += loss::detection_loss(out, fx.view.assignments[i], fx.cfg.loss).item();
        }
        return total;
    };
    auto m3 = fx.fresh_model();
    const double before = train_loss(m3);
    CycleConfig ten = fx.cfg;
    ten.epochs_label = 10;
    train_label_set(m3, fx.view, ids, ten, false, 9);
    CHECK(train_loss(m3) < before);

    CHECK_THROWS_AS(train_label_set(m3, fx.view, {}, fx.cfg, false, 9),
                    contract_error);
}

TEST_CASE("freeze contracts hold bitwise") {
    Fixture fx(20);
    fx.cfg.epochs_max = fx.cfg.epochs_min = 1;
    auto ids = fx.ids();
    std::vector<std::string> labeled(ids.begin(), ids.begin() + 6);
    std::vector<std::string> unlabeled(ids.begin() + 6, ids.end());

    auto m = fx.fresh_model();
    train_label_set(m, fx.view, labeled, fx.cfg, false, 1);

    for (bool reweight : {false, true}) {
        auto g_before = snapshot_group(m, det::ParamGroup::Feature);
        max_step(m, fx.view, labeled, unlabeled, fx.cfg, reweight, 2);
        CHECK(snapshot_group(m, det::ParamGroup::Feature) == g_before);

        auto f1_before = snapshot_group(m, det::ParamGroup::Head1);
        auto f2_before = snapshot_group(m, det::ParamGroup::Head2);
        auto fr_before = snapshot_group(m, det::ParamGroup::Regressor);
        min_step(m, fx.view, labeled, unlabeled, fx.cfg, reweight, 3);
        CHECK(snapshot_group(m, det::ParamGroup::Head1) == f1_before);
        CHECK(snapshot_group(m, det::ParamGroup::Head2) == f2_before);
        CHECK(snapshot_group(m, det::ParamGroup::Regressor) == fr_before);
    }
}

TEST_CASE("mil head trains in min_step only when reweighting") {
    Fixture fx(20);
    fx.cfg.epochs_max = fx.cfg.epochs_min = 1;
    auto ids = fx.ids();
    std::vector<std::string> labeled(ids.begin(), ids.begin() + 6);
    std::vector<std::string> unlabeled(ids.begin() + 6, ids.end());
    auto m = fx.fresh_model();
    train_label_set(m, fx.view, labeled, fx.cfg, true, 1);

    auto mil_before = snapshot_group(m, det::ParamGroup::Mil);
    min_step(m, fx.view, labeled, unlabeled, fx.cfg, false, 5);
    CHECK(snapshot_group(m, det::ParamGroup::Mil) == mil_before);
    min_step(m, fx.view, labeled, unlabeled, fx.cfg, true, 5);
    CHECK(snapshot_group(m, det::ParamGroup::Mil) != mil_before);
}

TEST_CASE("uncertainty mode identities") {
    Fixture fx(4);
    auto m = fx.fresh_model(7);
    const std::size_t N = fx.view.grid.count();

    CycleConfig k1 = fx.cfg;
    k1.top_k = 1;
    CycleConfig kN = fx.cfg;
    kN.top_k = static_cast<int>(N);
    for (std::size_t i = 0; i < fx.train.size(); ++i) {
        CHECK(image_uncertainty(m, fx.view, i, k1, UncertaintyMode::TopK) ==
              image_uncertainty(m, fx.view, i, fx.cfg, UncertaintyMode::Max));
        CHECK(image_uncertainty(m, fx.view, i, kN, UncertaintyMode::TopK) ==
              doctest::Approx(image_uncertainty(m, fx.view, i, fx.cfg,
                                                UncertaintyMode::Mean))
                  .epsilon(1e-12));
    }
}

TEST_CASE("entropy score extremes") {
    Fixture fx(1);
    // zero parameters -> p = 0.5 everywhere -> C * ln 2
    auto m = fx.fresh_model();
    for (auto& b : m.params) std::fill(b.value.begin(), b.value.end(), 0.0);
    CHECK(entropy_score(m, fx.view, 0) ==
          doctest::Approx(3 * std::log(2.0)).epsilon(1e-12));

    // saturated biases -> near-zero entropy
    for (const char* name : {"f1_b", "f2_b"})
        for (double& v : m.block(name).value) v = 40.0;
    CHECK(entropy_score(m, fx.view, 0) < 1e-6);
}

TEST_CASE("selection: ordering, ties, determinism, exhaustion") {
    Fixture fx(20);
    auto m = fx.fresh_model(11);
    PoolState pool = init_pool(fx.train, fx.cfg);

    fx.cfg.strategy = Strategy::MiaodIul;
    auto sel = select_images(m, fx.view, pool, fx.cfg, 3);
    REQUIRE(sel.size() == 3);
    // selected ids carry the highest top-k scores among unlabeled
    double worst_sel = 1e300;
    for (const auto& id : sel)
        worst_sel = std::min(worst_sel,
                             image_uncertainty(m, fx.view, fx.view.index_of(id),
                                               fx.cfg, UncertaintyMode::TopK));
    for (const auto& id : pool.unlabeled_ids)
        if (std::find(sel.begin(), sel.end(), id) == sel.end())
            CHECK(image_uncertainty(m, fx.view, fx.view.index_of(id), fx.cfg,
                                    UncertaintyMode::TopK) <= worst_sel);

    // zero-parameter model scores every image identically -> lexicographic ids
    auto zero = fx.fresh_model();
    for (auto& b : zero.params) std::fill(b.value.begin(), b.value.end(), 0.0);
    auto tied = select_images(zero, fx.view, pool, fx.cfg, 3);
    std::vector<std::string> expect(pool.unlabeled_ids.begin(),
                                    pool.unlabeled_ids.begin() + 3);
    CHECK(tied == expect);

    fx.cfg.strategy = Strategy::Random;
    auto r1 = select_images(m, fx.view, pool, fx.cfg, 5);
    auto r2 = select_images(m, fx.view, pool, fx.cfg, 5);
    CHECK(r1 == r2);

    CHECK_THROWS_AS(select_images(m, fx.view, pool, fx.cfg, 100), contract_error);
}

TEST_CASE("coreset picks the distance-covering point") {
    // three clustered unlabeled candidates and one far outlier: k-center greedy
    // with the labeled set as initial centers must take the outlier first
    Fixture fx(30, 77);
    auto m = fx.fresh_model(13);
    fx.cfg.strategy = Strategy::Coreset;
    PoolState pool = init_pool(fx.train, fx.cfg);
    auto sel = select_images(m, fx.view, pool, fx.cfg, 1);
    REQUIRE(sel.size() == 1);

    // brute force: the chosen id maximizes the min distance to labeled features
    auto feat = [&](const std::string& id) {
        det::Tape t;
        auto out = det::forward_eval(m, t, fx.view.patches[fx.view.index_of(id)],
                                     fx.view.grid);
        const std::size_t R = out.features.rows(), D = out.features.cols();
        std::vector<double> f(D, 0.0);
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t d = 0; d < D; ++d) f[d] += out.features.data()[r * D + d];
        for (double& v : f) v /= static_cast<double>(R);
        return f;
    };
    auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return s;
    };
    std::vector<std::vector<double>> lab;
    for (const auto& id : pool.labeled_ids) lab.push_back(feat(id));
    std::string best;
    double best_d = -1;
    for (const auto& id : pool.unlabeled_ids) {
        auto f = feat(id);
        double mind = 1e300;
        for (const auto& lf : lab) mind = std::min(mind, dist2(f, lf));
        if (mind > best_d || (mind == best_d && id < best)) {
            best_d = mind;
            best = id;
        }
    }
    CHECK(sel[0] == best);
}

TEST_CASE("run_cycle keeps pool invariants and the budget schedule") {
    Fixture fx(40);
    fx.cfg.num_cycles = 3;
    fx.cfg.epochs_label = 2;
    fx.cfg.epochs_max = fx.cfg.epochs_min = 1;
    fx.cfg.maxmin_repeats = 1;
    auto test_set = synth::generate_dataset(fx.spec, 10, 999);

    PoolState pool = init_pool(fx.train, fx.cfg);
    det::DetectorModel model;
    std::vector<double> fractions;
    for (int c = 0; c < fx.cfg.num_cycles; ++c) {
        auto metrics = run_cycle(model, pool, fx.view, test_set, fx.cfg);
        fractions.push_back(metrics.labeled_fraction);
        pool.assert_partition(40);
        CHECK(metrics.cycle == c);
    }
    CHECK(fractions == std::vector<double>{4.0 / 40, 6.0 / 40, 8.0 / 40});
    // final cycle trains on the full budget but selects nothing further
    CHECK(pool.labeled_ids.size() == 8);
    CHECK(pool.history.back().empty());

    // selections across cycles are disjoint
    for (std::size_t a = 0; a + 1 < pool.history.size(); ++a)
        for (const auto& id : pool.history[a])
            for (std::size_t b = a + 1; b < pool.history.size(); ++b)
                CHECK(std::find(pool.history[b].begin(), pool.history[b].end(),
                                id) == pool.history[b].end());
}

TEST_CASE("strategy names round-trip") {
    for (Strategy s : {Strategy::Random, Strategy::Entropy, Strategy::MeanUnc,
                       Strategy::MaxUnc, Strategy::Coreset, Strategy::MiaodIul,
                       Strategy::MiaodIur})
        CHECK(parse_strategy(strategy_name(s)) == s);
    CHECK_THROWS_AS(parse_strategy("bogus"), contract_error);
}

TEST_CASE("config validation") {
    CycleConfig bad;
    bad.init_fraction = 0.5;
    bad.step_fraction = 0.2;
    bad.num_cycles = 4;  // 0.5 + 4*0.2 > 1
    CHECK_THROWS_AS(bad.validate(), contract_error);
    bad = CycleConfig{};
    bad.top_k = 0;
    CHECK_THROWS_AS(bad.validate(), contract_error);
}
