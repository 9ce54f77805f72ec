#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "miaod/losses.hpp"

using namespace miaod;
using namespace miaod::loss;
using ad::Tensor;

namespace {

det::AssignmentResult make_asg(std::size_t n, int c,
                               const std::vector<det::AnchorFlag>& flags,
                               const std::vector<int>& classes) {
    det::AssignmentResult asg;
    asg.num_anchors = n;
    asg.num_classes = c;
    asg.flags = flags;
    asg.y_cls.assign(n * static_cast<std::size_t>(c), 0.0);
    asg.y_loc.assign(n, {0, 0, 0, 0});
    for (std::size_t i = 0; i < n; ++i)
        if (flags[i] == det::AnchorFlag::Positive)
            asg.y_cls[i * static_cast<std::size_t>(c) +
                      static_cast<std::size_t>(classes[i])] = 1.0;
    return asg;
}

}  // namespace

TEST_CASE("focal loss closed-form value") {
    // 1 positive anchor, C=3, y=[1,0,0], p=0.5 everywhere:
    // 0.25*0.25*ln2 + 2*0.75*0.25*ln2
    auto asg = make_asg(1, 3, {det::AnchorFlag::Positive}, {0});
    Tensor p = Tensor::constant({1, 3}, {0.5, 0.5, 0.5});
    LossConfig cfg;
    const double expect = 0.25 * 0.25 * std::log(2.0) + 2 * 0.75 * 0.25 * std::log(2.0);
    CHECK(focal_loss(p, asg, cfg).item() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(expect == doctest::Approx(0.3033).epsilon(1e-3));
}

TEST_CASE("focal loss limits and reductions") {
    auto asg = make_asg(2, 2,
                        {det::AnchorFlag::Positive, det::AnchorFlag::Negative},
                        {1, 0});
    LossConfig cfg;
    // near-perfect prediction -> loss ~ 0
    Tensor good = Tensor::constant({2, 2}, {1e-9, 1.0 - 1e-9, 1e-9, 1e-9});
    CHECK(focal_loss(good, asg, cfg).item() == doctest::Approx(0.0).epsilon(1e-6));

    // gamma=0, alpha=0.5 halves plain BCE
    LossConfig plain = cfg;
    plain.focal_gamma = 0.0;
    plain.focal_alpha = 0.5;
    Tensor p = Tensor::constant({2, 2}, {0.3, 0.6, 0.2, 0.4});
    double bce = 0.0;
    const double y[4] = {0, 1, 0, 0};
    const double pv[4] = {0.3, 0.6, 0.2, 0.4};
    for (int i = 0; i < 4; ++i)
        bce += y[i] ? -std::log(pv[i]) : -std::log(1 - pv[i]);
    CHECK(focal_loss(p, asg, plain).item() ==
          doctest::Approx(0.5 * bce).epsilon(1e-12));

    // ignored rows are excluded
    auto asg_ign = make_asg(2, 2,
                            {det::AnchorFlag::Positive, det::AnchorFlag::Ignore},
                            {1, 0});
    Tensor p_row0 = Tensor::constant({2, 2}, {0.3, 0.6, 0.9, 0.9});
    Tensor p_row0b = Tensor::constant({2, 2}, {0.3, 0.6, 0.1, 0.2});
    CHECK(focal_loss(p_row0, asg_ign, cfg).item() ==
          doctest::Approx(focal_loss(p_row0b, asg_ign, cfg).item()).epsilon(1e-15));
}

TEST_CASE("smooth l1 values") {
    auto asg = make_asg(1, 2, {det::AnchorFlag::Positive}, {0});
    LossConfig cfg;
    Tensor zero = Tensor::constant({1, 4}, {0, 0, 0, 0});
    CHECK(smooth_l1(zero, asg, cfg).item() == 0.0);
    Tensor half = Tensor::constant({1, 4}, {0.5, 0, 0, 0});
    CHECK(smooth_l1(half, asg, cfg).item() == doctest::Approx(0.125).epsilon(1e-15));
    Tensor two = Tensor::constant({1, 4}, {2, 0, 0, 0});
    CHECK(smooth_l1(two, asg, cfg).item() == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("detection loss equals the sum of its parts") {
    Rng rng(21);
    auto asg = make_asg(4, 3,
                        {det::AnchorFlag::Positive, det::AnchorFlag::Negative,
                         det::AnchorFlag::Ignore, det::AnchorFlag::Positive},
                        {0, 0, 0, 2});
    auto rand_prob = [&](std::size_t n) {
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(0.05, 0.95);
        return v;
    };
    det::ForwardOutput out;
    out.y_f1 = Tensor::constant({4, 3}, rand_prob(12));
    out.y_f2 = Tensor::constant({4, 3}, rand_prob(12));
    out.y_fr = Tensor::constant({4, 4}, rand_prob(16));
    LossConfig cfg;
    const double expect = focal_loss(out.y_f1, asg, cfg).item() +
                          focal_loss(out.y_f2, asg, cfg).item() +
                          smooth_l1(out.y_fr, asg, cfg).item();
    CHECK(detection_loss(out, asg, cfg).item() ==
          doctest::Approx(expect).epsilon(1e-15));
}

TEST_CASE("discrepancy values and symmetry") {
    LossConfig cfg;
    Tensor f1 = Tensor::constant({1, 2}, {0.9, 0.1});
    Tensor f2 = Tensor::constant({1, 2}, {0.5, 0.5});
    auto d = discrepancy(f1, f2, cfg);
    CHECK(d.per_instance.data()[0] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(d.loss.item() == doctest::Approx(0.8).epsilon(1e-15));
    auto rev = discrepancy(f2, f1, cfg);
    CHECK(rev.loss.item() == d.loss.item());

    auto same = discrepancy(f1, f1, cfg);
    CHECK(same.loss.item() == 0.0);

    // sum vs mean aggregation
    Tensor a = Tensor::constant({2, 1}, {0.9, 0.2});
    Tensor b = Tensor::constant({2, 1}, {0.1, 0.4});
    LossConfig mean_cfg, sum_cfg;
    sum_cfg.instance_norm = LossConfig::InstanceNorm::Sum;
    CHECK(discrepancy(a, b, mean_cfg).loss.item() == doctest::Approx(0.5));
    CHECK(discrepancy(a, b, sum_cfg).loss.item() == doctest::Approx(1.0));
}

TEST_CASE("mil image score: spec example and brute-force oracle") {
    // N=2, C=2 worked example
    Tensor fmil = Tensor::constant({2, 2}, {2, 0, 0, 0});
    Tensor f1 = Tensor::constant({2, 2}, {1, 0, 0, 0});
    Tensor f2 = f1;
    Tensor s = mil_image_score(fmil, f1, f2);
    const double e2 = std::exp(2.0), e1 = std::exp(1.0);
    CHECK(s.data()[0] ==
          doctest::Approx((e2 / (e2 + 1)) * (e1 / (e1 + 1))).epsilon(1e-12));
    CHECK(s.data()[0] == doctest::Approx(0.6439).epsilon(1e-3));

    // brute force over all (N, C) in {1..5}^2
    Rng rng(31);
    for (std::size_t N = 1; N <= 5; ++N)
        for (std::size_t C = 1; C <= 5; ++C) {
            std::vector<double> m(N * C), p1(N * C), p2(N * C);
            for (double& v : m) v = rng.uniform(-2, 2);
            for (double& v : p1) v = rng.uniform(0.01, 0.99);
            for (double& v : p2) v = rng.uniform(0.01, 0.99);
            Tensor out = mil_image_score(Tensor::constant({N, C}, m),
                                         Tensor::constant({N, C}, p1),
                                         Tensor::constant({N, C}, p2));
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    double den_c = 0;
                    for (std::size_t cc = 0; cc < C; ++cc)
                        den_c += std::exp(m[i * C + cc]);
                    double den_i = 0;
                    for (std::size_t ii = 0; ii < N; ++ii)
                        den_i += std::exp(0.5 * (p1[ii * C + c] + p2[ii * C + c]));
                    const double expect =
                        (std::exp(m[i * C + c]) / den_c) *
                        (std::exp(0.5 * (p1[i * C + c] + p2[i * C + c])) / den_i);
                    CHECK(std::fabs(out.data()[i * C + c] - expect) < 1e-12);
                }
            // instance softmax factor sums to 1 per class
            for (std::size_t c = 0; c < C; ++c) {
                double total = 0;
                for (std::size_t i = 0; i < N; ++i) {
                    double den_c = 0;
                    for (std::size_t cc = 0; cc < C; ++cc)
                        den_c += std::exp(m[i * C + cc]);
                    total += out.data()[i * C + c] / (std::exp(m[i * C + c]) / den_c);
                }
                CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
            }
        }
}

TEST_CASE("image classification loss values") {
    LossConfig cfg;
    // single instance scoring 0.8 for the one present class
    Tensor s = Tensor::constant({1, 1}, {0.8});
    CHECK(image_cls_loss(s, {1}, cfg).item() ==
          doctest::Approx(-std::log(0.8)).epsilon(1e-12));
    CHECK(image_cls_loss(s, {1}, cfg).item() == doctest::Approx(0.2231).epsilon(1e-3));

    Tensor hi = Tensor::constant({1, 1}, {1.0 - 1e-12});
    CHECK(image_cls_loss(hi, {1}, cfg).item() == doctest::Approx(0.0).epsilon(1e-9));
    Tensor lo = Tensor::constant({1, 1}, {1e-12});
    CHECK(image_cls_loss(lo, {0}, cfg).item() == doctest::Approx(0.0).epsilon(1e-9));

    // sums over instances before the BCE
    Tensor two = Tensor::constant({2, 1}, {0.5, 0.3});
    CHECK(image_cls_loss(two, {1}, cfg).item() ==
          doctest::Approx(-std::log(0.8)).epsilon(1e-12));
}

TEST_CASE("weighted discrepancy: values and Eq.3 reduction") {
    LossConfig cfg;
    Tensor f1 = Tensor::constant({1, 2}, {0.9, 0.1});
    Tensor f2 = Tensor::constant({1, 2}, {0.5, 0.3});
    Tensor w = Tensor::constant({1, 2}, {0.5, 1.0});
    auto wd = weighted_discrepancy(f1, f2, w, cfg);
    CHECK(wd.per_instance.data()[0] == doctest::Approx(0.4).epsilon(1e-15));

    Tensor ones = Tensor::constant({1, 2}, {1.0, 1.0});
    CHECK(weighted_discrepancy(f1, f2, ones, cfg).loss.item() ==
          discrepancy(f1, f2, cfg).loss.item());

    Tensor zeros = Tensor::constant({1, 2}, {0.0, 0.0});
    CHECK(weighted_discrepancy(f1, f2, zeros, cfg).loss.item() == 0.0);
}

TEST_CASE("pseudo labels use a strict threshold") {
    Tensor f1 = Tensor::constant({2, 2}, {0.6, 0.5, 0.2, 0.5});
    Tensor f2 = f1;
    auto y = pseudo_labels(f1, f2);
    CHECK(y == std::vector<int>{1, 0});  // max 0.6 -> 1; max exactly 0.5 -> 0

    Tensor z = Tensor::constant({1, 3}, {0.0, 0.0, 0.0});
    CHECK(pseudo_labels(z, z) == std::vector<int>{0, 0, 0});
}

namespace {

struct Batch {
    det::ForwardOutput out_l, out_u;
    det::AssignmentResult asg;
    std::vector<int> labels{1, 0, 1};
};

Batch make_batch(std::uint64_t seed) {
    Rng rng(seed);
    auto rnd = [&](std::size_t n, double lo, double hi) {
        std::vector<double> v(n);
        for (double& x : v) x = rng.uniform(lo, hi);
        return v;
    };
    Batch b;
    b.asg = make_asg(4, 3,
                     {det::AnchorFlag::Positive, det::AnchorFlag::Negative,
                      det::AnchorFlag::Negative, det::AnchorFlag::Positive},
                     {0, 0, 0, 2});
    for (det::ForwardOutput* o : {&b.out_l, &b.out_u}) {
        o->y_f1 = Tensor::constant({4, 3}, rnd(12, 0.05, 0.95));
        o->y_f2 = Tensor::constant({4, 3}, rnd(12, 0.05, 0.95));
        o->y_fr = Tensor::constant({4, 4}, rnd(16, -1, 1));
        o->y_fmil = Tensor::constant({4, 3}, rnd(12, -2, 2));
    }
    return b;
}

}  // namespace

TEST_CASE("objectives: component oracle and Eq.2/4 identity") {
    LossConfig cfg;
    Batch b = make_batch(41);
    std::vector<LabeledItem> L{{&b.out_l, &b.asg, &b.labels}};
    std::vector<UnlabeledItem> U{{&b.out_u}};

    const double ldet = detection_loss(b.out_l, b.asg, cfg).item();
    const double ldis = discrepancy(b.out_u.y_f1, b.out_u.y_f2, cfg).loss.item();

    const double omax = objective_max(L, U, cfg, false).item();
    const double omin = objective_min(L, U, cfg, false).item();
    CHECK(omax == doctest::Approx(ldet - cfg.lambda * ldis).epsilon(1e-12));
    CHECK(omin == doctest::Approx(ldet + cfg.lambda * ldis).epsilon(1e-12));
    CHECK(omin - omax == doctest::Approx(2 * cfg.lambda * ldis).epsilon(1e-12));

    // empty unlabeled batch: pure labeled loss
    CHECK(objective_max(L, {}, cfg, false).item() ==
          doctest::Approx(ldet).epsilon(1e-12));

    // lambda = 0 kills the unlabeled term
    LossConfig l0 = cfg;
    l0.lambda = 0.0;
    CHECK(objective_max(L, U, l0, false).item() ==
          doctest::Approx(objective_max(L, {}, l0, false).item()).epsilon(1e-12));

    // reweighted (Eq. 8): labeled side gains Eq. 6, unlabeled uses Eq. 7
    Tensor w_l = mil_image_score(b.out_l.y_fmil, b.out_l.y_f1, b.out_l.y_f2);
    Tensor w_u = mil_image_score(b.out_u.y_fmil, b.out_u.y_f1, b.out_u.y_f2);
    const double limg = image_cls_loss(w_l, b.labels, cfg).item();
    const double lwdis =
        weighted_discrepancy(b.out_u.y_f1, b.out_u.y_f2, w_u, cfg).loss.item();
    CHECK(objective_max(L, U, cfg, true).item() ==
          doctest::Approx(ldet + limg - cfg.lambda * lwdis).epsilon(1e-12));

    // reweighted (Eq. 9): unlabeled side adds Eq. 6 under pseudo labels
    const auto pseudo = pseudo_labels(b.out_u.y_f1, b.out_u.y_f2);
    const double limg_u = image_cls_loss(w_u, pseudo, cfg).item();
    CHECK(objective_min(L, U, cfg, true).item() ==
          doctest::Approx(ldet + limg + cfg.lambda * lwdis + limg_u).epsilon(1e-12));

    CHECK_THROWS_AS(objective_max({}, U, cfg, false), contract_error);
}

TEST_CASE("objective gradients pass finite differences") {
    // Small end-to-end graph: leaves are the raw head outputs (pre-sigmoid for
    // f1/f2), composed through each objective.
    LossConfig cfg;
    auto asg = make_asg(3, 2,
                        {det::AnchorFlag::Positive, det::AnchorFlag::Negative,
                         det::AnchorFlag::Ignore},
                        {1, 0, 0});
    std::vector<int> labels{0, 1};
    Rng rng(51);
    int checked = 0;
    for (int trial = 0; trial < 8; ++trial) {
        std::vector<std::pair<ad::Shape, std::vector<double>>> params;
        for (int p = 0; p < 4; ++p) {
            std::vector<double> v(p == 2 ? 12 : 6);
            for (double& x : v) x = rng.uniform(-1.5, 1.5);
            params.push_back({p == 2 ? ad::Shape{3, 4} : ad::Shape{3, 2}, v});
        }
        for (int mode = 0; mode < 4; ++mode) {
            auto f = [&](ad::Tape&, const std::vector<Tensor>& leaves) {
                det::ForwardOutput o;
                o.y_f1 = ad::sigmoid(leaves[0]);
                o.y_f2 = ad::sigmoid(leaves[1]);
                o.y_fr = leaves[2];
                o.y_fmil = leaves[3];
                std::vector<LabeledItem> L{{&o, &asg, &labels}};
                std::vector<UnlabeledItem> U{{&o}};
                const bool reweight = mode >= 2;
                return (mode % 2 == 0) ? objective_max(L, U, cfg, reweight)
                                       : objective_min(L, U, cfg, reweight);
            };
            auto rep = ad::grad_check(f, params, 1e-6, 1e-4);
            INFO("trial ", trial, " mode ", mode, " err ", rep.max_rel_err);
            CHECK(rep.pass);
            ++checked;
        }
    }
    CHECK(checked == 32);
}
