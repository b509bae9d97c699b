#include <doctest.h>

#include <algorithm>

#include "protoseg/metrics.hpp"
#include "protoseg/rng.hpp"

using namespace protoseg;

namespace {

LabelMask mask_of(std::size_t h, std::size_t w, std::vector<int> v) {
    LabelMask m(h, w);
    m.v = std::move(v);
    return m;
}

LabelMask random_mask(std::size_t h, std::size_t w, int max_class, Rng& rng) {
    LabelMask m(h, w);
    for (int& v : m.v) v = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_class) + 1));
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("metrics");

TEST_CASE("perfect and disjoint predictions hit the IoU endpoints") {
    LabelMask truth = mask_of(2, 2, {0, 1, 1, 2});
    IoUAccumulator same;
    same.accumulate(truth, truth);
    CHECK(same.class_iou(1) == 1.0);
    CHECK(same.class_iou(2) == 1.0);
    CHECK(same.mean_iou() == 1.0);

    // prediction puts class 1 where truth has class 2 and vice versa
    IoUAccumulator disjoint;
    disjoint.accumulate(mask_of(2, 2, {0, 2, 2, 1}), truth);
    CHECK(disjoint.class_iou(1) == 0.0);
    CHECK(disjoint.class_iou(2) == 0.0);
    CHECK(disjoint.mean_iou() == 0.0);
}

TEST_CASE("4x4 masks with 2 px intersection and 6 px union give 1/3") {
    LabelMask truth(4, 4, 0);
    LabelMask pred(4, 4, 0);
    // truth: class 1 on the first column (4 px); pred: first two rows (8 px)?
    // choose 4 truth px and 4 pred px overlapping in 2 -> union 6
    truth.at(0, 0) = truth.at(1, 0) = truth.at(2, 0) = truth.at(3, 0) = 1;
    pred.at(0, 0) = pred.at(1, 0) = pred.at(0, 1) = pred.at(1, 1) = 1;
    IoUAccumulator acc;
    acc.accumulate(pred, truth);
    CHECK(acc.class_iou(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("ignore pixels are excluded from every count") {
    LabelMask truth = mask_of(1, 4, {1, 255, -1, 0});
    LabelMask pred = mask_of(1, 4, {1, 0, 1, 1});
    IoUAccumulator acc;
    acc.accumulate(pred, truth);
    // only pixels 0 and 3 count: class 1 intersection 1, union 2 (the wrong
    // class-1 prediction at pixel 3 inflates the union)
    CHECK(acc.class_iou(1) == doctest::Approx(0.5));
    CHECK_THROWS_AS(acc.accumulate(LabelMask(2, 2), truth), ShapeError);
}

TEST_CASE("mean IoU averages foreground classes only") {
    // class 1: IoU 0.4 (2/5), class 2: IoU 0.6 (3/5); background ignored
    LabelMask truth = mask_of(2, 5, {1, 1, 1, 1, 0, 2, 2, 2, 2, 2});
    LabelMask pred = mask_of(2, 5, {1, 1, 0, 0, 1, 2, 2, 2, 0, 0});
    IoUAccumulator acc;
    acc.accumulate(pred, truth);
    CHECK(acc.class_iou(1) == doctest::Approx(0.4));
    CHECK(acc.class_iou(2) == doctest::Approx(0.6));
    CHECK(acc.mean_iou() == doctest::Approx(0.5));

    IoUAccumulator empty;
    CHECK_THROWS_AS(empty.mean_iou(), std::runtime_error);
    IoUAccumulator bg_only;
    bg_only.accumulate(LabelMask(2, 2, 0), LabelMask(2, 2, 0));
    CHECK_THROWS_AS(bg_only.mean_iou(), std::runtime_error);
    CHECK(bg_only.binary_iou() == 1.0);  // degenerate all-background case
}

TEST_CASE("binary IoU equals IoU of explicitly binarized masks") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        IoUAccumulator via_binarize;
        IoUAccumulator manual;
        for (int e = 0; e < 3; ++e) {
            LabelMask truth = random_mask(6, 6, 3, rng);
            LabelMask pred = random_mask(6, 6, 3, rng);
            via_binarize.accumulate(binarize(pred), binarize(truth));
            // oracle: merge foreground by hand
            LabelMask bt(6, 6), bp(6, 6);
            for (std::size_t i = 0; i < 36; ++i) {
                bt.v[i] = truth.v[i] > 0 ? 1 : 0;
                bp.v[i] = pred.v[i] > 0 ? 1 : 0;
            }
            manual.accumulate(bp, bt);
        }
        CHECK(via_binarize.binary_iou() == doctest::Approx(manual.binary_iou()).epsilon(1e-12));
    }
}

TEST_CASE("crafted binary IoU value") {
    // truth: 3 fg px; pred: 2 fg px, 1 overlapping
    // fg: i=1, u=4 -> 0.25; bg: truth 5 px, pred 6 px, overlap 4 -> 4/7
    LabelMask truth = mask_of(2, 4, {1, 1, 1, 0, 0, 0, 0, 0});
    LabelMask pred = mask_of(2, 4, {1, 0, 0, 1, 0, 0, 0, 0});
    IoUAccumulator acc;
    acc.accumulate(binarize(pred), binarize(truth));
    CHECK(acc.binary_iou() == doctest::Approx((0.25 + 4.0 / 7.0) / 2).epsilon(1e-12));
}

TEST_CASE("merging accumulators is order independent and matches serial") {
    Rng rng(2);
    std::vector<std::pair<LabelMask, LabelMask>> pairs;
    for (int e = 0; e < 12; ++e)
        pairs.emplace_back(random_mask(5, 5, 4, rng), random_mask(5, 5, 4, rng));

    IoUAccumulator serial;
    for (const auto& [p, t] : pairs) serial.accumulate(p, t);

    IoUAccumulator a, b, c;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        (i % 3 == 0 ? a : i % 3 == 1 ? b : c).accumulate(pairs[i].first, pairs[i].second);
    IoUAccumulator fwd = a;
    fwd.merge(b);
    fwd.merge(c);
    IoUAccumulator rev = c;
    rev.merge(a);
    rev.merge(b);
    CHECK(fwd.mean_iou() == serial.mean_iou());
    CHECK(rev.mean_iou() == serial.mean_iou());
    CHECK(fwd.binary_iou() == serial.binary_iou());
}

TEST_CASE("mean IoU is invariant to consistent relabeling") {
    Rng rng(3);
    LabelMask truth = random_mask(8, 8, 3, rng);
    LabelMask pred = random_mask(8, 8, 3, rng);
    IoUAccumulator base;
    base.accumulate(pred, truth);

    // permute foreground labels 1->2, 2->3, 3->1 in both masks
    auto permute = [](const LabelMask& m) {
        LabelMask out = m;
        for (int& v : out.v)
            if (v > 0) v = v % 3 + 1;
        return out;
    };
    IoUAccumulator perm;
    perm.accumulate(permute(pred), permute(truth));
    CHECK(perm.mean_iou() == doctest::Approx(base.mean_iou()).epsilon(1e-12));
}

TEST_CASE("IoU stays within the unit interval") {
    Rng rng(4);
    IoUAccumulator acc;
    for (int e = 0; e < 10; ++e)
        acc.accumulate(random_mask(7, 7, 4, rng), random_mask(7, 7, 4, rng));
    for (int cls = 1; cls <= 4; ++cls) {
        if (!acc.has_class(cls)) continue;
        CHECK(acc.class_iou(cls) >= 0.0);
        CHECK(acc.class_iou(cls) <= 1.0);
    }
    CHECK(acc.mean_iou() >= 0.0);
    CHECK(acc.mean_iou() <= 1.0);
}

TEST_CASE("multi run report computes mean and sample stddev") {
    RunStats two = multi_run_report({50.0, 60.0});
    CHECK(two.mean == doctest::Approx(55.0));
    CHECK(two.stddev == doctest::Approx(std::sqrt(50.0)).epsilon(1e-12));

    RunStats same = multi_run_report({0.37, 0.37, 0.37, 0.37, 0.37});
    CHECK(same.mean == doctest::Approx(0.37));
    CHECK(same.stddev == 0.0);

    // hand-computed five-run example: mean 0.5, sample variance 0.025
    RunStats five = multi_run_report({0.3, 0.4, 0.5, 0.6, 0.7});
    CHECK(five.mean == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(five.stddev == doctest::Approx(std::sqrt(0.025)).epsilon(1e-12));

    RunStats one = multi_run_report({0.8});
    CHECK(one.mean == 0.8);
    CHECK(one.stddev == 0.0);

    CHECK_THROWS_AS(multi_run_report({}), std::invalid_argument);
}

TEST_SUITE_END();
