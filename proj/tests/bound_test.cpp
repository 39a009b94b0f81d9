#include "ikv/bound.hpp"

#include <gtest/gtest.h>

#include "ikv/rng.hpp"
#include "test_util.hpp"

using namespace ikv;
using testutil::random_matrix;
using testutil::random_vector;

TEST(AttentionHead, SingleRowIsJustTheProjectedValue) {
    Rng rng(1);
    Vector q = random_vector(rng, 4);
    Matrix K = random_matrix(rng, 1, 4);
    Matrix V = random_matrix(rng, 1, 4);
    Matrix W = random_matrix(rng, 4, 4);
    auto res = attention_head(q, K, V, W);
    EXPECT_EQ(res.scores[0], 1.0);
    Matrix v_row(1, 4);
    v_row.data.assign(V.row(0), V.row(0) + 4);
    Matrix want = matmul(v_row, W);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(res.output[k], want(0, k));
}

TEST(AttentionHead, ZeroKeysGiveUniformScores) {
    Rng rng(2);
    Vector q = random_vector(rng, 4);
    Matrix K(6, 4, 0.0);
    Matrix V = random_matrix(rng, 6, 4);
    Matrix W = random_matrix(rng, 4, 4);
    auto res = attention_head(q, K, V, W);
    for (double s : res.scores) EXPECT_EQ(s, 1.0 / 6.0);
    Vector mean(4, 0.0);
    for (std::size_t j = 0; j < 6; ++j)
        for (std::size_t k = 0; k < 4; ++k) mean[k] += V(j, k) / 6.0;
    Vector want = linear(mean, W);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(res.output[k], want[k], 1e-14);
}

TEST(AttentionHead, MatchesCompositionOfCoreOps) {
    Rng rng(3);
    const std::size_t n = 5, d = 4;
    Vector q = random_vector(rng, d);
    Matrix K = random_matrix(rng, n, d);
    Matrix V = random_matrix(rng, n, d);
    Matrix W = random_matrix(rng, d, d);
    auto res = attention_head(q, K, V, W);
    Matrix qm(1, d);
    qm.data = q;
    Matrix logits = matmul(qm, transpose(K));
    for (double& v : logits.data) v /= std::sqrt(static_cast<double>(d));
    Matrix want = matmul(matmul(softmax_rows(logits), V), W);
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(res.output[k], want(0, k), 1e-14);
}

TEST(Theorem1Bound, ZeroPerturbationIsExactlyZero) {
    BoundInstance inst = random_bound_instance(6, 4, 0.0, 1, 77);
    BoundReport rep = head_error_bound(inst);
    EXPECT_EQ(rep.actual, 0.0);
    EXPECT_EQ(rep.bound, 0.0);
    EXPECT_EQ(rep.ratio, 0.0);
}

TEST(Theorem1Bound, DominatesOnRandomInstances) {
    const std::size_t ns[] = {2, 8, 16};
    const std::size_t ds[] = {2, 4, 8};
    const double deltas[] = {0.01, 0.1, 1.0};
    std::size_t trial = 0;
    for (std::size_t n : ns)
        for (std::size_t d : ds)
            for (double delta : deltas)
                for (int rep = 0; rep < 64; ++rep) {
                    BoundInstance inst =
                        random_bound_instance(n, d, delta, 1, Rng::substream(1234, trial++));
                    BoundReport r = head_error_bound(inst);
                    ASSERT_LE(r.actual, r.bound) << "n=" << n << " d=" << d << " delta=" << delta;
                    ASSERT_GE(r.ratio, 0.0);
                    ASSERT_LE(r.ratio, 1.0);
                }
}

TEST(Theorem1Bound, ValueTermScalesLinearly) {
    BoundInstance inst = random_bound_instance(8, 4, 0.1, 1, 99);
    for (double& v : inst.dK.data) v = 0.0;
    BoundReport one = head_error_bound(inst);
    BoundInstance doubled = inst;
    for (double& v : doubled.dV.data) v *= 2.0;
    BoundReport two = head_error_bound(doubled);
    EXPECT_NEAR(two.bound, 2.0 * one.bound, 1e-12 * std::abs(one.bound));
    // With dK = 0 only the C3 term is live.
    EXPECT_NEAR(one.bound, one.c3 * one.dv_fro, 1e-12 * std::abs(one.bound));
}

TEST(Theorem1Bound, KeyTermScalesLinearly) {
    BoundInstance inst = random_bound_instance(8, 4, 0.1, 1, 101);
    for (double& v : inst.dV.data) v = 0.0;
    BoundReport one = head_error_bound(inst);
    BoundInstance doubled = inst;
    for (double& v : doubled.dK.data) v *= 2.0;
    BoundReport two = head_error_bound(doubled);
    EXPECT_NEAR(two.bound, 2.0 * one.bound, 1e-12 * std::abs(one.bound));
    EXPECT_NEAR(one.bound, one.c2 * one.dk_two_inf, 1e-12 * std::abs(one.bound));
}

TEST(Theorem1Bound, RejectsBadShapes) {
    BoundInstance inst = random_bound_instance(4, 4, 0.1, 1, 1);
    inst.q.resize(3);
    EXPECT_THROW(head_error_bound(inst), ShapeError);
}

TEST(PivotSplitNorms, AllRowsPivotLeavesNothingInTheRest) {
    Rng rng(7);
    Matrix dK = random_matrix(rng, 5, 3);
    Matrix dV = random_matrix(rng, 5, 3);
    std::vector<std::size_t> all = {0, 1, 2, 3, 4};
    auto s = pivot_split_norms(dK, dV, all);
    EXPECT_EQ(s.dk_rest, 0.0);
    EXPECT_EQ(s.dv_rest, 0.0);
    EXPECT_NEAR(s.dk_pivot, matrix_norm(dK, NormKind::two_inf), 1e-14);
    EXPECT_NEAR(s.dv_pivot, matrix_norm(dV, NormKind::frobenius), 1e-14);
}

TEST(PivotSplitNorms, ReconstructionIdentitiesHold) {
    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + rng.index(10), d = 1 + rng.index(6);
        Matrix dK = random_matrix(rng, n, d);
        Matrix dV = random_matrix(rng, n, d);
        std::vector<std::size_t> pivots;
        for (std::size_t i = 0; i < n; ++i)
            if (rng.index(2) == 0) pivots.push_back(i);
        auto s = pivot_split_norms(dK, dV, pivots);
        EXPECT_EQ(std::max(s.dk_pivot, s.dk_rest), matrix_norm(dK, NormKind::two_inf));
        EXPECT_NEAR(std::sqrt(s.dv_pivot * s.dv_pivot + s.dv_rest * s.dv_rest),
                    matrix_norm(dV, NormKind::frobenius), 1e-12);
    }
}

TEST(PivotSplitNorms, OutOfRangePivotThrows) {
    Matrix dK(3, 2, 1.0), dV(3, 2, 1.0);
    std::vector<std::size_t> bad = {3};
    EXPECT_THROW(pivot_split_norms(dK, dV, bad), IndexError);
}

TEST(IntactKVBoundGap, ConcentratedPerturbationVanishesEntirely) {
    BoundInstance inst = random_bound_instance(6, 4, 0.2, 2, 55);
    // Move all perturbation mass onto the pivot rows.
    for (std::size_t i = 2; i < 6; ++i)
        for (std::size_t k = 0; k < 4; ++k) {
            inst.dK(i, k) = 0.0;
            inst.dV(i, k) = 0.0;
        }
    BoundGap gap = intactkv_bound_gap(inst);
    EXPECT_EQ(gap.with_intactkv.bound, 0.0);
    EXPECT_EQ(gap.with_intactkv.actual, 0.0);
    EXPECT_GT(gap.without_intactkv.bound, 0.0);
}

TEST(IntactKVBoundGap, NeverIncreasesTheBound) {
    for (int trial = 0; trial < 2000; ++trial) {
        const std::uint64_t seed = Rng::substream(777, static_cast<std::uint64_t>(trial));
        Rng rng(seed);
        const std::size_t n = 2 + rng.index(15);
        const std::size_t d = 2 + rng.index(7);
        const std::size_t pivots = 1 + rng.index(n);
        BoundInstance inst = random_bound_instance(n, d, 0.3, pivots, seed + 1);
        BoundGap gap = intactkv_bound_gap(inst);
        ASSERT_LE(gap.with_intactkv.bound, gap.without_intactkv.bound + 1e-12);
        ASSERT_LE(gap.with_intactkv.actual, gap.with_intactkv.bound);
    }
}

TEST(IntactKVBoundGap, StrictWhenPivotRowsCarryTheMass) {
    // Pivot row holds the row-max of dK and some dV mass.
    BoundInstance inst = random_bound_instance(5, 3, 0.1, 1, 31);
    for (std::size_t k = 0; k < 3; ++k) {
        inst.dK(0, k) = 10.0;
        inst.dV(0, k) = 10.0;
    }
    BoundGap gap = intactkv_bound_gap(inst);
    EXPECT_LT(gap.with_intactkv.bound, gap.without_intactkv.bound);
}

TEST(IntactKVBoundGap, MonotoneInThePivotSet) {
    for (int trial = 0; trial < 200; ++trial) {
        const std::uint64_t seed = Rng::substream(31337, static_cast<std::uint64_t>(trial));
        BoundInstance inst = random_bound_instance(10, 4, 0.25, 1, seed);
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t count = 1; count <= 10; ++count) {
            inst.pivot_set.assign(count, 0);
            for (std::size_t i = 0; i < count; ++i) inst.pivot_set[i] = i;
            BoundGap gap = intactkv_bound_gap(inst);
            ASSERT_LE(gap.with_intactkv.bound, prev + 1e-12);
            prev = gap.with_intactkv.bound;
        }
    }
}

TEST(IntactKVBoundGap, EmptyPivotSetThrows) {
    BoundInstance inst = random_bound_instance(4, 2, 0.1, 0, 3);
    EXPECT_THROW(intactkv_bound_gap(inst), InputError);
}
