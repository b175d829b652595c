import itertools

import numpy as np
import pytest
from conftest import make_curve, random_smooth_warp, template, warped_copy
from hypothesis import given
from hypothesis import strategies as st

from warpfit.exceptions import EmptyPool, NonMonotone, NonPositiveCurve
from warpfit.register import (
    LAMBDA_FACTORS,
    AUCRegistration,
    PairwiseRegistration,
    auc_warp,
    auto_lambda,
    choose_partners,
    estimate_h_inverse,
    fit_pairwise,
    invert_warp,
    pairwise_warp,
    register_auc,
    register_class,
    warp_cost,
)
from warpfit.simplex import WarpingFunction

GRID16 = np.linspace(0, 1, 16)


def assert_valid(h):
    assert h.values[0] == 0.0 and h.values[-1] == 1.0
    assert np.all(np.diff(h.values) > 0)


def lattice_optimum(target, reference, grid, K):
    """Exhaustive search over monotone warps with interior values on ``{1..K-1}/K``."""
    levels = np.arange(1, K) / K
    at_levels = np.interp(levels, grid, reference)
    y_r0, y_r1 = reference[0], reference[-1]
    best = np.inf
    combos = np.array(list(itertools.combinations(range(K - 1), grid.size - 2)))
    warped = np.empty((combos.shape[0], grid.size))
    warped[:, 0], warped[:, -1] = y_r0, y_r1
    warped[:, 1:-1] = at_levels[combos]
    cost = np.trapezoid((warped - target) ** 2, grid, axis=1)
    i = int(np.argmin(cost))
    best = cost[i]
    g = np.concatenate(([0.0], levels[combos[i]], [1.0]))
    return best, g


class TestPairwise:
    def test_identical_curves_give_identity(self):
        c = make_curve("a", template(GRID16))
        g = pairwise_warp(c, c, lam=0.5)
        np.testing.assert_array_equal(g.values, GRID16)

    def test_huge_penalty_gives_identity(self, rng):
        a = warped_copy("a", random_smooth_warp(rng, GRID16))
        b = warped_copy("b", random_smooth_warp(rng, GRID16))
        g = pairwise_warp(a, b, lam=1e9)
        assert np.max(np.abs(g.values - GRID16)) < 1e-6

    def test_recovers_known_warp_on_coarse_grid(self, rng):
        # target is the sampled reference composed with the warp, so the true
        # warp is an exact zero of the discretized cost
        grid = np.linspace(0, 1, 9)
        errors = []
        for _ in range(10):
            g_true = random_smooth_warp(rng, grid)
            ref = make_curve("r", template(grid))
            tgt = make_curve("t", np.interp(g_true, grid, ref.values))
            g = pairwise_warp(tgt, ref)
            errors.append(np.sqrt(np.mean((g.values - g_true) ** 2)))
        assert np.median(errors) < 0.02

    def test_cost_not_worse_than_lattice_search(self, rng):
        grid = np.linspace(0, 1, 9)
        g_true = random_smooth_warp(rng, grid)
        ref, tgt = template(grid), template(g_true)
        best, _ = lattice_optimum(tgt, ref, grid, 16)
        fit = fit_pairwise(make_curve("t", tgt), make_curve("r", ref))
        assert fit.cost <= 1.05 * best + 1e-12
        assert fit.cost == pytest.approx(warp_cost(fit.warp, tgt, ref, 0.0, grid))

    def test_flat_target_is_flagged(self):
        flat = make_curve("f", np.full(16, 100.0))
        other = make_curve("o", 100 + template(GRID16))
        g = pairwise_warp(flat, other, scale=2.0)
        assert "degenerate" in g.flags
        np.testing.assert_array_equal(g.values, GRID16)

    def test_negative_penalty_rejected(self):
        c = make_curve("a", template(GRID16))
        with pytest.raises(ValueError):
            pairwise_warp(c, c, lam=-1.0)


class TestInverseEstimate:
    def test_identical_pool_gives_identity(self):
        pool = [make_curve(f"c{i}", template(GRID16)) for i in range(5)]
        h = estimate_h_inverse("c2", pool, n_star=5)
        np.testing.assert_allclose(h.values, GRID16, rtol=0, atol=1e-15)

    def test_hand_built_warps_are_averaged(self):
        pool = [make_curve("a", template(GRID16)), make_curve("b", template(GRID16) + 1)]
        g2 = WarpingFunction(GRID16, GRID16 ** 1.5)
        h = estimate_h_inverse("a", pool, n_star=2, pairwise=lambda t, r: g2)
        # the self-pair contributes the identity
        np.testing.assert_allclose(h.values, 0.5 * (GRID16 + GRID16 ** 1.5), atol=1e-15)

    def test_subsampling_when_pool_exceeds_n_star(self):
        pool = [make_curve(f"c{i:02d}", template(GRID16) + i) for i in range(40)]
        calls = []

        def pairwise(t, r):
            calls.append(r.id)
            return WarpingFunction.identity(GRID16)

        estimate_h_inverse("c03", pool, n_star=30, pairwise=pairwise)
        assert len(calls) == 29 and len(set(calls)) == 29 and "c03" not in calls

    def test_partner_draw_is_order_independent(self):
        pool = [make_curve(f"c{i:02d}", template(GRID16) + i) for i in range(40)]
        a = choose_partners("c07", pool, 10, seed=3)[1]
        b = choose_partners("c07", pool[::-1], 10, seed=3)[1]
        assert [c.id for c in a] == [c.id for c in b]

    def test_empty_pool(self):
        with pytest.raises(EmptyPool):
            estimate_h_inverse("x", [], n_star=3)


class TestInversion:
    def test_identity(self):
        h = WarpingFunction.identity(GRID16)
        np.testing.assert_array_equal(invert_warp(h).resample(GRID16).values, GRID16)

    def test_two_piece_warp(self):
        h = WarpingFunction([0.0, 0.5, 1.0], [0.0, 0.25, 1.0])
        inv = invert_warp(h)
        assert inv(0.25) == pytest.approx(0.5)
        assert inv(0.625) == pytest.approx(0.75)

    def test_rejects_non_monotone(self):
        with pytest.raises(NonMonotone):
            invert_warp(np.array([0.0, 0.6, 0.4, 1.0]))

    @given(st.lists(st.floats(1e-3, 1.0), min_size=2, max_size=30))
    def test_double_inversion_round_trip(self, dh):
        dh = np.array(dh)
        values = np.concatenate(([0.0], np.cumsum(dh) / dh.sum()))
        values[-1] = 1.0
        h = WarpingFunction(np.linspace(0, 1, values.size), values)
        back = invert_warp(invert_warp(h))
        assert np.max(np.abs(back.values - h.values)) < 1e-8
        # composition is the identity at the knots
        np.testing.assert_allclose(h(invert_warp(h)(h.grid)), h.grid, atol=1e-12)


class TestRegisterClass:
    def test_single_curve_class(self):
        c = make_curve("a", template(GRID16))
        (res,) = register_class([c])
        np.testing.assert_array_equal(res.h.values, GRID16)
        np.testing.assert_allclose(res.w, c.values)

    def test_two_warped_copies_align(self, rng):
        a = warped_copy("a", random_smooth_warp(rng, GRID16))
        b = warped_copy("b", random_smooth_warp(rng, GRID16))
        ra, rb = register_class([a, b], n_star=2)
        span = np.ptp(template(GRID16))
        assert np.sqrt(np.mean((ra.w - rb.w) ** 2)) < 0.02 * span

    def test_classes_are_independent_pools(self, rng):
        curves = [warped_copy(f"c{k}{i}", random_smooth_warp(rng, GRID16), cls=f"T{k}")
                  for k in range(5) for i in range(3)]
        results = register_class(curves, n_star=3, seed=1)
        assert {r.class_label for r in results} == {f"T{k}" for k in range(5)}
        alone = register_class([c for c in curves if c.covariates["class"] == "T2"], n_star=3, seed=1)
        mixed = {r.id: r for r in results}
        for r in alone:
            np.testing.assert_array_equal(r.h_inverse.values, mixed[r.id].h_inverse.values)

    def test_w_is_curve_at_h(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16)) for i in range(4)]
        for c, r in zip(curves, register_class(curves, n_star=4)):
            np.testing.assert_allclose(r.w, np.interp(r.h.values, GRID16, c.values))
            assert_valid(r.h)
            assert_valid(r.h_inverse)
            np.testing.assert_allclose(r.h(invert_warp(r.h)(GRID16)), GRID16, atol=1e-12)

    def test_translation_equivariance(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16)) for i in range(5)]
        shifted = [make_curve(c.id, c.values + 64.0) for c in curves]
        base = register_class(curves, n_star=5, seed=2)
        moved = register_class(shifted, n_star=5, seed=2)
        for a, b in zip(base, moved):
            np.testing.assert_allclose(a.h.values, b.h.values, atol=1e-6)
            np.testing.assert_allclose(b.w, a.w + 64.0, atol=1e-4)

    def test_order_invariance(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16)) for i in range(6)]
        a = {r.id: r for r in register_class(curves, n_star=3, seed=5)}
        b = {r.id: r for r in register_class(curves[::-1], n_star=3, seed=5)}
        for cid in a:
            np.testing.assert_array_equal(a[cid].h.values, b[cid].h.values)

    def test_class_mean_closer_to_identity_with_larger_pools(self):
        def deviation(n, seed):
            rng = np.random.default_rng(seed)
            curves = [warped_copy(f"c{i:02d}", random_smooth_warp(rng, GRID16)) for i in range(n)]
            res = register_class(curves, n_star=n)
            mean = np.mean([r.h_inverse.values for r in res], axis=0)
            return np.max(np.abs(mean - GRID16))

        small = np.mean([deviation(3, s) for s in range(4)])
        large = np.mean([deviation(16, s) for s in range(4)])
        assert large < small

    def test_auto_lambda_is_from_the_candidate_set(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16)) for i in range(6)]
        lam = auto_lambda(curves, seed=0)
        variance = np.mean([np.var(c.values) for c in curves])
        assert any(lam == pytest.approx(f * variance) for f in LAMBDA_FACTORS)
        (res, *_) = register_class(curves, lam="auto", n_star=3)
        assert res.lam == pytest.approx(lam)


class TestAUC:
    def test_constant_curve_gives_identity(self):
        h = auc_warp(make_curve("c", np.full(16, 150.0)))
        np.testing.assert_allclose(h.values, GRID16, atol=1e-15)

    def test_ramp_closed_form(self):
        h = auc_warp(make_curve("c", 1 + GRID16))
        np.testing.assert_allclose(h.values, (GRID16 + GRID16 ** 2 / 2) / 1.5, atol=1e-14)

    def test_non_positive_rejected(self):
        with pytest.raises(NonPositiveCurve):
            register_auc([make_curve("c", template(GRID16))])

    def test_auc_and_pairwise_differ_but_are_valid(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16), level=3.0) for i in range(5)]
        auc = register_auc(curves)
        pw = register_class(curves, n_star=5)
        assert any(not np.allclose(a.h.values, b.h.values) for a, b in zip(auc, pw))
        for r in auc + pw:
            assert_valid(r.h)
            assert_valid(r.h_inverse)


class TestEstimators:
    def test_pairwise_estimator(self, rng):
        curves = [warped_copy(f"c{i}", random_smooth_warp(rng, GRID16)) for i in range(4)]
        est = PairwiseRegistration(n_star=4, seed=1)
        W = est.fit(curves).transform(curves)
        assert W.shape == (4, 16)
        assert est.get_params()["n_star"] == 4
        assert len(est.warps_) == 4

    def test_auc_estimator(self):
        curves = [make_curve(f"c{i}", 2 + template(GRID16) + i) for i in range(3)]
        W = AUCRegistration().fit(curves).transform(curves)
        assert W.shape == (3, 16)
