import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstab.bounds import (
    BoundInputError,
    BoundInputs,
    convergence_sums,
    divergence_bound,
    dyadic_checkpoints,
    fedavg_divergence_bound,
    fedprox_divergence_bound,
    fedprox_nonconvex_factors,
    generalization_bound,
    growth_exponent,
    nonconvex_divergence_bounds,
    nonconvex_fedavg_closed_form,
    scaffold_closed_form,
    scaffold_divergence_bound,
)


def inputs(T=2, a=0.1, beta=1.0, L=1.0, D=0.5, sigma=0.1, G=(1.0, 0.5), n=100, m=1, **kw):
    return BoundInputs(L=L, beta=beta, sigma=sigma, D=np.full(m, D), weights=np.full(m, 1.0 / m),
                       alpha_tilde=np.full((T, m), a), grad_norm=np.asarray(G, dtype=float), n=n, **kw)


def random_inputs(seed, T=None, m=3):
    gen = np.random.default_rng(seed)
    T = T or int(gen.integers(1, 15))
    w = gen.random(m) + 0.1
    return BoundInputs(L=gen.random() * 2, beta=gen.random() * 2, sigma=gen.random(), D=gen.random(m),
                       weights=w / w.sum(), alpha_tilde=gen.random((T, m)) * 0.3, grad_norm=gen.random(T) * 2,
                       n=int(gen.integers(10, 1000)), K=[int(k) for k in gen.integers(1, 6, m)],
                       mu=gen.random() * 0.5)


def decomposition_holds(rep, tol=1e-12):
    return abs(rep.heterogeneity + rep.convergence + rep.variance - rep.total) <= tol * max(1.0, rep.total)


class TestFedAvg:
    def test_zero(self):
        assert fedavg_divergence_bound(inputs(D=0.0, sigma=0.0, G=(0.0, 0.0)), 0).total == 0.0

    def test_hand_example(self):
        # a (1 + beta a) = 0.11; the summands are 2 L D + G_t + sigma = 2.1 and 1.6
        expected = (2 / 100) * (0.11 * 2.1 + 0.11 * 1.6)
        assert expected == pytest.approx(0.00814, abs=1e-15)
        rep = fedavg_divergence_bound(inputs(), 0)
        assert rep.total == pytest.approx(expected, rel=1e-14)
        np.testing.assert_allclose(rep.series, [(2 / 100) * 0.11 * 2.1, expected], rtol=1e-14)

    def test_doubling_n_halves(self):
        a = fedavg_divergence_bound(inputs(n=100), 0).total
        b = fedavg_divergence_bound(inputs(n=200), 0).total
        assert b == a / 2

    def test_input_errors(self):
        with pytest.raises(BoundInputError):
            inputs(G=(1.0,))
        with pytest.raises(BoundInputError):
            inputs(sigma=-1.0)
        with pytest.raises(BoundInputError):
            inputs(G=(1.0, float("nan")))
        with pytest.raises(BoundInputError):
            fedavg_divergence_bound(inputs(), 3)


class TestScaffold:
    def test_single_round_hand_example(self):
        n = 50
        rep = scaffold_divergence_bound(inputs(T=1, sigma=0.0, G=(1.0,), n=n), 0)
        assert rep.total == pytest.approx((2 / n) * 0.61, rel=1e-14)

    def test_last_factor_is_one(self):
        inp = inputs(T=3, G=(0.0, 0.0, 1.0), D=0.0, sigma=0.0)
        # only the last round drives the bound, and its exponential factor is exp(0) = 1
        g2 = 3 * 0.1 + 0.01
        assert scaffold_divergence_bound(inp, 0).total == pytest.approx((2 / 100) * g2, rel=1e-14)

    def test_zero_stepsizes(self):
        assert scaffold_divergence_bound(inputs(a=0.0), 0).total == 0.0

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_recursion_matches_closed_form(self, seed):
        inp = random_inputs(seed)
        for i in range(3):
            assert scaffold_divergence_bound(inp, i).total == pytest.approx(scaffold_closed_form(inp, i), rel=1e-12)


class TestFedProx:
    def test_eta_zero(self):
        assert fedprox_divergence_bound(inputs(a=0.0), 0).total == 0.0

    def test_identity_with_fedavg(self):
        assert fedprox_divergence_bound(inputs(), 0).total == fedavg_divergence_bound(inputs(), 0).total


class TestNonConvex:
    @pytest.mark.parametrize("variant", ["fedavg", "scaffold", "fedprox"])
    def test_zero(self, variant):
        inp = inputs(D=0.0, sigma=0.0, G=(0.0, 0.0), mu=0.2)
        assert nonconvex_divergence_bounds(inp, 0, variant).total == 0.0

    def test_k1_factor_ratio(self):
        inp = inputs(K=1)
        nc = nonconvex_divergence_bounds(inp, 0, "fedavg")
        cv = fedavg_divergence_bound(inp, 0)
        # K = 1 kills the (1 + c)^(K-1) factor, leaving c~ = 1 + beta max a
        assert nc.meta["c_tilde"] == pytest.approx(1.1)
        assert nc.total >= cv.total
        assert math.exp(0.1) >= 1.1

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_fedavg_recursion_matches_unrolled(self, seed):
        inp = random_inputs(seed)
        for i in range(3):
            rec = nonconvex_divergence_bounds(inp, i, "fedavg").total
            assert rec == pytest.approx(nonconvex_fedavg_closed_form(inp, i), rel=1e-10, abs=1e-300)

    def test_prox_precondition(self):
        with pytest.raises(BoundInputError):
            nonconvex_divergence_bounds(inputs(a=2.0, mu=0.5), 0, "fedprox")

    def test_prox_factors(self):
        f = fedprox_nonconvex_factors(inputs(a=0.5, mu=0.4), 0)
        assert f["delta"] == pytest.approx(0.2)
        assert f["prefactor"] == pytest.approx(1 / 0.8**2)
        assert f["beta_tau_over_mu"] == pytest.approx(0.5 / 0.8)

    def test_prox_convex_limit(self):
        # mu = 0: no expansion, and beta tau / mu tends to beta eta
        inp = inputs(a=0.3, mu=0.0)
        nc = nonconvex_divergence_bounds(inp, 0, "fedprox")
        assert nc.total == pytest.approx(fedprox_divergence_bound(inp, 0).total, rel=1e-14)

    def test_dispatch(self):
        inp = inputs()
        assert divergence_bound(inp, 0, "scaffold", True).variant == "scaffold"
        assert divergence_bound(inp, 0, "fedavg", False).meta["form"] == "nonconvex"
        with pytest.raises(ValueError):
            nonconvex_divergence_bounds(inp, 0, "sgd")


class TestReports:
    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_decomposition_and_monotone(self, seed):
        inp = random_inputs(seed)
        inp = inp.replace(mu=min(inp.mu, 0.9 / max(inp.alpha_tilde.max(), 1e-9)))
        for convex in (True, False):
            for v in ("fedavg", "scaffold", "fedprox"):
                rep = divergence_bound(inp, 1, v, convex)
                assert decomposition_holds(rep, 1e-10)
                assert np.all(np.diff(rep.series) >= 0)
                assert np.all(rep.series >= 0)

    def test_band_brackets_total(self):
        inp = inputs(grad_norm_se=[0.05, 0.05])
        rep = fedavg_divergence_bound(inp, 0)
        assert rep.band[0] <= rep.total <= rep.band[1]

    def test_averaged_inputs(self):
        G = np.array([[1.0, 2.0, 9.0], [3.0, 4.0, 9.0]])
        inp = BoundInputs.averaged(G, L=1.0, beta=1.0, sigma=0.0, D=[0.1], weights=[1.0],
                                   alpha_tilde=np.full((2, 1), 0.1), n=10)
        np.testing.assert_allclose(inp.grad_norm, [2.0, 3.0])
        np.testing.assert_allclose(inp.grad_norm_se, [1.0, 1.0])


class TestGeneralization:
    def test_zero_and_single(self):
        rep = fedavg_divergence_bound(inputs(D=0.0, sigma=0.0, G=(0.0, 0.0)), 0)
        assert generalization_bound([rep], 2.0).value == 0.0
        rep = fedavg_divergence_bound(inputs(), 0)
        assert generalization_bound([rep], 1.0).value == rep.total

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_max_dominates_weighted(self, seed):
        inp = random_inputs(seed)
        reps = [fedavg_divergence_bound(inp, i) for i in range(3)]
        g = generalization_bound(reps, inp.L, inp.weights)
        assert g.value >= g.weighted - 1e-15


class TestConvergenceSums:
    def test_zero(self):
        d = convergence_sums(inputs(G=(0.0, 0.0)), "fedavg")
        assert d.total == 0.0

    def test_constant_growth(self):
        T = 64
        d = convergence_sums(inputs(T=T, G=np.full(T, 0.7)), "fedavg")
        assert d.total == pytest.approx(T * 0.1 * 1.1 * 0.7, rel=1e-12)
        assert d.exponent == pytest.approx(1.0, abs=1e-9)

    def test_decaying_norms_sublinear(self):
        T = 256
        G = 1.0 / np.sqrt(np.arange(1, T + 1))
        for v in ("fedavg", "fedprox"):
            assert convergence_sums(inputs(T=T, G=G), v).exponent < 0.8
        # with a constant stepsize the SCAFFOLD factor compounds; a decaying one keeps it polynomial
        inp = inputs(T=T, G=G).replace(alpha_tilde=(0.1 / np.arange(1, T + 1))[:, None])
        assert convergence_sums(inp, "scaffold").exponent < 0.8
        assert convergence_sums(inputs(T=T, G=G), "scaffold").exponent > 1.0

    def test_helpers(self):
        assert dyadic_checkpoints(100) == [12, 25, 50, 100]
        assert math.isnan(growth_exponent([1], [1.0]))
        assert growth_exponent([1, 2, 4], [3.0, 6.0, 12.0]) == pytest.approx(1.0)
