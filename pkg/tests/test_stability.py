import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedstab import seeding
from fedstab.data import ClientDataset, DataGenSpec, FederatedDataset, NeighborSpec, Sample, generate_federation
from fedstab.fedalgo import AlgoConfig, RandomTape, StepSchedule, local_sgd, run_training
from fedstab.models import LeastSquares, LogisticMulticlass
from fedstab.stability import (
    GenGapEstimate,
    StabilityProtocol,
    check_thm1,
    estimate_stability,
    loss_gap_vs_divergence,
    run_twin,
)

from conftest import point_mass_spec

SPEC = DataGenSpec.synthetic(num_clients=3, num_classes=4, feature_dim=3, rho=0.7, samples_per_client=10)
MODEL = LogisticMulticlass(3, 4)


def cfg(variant="fedavg", T=6, alpha=0.5, K=3):
    return AlgoConfig(variant, T, StepSchedule.constant(alpha), local_steps=K)


def original_sample(spec, seed, repeat, i, j):
    fed, _ = generate_federation(spec, seeding.derive(seed, "data", repeat))
    return fed.clients[i].sample(j)


class TestTwin:
    @pytest.mark.parametrize("variant", ["fedavg", "scaffold", "fedprox"])
    def test_identity_replacement(self, variant):
        z = original_sample(SPEC, 4, 0, 1, 2)
        res = run_twin(SPEC, MODEL, cfg(variant), NeighborSpec(1, 2, z), seed=4)
        assert np.all(res.divergence == 0.0)
        assert res.loss_gap == 0.0

    def test_divergence_starts_at_zero(self):
        from fedstab.data import draw_replacement
        z = draw_replacement(SPEC, 0, 99)
        res = run_twin(SPEC, MODEL, cfg(), NeighborSpec(0, 1, z), seed=4)
        assert res.divergence[0] == 0.0
        assert res.final_divergence > 0
        assert res.baseline.rounds == res.twin.rounds == 6

    def test_other_clients_untouched_in_first_round(self):
        from fedstab.data import draw_replacement
        z = draw_replacement(SPEC, 0, 99)
        c = cfg()
        fed, _ = generate_federation(SPEC, 0)
        tape = RandomTape.draw(fed.sizes, c.replace(rounds=1), 0)
        from fedstab.data import make_neighbor
        nb = make_neighbor(fed, NeighborSpec(0, 1, z))
        theta0 = np.zeros(MODEL.dim)
        a = run_training(fed, MODEL, c.replace(rounds=1), tape, theta0, record_locals=True)
        b = run_training(nb, MODEL, c.replace(rounds=1), tape, theta0, record_locals=True)
        for j in (1, 2):
            np.testing.assert_array_equal(a.locals[0][j], b.locals[0][j])

    def test_single_client_case_analysis(self):
        """m=1, K=1, convex, alpha <= 1/beta: divergence only grows when the tape hits j."""
        gen = np.random.default_rng(0)
        X = gen.random((6, 2)) * 0.6
        y = gen.random(6)
        model = LeastSquares(2)
        fed = FederatedDataset([ClientDataset(X, np.zeros(6, dtype=int), targets=y)])
        c = AlgoConfig("fedavg", 60, StepSchedule.constant(0.9), local_steps=1)
        tape = RandomTape.draw(fed.sizes, c, 3)
        j = 2
        nb_fed = FederatedDataset([fed.clients[0].replace(j, Sample(gen.random(2) * 0.6, 0, target=[gen.random()]))])
        a = run_training(fed, model, c, tape, np.zeros(2))
        b = run_training(nb_fed, model, c, tape, np.zeros(2))
        div = np.linalg.norm(a.thetas - b.thetas, axis=1)
        hits = tape.local_idx[0][:, 0, 0] == j
        for t in range(60):
            if not hits[t]:
                assert div[t + 1] <= div[t] + 1e-15
        assert hits.any()


class TestEstimate:
    def test_point_mass_zero(self):
        spec = point_mass_spec(shared=True)
        est = estimate_stability(spec, LogisticMulticlass(4, 3), cfg(T=4), StabilityProtocol((0, 1), 2, 3),
                                 seed=1, test_size=200)
        assert est.epsilon_hat == 0.0 and est.epsilon_pointwise == 0.0
        chk = check_thm1(GenGapEstimate.from_estimate(est), est)
        assert chk.gen_gap == pytest.approx(0.0, abs=1e-15) and chk.passed and chk.abs_passed

    def test_deterministic_and_parallel_invariant(self):
        proto = StabilityProtocol((0, 2), 2, 3)
        a = estimate_stability(SPEC, MODEL, cfg(), proto, seed=2, oracle_size=300, test_size=300)
        b = estimate_stability(SPEC, MODEL, cfg(), proto, seed=2, oracle_size=300, test_size=300, jobs=2)
        assert a.to_dict() == b.to_dict()
        np.testing.assert_array_equal(a.grad_norm, b.grad_norm)
        np.testing.assert_array_equal(a.gen_gaps, b.gen_gaps)

    def test_probe_order_invariance(self):
        a = estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((0, 2), 2, 3), seed=2)
        b = estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((2, 0), 2, 3), seed=2)
        assert a.epsilon_hat == b.epsilon_hat
        assert a.epsilon_pointwise == b.epsilon_pointwise

    def test_client_divergence_pooling(self):
        est = estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((1,), 3, 4), seed=0)
        series, mean, se = est.client_divergence(1)
        assert series[0] == 0.0 and mean == pytest.approx(series[-1])
        assert se >= 0
        with pytest.raises(KeyError):
            est.client_divergence(0)

    def test_protocol_validation(self):
        with pytest.raises(ValueError):
            StabilityProtocol(repeats=1)
        with pytest.raises(ValueError):
            StabilityProtocol((0,), 20, 2).probes(SPEC)
        with pytest.raises(ValueError):
            StabilityProtocol((7,), 2, 2).probes(SPEC)
        pos = StabilityProtocol((0,), 3, 2).positions(10)
        assert pos[0] == 0 and pos[-1] == 9 and len(set(pos)) == 3


class TestLossGap:
    def test_zero_divergence_zero_gap(self):
        z = original_sample(SPEC, 0, 0, 0, 0)
        res = run_twin(SPEC, MODEL, cfg(), NeighborSpec(0, 0, z), seed=0)
        assert loss_gap_vs_divergence(res, 1.0).ok

    def test_least_squares_hand_instance(self):
        model = LeastSquares(1)
        z = Sample([0.5], 0, target=[0.2])
        th, th2 = np.array([0.7]), np.array([0.3])
        direct = abs(0.5 * (0.35 - 0.2) ** 2 - 0.5 * (0.15 - 0.2) ** 2)
        assert abs(model.loss(th, z) - model.loss(th2, z)) == pytest.approx(direct, abs=1e-12)

    @given(st.integers(0, 10_000))
    @settings(max_examples=10, deadline=None)
    def test_lipschitz_ratio(self, seed):
        from fedstab.data import draw_replacement
        gen = np.random.default_rng(seed)
        i, j = int(gen.integers(0, 3)), int(gen.integers(0, 10))
        z = draw_replacement(SPEC, i, seed)
        res = run_twin(SPEC, MODEL, cfg(T=3), NeighborSpec(i, j, z), seed=seed)
        chk = loss_gap_vs_divergence(res, np.sqrt(2))
        assert chk.ok and chk.max_ratio <= 1.0


class TestThm1:
    def test_mismatched_configs(self):
        a = estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((0,), 1, 2), seed=0, test_size=100)
        b = estimate_stability(SPEC, MODEL, cfg(T=5), StabilityProtocol((0,), 1, 2), seed=0, test_size=100)
        with pytest.raises(ValueError):
            check_thm1(GenGapEstimate.from_estimate(a), b)
        with pytest.raises(ValueError):
            GenGapEstimate.from_estimate(estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((0,), 1, 2), seed=0))

    def test_margin_arithmetic(self):
        est = estimate_stability(SPEC, MODEL, cfg(), StabilityProtocol((0,), 1, 3), seed=0, test_size=100)
        gen = GenGapEstimate(np.array([0.1, 0.2, 0.3]), est.key)
        chk = check_thm1(gen, est)
        assert chk.margin == pytest.approx(est.epsilon_hat + 3 * chk.combined_se - 0.2)
        assert chk.passed == (chk.margin >= 0)
