"""Property suites for the lemmas the bounds rest on.

Each suite draws its instances from a seeded generator, checks one
inequality or identity on every instance and returns a ``SuiteResult`` with
the worst slack seen. ``run_suites`` is what ``fedstab verify`` prints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from fedstab import seeding
from fedstab.data import NeighborSpec, ClientDataset, DataGenSpec, FederatedDataset, draw_oracle_set, generate_federation, total_variation_labels
from fedstab.fedalgo import AlgoConfig, RandomTape, StepSchedule, run_training
from fedstab.models import (
    MLP,
    LeastSquares,
    LogisticMulticlass,
    LossModel,
    curvature_floor,
    gradient_stats,
    prox_solve,
)
from fedstab.stability import _twin


@dataclass
class SuiteResult:
    name: str
    passed: bool
    instances: int
    worst: float            # largest (lhs - rhs); <= 0 means every instance held
    seconds: float
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.instances} instances, worst slack {self.worst:.3e}, {self.seconds:.1f}s"


def _timed(name, fn, *args, **kw) -> SuiteResult:
    t0 = time.perf_counter()
    passed, n, worst, detail = fn(*args, **kw)
    return SuiteResult(name, passed, n, worst, time.perf_counter() - t0, detail)


def _random_client(gen, model: LossModel, n: int) -> ClientDataset:
    d = model.feature_dim
    X = gen.standard_normal((n, d))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]
    C = getattr(model, "num_classes", 2)
    labels = gen.integers(0, C, size=n)
    targets = None
    if isinstance(model, LeastSquares):
        targets = gen.standard_normal((n, model.num_outputs)) if model.num_outputs > 1 else gen.standard_normal(n)
    return ClientDataset(X, labels, targets=targets)


def _convex_model(gen) -> tuple[LossModel, float]:
    """A random convex model with its per-sample smoothness constant."""
    d = int(gen.integers(2, 12))
    if gen.random() < 0.5:
        return LeastSquares(d, int(gen.integers(1, 4))), 1.0
    return LogisticMulticlass(d, int(gen.integers(2, 6))), 0.5


# ---------------------------------------------------------------- suites


def gradient_step_nonexpansive(instances: int = 1000, seed: int = 0, tol: float = 1e-12):
    """``theta -> theta - grad l(theta; z) / beta`` is 1-Lipschitz for convex
    beta-smooth losses (single sample or mini-batch)."""
    gen = np.random.default_rng(seeding.derive(seed, "constants", 1))
    worst = -math.inf
    for _ in range(instances):
        model, beta = _convex_model(gen)
        data = _random_client(gen, model, int(gen.integers(1, 6)))
        X, Y = model.prepare(data)
        a = gen.standard_normal(model.dim) * gen.uniform(0.1, 3.0)
        b = a + gen.standard_normal(model.dim) * gen.uniform(1e-3, 2.0)
        alpha = 1.0 / beta
        ga = a - alpha * model.grad_mean(a, X, Y)
        gb = b - alpha * model.grad_mean(b, X, Y)
        worst = max(worst, float(np.linalg.norm(ga - gb) - np.linalg.norm(a - b)))
    return worst <= tol, instances, worst, {"tolerance": tol}


def prox_nonexpansive(instances: int = 1000, seed: int = 0, prox_tol: float = 1e-9):
    """The proximal map of a convex risk is 1-Lipschitz; inexact solves add
    at most ``eta * prox_tol`` each, and ``eta <= 1`` here."""
    gen = np.random.default_rng(seeding.derive(seed, "constants", 2))
    worst = -math.inf
    for _ in range(instances):
        model, _ = _convex_model(gen)
        data = _random_client(gen, model, int(gen.integers(1, 8)))
        X, Y = model.prepare(data)
        eta = float(gen.uniform(0.05, 1.0))
        a = gen.standard_normal(model.dim)
        b = a + gen.standard_normal(model.dim) * gen.uniform(1e-3, 1.0)
        pa = prox_solve(model, a, eta, (X, Y), tol=prox_tol)
        pb = prox_solve(model, b, eta, (X, Y), tol=prox_tol)
        worst = max(worst, float(np.linalg.norm(pa - pb) - np.linalg.norm(a - b)))
    return worst <= 2 * prox_tol, instances, worst, {"tolerance": 2 * prox_tol}


def prox_expansion_nonconvex(instances: int = 200, seed: int = 0, prox_tol: float = 1e-9, eta: float = 0.2):
    """For a mu-weakly convex risk, ``||prox(a) - prox(b)|| <= ||a - b|| / (1 - eta mu)``.

    ``mu_hat`` is the curvature floor measured along the segment between the
    two prox points (where the inequality's proof integrates the Hessian).
    Instances with ``eta * mu_hat >= 1`` would make the factor meaningless and
    are counted as failures.
    """
    gen = np.random.default_rng(seeding.derive(seed, "constants", 3))
    worst = -math.inf
    factors = []
    for _ in range(instances):
        d = int(gen.integers(2, 6))
        model = MLP(d, int(gen.integers(2, 4)), int(gen.integers(2, 6)))
        data = _random_client(gen, model, int(gen.integers(2, 10)))
        X, Y = model.prepare(data)
        a = model.init_params(gen, scale=float(gen.uniform(0.5, 2.0)))
        b = a + gen.standard_normal(model.dim) * gen.uniform(1e-3, 0.3)
        pa = prox_solve(model, a, eta, (X, Y), tol=prox_tol, beta=4.0)
        pb = prox_solve(model, b, eta, (X, Y), tol=prox_tol, beta=4.0)
        seg = [pa + s * (pb - pa) for s in np.linspace(0.0, 1.0, 5)]
        mu = curvature_floor(model, seg, [data], safety=1.0)
        if eta * mu >= 1.0:
            worst = max(worst, math.inf)
            continue
        fac = 1.0 / (1.0 - eta * mu)
        factors.append(fac)
        slack = 2 * eta * prox_tol * fac
        worst = max(worst, float(np.linalg.norm(pa - pb) - fac * np.linalg.norm(a - b)) - slack)
    return worst <= 0.0, instances, worst, {"eta": eta, "max_factor": max(factors) if factors else None}


def tv_gradient_gap(points: int = 100, seed: int = 0, N: int = 50_000, k: float = 3.0, rhos=(0.0, 0.5)):
    """``||grad R_i(theta) - grad R(theta)|| <= 2 L D_i`` on oracle draws.

    ``L`` is the largest per-sample gradient norm seen on either draw at
    ``theta``. The measured norm carries an SE of
    ``sqrt(tr Cov_i / N + tr Cov / N)``; the check allows ``k`` of them.
    At rho = 0 every D_i is 0 and only the sampling slack remains.
    """
    worst = -math.inf
    count = 0
    Ds = {}
    for r, rho in enumerate(rhos):
        spec = DataGenSpec.synthetic(num_clients=5, num_classes=10, feature_dim=20, rho=rho, samples_per_client=50)
        prof = total_variation_labels(spec)
        Ds[rho] = [float(x) for x in prof.D]
        model = LogisticMulticlass(spec.feature_dim, spec.num_classes)
        glob = model.prepare(draw_oracle_set(spec, "global", N, seeding.derive(seed, "oracle", r, 0)))
        local = [model.prepare(draw_oracle_set(spec, i, N, seeding.derive(seed, "oracle", r, 1, i)))
                 for i in range(spec.num_clients)]
        gen = seeding.rng(seed, "constants", 4, r)
        for _ in range(points):
            theta = gen.standard_normal(model.dim) * gen.uniform(0.1, 3.0)
            sg = gradient_stats(model, theta, *glob)
            Lg = float(np.max(model.grad_norms(theta, *glob)))
            for i, (X, Y) in enumerate(local):
                si = gradient_stats(model, theta, X, Y)
                L = max(Lg, float(np.max(model.grad_norms(theta, X, Y))))
                se = math.sqrt(si.trace_cov / si.n + sg.trace_cov / sg.n)
                lhs = float(np.linalg.norm(si.mean - sg.mean))
                worst = max(worst, lhs - 2 * L * prof.D[i] - k * se)
                count += 1
    return worst <= 0.0, count, worst, {"rhos": list(rhos), "oracle_size": N, "D": Ds}


def algorithm_identities(seed: int = 0):
    """(a) one-client FedAvg with K=B=1 equals plain SGD; (b) SCAFFOLD with
    identical clients and full batches equals FedAvg; (c) an identity
    replacement leaves the twin divergence at 0."""
    model = LogisticMulticlass(6, 3)
    gen = seeding.rng(seed, "constants", 5)
    fails = []
    # (a)
    data = _random_client(gen, model, 40)
    fed = FederatedDataset([data])
    cfg = AlgoConfig("fedavg", 30, StepSchedule.theory(0.5, 1), local_steps=1, batch_size=1)
    tape = RandomTape.draw(fed.sizes, cfg, seeding.derive(seed, "tape", 0))
    th0 = model.init_params(gen)
    rec = run_training(fed, model, cfg, tape, th0)
    X, Y = model.prepare(data)
    th = th0.copy()
    for t in range(cfg.rounds):
        j = int(tape.local_idx[0][t, 0, 0])
        th = th - cfg.schedule.at(t) * model.grad_one(th, X[j], Y[j])
    if not np.array_equal(th, rec.final):
        fails.append("fedavg_m1_vs_sgd")
    # (b)
    same = FederatedDataset([data, data, data])
    for K in (1, 3):
        ca = AlgoConfig("fedavg", 10, StepSchedule.constant(0.3), local_steps=K, batch_size=None)
        cs = ca.replace(variant="scaffold")
        tp = RandomTape.draw(same.sizes, ca, seeding.derive(seed, "tape", 1))
        ra = run_training(same, model, ca, tp, th0)
        rs = run_training(same, model, cs, tp, th0)
        if not np.array_equal(ra.thetas, rs.thetas):
            fails.append(f"scaffold_vs_fedavg_K{K}")
    # (c)
    spec = DataGenSpec.synthetic(num_clients=3, num_classes=3, feature_dim=6, rho=0.5, samples_per_client=20)
    fed3, _ = generate_federation(spec, seeding.derive(seed, "data", 0))
    for variant in ("fedavg", "scaffold", "fedprox"):
        K = 1 if variant == "fedprox" else 2
        c = AlgoConfig(variant, 8, StepSchedule.theory(0.5, K), local_steps=K)
        tp = RandomTape.draw(fed3.sizes, c, seeding.derive(seed, "tape", 2))
        base = run_training(fed3, model, c, tp, th0)
        res = _twin(fed3, model, c, tp, th0, NeighborSpec(1, 4, fed3.clients[1].sample(4)), base, {})
        if np.any(res.divergence != 0.0):
            fails.append(f"identity_twin_{variant}")
    return not fails, 6, float(len(fails)), {"failures": fails}


def gradient_fd(probes: int = 100, seed: int = 0, rel_tol: float = 1e-6):
    """Central finite differences along random directions agree with the
    analytic gradients to ``rel_tol`` for every model family."""
    gen = seeding.rng(seed, "constants", 6)
    models = [LeastSquares(5, 1), LeastSquares(4, 3), LogisticMulticlass(5, 4), MLP(5, 3, 6)]
    worst = 0.0
    per = {}
    for model in models:
        w = 0.0
        for _ in range(probes):
            data = _random_client(gen, model, 3)
            X, Y = model.prepare(data)
            theta = model.init_params(gen, scale=1.0) if isinstance(model, MLP) else gen.standard_normal(model.dim)
            v = gen.standard_normal(model.dim)
            v /= np.linalg.norm(v)
            g = model.grad_mean(theta, X, Y)
            err = _fd_error(model, theta, v, X, Y, g)
            w = max(w, err)
        per[type(model).__name__ + str(model.dim)] = w
        worst = max(worst, w)
    return worst < rel_tol, probes * len(models), worst - rel_tol, {"relative_errors": per}


def _fd_error(model, theta, v, X, Y, g) -> float:
    """Relative error of the directional derivative, with a Richardson step
    so truncation error sits far below the tolerance."""
    def f(t):
        return float(np.mean(model.losses(t, X, Y)))

    def central(h):
        return (f(theta + h * v) - f(theta - h * v)) / (2 * h)

    h = 1e-3
    fd = (4 * central(h / 2) - central(h)) / 3
    exact = float(g @ v)
    scale = max(abs(exact), float(np.linalg.norm(g)), 1e-8)
    return abs(fd - exact) / scale


SUITES = {
    "gradient_step_nonexpansive": gradient_step_nonexpansive,
    "prox_nonexpansive": prox_nonexpansive,
    "prox_expansion_nonconvex": prox_expansion_nonconvex,
    "tv_gradient_gap": tv_gradient_gap,
    "algorithm_identities": algorithm_identities,
    "gradient_fd": gradient_fd,
}

CONVEX_SUITES = ("gradient_step_nonexpansive", "prox_nonexpansive", "tv_gradient_gap", "algorithm_identities", "gradient_fd")


def run_suites(names=None, seed: int = 0) -> list[SuiteResult]:
    names = list(SUITES) if names is None else list(names)
    out = []
    for name in names:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
        out.append(_timed(name, SUITES[name], seed=seed))
    return out
