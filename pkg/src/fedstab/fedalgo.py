"""FedAvg, SCAFFOLD and FedProx with full client participation.

Every stochastic choice of a run lives on a :class:`RandomTape`: per round and
client, the sample positions used by each local step and by the SCAFFOLD
control variate. Two runs that share a tape visit the same positions, which
is the coupling the twin-run machinery relies on.

Server aggregation is ``theta_{t+1} = sum_i p_i theta^i_{t+1}`` summed in
client order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from fedstab.data import FederatedDataset
from fedstab.models import LossModel, gradient_stats, prox_solve

DIVERGENCE_NORM = 1e8
VARIANTS = ("fedavg", "scaffold", "fedprox")


class DivergenceError(RuntimeError):
    """Iterate became non-finite or exceeded the norm guard."""

    def __init__(self, round_index: int, client: int, step: int, norm: float, record=None):
        super().__init__(f"iterate diverged at round {round_index}, client {client}, local step {step} (norm {norm:.3e})")
        self.round_index = round_index
        self.client = client
        self.step = step
        self.norm = norm
        self.record = record


@dataclass(frozen=True)
class StepSchedule:
    """Local stepsize (or FedProx eta) as a function of the round ``t``.

    constant       alpha0
    theory         min(cap, 1 / (24 beta K (t + 1)))
    inverse_time   alpha0 / (t + 1)
    """

    kind: str = "constant"
    alpha0: float = 0.01
    beta: float = 1.0
    K: int = 1
    cap: float = math.inf

    def __post_init__(self):
        if self.kind not in ("constant", "theory", "inverse_time"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "theory":
            if not (self.beta > 0 and self.K >= 1 and self.cap > 0):
                raise ValueError("theory schedule needs beta > 0, K >= 1, cap > 0")
        elif not self.alpha0 > 0:
            raise ValueError("stepsize must be positive")

    @classmethod
    def constant(cls, alpha0: float) -> "StepSchedule":
        return cls("constant", alpha0=alpha0)

    @classmethod
    def theory(cls, beta: float, K: int, cap: float = math.inf) -> "StepSchedule":
        return cls("theory", beta=beta, K=K, cap=cap)

    @classmethod
    def inverse_time(cls, alpha0: float) -> "StepSchedule":
        return cls("inverse_time", alpha0=alpha0)

    def at(self, t: int) -> float:
        if self.kind == "constant":
            return self.alpha0
        if self.kind == "theory":
            return min(self.cap, 1.0 / (24.0 * self.beta * self.K * (t + 1)))
        return self.alpha0 / (t + 1)

    def series(self, T: int) -> np.ndarray:
        return np.array([self.at(t) for t in range(T)], dtype=np.float64)

    def certified_for(self, beta: float) -> bool:
        """Every emitted stepsize is at most 1/beta (non-expansive gradient steps)."""
        if self.kind == "theory":
            return self.at(0) <= 1.0 / beta
        return self.alpha0 <= 1.0 / beta

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "theory":
            d.update(beta=self.beta, K=self.K)
            if math.isfinite(self.cap):
                d["cap"] = self.cap
        else:
            d["alpha0"] = self.alpha0
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StepSchedule":
        return cls(**d)


@dataclass(frozen=True)
class AlgoConfig:
    """One algorithm run.

    ``batch_size=None`` means full-batch local gradients. For FedProx the
    schedule yields the proximal parameter eta and ``local_steps`` is unused.
    """

    variant: str
    rounds: int
    schedule: StepSchedule
    local_steps: int | tuple[int, ...] = 1
    batch_size: int | None = 1
    prox_tol: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.rounds < 0:
            raise ValueError("rounds must be non-negative")
        ks = (self.local_steps,) if isinstance(self.local_steps, (int, np.integer)) else tuple(self.local_steps)
        if any(int(k) < 1 for k in ks):
            raise ValueError("local_steps must be at least 1")
        if not isinstance(self.local_steps, (int, np.integer)):
            object.__setattr__(self, "local_steps", tuple(int(k) for k in ks))
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive or None for full batch")

    def steps_for(self, m: int) -> list[int]:
        if self.variant == "fedprox":
            return [1] * m
        if isinstance(self.local_steps, tuple):
            if len(self.local_steps) != m:
                raise ValueError(f"{len(self.local_steps)} local step counts for {m} clients")
            return list(self.local_steps)
        return [int(self.local_steps)] * m

    @property
    def certified_mode(self) -> bool:
        """Single-sample local steps, the regime the stability lemmas assume."""
        return self.batch_size == 1 or self.variant == "fedprox"

    def replace(self, **changes) -> "AlgoConfig":
        d = dict(variant=self.variant, rounds=self.rounds, schedule=self.schedule,
                 local_steps=self.local_steps, batch_size=self.batch_size, prox_tol=self.prox_tol)
        d.update(changes)
        return AlgoConfig(**d)

    def to_dict(self) -> dict:
        ls = list(self.local_steps) if isinstance(self.local_steps, tuple) else self.local_steps
        return {"variant": self.variant, "rounds": self.rounds, "schedule": self.schedule.to_dict(),
                "local_steps": ls, "batch_size": self.batch_size, "prox_tol": self.prox_tol}

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        d = dict(d)
        d["schedule"] = StepSchedule.from_dict(d["schedule"])
        if isinstance(d.get("local_steps"), list):
            d["local_steps"] = tuple(d["local_steps"])
        return cls(**d)


def _client_stream(seed, i: int) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + (i,))
    else:
        ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(i,))
    return np.random.default_rng(ss)


@dataclass(eq=False)
class RandomTape:
    """Sample positions for every local step and control variate.

    ``local_idx[i]`` has shape ``(T, K_i, B)``; ``control_idx[i]`` has shape
    ``(T, B)``. With full-batch gradients ``B = 0`` and the arrays are empty.
    """

    local_idx: list[np.ndarray]
    control_idx: list[np.ndarray]

    @property
    def rounds(self) -> int:
        return min(a.shape[0] for a in self.local_idx) if self.local_idx else 0

    @classmethod
    def draw(cls, sizes: Sequence[int], config: AlgoConfig, seed) -> "RandomTape":
        """Uniform with-replacement positions; client ``i`` uses its own child stream."""
        T = config.rounds
        B = 0 if config.batch_size is None else config.batch_size
        ks = config.steps_for(len(sizes))
        local, control = [], []
        for i, (n_i, K_i) in enumerate(zip(sizes, ks)):
            gen = _client_stream(seed, i)
            local.append(gen.integers(0, n_i, size=(T, K_i, B)))
            control.append(gen.integers(0, n_i, size=(T, B)))
        return cls(local, control)

    def equals(self, other: "RandomTape") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.local_idx, other.local_idx)) and all(
            np.array_equal(a, b) for a, b in zip(self.control_idx, other.control_idx)
        )


@dataclass(eq=False)
class TrajectoryRecord:
    variant: str
    weights: np.ndarray
    thetas: np.ndarray                 # (T+1, d) server models
    train_loss: np.ndarray             # (T+1,) R_S(theta_t)
    grad_norm: np.ndarray              # (T+1,) oracle ||grad R(theta_t)||, nan if no oracle
    grad_norm_se: np.ndarray           # (T+1,)
    drift: np.ndarray                  # (T, m) max_k ||theta_{i,k} - theta_t||
    alpha_tilde: np.ndarray            # (T, m) sum_k alpha_{i,k}(t), eta_i(t) for FedProx
    alpha_hat: np.ndarray              # (T,) sum_j p_j alpha_tilde_{j,t}
    complete: bool = True
    stopped_at: int | None = None
    prox_residual: np.ndarray | None = None
    locals: list | None = None
    meta: dict = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        return len(self.thetas) - 1

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]

    def equals(self, other: "TrajectoryRecord") -> bool:
        pairs = [(self.thetas, other.thetas), (self.train_loss, other.train_loss),
                 (self.grad_norm, other.grad_norm), (self.drift, other.drift),
                 (self.alpha_tilde, other.alpha_tilde)]
        return all(np.array_equal(a, b, equal_nan=True) for a, b in pairs)


def aggregate(locals_: Sequence[np.ndarray], p) -> np.ndarray:
    """Weighted mean in fixed client order."""
    p = np.asarray(p, dtype=np.float64)
    if len(locals_) != len(p) or len(p) == 0:
        raise ValueError("one weight per local model is required")
    d = np.shape(locals_[0])
    if any(np.shape(v) != d for v in locals_):
        raise ValueError("local models differ in dimension")
    if abs(float(np.sum(p)) - 1.0) > 1e-12:
        raise ValueError(f"weights sum to {float(np.sum(p))}, not 1")
    out = p[0] * np.asarray(locals_[0], dtype=np.float64)
    for w, v in zip(p[1:], locals_[1:]):
        out += w * v
    return out


def _step_guard(theta, t, i, k, record_fn):
    s = float(theta @ theta)
    if not s <= DIVERGENCE_NORM**2:
        raise DivergenceError(t, i, k, math.sqrt(s) if math.isfinite(s) else float("inf"), record_fn())


def _gradient(model, theta, X, Y, idx):
    """Gradient at the tape-designated positions (``idx`` empty -> full batch)."""
    if idx.shape[-1] == 0:
        return model.grad_mean(theta, X, Y)
    if idx.shape[-1] == 1:
        j = idx[0]
        return model.grad_one(theta, X[j], Y[j])
    return model.grad_mean(theta, X[idx], Y[idx])


def local_sgd(model, X, Y, theta_t, alpha, idx, correction=None, guard=None):
    """K local steps ``theta <- theta - alpha (g_i(theta) + correction)``.

    Returns ``(theta_K, max_k ||theta_k - theta_t||, iterates)``.
    """
    theta = theta_t
    drift = 0.0
    for k in range(idx.shape[0]):
        g = _gradient(model, theta, X, Y, idx[k])
        if correction is not None:
            g = g + correction
        theta = theta - alpha * g
        if guard is not None:
            guard(theta, k)
        diff = theta - theta_t
        drift = max(drift, math.sqrt(float(diff @ diff)))
    return theta, drift


def local_round_fedavg(model, client, theta_t, alpha, idx):
    X, Y = model.prepare(client)
    return local_sgd(model, X, Y, np.asarray(theta_t, dtype=np.float64), alpha, np.asarray(idx))[0]


def local_round_scaffold(model, client, theta_t, g_i, g, alpha, idx):
    X, Y = model.prepare(client)
    return local_sgd(model, X, Y, np.asarray(theta_t, dtype=np.float64), alpha, np.asarray(idx), g - g_i)[0]


def local_round_fedprox(model, client, theta_t, eta, prox_tol=None):
    return prox_solve(model, theta_t, eta, client, tol=prox_tol)


def control_variates(model, prepared, theta_t, idx_row, p):
    """Client control variates and their ``p``-weighted mean.

    The mean is accumulated as ``g_0 + sum_i p_i (g_i - g_0)`` so that equal
    variates give ``g == g_i`` exactly and the correction cancels bit for bit.
    """
    gs = [_gradient(model, theta_t, X, Y, idx) for (X, Y), idx in zip(prepared, idx_row)]
    g0 = gs[0]
    acc = np.zeros_like(g0)
    for w, gi in zip(p, gs):
        acc += w * (gi - g0)
    return gs, g0 + acc


def run_training(
    fed: FederatedDataset,
    model: LossModel,
    config: AlgoConfig,
    tape: RandomTape,
    theta0,
    oracle=None,
    stop_loss: float | None = None,
    record_locals: bool = False,
    oracle_rounds: Sequence[int] | None = None,
) -> TrajectoryRecord:
    """Run ``config.rounds`` rounds from ``theta0``; deterministic in its inputs.

    ``oracle`` (a dataset) enables population gradient-norm estimates at each
    round, or only at ``oracle_rounds`` when given. ``stop_loss`` ends training
    at the first round whose training loss is at or below it.
    """
    theta0 = model.check_theta(theta0).copy()
    T = config.rounds
    m = fed.m
    p = fed.weights
    if tape.rounds < T:
        raise ValueError(f"tape covers {tape.rounds} rounds, config needs {T}")
    for i, c in enumerate(fed.clients):
        if tape.local_idx[i].size and tape.local_idx[i][:T].max(initial=0) >= c.n:
            raise ValueError(f"tape position exceeds client {i} size {c.n}")
    ks = config.steps_for(m)
    prepared = [model.prepare(c) for c in fed.clients]
    Xp, Yp = model.prepare(fed.pooled())
    oracle_xy = model.prepare(oracle) if oracle is not None else None
    want = set(range(T + 1)) if oracle_rounds is None else set(int(r) for r in oracle_rounds)

    thetas = [theta0]
    losses = []
    gn = np.full(T + 1, np.nan)
    gse = np.full(T + 1, np.nan)
    drift = np.zeros((T, m))
    a_tilde = np.zeros((T, m))
    a_hat = np.zeros(T)
    resid = np.zeros((T, m)) if config.variant == "fedprox" else None
    locals_log = [] if record_locals else None
    stopped = None

    def observe(t, theta):
        losses.append(float(np.mean(model.losses(theta, Xp, Yp))))
        if oracle_xy is not None and t in want:
            st = gradient_stats(model, theta, *oracle_xy)
            gn[t], gse[t] = st.norm, st.norm_se

    def partial(t):
        n = len(thetas)
        return TrajectoryRecord(
            config.variant, p, np.array(thetas), np.array(losses[:n]), gn[:n], gse[:n],
            drift[: n - 1], a_tilde[: n - 1], a_hat[: n - 1], complete=False,
            meta={"failed_round": t},
        )

    theta = theta0
    observe(0, theta)
    for t in range(T):
        if stop_loss is not None and losses[-1] <= stop_loss:
            stopped = t
            break
        alpha = config.schedule.at(t)
        new_locals = []
        if config.variant == "fedprox":
            for i, (X, Y) in enumerate(prepared):
                th, info = prox_solve(model, theta, alpha, (X, Y), tol=config.prox_tol, return_info=True)
                _step_guard(th, t, i, 0, lambda: partial(t))
                diff = th - theta
                drift[t, i] = math.sqrt(float(diff @ diff))
                resid[t, i] = info["residual"]
                new_locals.append(th)
            a_tilde[t] = alpha
        else:
            corrections = [None] * m
            if config.variant == "scaffold":
                row = [tape.control_idx[i][t] for i in range(m)]
                gs, g = control_variates(model, prepared, theta, row, p)
                corrections = [g - gi for gi in gs]
            for i, (X, Y) in enumerate(prepared):
                guard = lambda th, k, i=i: _step_guard(th, t, i, k, lambda: partial(t))
                th, dr = local_sgd(model, X, Y, theta, alpha, tape.local_idx[i][t], corrections[i], guard)
                drift[t, i] = dr
                new_locals.append(th)
            a_tilde[t] = alpha * np.asarray(ks, dtype=np.float64)
        a_hat[t] = float(p @ a_tilde[t])
        if record_locals:
            locals_log.append(new_locals)
        theta = aggregate(new_locals, p)
        _step_guard(theta, t, -1, -1, lambda: partial(t))
        thetas.append(theta)
        observe(t + 1, theta)

    n = len(thetas)
    return TrajectoryRecord(
        variant=config.variant,
        weights=p,
        thetas=np.array(thetas),
        train_loss=np.array(losses),
        grad_norm=gn[:n],
        grad_norm_se=gse[:n],
        drift=drift[: n - 1],
        alpha_tilde=a_tilde[: n - 1],
        alpha_hat=a_hat[: n - 1],
        complete=True,
        stopped_at=stopped,
        prox_residual=None if resid is None else resid[: n - 1],
        locals=locals_log,
        meta={"local_steps": ks, "batch_size": config.batch_size, "certified_mode": config.certified_mode},
    )
