"""Closed-form divergence bounds for twin trajectories.

Each bound is linear in the triple ``(2 L D_i, ||grad R(theta_t)||, sigma)``,
so every report carries an exact decomposition into a heterogeneity, a
convergence and a variance part. Series entries are the bound at horizon
``t + 1``; the last entry is the bound at ``T``.

Convex forms (perturbed client ``i``, ``a_t = alpha_tilde_{i,t}``):

    FedAvg    2/n sum_t a_t (1 + beta a_t) (2 L D_i + G_t + sigma)
    SCAFFOLD  2/n sum_t exp(2 beta sum_{l>t} ahat_l) (2 L D_i g1_t + g2_t G_t + sigma g2_t)
              g1_t = 2 a_t + ahat_t,   g2_t = g1_t + beta a_t^2
    FedProx   2/n sum_t eta_t (1 + beta eta_t) (2 L D_i + G_t + sigma)

Non-convex forms are the explicit recursions before any O(.) absorption; see
the docstrings of the individual functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class BoundInputError(ValueError):
    pass


@dataclass
class BoundInputs:
    L: float
    beta: float
    sigma: float
    D: np.ndarray                  # (m,) per-client total variation
    weights: np.ndarray            # (m,) p_i
    alpha_tilde: np.ndarray        # (T, m) summed local stepsizes, or eta for FedProx
    grad_norm: np.ndarray          # (T,) ||grad R(theta_t)||, t = 0..T-1
    n: int
    K: Sequence[int] | int = 1
    mu: float = 0.0
    grad_norm_se: np.ndarray | None = None

    def __post_init__(self):
        self.D = np.atleast_1d(np.asarray(self.D, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        a = np.asarray(self.alpha_tilde, dtype=np.float64)
        if a.ndim == 1:
            a = np.repeat(a[:, None], len(self.D), axis=1)
        self.alpha_tilde = a
        self.grad_norm = np.asarray(self.grad_norm, dtype=np.float64).reshape(-1)
        if self.grad_norm_se is not None:
            self.grad_norm_se = np.asarray(self.grad_norm_se, dtype=np.float64).reshape(-1)
        if isinstance(self.K, (int, np.integer)):
            self.K = [int(self.K)] * len(self.D)
        self.K = [int(k) for k in self.K]
        self.validate()

    def validate(self):
        T, m = self.alpha_tilde.shape
        if len(self.grad_norm) != T:
            raise BoundInputError(f"gradient-norm series has length {len(self.grad_norm)}, stepsizes have {T} rounds")
        if self.grad_norm_se is not None and len(self.grad_norm_se) != T:
            raise BoundInputError("gradient-norm SE series length mismatch")
        if len(self.weights) != m or len(self.D) != m or len(self.K) != m:
            raise BoundInputError("per-client inputs disagree on the number of clients")
        if self.n < 1:
            raise BoundInputError("n must be positive")
        for name in ("L", "beta", "sigma", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise BoundInputError(f"{name} must be finite and non-negative")
        for name, arr in (("D", self.D), ("alpha_tilde", self.alpha_tilde), ("grad_norm", self.grad_norm)):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise BoundInputError(f"{name} must be finite and non-negative")

    @property
    def T(self) -> int:
        return self.alpha_tilde.shape[0]

    @property
    def alpha_hat(self) -> np.ndarray:
        return self.alpha_tilde @ self.weights

    def replace(self, **changes) -> "BoundInputs":
        d = {k: getattr(self, k) for k in ("L", "beta", "sigma", "D", "weights", "alpha_tilde", "grad_norm",
                                           "n", "K", "mu", "grad_norm_se")}
        d.update(changes)
        return BoundInputs(**d)

    def snapshot(self) -> dict:
        return {
            "L": self.L, "beta": self.beta, "sigma": self.sigma, "mu": self.mu, "n": self.n,
            "K": list(self.K), "D": self.D.tolist(), "weights": self.weights.tolist(),
            "alpha_tilde": self.alpha_tilde.tolist(), "grad_norm": self.grad_norm.tolist(),
            "grad_norm_se": None if self.grad_norm_se is None else self.grad_norm_se.tolist(),
        }

    @classmethod
    def averaged(cls, grad_norms: np.ndarray, grad_norm_ses: np.ndarray | None = None, **kw) -> "BoundInputs":
        """Averaged mode: gradient norms are the mean over repeats of each round.

        The SE combines the spread over repeats with the oracle Monte Carlo SE.
        ``grad_norms`` has shape ``(R, >=T)``; columns beyond ``T`` are dropped.
        """
        G = np.asarray(grad_norms, dtype=np.float64)
        T = np.asarray(kw["alpha_tilde"]).shape[0]
        G = G[:, :T]
        R = G.shape[0]
        var = G.var(axis=0, ddof=1) / R if R > 1 else np.zeros(T)
        if grad_norm_ses is not None:
            S = np.asarray(grad_norm_ses, dtype=np.float64)[:, :T]
            var = var + np.mean(S**2, axis=0) / R
        return cls(grad_norm=G.mean(axis=0), grad_norm_se=np.sqrt(var), **kw)


@dataclass
class BoundReport:
    variant: str
    client: int
    convex: bool
    series: np.ndarray
    heterogeneity: float
    convergence: float
    variance: float
    band: tuple[float, float] | None = None
    inputs: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(self.series[-1]) if len(self.series) else 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "client": self.client, "convex": self.convex, "total": self.total,
            "series": self.series.tolist(), "heterogeneity": self.heterogeneity,
            "convergence": self.convergence, "variance": self.variance,
            "band": None if self.band is None else list(self.band), "inputs": self.inputs, "meta": self.meta,
        }


def _suffix_sums(a: np.ndarray) -> np.ndarray:
    """``out[t] = sum_{l=t+1}^{T-1} a_l`` with the empty sum at ``t = T-1`` equal to 0."""
    out = np.zeros_like(a)
    if len(a) > 1:
        out[:-1] = np.cumsum(a[::-1])[::-1][1:]
    return out


def _horizon_series_weighted(w: np.ndarray, s: np.ndarray, growth: np.ndarray) -> np.ndarray:
    """Bound at each horizon ``H``: ``sum_{t<H} prod_{t<l<H} growth_l * w_t s_t``.

    Evaluated as the forward recursion ``b_{t+1} = growth_t b_t + w_t s_t``.
    """
    b = 0.0
    out = np.empty(len(s))
    for t in range(len(s)):
        b = growth[t] * b + w[t] * s[t]
        out[t] = b
    return out


def _report(variant, client, convex, evaluate, inp: BoundInputs, meta) -> BoundReport:
    """Run ``evaluate(LD2, G, sigma) -> series`` for the total and the three parts."""
    T = inp.T
    LD2 = 2.0 * inp.L * inp.D[client]
    zeros = np.zeros(T)
    series = evaluate(LD2, inp.grad_norm, inp.sigma)
    het = evaluate(LD2, zeros, 0.0)
    conv = evaluate(0.0, inp.grad_norm, 0.0)
    var = evaluate(0.0, zeros, inp.sigma)
    band = None
    if inp.grad_norm_se is not None and T:
        lo = evaluate(LD2, np.maximum(inp.grad_norm - 2 * inp.grad_norm_se, 0.0), inp.sigma)[-1]
        hi = evaluate(LD2, inp.grad_norm + 2 * inp.grad_norm_se, inp.sigma)[-1]
        band = (float(lo), float(hi))
    last = (lambda s: float(s[-1]) if T else 0.0)
    return BoundReport(variant, client, convex, series, last(het), last(conv), last(var), band, inp.snapshot(), meta)


def _check_client(inp: BoundInputs, i: int):
    if not 0 <= i < len(inp.D):
        raise BoundInputError(f"client {i} out of range")


def fedavg_divergence_bound(inp: BoundInputs, i: int) -> BoundReport:
    _check_client(inp, i)
    a = inp.alpha_tilde[:, i]
    w = (2.0 / inp.n) * a * (1.0 + inp.beta * a)
    return _report("fedavg", i, True, lambda LD2, G, s: np.cumsum(w * (LD2 + G + s)) if inp.T else np.zeros(0),
                   inp, {"form": "convex"})


def fedprox_divergence_bound(inp: BoundInputs, i: int) -> BoundReport:
    """Same algebra as FedAvg with the proximal parameter eta in place of alpha_tilde."""
    rep = fedavg_divergence_bound(inp, i)
    rep.variant = "fedprox"
    return rep


def scaffold_divergence_bound(inp: BoundInputs, i: int) -> BoundReport:
    _check_client(inp, i)
    a = inp.alpha_tilde[:, i]
    ah = inp.alpha_hat
    g1 = 2.0 * a + ah
    g2 = g1 + inp.beta * a * a
    # horizon H carries exp(2 beta sum_{t<l<H} ahat_l): one factor exp(2 beta ahat_l) per later round
    growth = np.exp(2.0 * inp.beta * ah)

    def evaluate(LD2, G, s):
        summand = (2.0 / inp.n) * (LD2 * g1 + g2 * G + s * g2)
        return _horizon_series_weighted(np.ones(inp.T), summand, growth)

    return _report("scaffold", i, True, evaluate, inp, {"form": "convex"})


def scaffold_closed_form(inp: BoundInputs, i: int) -> float:
    """Direct evaluation of the displayed SCAFFOLD sum at horizon ``T`` (cross-check)."""
    a = inp.alpha_tilde[:, i]
    ah = inp.alpha_hat
    g1 = 2.0 * a + ah
    g2 = g1 + inp.beta * a * a
    ex = np.exp(2.0 * inp.beta * _suffix_sums(ah))
    LD2 = 2.0 * inp.L * inp.D[i]
    return float((2.0 / inp.n) * np.sum(ex * (LD2 * g1 + g2 * inp.grad_norm + inp.sigma * g2)))


def _emitted_c(inp: BoundInputs) -> float:
    """``c = max beta * alpha`` over the emitted per-step stepsizes."""
    per_step = inp.alpha_tilde / np.asarray(inp.K, dtype=np.float64)[None, :]
    return float(inp.beta * per_step.max()) if per_step.size else 0.0


def nonconvex_fedavg_constant(inp: BoundInputs) -> float:
    c = _emitted_c(inp)
    return 1.0 + (1.0 + c) ** (max(inp.K) - 1) * inp.beta * float(inp.alpha_tilde.max(initial=0.0))


def nonconvex_scaffold_constant(inp: BoundInputs) -> float:
    c = _emitted_c(inp)
    return 1.0 + inp.beta * float(inp.alpha_tilde.max(initial=0.0)) * (1.0 + c) ** (max(inp.K) + 1)


def nonconvex_fedavg_closed_form(inp: BoundInputs, i: int) -> float:
    """``2c/n sum_t exp(beta sum_{l>t} a_l) a_t e^{beta a_t} (G_t + 2 L D_i + sigma)``."""
    a = inp.alpha_tilde[:, i]
    ct = nonconvex_fedavg_constant(inp)
    ex = np.exp(inp.beta * _suffix_sums(a))
    E = inp.grad_norm + 2.0 * inp.L * inp.D[i] + inp.sigma
    return float((2.0 * ct / inp.n) * np.sum(ex * a * np.exp(inp.beta * a) * E))


def fedprox_nonconvex_factors(inp: BoundInputs, i: int) -> dict:
    eta = inp.alpha_tilde[:, i]
    delta = float(eta.max(initial=0.0)) * inp.mu
    if delta >= 1.0:
        raise BoundInputError(f"curvature condition violated: max eta * mu = {delta:.4g} >= 1")
    # beta tau / mu with tau = delta / (1 - delta) and delta = eta_max mu
    beta_tau_mu = inp.beta * float(eta.max(initial=0.0)) / (1.0 - delta)
    per_round = 1.0 / (1.0 - eta * inp.mu)
    prefactor = float(np.prod(per_round))
    T = inp.T
    c_implied = math.log(prefactor) / math.log(T) if T > 1 and prefactor > 1 else 0.0
    return {"delta": delta, "beta_tau_over_mu": beta_tau_mu, "prefactor": prefactor,
            "per_round": per_round, "c_implied": c_implied}


def nonconvex_divergence_bounds(inp: BoundInputs, i: int, variant: str) -> BoundReport:
    """Explicit non-convex forms.

    FedAvg: forward recursion ``b_{t+1} = e^{beta a_t} b_t + 2c/n a_t e^{beta a_t} E_t``
    with ``c = 1 + (1 + c0)^{K-1} beta max a`` and ``E_t = G_t + 2 L D_i + sigma``.

    SCAFFOLD: ``b_{t+1} = A_t b_t + 2/n (sum_j p_j a_j e^{beta a_j} + a_i e^{beta a_i}) E_t
    + 2/n a_i e^{beta a_i} (c (G_t + sigma) + 2 L D_i)`` with
    ``A_t = sum_j p_j (1 + 2 beta a_j) e^{beta a_j}`` and ``c = 1 + beta max a (1 + c0)^{K+1}``.

    FedProx: ``P * 2/n sum_t eta_t (1 + beta tau / mu) E_t`` where ``P`` is the
    exact product of the per-round expansion factors ``1 / (1 - eta_t mu)``.
    """
    _check_client(inp, i)
    T = inp.T
    beta = inp.beta
    if variant == "fedavg":
        a = inp.alpha_tilde[:, i]
        ct = nonconvex_fedavg_constant(inp)
        growth = np.exp(beta * a)
        w = (2.0 * ct / inp.n) * a * growth

        def evaluate(LD2, G, s):
            return _horizon_series_weighted(w, G + LD2 + s, growth)

        return _report("fedavg", i, False, evaluate, inp, {"form": "nonconvex", "c_tilde": ct, "c": _emitted_c(inp)})
    if variant == "scaffold":
        A = inp.alpha_tilde
        p = inp.weights
        ct = nonconvex_scaffold_constant(inp)
        eA = np.exp(beta * A)
        growth = ((1.0 + 2.0 * beta * A) * eA) @ p
        mix = (A * eA) @ p
        ai = A[:, i] * eA[:, i]

        def evaluate(LD2, G, s):
            E = LD2 + G + s
            drive = (2.0 / inp.n) * ((mix + ai) * E + ai * (ct * (G + s) + LD2))
            return _horizon_series_weighted(np.ones(T), drive, growth)

        return _report("scaffold", i, False, evaluate, inp, {"form": "nonconvex", "c_tilde": ct, "c": _emitted_c(inp)})
    if variant == "fedprox":
        f = fedprox_nonconvex_factors(inp, i)
        eta = inp.alpha_tilde[:, i]
        # prefactor at each horizon H is the product of the first H expansion factors
        pref = np.cumprod(f["per_round"]) if T else np.zeros(0)

        def evaluate(LD2, G, s):
            part = np.cumsum((2.0 / inp.n) * eta * (1.0 + f["beta_tau_over_mu"]) * (LD2 + G + s))
            return pref * part

        meta = {k: v for k, v in f.items() if k != "per_round"}
        meta["form"] = "nonconvex"
        return _report("fedprox", i, False, evaluate, inp, meta)
    raise ValueError(f"unknown variant {variant!r}")


def divergence_bound(inp: BoundInputs, i: int, variant: str, convex: bool) -> BoundReport:
    if not convex:
        return nonconvex_divergence_bounds(inp, i, variant)
    table = {"fedavg": fedavg_divergence_bound, "scaffold": scaffold_divergence_bound,
             "fedprox": fedprox_divergence_bound}
    return table[variant](inp, i)


@dataclass
class GeneralizationBound:
    value: float            # L * max_i bound_i (conservative)
    weighted: float         # L * sum_i p_i bound_i / sum_i p_i over the probed clients
    clients: list
    label: str = "L x max over probed clients of the divergence bound"


def generalization_bound(reports: Sequence[BoundReport], L: float, weights=None) -> GeneralizationBound:
    if not reports:
        raise ValueError("no divergence reports")
    totals = np.array([r.total for r in reports])
    clients = [r.client for r in reports]
    w = np.ones(len(reports)) if weights is None else np.asarray(weights, dtype=np.float64)[clients]
    weighted = float(np.sum(w * totals) / np.sum(w)) if np.sum(w) > 0 else 0.0
    return GeneralizationBound(float(L * totals.max()), float(L * min(weighted, totals.max())), clients)


# --- convergence sums ----------------------------------------------------------


@dataclass
class ConvergenceDiagnostics:
    variant: str
    partial_sums: np.ndarray     # value at each horizon 1..T
    checkpoints: list
    exponent: float
    total: float


def dyadic_checkpoints(T: int, count: int = 4) -> list[int]:
    pts = sorted({max(1, T >> k) for k in range(count)})
    return [p for p in pts if p >= 1]


def convergence_sums(inp: BoundInputs, variant: str, i: int = 0, checkpoints: Sequence[int] | None = None) -> ConvergenceDiagnostics:
    """Partial sums of the gradient-norm terms of each convex bound and their growth exponent."""
    a = inp.alpha_tilde[:, i]
    G = inp.grad_norm
    if variant in ("fedavg", "fedprox"):
        sums = np.cumsum(a * (1.0 + inp.beta * a) * G)
    elif variant == "scaffold":
        ah = inp.alpha_hat
        g2 = 2.0 * a + ah + inp.beta * a * a
        growth = np.exp(2.0 * inp.beta * ah)
        sums = _horizon_series_weighted(np.ones(inp.T), g2 * G, growth)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    cps = list(checkpoints) if checkpoints is not None else dyadic_checkpoints(inp.T)
    q = growth_exponent(cps, [sums[c - 1] for c in cps]) if inp.T else float("nan")
    return ConvergenceDiagnostics(variant, sums, cps, q, float(sums[-1]) if inp.T else 0.0)


def growth_exponent(horizons: Sequence[int], values: Sequence[float]) -> float:
    """Least-squares slope of log(value) against log(horizon)."""
    h = np.asarray(horizons, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    keep = (h > 0) & (v > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(h[keep]), np.log(v[keep]), 1)[0])
