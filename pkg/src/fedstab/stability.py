"""Twin trainings on neighboring datasets and on-average stability estimates.

A twin run trains twice from the same initial model with the same tape: once
on ``S`` and once on ``S^(i)``, which differs from ``S`` only at position ``j``
of client ``i``. The replacement ``z'`` is a fresh draw from ``P_i`` on its
own seed stream. The divergence of the two server trajectories and the loss
gap at ``z'`` are what the stability bounds speak about.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from fedstab import seeding
from fedstab.data import (
    GLOBAL,
    DataGenSpec,
    NeighborSpec,
    draw_oracle_set,
    draw_replacement,
    generate_federation,
    make_neighbor,
)
from fedstab.fedalgo import AlgoConfig, RandomTape, TrajectoryRecord, run_training
from fedstab.models import LossModel
from fedstab.parallel import ordered_map


def config_key(spec: DataGenSpec, model: LossModel, config: AlgoConfig) -> str:
    blob = json.dumps({"data": spec.to_dict(), "model": model.to_dict(), "algo": config.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _se(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")


@lru_cache(maxsize=8)
def cached_global_set(spec: DataGenSpec, N: int, master: int, stream: str):
    return draw_oracle_set(spec, GLOBAL, N, seeding.derive(master, stream))


@dataclass(frozen=True)
class StabilityProtocol:
    probe_clients: tuple[int, ...] = (0, 1, 2)
    probes_per_client: int = 5
    repeats: int = 50

    def __post_init__(self):
        object.__setattr__(self, "probe_clients", tuple(int(i) for i in self.probe_clients))
        if self.repeats < 2:
            raise ValueError("at least 2 repeats are needed for standard errors")
        if self.probes_per_client < 1 or not self.probe_clients:
            raise ValueError("probe set is empty")

    def positions(self, n_i: int) -> list[int]:
        if self.probes_per_client > n_i:
            raise ValueError(f"{self.probes_per_client} probes requested for a client with {n_i} samples")
        return [int(j) for j in np.linspace(0, n_i - 1, self.probes_per_client).round()]

    def probes(self, spec: DataGenSpec) -> list[tuple[int, int]]:
        out = []
        for i in self.probe_clients:
            if not 0 <= i < spec.num_clients:
                raise ValueError(f"probe client {i} out of range")
            out.extend((i, j) for j in self.positions(spec.samples_per_client[i]))
        return out

    def to_dict(self) -> dict:
        return {"probe_clients": list(self.probe_clients), "probes_per_client": self.probes_per_client, "repeats": self.repeats}


@dataclass(eq=False)
class TwinRunResult:
    nspec: NeighborSpec
    divergence: np.ndarray         # ||theta_t - theta'_t||, t = 0..T
    loss_gap: float                # |l(theta_T; z') - l(theta'_T; z')|
    seeds: dict
    baseline: TrajectoryRecord | None = None
    twin: TrajectoryRecord | None = None

    @property
    def final_divergence(self) -> float:
        return float(self.divergence[-1])


def _twin(fed, model, config, tape, theta0, nspec, base, seeds, keep=False) -> TwinRunResult:
    fed2 = make_neighbor(fed, nspec)
    twin = run_training(fed2, model, config, tape, theta0)
    div = np.linalg.norm(base.thetas - twin.thetas, axis=1)
    z = nspec.replacement
    gap = abs(model.loss(base.final, z) - model.loss(twin.final, z))
    return TwinRunResult(nspec, div, gap, seeds, base if keep else None, twin if keep else None)


def run_twin(
    spec: DataGenSpec,
    model: LossModel,
    config: AlgoConfig,
    nspec: NeighborSpec,
    seed: int = 0,
    repeat: int = 0,
    keep_records: bool = True,
) -> TwinRunResult:
    """One twin pair with ``S``, tape and ``theta_0`` from the repeat's streams."""
    seeds = {"master": int(seed), "repeat": int(repeat)}
    fed, _ = generate_federation(spec, seeding.derive(seed, "data", repeat))
    tape = RandomTape.draw(fed.sizes, config, seeding.derive(seed, "tape", repeat))
    theta0 = model.init_params(seeding.rng(seed, "init", repeat))
    base = run_training(fed, model, config, tape, theta0)
    return _twin(fed, model, config, tape, theta0, nspec, base, seeds, keep_records)


@dataclass
class ProbeStat:
    client: int
    position: int
    gaps: np.ndarray
    finals: np.ndarray
    div_mean: np.ndarray
    div_se: np.ndarray

    @property
    def gap_mean(self) -> float:
        return float(np.mean(self.gaps))

    @property
    def gap_se(self) -> float:
        return _se(self.gaps)

    @property
    def final_mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def final_se(self) -> float:
        return _se(self.finals)

    def to_dict(self) -> dict:
        return {"client": self.client, "position": self.position, "gap_mean": self.gap_mean, "gap_se": self.gap_se,
                "div_mean": self.final_mean, "div_se": self.final_se}


@dataclass
class StabilityEstimate:
    """Monte Carlo estimate of on-average stability over a probe set.

    ``epsilon_hat`` is the largest per-client mean loss gap, where a client's
    mean pools its probed positions (the tape is uniform over positions, so
    they share one expectation). ``epsilon_pointwise`` is the largest single
    ``(i, j)`` mean. Both are lower-bound estimates of the max over all
    positions and clients; ``probe_clients`` says which clients were covered.
    """

    probes: list[ProbeStat]
    client_gap: dict
    epsilon_hat: float
    epsilon_se: float
    epsilon_pointwise: float
    probe_clients: tuple
    repeats: int
    key: str
    grad_norm: np.ndarray | None = None      # (R, T+1) baseline oracle gradient norms
    grad_norm_se: np.ndarray | None = None
    alpha_tilde: np.ndarray | None = None    # (T, m), identical across repeats
    alpha_hat: np.ndarray | None = None
    gen_gaps: np.ndarray | None = None       # (R,) signed R - R_S at theta_T
    train_final: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def client_divergence(self, i: int) -> tuple[np.ndarray, float, float]:
        """Divergence of client ``i`` pooled over its probed positions.

        Returns the mean series over rounds, and the mean and SE of the final
        divergence, where the SE is taken over repeats of the per-repeat
        position average (probes of one repeat share ``S`` and the tape).
        """
        ps = [p for p in self.probes if p.client == i]
        if not ps:
            raise KeyError(f"client {i} was not probed")
        series = np.mean([p.div_mean for p in ps], axis=0)
        per_rep = np.mean([p.finals for p in ps], axis=0)
        return series, float(per_rep.mean()), _se(per_rep)

    def to_dict(self) -> dict:
        return {
            "epsilon_hat": self.epsilon_hat,
            "epsilon_se": self.epsilon_se,
            "epsilon_pointwise": self.epsilon_pointwise,
            "probe_clients": list(self.probe_clients),
            "repeats": self.repeats,
            "key": self.key,
            "client_gap": {str(k): v for k, v in self.client_gap.items()},
            "probes": [p.to_dict() for p in self.probes],
            "meta": self.meta,
        }


@dataclass(frozen=True)
class _RepeatJob:
    spec: DataGenSpec
    model: LossModel
    config: AlgoConfig
    probes: tuple
    master: int
    repeat: int
    oracle_size: int
    test_size: int


def _repeat(job: _RepeatJob) -> dict:
    spec, model, config, master, r = job.spec, job.model, job.config, job.master, job.repeat
    fed, _ = generate_federation(spec, seeding.derive(master, "data", r))
    tape = RandomTape.draw(fed.sizes, config, seeding.derive(master, "tape", r))
    theta0 = model.init_params(seeding.rng(master, "init", r))
    oracle = cached_global_set(spec, job.oracle_size, master, "oracle") if job.oracle_size else None
    base = run_training(fed, model, config, tape, theta0, oracle=oracle)
    out = {
        "grad_norm": base.grad_norm,
        "grad_norm_se": base.grad_norm_se,
        "alpha_tilde": base.alpha_tilde,
        "alpha_hat": base.alpha_hat,
        "train_final": base.train_loss[-1],
        "gaps": [],
        "divs": [],
    }
    if job.test_size:
        test = cached_global_set(spec, job.test_size, master, "test")
        out["gen_gap"] = model.batch_loss(base.final, test) - base.train_loss[-1]
    seeds = {"master": master, "repeat": r}
    for i, j in job.probes:
        z = draw_replacement(spec, i, seeding.derive(master, "replacement", i, j, r))
        res = _twin(fed, model, config, tape, theta0, NeighborSpec(i, j, z), base, seeds)
        out["gaps"].append(res.loss_gap)
        out["divs"].append(res.divergence)
    return out


def estimate_stability(
    spec: DataGenSpec,
    model: LossModel,
    config: AlgoConfig,
    protocol: StabilityProtocol = StabilityProtocol(),
    seed: int = 0,
    oracle_size: int = 0,
    test_size: int = 0,
    jobs: int = 1,
) -> StabilityEstimate:
    """Monte Carlo over fresh ``(S, z', tape, theta_0)`` per repeat.

    Each repeat trains the baseline on ``S`` once and one twin per probe,
    so all probes of a repeat share common random numbers. ``oracle_size``
    turns on population gradient norms of the baseline (for the bounds) and
    ``test_size`` a fresh test draw for the generalization gap.
    """
    probes = tuple(protocol.probes(spec))
    jobs_list = [_RepeatJob(spec, model, config, probes, int(seed), r, oracle_size, test_size)
                 for r in range(protocol.repeats)]
    outs = ordered_map(_repeat, jobs_list, jobs)
    gaps = np.array([o["gaps"] for o in outs])          # (R, P)
    divs = np.array([o["divs"] for o in outs])          # (R, P, T+1)
    stats = []
    for p, (i, j) in enumerate(probes):
        stats.append(ProbeStat(i, j, gaps[:, p], divs[:, p, -1], divs[:, p].mean(axis=0),
                               divs[:, p].std(axis=0, ddof=1) / math.sqrt(len(outs))))
    client_gap = {}
    for i in protocol.probe_clients:
        cols = [p for p, (ci, _) in enumerate(probes) if ci == i]
        per_rep = gaps[:, cols].mean(axis=1)
        client_gap[i] = (float(per_rep.mean()), _se(per_rep))
    best = max(client_gap, key=lambda i: client_gap[i][0])
    return StabilityEstimate(
        probes=stats,
        client_gap=client_gap,
        epsilon_hat=client_gap[best][0],
        epsilon_se=client_gap[best][1],
        epsilon_pointwise=max(s.gap_mean for s in stats),
        probe_clients=protocol.probe_clients,
        repeats=protocol.repeats,
        key=config_key(spec, model, config),
        grad_norm=np.array([o["grad_norm"] for o in outs]),
        grad_norm_se=np.array([o["grad_norm_se"] for o in outs]),
        alpha_tilde=outs[0]["alpha_tilde"],
        alpha_hat=outs[0]["alpha_hat"],
        gen_gaps=np.array([o["gen_gap"] for o in outs]) if test_size else None,
        train_final=np.array([o["train_final"] for o in outs]),
        meta={"seed": int(seed), "oracle_size": oracle_size, "test_size": test_size, "protocol": protocol.to_dict()},
    )


@dataclass
class GapCheck:
    ok: bool
    max_ratio: float
    violations: list


def loss_gap_vs_divergence(results: Sequence[TwinRunResult] | TwinRunResult, L_hat: float, atol: float = 1e-9) -> GapCheck:
    """Every loss gap is at most ``L_hat`` times the final divergence of its repeat."""
    if isinstance(results, TwinRunResult):
        results = [results]
    ratio = 0.0
    bad = []
    for r, res in enumerate(results):
        lim = L_hat * res.final_divergence
        if res.loss_gap > lim + atol:
            bad.append(r)
        if lim > 0:
            ratio = max(ratio, res.loss_gap / lim)
    return GapCheck(not bad, ratio, bad)


@dataclass
class GenGapEstimate:
    """Signed and absolute generalization gap of trained models over repeats."""

    signed: np.ndarray
    key: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.signed))

    @property
    def se(self) -> float:
        return _se(self.signed)

    @property
    def abs_mean(self) -> float:
        return float(np.mean(np.abs(self.signed)))

    @property
    def abs_se(self) -> float:
        return _se(np.abs(self.signed))

    @classmethod
    def from_estimate(cls, est: StabilityEstimate) -> "GenGapEstimate":
        if est.gen_gaps is None:
            raise ValueError("stability estimate was run without a test set")
        return cls(est.gen_gaps, est.key)


@dataclass
class Thm1Check:
    passed: bool
    gen_gap: float
    gen_gap_se: float
    epsilon_hat: float
    epsilon_se: float
    combined_se: float
    margin: float
    abs_gap: float
    abs_gap_se: float
    abs_passed: bool
    abs_margin: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_thm1(gen: GenGapEstimate, est: StabilityEstimate, k: float = 3.0) -> Thm1Check:
    """Compare the expected generalization gap with the stability estimate.

    The decision uses the expected signed gap ``E[R - R_S]``; the expected
    absolute gap is reported next to it with its own margin. Statistical
    overlap is a record, never an exception.
    """
    if gen.key != est.key:
        raise ValueError("generalization gap and stability estimate come from different configurations")
    comb = math.sqrt(gen.se**2 + est.epsilon_se**2)
    comb_abs = math.sqrt(gen.abs_se**2 + est.epsilon_se**2)
    margin = est.epsilon_hat + k * comb - gen.mean
    abs_margin = est.epsilon_hat + k * comb_abs - gen.abs_mean
    return Thm1Check(margin >= 0, gen.mean, gen.se, est.epsilon_hat, est.epsilon_se, comb, margin,
                     gen.abs_mean, gen.abs_se, abs_margin >= 0, abs_margin)
