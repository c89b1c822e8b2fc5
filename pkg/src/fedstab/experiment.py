"""Generalization-gap measurement, rho sweeps and bound-vs-measured campaigns.

A sweep is a full factorial over (rho, algorithm, repeat). Every cell owns
seed streams derived from the campaign seed and its coordinates, so the
result of a cell does not depend on which worker ran it or in what order.
A repeat shares its initial model, data, tape and test streams across every
rho and algorithm (common random numbers). Labels are drawn by inverse CDF,
so the same uniforms land on coupled labels as rho moves, and contrasts
between rho values carry far less noise than independent draws would.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from fedstab import seeding
from fedstab.bounds import (
    BoundInputs,
    divergence_bound,
    generalization_bound,
)
from fedstab.config import to_jsonable
from fedstab.data import GLOBAL, DataGenSpec, FederatedDataset, draw_oracle_set, generate_federation, total_variation_labels
from fedstab.fedalgo import VARIANTS, AlgoConfig, RandomTape, TrajectoryRecord, run_training
from fedstab.models import LossModel, LogisticMulticlass, LeastSquares, estimate_constants
from fedstab.parallel import ordered_map
from fedstab.stability import (
    GenGapEstimate,
    StabilityProtocol,
    cached_global_set,
    check_thm1,
    estimate_stability,
)

CSV_HEADER = ("campaign_id", "rho", "algo", "t", "level", "gap", "gap_se", "eps_hat", "bound_rhs", "seeds")


def _se(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else float("nan")


# ---------------------------------------------------------------- gap of one run


@dataclass(frozen=True)
class GapPoint:
    """Gap of one trajectory at one round; ``level`` is set for crossing rows."""

    t: int | None
    level: float | None
    train: float
    test: float
    reached: bool = True

    @property
    def signed(self) -> float:
        return self.test - self.train

    @property
    def gap(self) -> float:
        return abs(self.test - self.train)


def empirical_risk(model: LossModel, theta, fed: FederatedDataset) -> float:
    """``sum_i p_i R_{S_i}(theta)``; with size-proportional weights this is
    the same pooled mean the trajectory records."""
    if np.allclose(fed.weights, np.asarray(fed.sizes) / fed.n, rtol=0, atol=1e-15):
        return float(np.mean(model.losses(theta, *model.prepare(fed.pooled()))))
    return float(sum(p * model.batch_loss(theta, c) for p, c in zip(fed.weights, fed.clients)))


def first_crossing(train_loss: Sequence[float], level: float) -> int | None:
    """First recorded round at or below ``level``; no interpolation."""
    hit = np.nonzero(np.asarray(train_loss) <= level)[0]
    return int(hit[0]) if len(hit) else None


def measure_gen_gap(
    record: TrajectoryRecord,
    fed: FederatedDataset,
    model: LossModel,
    test,
    rounds: Sequence[int] = (),
    levels: Sequence[float] = (),
) -> list[GapPoint]:
    """Gap ``|R - R_S|`` at the requested rounds and at first crossings.

    ``test`` is a fresh draw (dataset or prepared ``(X, Y)``) standing in for
    the population risk; it must come from a stream disjoint from training.
    Rounds past the end of the record and levels never reached come back
    with ``reached=False`` and NaN losses.
    """
    Xt, Yt = test if isinstance(test, tuple) else model.prepare(test)
    cache: dict[int, GapPoint] = {}

    def at(t):
        if t not in cache:
            th = record.thetas[t]
            cache[t] = GapPoint(t, None, empirical_risk(model, th, fed), float(np.mean(model.losses(th, Xt, Yt))))
        return cache[t]

    out = []
    T = record.rounds
    for t in rounds:
        t = int(t)
        if 0 <= t <= T:
            out.append(at(t))
        else:
            out.append(GapPoint(t, None, math.nan, math.nan, reached=False))
    for lv in levels:
        t = first_crossing(record.train_loss, lv)
        if t is None:
            out.append(GapPoint(None, float(lv), math.nan, math.nan, reached=False))
        else:
            p = at(t)
            out.append(GapPoint(t, float(lv), p.train, p.test))
    return out


# ---------------------------------------------------------------- sweep


@dataclass(frozen=True)
class SweepPlan:
    base: DataGenSpec
    model: LossModel
    algorithms: tuple            # AlgoConfig per algorithm, rounds = T cap
    rhos: tuple = (0.0, 0.2, 0.5, 0.8, 1.0)
    levels: tuple = (0.2, 0.08, 0.05, 0.01, 0.005)
    repeats: int = 20
    checkpoints: tuple = ()
    test_size: int = 50_000
    seed: int = 0
    early_stop: bool = False     # stop a run once it reaches the lowest level

    def __post_init__(self):
        object.__setattr__(self, "rhos", tuple(float(r) for r in self.rhos))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "checkpoints", tuple(int(t) for t in self.checkpoints))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        self.validate()

    def validate(self):
        if not self.rhos:
            raise ValueError("rho grid is empty")
        if any(not 0.0 <= r <= 1.0 for r in self.rhos):
            raise ValueError("rho values must lie in [0, 1]")
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("loss-level targets must be strictly decreasing")
        if not self.algorithms:
            raise ValueError("no algorithms")
        for a in self.algorithms:
            if a.rounds < 1:
                raise ValueError("T cap must be at least 1")
        if len({a.variant for a in self.algorithms}) != len(self.algorithms):
            raise ValueError("each algorithm may appear once")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")

    @property
    def T(self) -> int:
        return max(a.rounds for a in self.algorithms)

    def cells(self):
        for k in range(len(self.rhos)):
            for a in range(len(self.algorithms)):
                for r in range(self.repeats):
                    yield k, a, r

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "model": self.model.to_dict(),
            "algorithms": [a.to_dict() for a in self.algorithms],
            "rhos": list(self.rhos),
            "levels": list(self.levels),
            "repeats": self.repeats,
            "checkpoints": list(self.checkpoints),
            "test_size": self.test_size,
            "seed": self.seed,
            "early_stop": self.early_stop,
        }


@lru_cache(maxsize=4)
def _test_set(spec: DataGenSpec, N: int, master: int):
    return draw_oracle_set(spec, GLOBAL, N, seeding.derive(master, "test"))


@dataclass(frozen=True)
class _CellJob:
    plan: SweepPlan
    k: int
    a: int
    r: int


def cell_seeds(master: int, r: int) -> dict:
    """Derived integer seeds of one repeat; logged with the campaign."""
    return {
        "data": seeding.seed_int(master, "data", r),
        "tape": seeding.seed_int(master, "tape", r),
        "init": seeding.seed_int(master, "init", r),
        "test": seeding.seed_int(master, "test"),
    }


def _run_cell(job: _CellJob) -> list[GapPoint]:
    plan, k, r = job.plan, job.k, job.r
    cfg = plan.algorithms[job.a]
    spec = plan.base.replace(rho=plan.rhos[k])
    fed, _ = generate_federation(spec, seeding.derive(plan.seed, "data", r))
    tape = RandomTape.draw(fed.sizes, cfg, seeding.derive(plan.seed, "tape", r))
    theta0 = plan.model.init_params(seeding.rng(plan.seed, "init", r))
    stop = min(plan.levels) if plan.early_stop and plan.levels else None
    rec = run_training(fed, plan.model, cfg, tape, theta0, stop_loss=stop)
    test = plan.model.prepare(_test_set(spec, plan.test_size, plan.seed))
    return measure_gen_gap(rec, fed, plan.model, test, plan.checkpoints, plan.levels)


@dataclass
class GapCell:
    """Reduction of one (rho, algorithm, slice) cell over repeats."""

    rho: float
    algo: str
    t: int | None
    level: float | None
    gaps: np.ndarray            # per repeat, NaN where unreached
    rounds: np.ndarray          # crossing or checkpoint round per repeat, -1 where unreached
    seeds: str

    @property
    def n_reached(self) -> int:
        return int(np.sum(~np.isnan(self.gaps)))

    @property
    def reached(self) -> bool:
        """Every repeat reached this slice; only such cells enter trend stats."""
        return self.n_reached == len(self.gaps)

    @property
    def mean(self) -> float:
        g = self.gaps[~np.isnan(self.gaps)]
        return float(g.mean()) if len(g) else math.nan

    @property
    def se(self) -> float:
        return _se(self.gaps[~np.isnan(self.gaps)])

    @property
    def t_label(self):
        if self.t is not None:
            return self.t
        ok = self.rounds[self.rounds >= 0]
        return int(np.median(ok)) if len(ok) else None


def spearman(x, y) -> float | None:
    """Rank correlation, or None when it is undefined (fewer than two
    points, or a constant coordinate)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.spearmanr(x, y).statistic)


@dataclass
class GenGapReport:
    campaign_id: str
    plan: SweepPlan
    cells: list[GapCell]
    meta: dict = field(default_factory=dict)

    def slices(self):
        """Slice keys in output order: checkpoints first, then levels."""
        return [("t", t) for t in self.plan.checkpoints] + [("level", lv) for lv in self.plan.levels]

    def cell(self, rho, algo, kind, value) -> GapCell:
        for c in self.cells:
            if c.rho == rho and c.algo == algo and (c.t if kind == "t" else c.level) == value and (
                (c.level is None) == (kind == "t")
            ):
                return c
        raise KeyError((rho, algo, kind, value))

    def trend(self) -> dict:
        """Spearman correlation of mean gap vs rho per (algorithm, slice);
        None when fewer than two rho values are fully reached."""
        out = {}
        for cfg in self.plan.algorithms:
            for kind, v in self.slices():
                cs = [self.cell(r, cfg.variant, kind, v) for r in self.plan.rhos]
                cs = [c for c in cs if c.reached]
                out[(cfg.variant, kind, v)] = spearman([c.rho for c in cs], [c.mean for c in cs])
        return out

    def level_trend(self) -> dict:
        """One trend per algorithm over the loss levels.

        Uses the levels that every repeat reached at every rho, averages the
        mean gap over them for each rho and correlates that with rho. Levels
        missed somewhere are left out rather than filled, so each rho
        averages the same slices.
        """
        out = {}
        for cfg in self.plan.algorithms:
            common = [lv for lv in self.plan.levels
                      if all(self.cell(r, cfg.variant, "level", lv).reached for r in self.plan.rhos)]
            means = [float(np.mean([self.cell(r, cfg.variant, "level", lv).mean for lv in common]))
                     if common else math.nan for r in self.plan.rhos]
            out[cfg.variant] = {
                "levels": common,
                "means": means,
                "spearman": spearman(self.plan.rhos, means) if common else None,
            }
        return out

    def horizon(self, kind: str = "level") -> list[dict]:
        """Paired comparison of consecutive slices at fixed (rho, algorithm).

        ``kind='level'`` walks the loss levels downwards, ``kind='t'`` the
        checkpoints upwards. The SE is that of the per-repeat difference over
        repeats that reached both slices.
        """
        keys = [v for k, v in self.slices() if k == kind]
        out = []
        for cfg in self.plan.algorithms:
            for rho in self.plan.rhos:
                for v1, v2 in zip(keys, keys[1:]):
                    c1 = self.cell(rho, cfg.variant, kind, v1)
                    c2 = self.cell(rho, cfg.variant, kind, v2)
                    both = ~np.isnan(c1.gaps) & ~np.isnan(c2.gaps)
                    if both.sum() < 2:
                        out.append({"algo": cfg.variant, "rho": rho, "from": v1, "to": v2, "ok": None,
                                    "diff": None, "se": None, "n": int(both.sum())})
                        continue
                    d = c2.gaps[both] - c1.gaps[both]
                    diff, se = float(d.mean()), _se(d)
                    out.append({"algo": cfg.variant, "rho": rho, "from": v1, "to": v2, "ok": diff >= -2 * se,
                                "diff": diff, "se": se, "n": int(both.sum())})
        return out

    def rows(self) -> list[dict]:
        rows = []
        for c in self.cells:
            ok = c.n_reached > 0
            rows.append({
                "campaign_id": self.campaign_id,
                "rho": c.rho,
                "algo": c.algo,
                "t": c.t_label if ok else "",
                "level": "" if c.level is None else c.level,
                "gap": c.mean if ok else "",
                "gap_se": c.se if c.n_reached > 1 else "",
                "eps_hat": "",
                "bound_rhs": "",
                "seeds": c.seeds,
            })
        return rows

    def manifest(self) -> dict:
        tr = self.trend()
        return {
            "campaign_id": self.campaign_id,
            "kind": "sweep",
            "plan": self.plan.to_dict(),
            "trend": [{"algo": a, "slice": k, "value": v, "spearman": s} for (a, k, v), s in tr.items()],
            "level_trend": self.level_trend(),
            "horizon_levels": self.horizon("level"),
            "horizon_rounds": self.horizon("t"),
            "unreached": [
                {"rho": c.rho, "algo": c.algo, "level": c.level, "t": c.t, "reached": c.n_reached, "repeats": len(c.gaps)}
                for c in self.cells if not c.reached
            ],
            "cells": [
                {"rho": c.rho, "algo": c.algo, "t": c.t, "level": c.level,
                 "gaps": c.gaps, "rounds": c.rounds, "seeds": c.seeds}
                for c in self.cells
            ],
            "meta": self.meta,
        }


def _seed_label(plan: SweepPlan, k: int) -> str:
    return f"master={plan.seed};rho_index={k};repeats=0-{plan.repeats - 1};test_n={plan.test_size}"


def sweep_rho(plan: SweepPlan, jobs: int = 1, campaign_id: str = "sweep") -> GenGapReport:
    """Run the factorial and reduce in cell-coordinate order."""
    jl = [_CellJob(plan, k, a, r) for k, a, r in plan.cells()]
    results = ordered_map(_run_cell, jl, jobs)
    by = {(j.k, j.a, j.r): res for j, res in zip(jl, results)}
    cells = []
    n_slices = len(plan.checkpoints) + len(plan.levels)
    for k, rho in enumerate(plan.rhos):
        for a, cfg in enumerate(plan.algorithms):
            for s in range(n_slices):
                pts = [by[(k, a, r)][s] for r in range(plan.repeats)]
                gaps = np.array([p.gap if p.reached else np.nan for p in pts])
                rounds = np.array([p.t if p.reached else -1 for p in pts])
                t = plan.checkpoints[s] if s < len(plan.checkpoints) else None
                lv = None if s < len(plan.checkpoints) else plan.levels[s - len(plan.checkpoints)]
                cells.append(GapCell(rho, cfg.variant, t, lv, gaps, rounds, _seed_label(plan, k)))
    seeds = {str(r): cell_seeds(plan.seed, r) for r in range(plan.repeats)}
    return GenGapReport(campaign_id, plan, cells, meta={"derived_seeds": seeds})


# ---------------------------------------------------------------- bound vs measured


@dataclass
class CampaignReport:
    campaign_id: str
    variant: str
    rho: float
    convex: bool
    certified: bool
    rounds: int
    constants: dict
    probes: list[dict]
    epsilon_hat: float
    epsilon_se: float
    gen_gap: dict
    thm1: dict
    generalization: dict
    verdict: bool | None
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [{
            "campaign_id": self.campaign_id,
            "rho": self.rho,
            "algo": self.variant,
            "t": self.rounds,
            "level": "",
            "gap": self.gen_gap["abs_mean"],
            "gap_se": self.gen_gap["abs_se"],
            "eps_hat": p["eps_client"],
            "bound_rhs": p["eps_bound"],
            "seeds": f"master={self.meta['seed']};client={p['client']};repeats=0-{self.meta['repeats'] - 1}"
                     f";oracle_n={self.meta['oracle_size']};test_n={self.meta['test_size']}",
        } for p in self.probes]

    def manifest(self) -> dict:
        d = dict(self.__dict__)
        d["kind"] = "bounds"
        return d


def bound_vs_measured(
    spec: DataGenSpec,
    model: LossModel,
    config: AlgoConfig,
    protocol: StabilityProtocol = StabilityProtocol(),
    seed: int = 0,
    oracle_size: int = 50_000,
    test_size: int = 50_000,
    constant_runs: int = 3,
    jobs: int = 1,
    campaign_id: str = "bounds",
) -> CampaignReport:
    """Join measured twin divergences with the divergence bounds.

    Constants come from the first ``constant_runs`` baseline trajectories
    (identical to those inside the stability estimate). The comparison per
    probed client is the pooled-over-positions mean final divergence plus
    2 SE against the averaged-mode bound; it is a hard verdict only in
    convex certified mode.
    """
    convex = isinstance(model, (LogisticMulticlass, LeastSquares))
    est = estimate_stability(spec, model, config, protocol, seed=seed, oracle_size=oracle_size,
                             test_size=test_size, jobs=jobs)
    recs, feds = [], []
    for r in range(min(constant_runs, protocol.repeats)):
        fed, _ = generate_federation(spec, seeding.derive(seed, "data", r))
        tape = RandomTape.draw(fed.sizes, config, seeding.derive(seed, "tape", r))
        with _single_thread():
            recs.append(run_training(fed, model, config, tape, model.init_params(seeding.rng(seed, "init", r))))
        feds.append(fed)
    oracle = cached_global_set(spec, oracle_size, seed, "oracle")
    C = estimate_constants(model, recs, oracle, feds[0], curvature=not convex, seed=seed)
    prof = total_variation_labels(spec)
    K = max(config.steps_for(spec.num_clients))
    if oracle_size:
        inp = BoundInputs.averaged(est.grad_norm, est.grad_norm_se, L=C.L_hat, beta=C.beta, sigma=C.sigma_hat,
                                   D=prof.D, weights=spec.weights, alpha_tilde=est.alpha_tilde,
                                   n=sum(spec.samples_per_client), K=K, mu=C.mu_hat)
    else:
        raise ValueError("bound evaluation needs oracle gradient norms (oracle_size > 0)")
    reports, probes = [], []
    for i in est.probe_clients:
        rep = divergence_bound(inp, i, config.variant, convex)
        reports.append(rep)
        _, mm, ss = est.client_divergence(i)
        measured = mm + 2 * ss
        probes.append({
            "client": i,
            "divergence_mean": mm,
            "divergence_se": ss,
            "measured_plus_2se": measured,
            "bound": rep.total,
            "bound_band": list(rep.band),
            "heterogeneity": rep.heterogeneity,
            "convergence": rep.convergence,
            "variance": rep.variance,
            "ratio": rep.total / measured if measured > 0 else math.inf,
            "ok": measured <= rep.total,
            "eps_client": est.client_gap[i][0],
            "eps_client_se": est.client_gap[i][1],
            "eps_bound": C.L_hat * rep.total,
        })
    gb = generalization_bound(reports, C.L_hat, spec.weights)
    gen = GenGapEstimate.from_estimate(est) if test_size else None
    thm1 = check_thm1(gen, est).to_dict() if gen is not None else {}
    certified = convex and config.certified_mode
    verdict = all(p["ok"] for p in probes) if certified else None
    return CampaignReport(
        campaign_id=campaign_id,
        variant=config.variant,
        rho=spec.rho,
        convex=convex,
        certified=certified,
        rounds=config.rounds,
        constants={"L_hat": C.L_hat, "beta": C.beta, "sigma_hat": C.sigma_hat, "mu_hat": C.mu_hat, "meta": C.meta},
        probes=probes,
        epsilon_hat=est.epsilon_hat,
        epsilon_se=est.epsilon_se,
        gen_gap={"mean": gen.mean, "se": gen.se, "abs_mean": gen.abs_mean, "abs_se": gen.abs_se} if gen else {},
        thm1=thm1,
        generalization={"max_bound": gb.value, "weighted": gb.weighted, "label": gb.label},
        verdict=verdict,
        meta={"seed": int(seed), "repeats": protocol.repeats, "oracle_size": oracle_size, "test_size": test_size,
              "key": est.key, "stability": est.to_dict(), "heterogeneity": prof.to_dict(),
              "bound_inputs": inp.snapshot()},
    )


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


# ---------------------------------------------------------------- persistence


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def write_csv(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    with open(path, "x", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in CSV_HEADER])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def campaign_dir(out, campaign_id: str) -> Path:
    """A fresh directory for the campaign; never reuses an existing one."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d = out / campaign_id
    n = 1
    while d.exists():
        n += 1
        d = out / f"{campaign_id}-{n}"
    d.mkdir()
    return d


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "x") as fh:
        json.dump(to_jsonable(obj), fh, indent=2, sort_keys=False)
        fh.write("\n")
    return path


def plot_sweep(report: GenGapReport, directory) -> list[Path]:
    """One SVG per algorithm: mean gap vs rho, a line per loss level (and
    per checkpoint), with 2 SE error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for cfg in report.plan.algorithms:
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for kind, v in report.slices():
            cs = [report.cell(r, cfg.variant, kind, v) for r in report.plan.rhos]
            cs = [c for c in cs if c.n_reached > 1]
            if not cs:
                continue
            label = f"loss {v:g}" if kind == "level" else f"T={v}"
            ax.errorbar([c.rho for c in cs], [c.mean for c in cs], yerr=[2 * c.se for c in cs],
                        marker="o", ls="-" if kind == "level" else "--", capsize=2, label=label)
        ax.set_xlabel("heterogeneity rho")
        ax.set_ylabel("|R - R_S|")
        ax.set_title(cfg.variant)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = Path(directory) / f"gap_vs_rho_{cfg.variant}.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths


def persist(report, out, config_dict: dict | None = None, config_hash: str | None = None, plots: bool = True) -> Path:
    """Write CSV, JSON manifest and (for sweeps) SVG plots to a new directory."""
    d = campaign_dir(out, report.campaign_id)
    report.campaign_id = d.name
    write_csv(d / "results.csv", report.rows())
    man = report.manifest()
    man["config"] = config_dict
    man["config_hash"] = config_hash
    man["files"] = ["results.csv", "manifest.json"]
    if plots and isinstance(report, GenGapReport):
        man["files"] += [p.name for p in plot_sweep(report, d)]
    write_json(d / "manifest.json", man)
    return d


def env_out(default) -> str:
    """``FEDSTAB_OUT`` overrides the output directory when set."""
    return os.environ.get("FEDSTAB_OUT") or default


__all__ = [
    "CSV_HEADER", "GapPoint", "empirical_risk", "first_crossing", "measure_gen_gap", "SweepPlan",
    "GapCell", "GenGapReport", "spearman", "sweep_rho", "cell_seeds", "CampaignReport", "bound_vs_measured",
    "write_csv", "read_csv", "campaign_dir", "write_json", "plot_sweep", "persist", "env_out", "VARIANTS",
]
