"""Experiment configuration: a validated YAML document.

Layout (all sections optional except ``seed`` and ``data.rho``)::

    seed: 2024
    output_dir: runs/demo
    oracle_size: 50000          # population gradient-norm draws
    test_size: 50000            # fresh test draws for gaps
    data:   {num_clients, num_classes, feature_dim, rho, samples_per_client,
             noise_scale, means_seed, pairs}
    model:  {kind: logistic | least_squares | mlp, hidden}
    algorithms:
      - {variant, rounds, local_steps, batch_size, prox_tol,
         schedule: {kind: theory | constant | inverse_time, alpha0, beta, cap}}
    stability: {probe_clients, probes_per_client, repeats}
    sweep:  {rhos, algorithms, levels, rounds, repeats, checkpoints, early_stop}

``schedule.beta: auto`` (the default for the theory schedule) resolves to the
model's smoothness constant. Errors name the offending field path.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from fedstab.data import DataGenSpec, SpecError
from fedstab.fedalgo import VARIANTS, AlgoConfig, StepSchedule
from fedstab.models import MLP, LeastSquares, LogisticMulticlass, LossModel
from fedstab.stability import StabilityProtocol

PAPER_RHOS = (0.0, 0.2, 0.5, 0.8, 1.0)
PAPER_LEVELS = (0.2, 0.08, 0.05, 0.01, 0.005)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _take(raw, cls, path: str, required: tuple = ()) -> dict:
    """Check keys of a mapping against the dataclass fields of ``cls``."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in fields(cls)}
    for k in raw:
        if k not in names:
            raise ConfigError(_join(path, k), "unknown field")
    for k in required:
        if k not in raw:
            raise ConfigError(_join(path, k), "missing required field")
    return dict(raw)


def _num(v, path, kind=float, lo=None, hi=None, lo_open=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    if kind is int and (not isinstance(v, int) and not float(v).is_integer()):
        raise ConfigError(path, f"expected an integer, got {v!r}")
    v = kind(v)
    if lo is not None and (v < lo or (lo_open and v == lo)):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {v}")
    if hi is not None and v > hi:
        raise ConfigError(path, f"must be <= {hi}, got {v}")
    return v


def _tuple(v, path, item, allow_scalar=False):
    if allow_scalar and not isinstance(v, (list, tuple)):
        return item(v, path)
    if not isinstance(v, (list, tuple)):
        raise ConfigError(path, "expected a list")
    return tuple(item(x, _join(path, k)) for k, x in enumerate(v))


@dataclass(frozen=True)
class DataSection:
    rho: float = 0.0
    num_clients: int = 10
    num_classes: int = 10
    feature_dim: int = 20
    samples_per_client: int | tuple = 100
    noise_scale: float = 0.5
    means_seed: int = 0
    pairs: tuple | None = None

    @classmethod
    def parse(cls, raw, path="data"):
        d = _take(raw, cls, path, required=("rho",))
        out = {}
        out["rho"] = _num(d["rho"], _join(path, "rho"), float, 0.0, 1.0)
        if "num_clients" in d:
            out["num_clients"] = _num(d["num_clients"], _join(path, "num_clients"), int, 1)
        if "num_classes" in d:
            out["num_classes"] = _num(d["num_classes"], _join(path, "num_classes"), int, 2)
        if "feature_dim" in d:
            out["feature_dim"] = _num(d["feature_dim"], _join(path, "feature_dim"), int, 1)
        if "samples_per_client" in d:
            out["samples_per_client"] = _tuple(
                d["samples_per_client"], _join(path, "samples_per_client"),
                lambda x, p: _num(x, p, int, 1), allow_scalar=True)
        if "noise_scale" in d:
            out["noise_scale"] = _num(d["noise_scale"], _join(path, "noise_scale"), float, 0.0)
        if "means_seed" in d:
            out["means_seed"] = _num(d["means_seed"], _join(path, "means_seed"), int, 0)
        if d.get("pairs") is not None:
            out["pairs"] = _tuple(d["pairs"], _join(path, "pairs"),
                                  lambda x, p: _tuple(x, p, lambda c, q: _num(c, q, int, 0)))
        sec = cls(**out)
        try:
            sec.to_spec()
        except SpecError as e:
            raise ConfigError(path, str(e)) from None
        return sec

    def to_spec(self, rho: float | None = None) -> DataGenSpec:
        return DataGenSpec.synthetic(
            num_clients=self.num_clients,
            num_classes=self.num_classes,
            feature_dim=self.feature_dim,
            rho=self.rho if rho is None else rho,
            samples_per_client=self.samples_per_client,
            noise_scale=self.noise_scale,
            means_seed=self.means_seed,
            pairs=self.pairs,
        )


@dataclass(frozen=True)
class ModelSection:
    kind: str = "logistic"
    hidden: int = 32

    @classmethod
    def parse(cls, raw, path="model"):
        d = _take(raw, cls, path)
        kind = d.get("kind", "logistic")
        if kind not in ("logistic", "least_squares", "mlp"):
            raise ConfigError(_join(path, "kind"), f"unknown model kind {kind!r}")
        hidden = _num(d.get("hidden", 32), _join(path, "hidden"), int, 1)
        return cls(kind, hidden)

    def build(self, data: DataSection) -> LossModel:
        if self.kind == "logistic":
            return LogisticMulticlass(data.feature_dim, data.num_classes)
        if self.kind == "least_squares":
            return LeastSquares(data.feature_dim, data.num_classes)
        return MLP(data.feature_dim, data.num_classes, self.hidden)


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "theory"
    alpha0: float | None = None
    beta: float | str = "auto"
    cap: float | None = None

    @classmethod
    def parse(cls, raw, path):
        d = _take(raw, cls, path)
        kind = d.get("kind", "theory")
        if kind not in ("theory", "constant", "inverse_time"):
            raise ConfigError(_join(path, "kind"), f"unknown schedule kind {kind!r}")
        alpha0 = d.get("alpha0")
        if kind != "theory":
            if alpha0 is None:
                raise ConfigError(_join(path, "alpha0"), "missing required field")
            alpha0 = _num(alpha0, _join(path, "alpha0"), float, 0.0, lo_open=True)
        beta = d.get("beta", "auto")
        if beta != "auto":
            beta = _num(beta, _join(path, "beta"), float, 0.0, lo_open=True)
        cap = d.get("cap")
        if cap is not None:
            cap = _num(cap, _join(path, "cap"), float, 0.0, lo_open=True)
        return cls(kind, alpha0, beta, cap)

    def build(self, model_beta: float, K: int) -> StepSchedule:
        if self.kind == "theory":
            beta = model_beta if self.beta == "auto" else float(self.beta)
            return StepSchedule.theory(beta, K, math.inf if self.cap is None else self.cap)
        if self.kind == "constant":
            return StepSchedule.constant(self.alpha0)
        return StepSchedule.inverse_time(self.alpha0)


@dataclass(frozen=True)
class AlgoSection:
    variant: str = "fedavg"
    rounds: int = 50
    local_steps: int | tuple = 5
    batch_size: int | None = 1
    prox_tol: float | None = None
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    @classmethod
    def parse(cls, raw, path):
        d = _take(raw, cls, path, required=("variant", "rounds"))
        variant = d["variant"]
        if variant not in VARIANTS:
            raise ConfigError(_join(path, "variant"), f"expected one of {VARIANTS}, got {variant!r}")
        rounds = _num(d["rounds"], _join(path, "rounds"), int, 0)
        ls = _tuple(d.get("local_steps", 5), _join(path, "local_steps"), lambda x, p: _num(x, p, int, 1), allow_scalar=True)
        bs = d.get("batch_size", 1)
        if bs is not None:
            bs = _num(bs, _join(path, "batch_size"), int, 1)
        tol = d.get("prox_tol")
        if tol is not None:
            tol = _num(tol, _join(path, "prox_tol"), float, 0.0, lo_open=True)
        sched = ScheduleSection.parse(d.get("schedule"), _join(path, "schedule"))
        return cls(variant, rounds, ls, bs, tol, sched)

    @property
    def steps(self) -> int:
        if self.variant == "fedprox":
            return 1
        return self.local_steps if isinstance(self.local_steps, int) else max(self.local_steps)

    def build(self, model_beta: float = 1.0, rounds: int | None = None) -> AlgoConfig:
        """``model_beta`` feeds ``schedule.beta: auto``."""
        local = 1 if self.variant == "fedprox" else self.local_steps
        return AlgoConfig(self.variant, self.rounds if rounds is None else rounds,
                          self.schedule.build(model_beta, self.steps), local, self.batch_size, self.prox_tol)


@dataclass(frozen=True)
class StabilitySection:
    probe_clients: tuple = (0, 1, 2)
    probes_per_client: int = 5
    repeats: int = 50

    @classmethod
    def parse(cls, raw, path="stability"):
        d = _take(raw, cls, path)
        pc = _tuple(d.get("probe_clients", [0, 1, 2]), _join(path, "probe_clients"), lambda x, p: _num(x, p, int, 0))
        ppc = _num(d.get("probes_per_client", 5), _join(path, "probes_per_client"), int, 1)
        rep = _num(d.get("repeats", 50), _join(path, "repeats"), int, 2)
        return cls(pc, ppc, rep)

    def build(self) -> StabilityProtocol:
        return StabilityProtocol(self.probe_clients, self.probes_per_client, self.repeats)


@dataclass(frozen=True)
class SweepSection:
    rhos: tuple = PAPER_RHOS
    algorithms: tuple = VARIANTS
    levels: tuple = PAPER_LEVELS
    rounds: int = 1000
    repeats: int = 20
    checkpoints: tuple = ()
    early_stop: bool = False

    @classmethod
    def parse(cls, raw, path="sweep"):
        d = _take(raw, cls, path)
        rhos = _tuple(d.get("rhos", list(PAPER_RHOS)), _join(path, "rhos"), lambda x, p: _num(x, p, float, 0.0, 1.0))
        algos = tuple(d.get("algorithms", list(VARIANTS)))
        for k, a in enumerate(algos):
            if a not in VARIANTS:
                raise ConfigError(_join(_join(path, "algorithms"), k), f"unknown algorithm {a!r}")
        levels = _tuple(d.get("levels", list(PAPER_LEVELS)), _join(path, "levels"), lambda x, p: _num(x, p, float, 0.0, lo_open=True))
        if any(b >= a for a, b in zip(levels, levels[1:])):
            raise ConfigError(_join(path, "levels"), "loss levels must be strictly decreasing")
        rounds = _num(d.get("rounds", 1000), _join(path, "rounds"), int, 1)
        repeats = _num(d.get("repeats", 20), _join(path, "repeats"), int, 1)
        cps = _tuple(d.get("checkpoints", []), _join(path, "checkpoints"), lambda x, p: _num(x, p, int, 0, rounds))
        early = d.get("early_stop", False)
        if not isinstance(early, bool):
            raise ConfigError(_join(path, "early_stop"), f"expected true or false, got {early!r}")
        return cls(rhos, algos, levels, rounds, repeats, cps, early)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    data: DataSection
    model: ModelSection = field(default_factory=ModelSection)
    algorithms: tuple = ()
    stability: StabilitySection = field(default_factory=StabilitySection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output_dir: str = "runs"
    oracle_size: int = 50_000
    test_size: int = 50_000

    @classmethod
    def parse(cls, raw) -> "ExperimentConfig":
        d = _take(raw, cls, "", required=("seed", "data"))
        seed = _num(d["seed"], "seed", int, 0, 2**64 - 1)
        data = DataSection.parse(d["data"])
        model = ModelSection.parse(d.get("model"))
        algos_raw = d.get("algorithms")
        if algos_raw is None:
            algos = tuple(AlgoSection(v, 50, 5 if v != "fedprox" else 1) for v in VARIANTS)
        else:
            if not isinstance(algos_raw, list) or not algos_raw:
                raise ConfigError("algorithms", "expected a non-empty list")
            algos = tuple(AlgoSection.parse(a, f"algorithms[{k}]") for k, a in enumerate(algos_raw))
        stab = StabilitySection.parse(d.get("stability"))
        for k, i in enumerate(stab.probe_clients):
            if i >= data.num_clients:
                raise ConfigError(f"stability.probe_clients[{k}]", f"client {i} does not exist")
        sweep = SweepSection.parse(d.get("sweep"))
        out = str(d.get("output_dir", "runs"))
        osz = _num(d.get("oracle_size", 50_000), "oracle_size", int, 1)
        tsz = _num(d.get("test_size", 50_000), "test_size", int, 1)
        return cls(seed, data, model, algos, stab, sweep, out, osz, tsz)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, tuple):
                return [clean(x) for x in v]
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return v
        return clean(asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def experiment_dict(self) -> dict:
        """Everything that determines results; the output location is not part of it."""
        d = self.to_dict()
        d.pop("output_dir")
        return d

    @property
    def hash(self) -> str:
        blob = json.dumps(self.experiment_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if output_dir is not None:
            d["output_dir"] = output_dir
        return ExperimentConfig.parse(d)

    def build_model(self) -> LossModel:
        return self.model.build(self.data)

    def algorithm(self, variant: str) -> AlgoSection:
        for a in self.algorithms:
            if a.variant == variant:
                return a
        return AlgoSection(variant, self.sweep.rounds, 5 if variant != "fedprox" else 1)


def loads(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("", f"not valid YAML: {e}") from None
    return ExperimentConfig.parse(raw)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def default_config(seed: int = 0) -> ExperimentConfig:
    return ExperimentConfig.parse({"seed": seed, "data": {"rho": 0.0}})


def to_jsonable(x: Any):
    """Recursively convert numpy containers for JSON output."""
    import numpy as np

    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x
