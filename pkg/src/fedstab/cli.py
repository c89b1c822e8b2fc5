"""Command-line front end.

    fedstab generate  --config exp.yaml
    fedstab train     --config exp.yaml --out runs --seed 7
    fedstab stability --config exp.yaml --jobs 4
    fedstab sweep     --config exp.yaml
    fedstab bounds    --config exp.yaml
    fedstab verify    [--suite NAME ...]
    fedstab report    runs/sweep-0123abcd

Every command that produces results writes a fresh campaign directory under
the output directory (``FEDSTAB_OUT`` wins over ``--out``, which wins over
the config) holding ``results.csv`` and ``manifest.json``. Failures print a
one-line JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from fedstab import __version__, seeding
from fedstab.config import ConfigError, ExperimentConfig, default_config, load
from fedstab.data import GLOBAL, draw_oracle_set, generate_federation
from fedstab.experiment import (
    SweepPlan,
    bound_vs_measured,
    campaign_dir,
    env_out,
    measure_gen_gap,
    persist,
    read_csv,
    sweep_rho,
    write_csv,
    write_json,
)
from fedstab.fedalgo import RandomTape, run_training
from fedstab.models import MLP, smoothness_constant
from fedstab.stability import cached_global_set, estimate_stability
from fedstab.verify import SUITES, run_suites


def _resolve(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else default_config()
    out = env_out(args.out) if (args.out or env_out(None)) else None
    return cfg.with_overrides(seed=args.seed, output_dir=out)


def _beta(cfg: ExperimentConfig, model, spec) -> float:
    """Smoothness constant for ``beta: auto`` schedules."""
    if not isinstance(model, MLP):
        return smoothness_constant(model)
    probe = draw_oracle_set(spec, GLOBAL, 500, seeding.derive(cfg.seed, "constants", 0))
    return smoothness_constant(model, probe, seed=seeding.seed_int(cfg.seed, "constants", 1))


def _algos(cfg: ExperimentConfig, model, spec, variants=None, rounds=None):
    beta = None
    out = []
    for a in cfg.algorithms if variants is None else [cfg.algorithm(v) for v in variants]:
        if a.schedule.kind == "theory" and a.schedule.beta == "auto" and beta is None:
            beta = _beta(cfg, model, spec)
        out.append(a.build(beta or 1.0, rounds))
    return out


def _checkpoints(T: int) -> list[int]:
    ts = {0, T}
    k = 1
    while k < T:
        ts.add(k)
        k *= 2
    return sorted(ts)


def _persist_plain(cfg: ExperimentConfig, name: str, rows, manifest: dict) -> Path:
    d = campaign_dir(cfg.output_dir, f"{name}-{cfg.hash}")
    manifest = {"campaign_id": d.name, "command": name, "config": cfg.experiment_dict(), "config_hash": cfg.hash, **manifest}
    if rows is not None:
        for r in rows:
            r["campaign_id"] = d.name
        write_csv(d / "results.csv", rows)
    write_json(d / "manifest.json", manifest)
    return d


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig, args) -> Path:
    spec = cfg.data.to_spec()
    fed, prof = generate_federation(spec, seeding.derive(cfg.seed, "data", 0))
    counts = [np.bincount(c.labels, minlength=spec.num_classes).tolist() for c in fed.clients]
    print(f"clients {fed.m}  total n {fed.n}  rho {spec.rho}")
    print("client  n_i   D_i     labels")
    for i, c in enumerate(fed.clients):
        print(f"{i:>6}  {c.n:<5} {prof.D[i]:<7.4f} {counts[i]}")
    print(f"D_max {prof.D_max:.4f}  D_tilde {prof.D_tilde:.4f}")
    man = {
        "spec": spec.to_dict(),
        "sizes": list(fed.sizes),
        "weights": fed.weights,
        "heterogeneity": prof.to_dict(),
        "label_counts": counts,
        "seeds": {"data": seeding.seed_int(cfg.seed, "data", 0)},
    }
    return _persist_plain(cfg, "generate", None, man)


def cmd_train(cfg: ExperimentConfig, args) -> Path:
    spec = cfg.data.to_spec()
    model = cfg.build_model()
    fed, _ = generate_federation(spec, seeding.derive(cfg.seed, "data", 0))
    theta0 = model.init_params(seeding.rng(cfg.seed, "init", 0))
    test = model.prepare(cached_global_set(spec, cfg.test_size, cfg.seed, "test"))
    rows, runs = [], {}
    for algo in _algos(cfg, model, spec):
        tape = RandomTape.draw(fed.sizes, algo, seeding.derive(cfg.seed, "tape", 0))
        rec = run_training(fed, model, algo, tape, theta0)
        pts = measure_gen_gap(rec, fed, model, test, _checkpoints(rec.rounds))
        for p in pts:
            rows.append({"campaign_id": "", "rho": spec.rho, "algo": algo.variant, "t": p.t, "level": "",
                         "gap": p.gap, "gap_se": "", "eps_hat": "", "bound_rhs": "",
                         "seeds": f"master={cfg.seed};repeat=0;test_n={cfg.test_size}"})
        runs[algo.variant] = {
            "config": algo.to_dict(),
            "rounds": rec.rounds,
            "train_loss": rec.train_loss,
            "initial_model": rec.thetas[0],
            "final_model": rec.final,
        }
        print(f"{algo.variant:<9} T={rec.rounds:<5} train {rec.train_loss[-1]:.6f}  gap {pts[-1].gap:.6f}")
    seeds = {s: seeding.seed_int(cfg.seed, s, 0) for s in ("data", "init", "tape")}
    return _persist_plain(cfg, "train", rows, {"runs": runs, "seeds": seeds, "test_size": cfg.test_size})


def cmd_stability(cfg: ExperimentConfig, args) -> Path:
    spec = cfg.data.to_spec()
    model = cfg.build_model()
    rows, ests = [], {}
    for algo in _algos(cfg, model, spec):
        est = estimate_stability(spec, model, algo, cfg.stability.build(), seed=cfg.seed,
                                 test_size=cfg.test_size, jobs=args.jobs)
        for i, (m_, se) in est.client_gap.items():
            rows.append({"campaign_id": "", "rho": spec.rho, "algo": algo.variant, "t": algo.rounds, "level": "",
                         "gap": m_, "gap_se": se, "eps_hat": est.epsilon_hat, "bound_rhs": "",
                         "seeds": f"master={cfg.seed};client={i};repeats=0-{est.repeats - 1}"})
        ests[algo.variant] = est.to_dict()
        print(f"{algo.variant:<9} epsilon_hat {est.epsilon_hat:.6g} (SE {est.epsilon_se:.2g})"
              f"  pointwise {est.epsilon_pointwise:.6g}")
    return _persist_plain(cfg, "stability", rows, {"estimates": ests})


def sweep_plan(cfg: ExperimentConfig) -> SweepPlan:
    spec = cfg.data.to_spec()
    model = cfg.build_model()
    sw = cfg.sweep
    return SweepPlan(
        base=spec,
        model=model,
        algorithms=tuple(_algos(cfg, model, spec, sw.algorithms, sw.rounds)),
        rhos=sw.rhos,
        levels=sw.levels,
        repeats=sw.repeats,
        checkpoints=sw.checkpoints,
        test_size=cfg.test_size,
        seed=cfg.seed,
        early_stop=sw.early_stop,
    )


def cmd_sweep(cfg: ExperimentConfig, args) -> Path:
    plan = sweep_plan(cfg)
    print(f"sweep: {len(plan.rhos)} rho x {len(plan.algorithms)} algorithms x {plan.repeats} repeats, T cap {plan.T}")
    rep = sweep_rho(plan, jobs=args.jobs, campaign_id=f"sweep-{cfg.hash}")
    d = persist(rep, cfg.output_dir, cfg.experiment_dict(), cfg.hash)
    for (algo, kind, v), s in rep.trend().items():
        label = f"level {v:g}" if kind == "level" else f"T={v}"
        print(f"{algo:<9} {label:<12} spearman {('null' if s is None else f'{s:+.3f}')}")
    for algo, lt in rep.level_trend().items():
        s = lt["spearman"]
        print(f"{algo:<9} levels {lt['levels']} averaged: spearman {('null' if s is None else f'{s:+.3f}')}")
    return d


def _bounds_one(job):
    cfg, variant, jobs = job
    spec = cfg.data.to_spec()
    model = cfg.build_model()
    algo = _algos(cfg, model, spec, [variant])[0]
    return bound_vs_measured(spec, model, algo, cfg.stability.build(), seed=cfg.seed,
                             oracle_size=cfg.oracle_size, test_size=cfg.test_size, jobs=jobs,
                             campaign_id=f"bounds-{cfg.hash}")


def cmd_bounds(cfg: ExperimentConfig, args) -> Path:
    reports = [_bounds_one((cfg, a.variant, args.jobs)) for a in cfg.algorithms]
    rows = [r for rep in reports for r in rep.rows()]
    for rep in reports:
        verdict = {True: "PASS", False: "FAIL", None: "n/a (not certified)"}[rep.verdict]
        worst = max(p["measured_plus_2se"] / p["bound"] if p["bound"] > 0 else math.inf for p in rep.probes)
        print(f"{rep.variant:<9} verdict {verdict}  max measured/bound {worst:.3f}  "
              f"eps_hat {rep.epsilon_hat:.4g}  L*max bound {rep.generalization['max_bound']:.4g}")
    return _persist_plain(cfg, "bounds", rows, {"reports": [r.manifest() for r in reports]})


def cmd_verify(args) -> int:
    names = args.suite or None
    results = run_suites(names, seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    d = Path(args.campaign)
    man = json.loads((d / "manifest.json").read_text())
    print(f"campaign {man.get('campaign_id')}  command {man.get('command', man.get('kind'))}  "
          f"config {man.get('config_hash')}")
    if (d / "results.csv").exists():
        rows = read_csv(d / "results.csv")
        print(f"{len(rows)} rows")
        for r in rows[: args.limit]:
            print("  " + ", ".join(f"{k}={r[k]}" for k in ("rho", "algo", "t", "level", "gap", "gap_se", "eps_hat", "bound_rhs")))
    for t in man.get("trend", []):
        s = t["spearman"]
        print(f"trend {t['algo']:<9} {t['slice']}={t['value']}: {('null' if s is None else f'{s:+.3f}')}")
    for algo, lt in man.get("level_trend", {}).items():
        s = lt["spearman"]
        print(f"trend {algo:<9} levels {lt['levels']} averaged: {('null' if s is None else f'{s:+.3f}')}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "stability": cmd_stability,
    "sweep": cmd_sweep,
    "bounds": cmd_bounds,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedstab", description="Federated learning stability lab")
    p.add_argument("--version", action="version", version=f"fedstab {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--out", metavar="DIR", help="output directory (FEDSTAB_OUT overrides)")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed, overrides the config")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=COMMANDS[name].__name__.replace("cmd_", "") + " campaign")
    v = sub.add_parser("verify", parents=[common], help="run the lemma property suites")
    v.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only this suite (repeatable)")
    r = sub.add_parser("report", help="summarize a campaign directory")
    r.add_argument("campaign", metavar="DIR")
    r.add_argument("--limit", type=int, default=20)
    return p


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return cmd_verify(args)
        if args.command == "report":
            return cmd_report(args)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        if args.jobs < 1:
            raise ConfigError("jobs", "must be at least 1")
        cfg = _resolve(args)
        d = COMMANDS[args.command](cfg, args)
        print(f"wrote {d}")
        return 0
    except ConfigError as e:
        return _fail("config", str(e), 2, field=e.path)
    except FileNotFoundError as e:
        return _fail("io", str(e), 2)
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable record
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
