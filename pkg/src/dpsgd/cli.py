"""Command-line harness: ``train``, ``sweep``, ``spectrum``, ``bounds``, ``commcost``.

Exit codes: 0 success, 1 configuration error, 2 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import math
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import commcost, theory
from .config import ConfigError, RunConfig, load_config, parse_config
from .engine import TrainingAborted, TrainResult, run_training
from .problems import StochasticProblem
from .topology import SpectralGapWarning, WeightMatrix, WeightMatrixError, build_topology, mixing_decay_curve

log = logging.getLogger("dpsgd")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


# ------------------------------------------------------------------ helpers


def _mean_se(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    se = float(a.std(ddof=1) / math.sqrt(a.size)) if a.size > 1 else 0.0
    return float(a.mean()), se


def iterations_to_threshold(traces, threshold: float, f_star: float = 0.0) -> int | None:
    """First recorded ``k`` where the seed-mean excess loss ``f - f*`` is <= threshold."""
    if not traces or not len(traces[0]):
        return None
    curve = np.mean([t.column("loss_avg") for t in traces], axis=0) - f_star
    hits = np.nonzero(curve <= threshold)[0]
    return int(traces[0].k[hits[0]]) if hits.size else None


def _check_stepsize(cfg: RunConfig, problem: StochasticProblem, W: WeightMatrix, n_iter: int):
    if cfg.algorithm != "dpsgd" or W.rho >= 1.0 or n_iter < 1:
        return
    sched = cfg.schedule()
    s2 = problem.effective_sigma_sq(cfg.algorithm_params.get("batch_size", 1)) or 0.0
    if sched == "corollary2":
        gamma = theory.corollary2_stepsize(problem.known_L, math.sqrt(s2), n_iter, W.n)
    else:
        gamma = sched.gamma
    inp = theory.TheoryInputs(problem.known_L, s2, problem.known_zeta_sq or 0.0, W.rho, W.n, n_iter, gamma, 0.0)
    theory.d_constants(inp)


def run_seeds(cfg: RunConfig, out_dir: Path | None, n: int | None = None) -> dict[str, Any]:
    """Run every seed of ``cfg``; write traces and metadata; return the summary."""
    W = cfg.build_topology() if n is None else build_topology({**cfg.topology, "n": n})
    n = W.n
    problem = cfg.build_problem(n)
    n_iter = cfg.iterations(n)
    if cfg.validate_stepsize:
        _check_stepsize(cfg, problem, W, n_iter)
    params = cfg.algorithm_params
    traces, results = [], []
    for seed in cfg.seeds:
        kwargs = dict(
            algorithm=cfg.algorithm,
            W=W if cfg.algorithm == "dpsgd" else None,
            n_iter=n_iter,
            gamma=cfg.schedule(),
            seed=seed,
            order=params.get("order", "average-then-update"),
            overlap=params.get("overlap", False),
            momentum=params.get("momentum", 0.9 if cfg.algorithm == "eamsgd" else 0.0),
            beta=params.get("beta", 0.9),
            tau=params.get("tau", 1),
            batch_size=params.get("batch_size", 1),
            record_every=cfg.record_every,
            x0=cfg.x0,
            n_jobs=cfg.n_jobs,
            network=cfg.network_model(problem.dim),
        )
        try:
            res = run_training(problem, **kwargs)
        except TrainingAborted as exc:
            if out_dir is not None:
                _write_run(out_dir, seed, cfg, exc.partial)
            raise
        if out_dir is not None:
            _write_run(out_dir, seed, cfg, res)
        traces.append(res.trace)
        results.append(res)

    f_star = problem.f_star
    summary: dict[str, Any] = {
        "n": n,
        "n_iter": n_iter,
        "seeds": list(cfg.seeds),
        "f_star": f_star,
        "seconds_per_iteration": results[0].metadata["seconds_per_iteration"],
    }
    if n_iter == 0:
        summary.update(iterations=0, final_loss=None, final_running_eps=None)
    else:
        fl = _mean_se([t.loss_avg[-1] for t in traces])
        fe = _mean_se([t.running_eps[-1] for t in traces])
        summary.update(
            iterations=n_iter,
            final_loss={"mean": fl[0], "se": fl[1]},
            final_running_eps={"mean": fe[0], "se": fe[1]},
        )
    if cfg.loss_threshold is not None:
        summary["loss_threshold"] = cfg.loss_threshold
        summary["iterations_to_threshold"] = iterations_to_threshold(traces, cfg.loss_threshold, f_star)
    if out_dir is not None:
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _write_run(out_dir: Path, seed: int, cfg: RunConfig, res: TrainResult):
    out_dir.mkdir(parents=True, exist_ok=True)
    res.trace.to_csv(out_dir / f"trace_seed{seed}.csv")
    meta = {"config": cfg.to_dict(), "run": res.metadata}
    (out_dir / f"meta_seed{seed}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _out_dir(args, cfg: RunConfig | None = None, default: str = "out") -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(default)


def _say(args, msg: str):
    if not args.quiet:
        print(msg)


def _apply_seeds(cfg: RunConfig, seeds: str | None):
    if seeds:
        try:
            cfg.seeds = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"--seeds: expected comma-separated integers, got {seeds!r}") from None
        if not cfg.seeds:
            raise ConfigError("--seeds: empty list")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_seeds(cfg, args.seeds)
    out = _out_dir(args, cfg)
    summary = run_seeds(cfg, out)
    _say(args, json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


_AXES = ("n", "algorithm", "gamma", "topology", "network")


def _sweep_cells(data: dict[str, Any]):
    axes = data.get("axes")
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("axes: expected a non-empty object")
    unknown = set(axes) - set(_AXES)
    if unknown:
        raise ConfigError(f"axes: unknown axes {sorted(unknown)}; allowed {list(_AXES)}")
    for name, values in axes.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"axes.{name}: expected a non-empty list")
    names = [a for a in _AXES if a in axes]
    base = {k: v for k, v in data.items() if k != "axes"}
    for combo in itertools.product(*(list(enumerate(axes[a])) for a in names)):
        cell = copy.deepcopy(base)
        label: dict[str, Any] = {}
        for name, (idx, value) in zip(names, combo):
            if name == "n":
                cell["topology"] = {**cell.get("topology", {}), "n": value}
            elif name == "algorithm":
                cell["algorithm"] = value
            elif name == "gamma":
                cell["stepsize"] = value if value == "corollary2" else {"kind": "constant", "gamma": value}
            elif name == "topology":
                cell["topology"] = {**cell.get("topology", {}), "name": value}
            elif name == "network":
                cell["network"] = value
                value = idx
            label[name] = value
        yield label, cell


def _sort_key(label):
    return tuple((str(type(label.get(a)).__name__), label.get(a)) for a in _AXES if a in label)


def cmd_sweep(args) -> int:
    path = Path(args.config)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    out = Path(args.out or data.get("output_dir") or "out")
    cells = sorted(_sweep_cells(data), key=lambda c: _sort_key(c[0]))
    rows = []
    worst = EXIT_OK
    for i, (label, cell) in enumerate(cells):
        cfg = parse_config(cell, path.parent)
        _apply_seeds(cfg, args.seeds)
        cell_dir = out / f"cell{i:03d}"
        row = {a: label.get(a, "") for a in _AXES}
        try:
            summary = run_seeds(cfg, cell_dir)
            row.update(
                status="ok",
                final_loss=(summary["final_loss"] or {}).get("mean", ""),
                final_running_eps=(summary["final_running_eps"] or {}).get("mean", ""),
                iterations_to_threshold=summary.get("iterations_to_threshold", ""),
                seconds_per_iteration=summary["seconds_per_iteration"],
            )
        except theory.StepSizeTooLarge as exc:
            row.update(status=f"step-size-too-large (gamma_max={exc.gamma_max:.6g})")
        except TrainingAborted as exc:
            row.update(status=f"numeric-failure at k={exc.k} node={exc.node}")
            worst = EXIT_NUMERIC
        row["cell"] = f"cell{i:03d}"
        rows.append(row)
        _say(args, f"{row['cell']} {label} -> {row['status']}")
    fields = ["cell", *_AXES, "status", "final_loss", "final_running_eps",
              "iterations_to_threshold", "seconds_per_iteration"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k, "")) for k in fields})
    return worst


def _topology_from_args(args) -> WeightMatrix:
    if args.config:
        data = json.loads(Path(args.config).read_text())
        spec = data.get("topology", data)
        if "file" in spec and not Path(spec["file"]).is_absolute():
            spec = {**spec, "file": str(Path(args.config).parent / spec["file"])}
        return build_topology(spec)
    if args.matrix:
        return build_topology({"file": args.matrix})
    if args.topology is None or args.n is None:
        raise ConfigError("spectrum: give --config, --matrix, or --topology NAME --n N")
    return build_topology({"name": args.topology, "n": args.n})


def spectrum_report(W: WeightMatrix, k_max: int = 100) -> dict[str, Any]:
    worst, bound = mixing_decay_curve(W, k_max)
    ok = bool(np.all(worst <= bound + 1e-12))
    lam = W.eigenvalues
    return {
        "name": W.name,
        "n": W.n,
        "lambda_max": float(lam[0]),
        "lambda_2": float(lam[1]) if W.n > 1 else None,
        "lambda_min": float(lam[-1]),
        "rho": W.rho,
        "one_minus_sqrt_rho": 1.0 - math.sqrt(W.rho),
        "mixing_check": "pass" if ok else "FAIL",
        "assumption_violated": W.n > 1 and W.rho >= 1.0 - 1e-12,
    }


def cmd_spectrum(args) -> int:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpectralGapWarning)
        W = _topology_from_args(args)
    rep = spectrum_report(W)
    lines = [
        f"topology            {rep['name']}",
        f"n                   {rep['n']}",
        f"lambda_max          {rep['lambda_max']:.12g}",
        f"lambda_2            {rep['lambda_2'] if rep['lambda_2'] is None else format(rep['lambda_2'], '.12g')}",
        f"lambda_min          {rep['lambda_min']:.12g}",
        f"rho                 {rep['rho']:.12g}",
        f"1 - sqrt(rho)       {rep['one_minus_sqrt_rho']:.12g}",
        f"mixing decay k<=100 {rep['mixing_check']}",
    ]
    if rep["assumption_violated"]:
        lines.append("WARNING: rho = 1, Assumption 1-2 violated (no consensus)")
    print("\n".join(lines))
    return EXIT_OK


_BOUND_KEYS = ("L", "sigma_sq", "zeta_sq", "rho", "n", "K", "gamma", "f0_minus_fstar")
_BOUND_COLS = ("D1", "D2", "theorem1_rhs", "corollary2_rhs", "K_min_eq5", "K_min_eq6", "theorem4_rhs")


def _bounds_inputs(row: dict[str, Any], where: str) -> theory.TheoryInputs:
    missing = [k for k in _BOUND_KEYS if k not in row]
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")
    vals = dict(row)
    corollary = vals["gamma"] == "corollary2"
    if corollary:
        vals["gamma"] = theory.corollary2_stepsize(vals["L"], math.sqrt(vals["sigma_sq"]), vals["K"], vals["n"])
    try:
        return theory.TheoryInputs(**{k: vals[k] for k in _BOUND_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def cmd_bounds(args) -> int:
    if args.config:
        data = json.loads(Path(args.config).read_text())
        rows = data.get("rows", [data])
    else:
        rows = [{k: getattr(args, k) for k in _BOUND_KEYS}]
        if any(v is None for v in rows[0].values()):
            raise ConfigError("bounds: give --config or all of " + ", ".join(f"--{k}" for k in _BOUND_KEYS))
        if rows[0]["gamma"] != "corollary2":
            rows[0]["gamma"] = float(rows[0]["gamma"])
    table = []
    for i, r in enumerate(rows):
        inp = _bounds_inputs(r, f"rows[{i}]")
        table.append((inp, theory.bounds_table(inp)))

    def fmt(v):
        return f"{v:.6g}" if isinstance(v, float) else str(v)

    for inp, row in table:
        print(
            f"L={inp.L:g} sigma^2={inp.sigma_sq:g} zeta^2={inp.zeta_sq:g} rho={inp.rho:.6g} "
            f"n={inp.n} K={inp.K} gamma={inp.gamma:.6g} f0-f*={inp.f0_minus_fstar:g}"
        )
        for c in _BOUND_COLS:
            print(f"  {c:<16}{fmt(row[c])}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bounds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*_BOUND_KEYS, *_BOUND_COLS])
            for inp, row in table:
                w.writerow([repr(getattr(inp, k)) for k in _BOUND_KEYS] + [row[c] if isinstance(row[c], str) else repr(row[c]) for c in _BOUND_COLS])
    return EXIT_OK


def cmd_commcost(args) -> int:
    if not args.config:
        raise ConfigError("commcost: --config is required")
    data = json.loads(Path(args.config).read_text())
    try:
        cells = commcost.crossover_report(
            data["bandwidths"], data["latencies"], data["n"], data["msg_size"],
            data["compute_time"], data.get("deg", 2), data.get("tau"), data.get("overlap", False),
        )
    except KeyError as exc:
        raise ConfigError(f"commcost: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"commcost: {exc}") from None
    out = Path(args.out or data.get("output_dir") or "out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "commcost.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pattern", "bandwidth", "latency", "seconds"])
        for p, bw, lat, s in commcost.crossover_rows(cells):
            w.writerow([p, repr(float(bw)), repr(float(lat)), repr(s)])
    for c in cells:
        flags = [f for f, on in (("decentralized>=5x", c.decentralized_5x), ("within-20%", c.within_20pct)) if on]
        _say(args, f"bw={c.bandwidth:g} lat={c.latency:g} " + " ".join(f"{p}={s:.4g}" for p, s in c.seconds.items()) + (" [" + ",".join(flags) + "]" if flags else ""))
    return EXIT_OK


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsgd", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seeds", help="comma-separated seeds, overrides the config")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="run one configuration over its seeds")
    sub.add_parser("sweep", parents=[common], help="cross product of configuration axes")
    sp = sub.add_parser("spectrum", parents=[common], help="eigenvalues and rho of a topology")
    sp.add_argument("--topology", choices=["ring", "complete", "identity"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--matrix", help="plain-text matrix file")
    bp = sub.add_parser("bounds", parents=[common], help="table of convergence bounds")
    for k in _BOUND_KEYS:
        bp.add_argument(f"--{k}", type=(str if k == "gamma" else int if k in ("n", "K") else float))
    sub.add_parser("commcost", parents=[common], help="cost-model crossover grid as CSV")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "spectrum": cmd_spectrum,
    "bounds": cmd_bounds,
    "commcost": cmd_commcost,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for numeric failures
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except TrainingAborted as exc:
        print(f"error: {exc} (partial trace written)", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, WeightMatrixError, theory.StepSizeTooLarge) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: {args.config}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
