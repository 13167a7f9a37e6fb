"""Command-line surface: run experiments, validate configs, audit privacy,
and export plot data.

Exit codes: 0 success, 2 configuration/validation failure, 3 invariant
violation or failed audit check.  All outputs are a pure function of
(config, seeds); files are written atomically.  FEDSPLIT_THREADS caps the
sweep worker pool.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import orchestrator as orch
from . import privacy_audit
from .errors import ConfigError, FedsplitError, ProtocolIntegrityError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _parse_seeds(spec: str) -> list[int]:
    """Accepts '0..19', '3', or '0,2,5'."""
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s]


def _parse_sweep(items: list[str]) -> dict:
    axes = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"sweep axis {item!r} must look like key=v1,v2")
        key, vals = item.split("=", 1)
        parsed = []
        for v in vals.split(","):
            try:
                parsed.append(json.loads(v))
            except json.JSONDecodeError:
                parsed.append(v)
        axes[key] = parsed
    return axes


def _load_config(path: str, mode_override: str | None) -> dict:
    doc = json.loads(Path(path).read_text())
    if mode_override:
        doc["mode"] = mode_override
    return doc


def _sweep_points(axes: dict) -> list[dict]:
    points = [{}]
    for key, values in axes.items():
        points = [{**p, key: v} for p in points for v in values]
    return points


def _run_id(config: orch.FLConfig, point: dict) -> str:
    parts = [config.mode, f"seed{config.seed}"]
    parts += [f"{k}{v}" for k, v in sorted(point.items())]
    return "_".join(parts)


def _max_workers() -> int:
    env = os.environ.get("FEDSPLIT_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def cmd_run(args) -> int:
    doc = _load_config(args.config, args.mode)
    axes = _parse_sweep(args.sweep)
    seeds = _parse_seeds(args.seeds)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = orch.FLConfig.from_dict(doc)
    base.validate()

    jobs = []
    for point in _sweep_points(axes):
        for seed in seeds:
            cfg = orch.FLConfig.from_dict({**doc, **point, "seed": seed})
            cfg.validate()
            jobs.append((point, cfg))

    bundle_cache: dict[tuple, orch.ProblemBundle] = {}

    def bundle_for(cfg: orch.FLConfig) -> orch.ProblemBundle:
        key = (
            cfg.n_clients, cfg.dim, cfg.spread, cfg.gamma_target, cfg.problem_seed,
            cfg.eig_lo, cfg.eig_hi, cfg.n_samples, cfg.batch_size, cfg.sample_spread,
            cfg.ball_radius,
        )
        if key not in bundle_cache:
            bundle_cache[key] = orch.build_problem(cfg)
        return bundle_cache[key]

    def one(job):
        point, cfg = job
        result = orch.run(cfg, bundle_for(cfg))
        run_dir = out_dir / _run_id(cfg, point)
        run_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(run_dir / "metrics.csv", orch.metrics_to_csv(result.metrics))
        _atomic_write(
            run_dir / "summary.json",
            json.dumps(orch.summary_dict(result), sort_keys=True, indent=2),
        )
        return point, cfg, result

    with ThreadPoolExecutor(max_workers=_max_workers()) as pool:
        results = list(pool.map(one, jobs))

    first_cfg = results[0][1]
    bundle = bundle_for(first_cfg)
    w_tilde = max(
        (r.constants.get("w_tilde_run_max", 0.0) for _, _, r in results), default=0.0
    )
    constants = orch.theorem_constants(
        bundle, first_cfg, w_tilde_max=(w_tilde or None) if first_cfg.mode == "mspdq" else None
    )
    manifest = {
        "config": asdict(first_cfg),
        "sweep": axes,
        "seeds": seeds,
        "constants": constants,
        "runs": [_run_id(cfg, point) for point, cfg, _ in results],
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2))
    print(f"wrote {len(results)} runs to {out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    doc = _load_config(args.config, args.mode)
    cfg = orch.FLConfig.from_dict(doc)
    cfg.validate()
    bundle = orch.build_problem(cfg)
    constants = orch.theorem_constants(bundle, cfg)
    print(json.dumps(constants, sort_keys=True, indent=2))
    return EXIT_OK


def cmd_audit(args) -> int:
    e_mags = tuple(float(x) for x in args.e_mags.split(",")) if args.e_mags else privacy_audit.DEFAULT_E_MAGNITUDES
    seeds = _parse_seeds(args.seeds)
    reports = []
    ok = True
    for seed in seeds:
        report = privacy_audit.run_audit(
            seed=seed,
            n_witness=args.n_witness,
            e_magnitudes=e_mags,
            mutate=args.mutate,
        )
        reports.append({"seed": seed, **report})
        ok &= report["pass"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "audit.json", json.dumps(reports, sort_keys=True, indent=2))
    print(f"audit {'passed' if ok else 'FAILED'}; report at {out / 'audit.json'}")
    return EXIT_OK if ok else EXIT_INTEGRITY


def _load_runs(run_dir: Path) -> tuple[dict, dict]:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    groups: dict[str, list[list[dict]]] = {}
    for run_id in manifest["runs"]:
        rows = []
        csv_path = run_dir / run_id / "metrics.csv"
        lines = csv_path.read_text().strip().splitlines()
        header = lines[0].split(",")
        for line in lines[1:]:
            rows.append(dict(zip(header, (float(x) for x in line.split(",")))))
        parts = [p for p in run_id.split("_") if not p.startswith("seed")]
        groups.setdefault("_".join(parts), []).append(rows)
    return manifest, groups


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    manifest, groups = _load_runs(run_dir)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = orch.FLConfig.from_dict(manifest["config"])
    constants = manifest["constants"]
    all_within = True
    for group, runs in groups.items():
        T = len(runs[0])
        ts = np.arange(1, T + 1)
        gaps = np.array([[row["gap"] for row in rows] for rows in runs])
        bits = np.array([[row["bits"] for row in rows] for rows in runs])
        mean = gaps.mean(axis=0)
        std = gaps.std(axis=0)
        if "D2" in constants:
            bound = orch.bound_curve(constants, cfg, ts)
        else:
            bound = np.full(T, float("inf"))
        within = mean <= bound
        all_within &= bool(within.all())
        lines = ["t,mean,std,bound,within_bound"]
        for idx in range(T):
            lines.append(
                f"{int(ts[idx])},{float(mean[idx])!r},{float(std[idx])!r},"
                f"{float(bound[idx])!r},{int(within[idx])}"
            )
        _atomic_write(out / f"gap_vs_t_{group}.csv", "\n".join(lines) + "\n")
        cum_bits = bits.cumsum(axis=1).mean(axis=0)
        blines = ["t,mean_cumulative_bits"]
        for idx in range(T):
            blines.append(f"{int(ts[idx])},{float(cum_bits[idx])!r}")
        _atomic_write(out / f"bits_vs_t_{group}.csv", "\n".join(blines) + "\n")
    if "nu2" in constants:
        rows = ["rho,measured_uploads,bound"]
        for rho in (float(x) for x in args.rho.split(",")):
            measured = _measured_uploads(groups, constants, rho)
            bound = orch.comm_complexity_bound(rho, constants, cfg.cohort)
            rows.append(f"{rho!r},{measured},{bound}")
        _atomic_write(out / "complexity.csv", "\n".join(rows) + "\n")
    if not all_within:
        print("warning: mean gap exceeded the bound curve somewhere", file=sys.stderr)
    print(f"report written to {out}")
    return EXIT_OK


def _measured_uploads(groups: dict, constants: dict, rho: float) -> int:
    """Uploads until the seed-mean distance ratio first reaches rho; -1 when
    the horizon ends first."""
    dist0 = constants["dist0"]
    firsts = next(iter(groups.values()))
    T = len(firsts[0])
    total = 0
    for t in range(T):
        total += int(np.mean([rows[t]["uploads"] for rows in firsts]))
        ratio = float(np.mean([rows[t]["dist2"] for rows in firsts])) / dist0
        if ratio <= rho:
            return total
    return -1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedsplit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute seeded runs and write metrics")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--mode", default=None)
    p_run.add_argument("--seeds", default="0")
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--sweep", action="append", default=[], metavar="k=v1,v2")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="validate a config and print constants")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--mode", default=None)
    p_val.set_defaults(func=cmd_validate)

    p_aud = sub.add_parser("audit", help="run the privacy audit suite")
    p_aud.add_argument("--seeds", default="0")
    p_aud.add_argument("--out", default="audit")
    p_aud.add_argument("--e-mags", default=None, help="comma list of witness shift magnitudes")
    p_aud.add_argument("--mutate", action="store_true", help="include negative controls")
    p_aud.add_argument("--n-witness", type=int, default=12)
    p_aud.set_defaults(func=cmd_audit)

    p_rep = sub.add_parser("report", help="aggregate run metrics into plot data")
    p_rep.add_argument("--run-dir", required=True)
    p_rep.add_argument("--out", default=None)
    p_rep.add_argument("--rho", default="0.1,0.01")
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolIntegrityError as exc:
        print(f"integrity violation: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except FedsplitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
