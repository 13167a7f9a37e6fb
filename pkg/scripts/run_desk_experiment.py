#!/usr/bin/env python3
"""Desk-scale comparison of the four training modes.

Runs fedavg, fedavg+local-noise, the splitting protocol, and its quantized
variant on the shared synthetic task, then writes per-mode gap curves
(mean +- std over seeds) and a communication-complexity table.

Usage: python scripts/run_desk_experiment.py [--seeds 8] [--rounds 300] [--out desk_out]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from fedsplit import orchestrator as orch
from fedsplit.presets import desk_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=8)
    ap.add_argument("--rounds", type=int, default=300)
    ap.add_argument("--out", default="desk_out")
    ap.add_argument("--ldp-scale", type=float, default=0.05)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = orch.build_problem(desk_config("msp", 0, rounds=args.rounds))
    summary = {}
    for mode in ("fedavg", "ldp", "msp", "mspdq"):
        gaps, uploads = [], []
        for seed in range(args.seeds):
            cfg = desk_config(mode, seed, level=256, rounds=args.rounds)
            if mode == "ldp":
                cfg.ldp_scale = args.ldp_scale
            result = orch.run(cfg, bundle)
            gaps.append([m.gap for m in result.metrics])
            uploads.append(orch.comm_counter(result.metrics))
        gaps = np.array(gaps)
        mean, std = gaps.mean(axis=0), gaps.std(axis=0)
        lines = ["t,mean,std"]
        lines += [f"{t+1},{mean[t]!r},{std[t]!r}" for t in range(args.rounds)]
        (out / f"gap_{mode}.csv").write_text("\n".join(lines) + "\n")
        summary[mode] = {
            "final_gap_mean": float(mean[-1]),
            "total_uploads_mean": float(np.mean(uploads)),
        }
        print(f"{mode:7s} final gap {mean[-1]:.3e}  uploads {np.mean(uploads):.0f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"curves written to {out}/")


if __name__ == "__main__":
    main()
