"""Classification-only vs rotation-augmented training on the synthetic shapes.

Runs both desk configs for each seed and prints a two-block table per seed
plus the per-seed change in mean MSP average precision.

    python3 scripts/desk_benchmark.py --seeds 0 1 2 3 4 --out runs/desk
"""
import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from semanom.experiment import ExperimentConfig, emit_comparison, run_experiment

ROOT = Path(__file__).resolve().parent.parent


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--cls-config", default=str(ROOT / "configs" / "desk_cls.json"))
    p.add_argument("--rot-config", default=str(ROOT / "configs" / "desk_rot.json"))
    args = p.parse_args(argv)

    diffs = []
    for seed in args.seeds:
        records = []
        for title, path in (("Classification-only", args.cls_config), ("Rotation-augmented", args.rot_config)):
            cfg = ExperimentConfig.load(path)
            cfg = dataclasses.replace(cfg, seed=seed, output_dir=str(Path(args.out) / f"seed{seed}" / Path(path).stem))
            records.append((title, run_experiment(cfg, resume=args.resume, log=lambda m: print(m, file=sys.stderr))))
        print(f"\n## seed {seed}\n")
        print(emit_comparison(records))
        (cls, a), (rot, b) = records
        diff = b.average["msp"]["mean"] - a.average["msp"]["mean"]
        diffs.append(diff)
        print(f"MSP mean AP: {a.average['msp']['mean']:.4f} -> {b.average['msp']['mean']:.4f} ({diff:+.4f})")
    print(f"\nmean change over {len(diffs)} seed(s): {np.mean(diffs):+.4f}")


if __name__ == "__main__":
    main()
