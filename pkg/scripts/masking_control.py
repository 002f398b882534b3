"""Does random centre masking help accuracy but hurt anomaly detection?

Trains classifiers on 32x32 synthetic shapes with and without the random
16x16 centre mask and reports held-out test accuracy and MSP average
precision for both.

    python3 scripts/masking_control.py --trials 1 --epochs 10
"""
import argparse
import dataclasses
import sys

from semanom.experiment import DatasetConfig, ExperimentConfig, ScorerSpec, emit_comparison, run_experiment
from semanom.training import TrainConfig


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", default="runs/masking")
    args = p.parse_args(argv)

    base = ExperimentConfig(
        dataset=DatasetConfig(image_size=32),
        model={"widths": [16, 32, 32, 32]},
        train=TrainConfig(epochs=args.epochs, batch_size=32, learning_rate=0.02),
        scorers=[ScorerSpec("msp")],
        trials_per_split=args.trials,
        seed=args.seed,
    )
    blocks = []
    for title, masked in (("Normal", False), ("Random-center-masked", True)):
        cfg = dataclasses.replace(base, train=dataclasses.replace(base.train, mask_augment=masked),
                                  output_dir=f"{args.out}/{'masked' if masked else 'normal'}")
        rec = run_experiment(cfg, log=lambda m: print(m, file=sys.stderr))
        blocks.append((title, rec))
        print(f"{title}: test accuracy {100 * rec.average['test_accuracy']:.2f}, "
              f"MSP AP {100 * rec.average['msp']['mean']:.2f}")
    print()
    print(emit_comparison(blocks))


if __name__ == "__main__":
    main()
