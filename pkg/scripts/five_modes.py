"""DIF (K=4) against a 4-component EM mixture on the 1-D five-modes data."""
import argparse
import dataclasses
import json

from diflab import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=experiments.FIVE_MODES.steps)
    args = ap.parse_args()
    cfg = dataclasses.replace(experiments.FIVE_MODES, seed=args.seed, steps=args.steps)
    print(json.dumps(experiments.five_modes_experiment(cfg), indent=2))


if __name__ == "__main__":
    main()
