"""Two moons: four coupling layers, with and without a K=2 DIF layer in the middle."""
import argparse
import dataclasses
import json

from diflab import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(experiments.MOONS.seeds))
    ap.add_argument("--steps", type=int, default=experiments.MOONS.steps)
    args = ap.parse_args()
    cfg = dataclasses.replace(experiments.MOONS, seeds=tuple(args.seeds), steps=args.steps)
    res = experiments.moons_experiment(cfg)
    for r in res["runs"]:
        print(f"seed {r['seed']}: NF {r['nf']['heldout']:.4f}  DIF {r['dif']['heldout']:.4f}")
    print(f"DIF wins {res['wins']}/{len(res['runs'])}")


if __name__ == "__main__":
    main()
