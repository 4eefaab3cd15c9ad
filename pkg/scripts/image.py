"""DIF (K=40, 3x128 weight net) against a 40-component EM mixture on an image density.

Without --pgm the built-in 64x64 test card is used.
"""
import argparse
import dataclasses
import json

from diflab import experiments, targets


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pgm", help="plain-text (P2) grayscale image")
    ap.add_argument("--write-card", metavar="PATH", help="save the built-in test card as PGM and exit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=experiments.IMAGE.steps)
    args = ap.parse_args()
    if args.write_card:
        targets.write_pgm(args.write_card, experiments.synthetic_image())
        return
    image = targets.read_pgm(args.pgm) if args.pgm else None
    cfg = dataclasses.replace(experiments.IMAGE, seed=args.seed, steps=args.steps)
    print(json.dumps(experiments.image_experiment(cfg, image=image), indent=2))


if __name__ == "__main__":
    main()
