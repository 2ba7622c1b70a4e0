"""Layer-wise hidden-state MSE against the teacher, before and after QAT.

Writes one row per (seed, stage, layer); stage is ``fresh`` for the
ternarized teacher and the mode name for QAT students (last layer only).
"""
import argparse
import csv
import sys

from tiqat import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="runs/teachers")
    p.add_argument("--task", default="induction")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out")
    args = p.parse_args()

    setup = E.DeskSetup(cache_dir=args.cache)
    res = E.error_propagation(setup, range(args.seeds), args.task)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    w.writerow(["seed", "stage", "layer", "mse"])
    for r in res:
        for layer, v in enumerate(r.fresh_mse):
            w.writerow([r.seed, "fresh", layer, f"{v:.6g}"])
        last = len(r.fresh_mse) - 1
        for mode, v in r.final_mse.items():
            w.writerow([r.seed, mode, last, f"{v:.6g}"])


if __name__ == "__main__":
    main()
