"""Mean final dev metric per (task, mode) over seeds at equal QAT budget.

    python scripts/compare_modes.py --cache runs/teachers --out runs/modes.csv
"""
import argparse
import csv
import sys

from tiqat import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="runs/teachers")
    p.add_argument("--tasks", default=",".join(E.TASKS))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--modes", default="none,ti_o,ti_m,ti_g")
    p.add_argument("--out")
    args = p.parse_args()

    setup = E.DeskSetup(cache_dir=args.cache)
    table = E.mode_comparison(setup, args.tasks.split(","), range(args.seeds), args.modes.split(","))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    w.writerow(["task", "mode", "mean", "std", "per_seed"])
    for task, per_mode in table.items():
        for mode, vals in per_mode.items():
            mean, std = E.summarize(vals)
            w.writerow([task, mode, f"{mean:.4f}", f"{std:.4f}", " ".join(f"{v:.4f}" for v in vals)])


if __name__ == "__main__":
    main()
