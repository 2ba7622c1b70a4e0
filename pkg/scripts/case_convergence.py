"""Iterations for the four controlled quantization cases to reach 95% of the teacher."""
import argparse
import json

from tiqat import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--cache", default="runs/teachers")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--eval-every", type=int, default=10)
    args = p.parse_args()

    setup = E.DeskSetup(cache_dir=args.cache, eval_every=args.eval_every)
    for s in range(args.seeds):
        print(json.dumps({"seed": s, **E.case_convergence(setup, s)}))


if __name__ == "__main__":
    main()
