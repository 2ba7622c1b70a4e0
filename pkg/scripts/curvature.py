"""Top Hessian eigenvalue and attention ranking loss of QAT students, per seed."""
import argparse
import json

from tiqat import experiments as E


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--cache", default="runs/teachers")
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()

    setup = E.DeskSetup(cache_dir=args.cache)
    seeds = range(args.seeds)
    for rep in E.hessian_trend(setup, seeds):
        print(json.dumps({"seed": rep.seed, **{m: {"lambda_max": r.eigenvalue, "iters": r.iters,
                                                   "converged": r.converged}
                                               for m, r in rep.reports.items()}}))
    print(json.dumps({"ranking_loss": E.ranking_trend(setup, seeds)}))


if __name__ == "__main__":
    main()
