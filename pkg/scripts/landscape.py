"""2-D loss slices around QAT students trained with and without intervention.

Writes ``<out>/<mode>-seed<k>.csv`` with columns alpha, beta, loss.
"""
import argparse
from pathlib import Path

from tiqat import diagnostics as G
from tiqat import experiments as E
from tiqat import tensor as T
from tiqat import train
from tiqat.distill import distill_loss
from tiqat.model import forward
from tiqat.quant import QuantPlan


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="runs/teachers")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--modes", default="none,ti_g")
    p.add_argument("--grid-n", type=int, default=11)
    p.add_argument("--out", default="runs/landscape")
    args = p.parse_args()

    setup = E.DeskSetup(cache_dir=args.cache)
    teacher = setup.teacher("induction", args.seed)
    x = setup.dataset("induction", args.seed).dev_x[:128]
    trace = train.teacher_traces(teacher, x)
    quant = QuantPlan.full(teacher.config.L)

    def loss_fn(m):
        with T.no_grad():
            _, st = forward(m, x, quant=quant)
        return distill_loss(st, trace).total

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in args.modes.split(","):
        student = setup.qat("induction", args.seed, mode).model
        sl = G.landscape_slice(student, loss_fn, args.grid_n, seed=args.seed)
        (out / f"{mode}-seed{args.seed}.csv").write_text(sl.to_csv())
        print(mode, "center loss", sl.center())


if __name__ == "__main__":
    main()
