"""Command-line entry point: ``tiqat <subcommand> ...``.

All relative paths resolve against ``--workdir``. Seeds follow the precedence
flag > ``TIQAT_SEED`` > config file. Failures exit non-zero after printing one
JSON line to stderr: ``{"error": <code>, "pointer": <json pointer>, "message": ...}``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import checkpoint, config as C, data as D, diagnostics as G, train
from . import tensor as T
from .distill import distill_loss
from .errors import ConfigError, DatasetMissing, IndexOutOfRange, TiqatError
from .model import forward
from .quant import QuantPlan
from .schedule import MODES

log = logging.getLogger("tiqat")

SWEEP_COLUMNS = ("mode", "task", "seeds", "mean_metric", "std")


class CliError(Exception):
    def __init__(self, code: str, message: str, pointer: str = ""):
        super().__init__(message)
        self.code, self.message, self.pointer = code, message, pointer


def _path(args, p: str | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else Path(args.workdir) / p


def _load_config(args) -> C.RunConfig:
    path = _path(args, args.config)
    if path is None:
        cfg = C.RunConfig()
    elif not path.exists():
        raise CliError("ConfigMissing", f"config file {path} not found", "")
    else:
        cfg = C.load(path)
    cfg = C.apply_env(cfg)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "mode", None) is not None:
        cfg = C.with_mode(cfg, args.mode)
    if cfg.data.path:
        cfg = cfg.replace(data={"path": str(_path(args, cfg.data.path))})
    return cfg


def _out_dir(args, cfg: C.RunConfig) -> Path:
    return _path(args, args.out or cfg.out_dir)


def _emit(args, text: str) -> None:
    out = _path(args, getattr(args, "out", None))
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args) -> None:
    ds = D.generate(args.task, args.seed, args.train, args.dev)
    out = _path(args, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save(ds, out)


def cmd_train_teacher(args) -> None:
    cfg = _load_config(args)
    result = train.train_teacher(cfg)
    out = train.write_run(result, _out_dir(args, cfg))
    print(json.dumps({"out": str(out), **result.final}))


def cmd_qat(args) -> None:
    cfg = _load_config(args)
    teacher = checkpoint.load_checkpoint(_path(args, args.teacher))
    result = train.qat(cfg, teacher)
    out = train.write_run(result, _out_dir(args, cfg), ternary=True)
    (out / "final.json").write_text(json.dumps(result.final, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), **result.final}))


def _dataset(args) -> D.Dataset:
    path = _path(args, args.data)
    if path is None or not path.exists():
        raise DatasetMissing(f"dataset file {path} not found")
    return D.load(path)


def cmd_eval(args) -> None:
    model = checkpoint.load_checkpoint(_path(args, args.ckpt))
    ds = _dataset(args)
    res = train.evaluate(model, ds, quantized=args.quantized, split=args.split,
                         granularity=args.granularity)
    print(json.dumps(res, sort_keys=True))


def cmd_diagnose(args) -> None:
    student = checkpoint.load_checkpoint(_path(args, args.ckpt))
    teacher = checkpoint.load_checkpoint(_path(args, args.teacher)) if args.teacher else None
    ds = _dataset(args)
    x = ds.split(args.split)[0][:args.batch]
    L = student.config.L
    quant = None if args.full_precision else QuantPlan.full(L)
    g = args.granularity

    def need_teacher():
        if teacher is None:
            raise CliError("MissingArgument", f"diagnose {args.kind} requires --teacher", "/teacher")
        return teacher

    if args.kind == "mse":
        prof = G.layer_mse_profile(student, need_teacher(), [x], quant, g)
        _emit(args, prof.to_json())
    elif args.kind == "hessian":
        gf, theta = G.distill_grad_fn(student, need_teacher(), x, quant is not None, g,
                                      ds.is_regression)
        rep = G.top_eigenvalue(gf, theta, args.iters, args.tol, args.seed or 0)
        _emit(args, rep.to_json())
    elif args.kind == "landscape":
        t = need_teacher()
        trace = train.teacher_traces(t, x)

        def loss_fn(m):
            with T.no_grad():
                _, st = forward(m, x, quant=quant, granularity=g)
            return distill_loss(st, trace, ds.is_regression).total

        sl = G.landscape_slice(student, loss_fn, args.grid_n, args.seed or 0)
        _emit(args, sl.to_csv())
    elif args.kind == "ranking":
        val = G.model_ranking_loss(student, need_teacher(), x, quant, g)
        _emit(args, json.dumps({"ranking_loss": val}) + "\n")
    elif args.kind == "attention":
        xs = ds.split(args.split)[0]
        if not 0 <= args.index < len(xs):
            raise IndexOutOfRange(f"example {args.index} outside [0, {len(xs)})")
        dump = G.dump_attention(student, xs[args.index], args.layer, args.head, quant, g)
        _emit(args, dump.to_json())


def _sweep_job(job: tuple) -> tuple[str, str, int, float]:
    cfg_dict, mode, seed, out_dir, cache_dir = job
    cfg = C.from_dict(cfg_dict)
    cfg = C.with_mode(cfg.replace(seed=seed, data={"seed": seed}), mode)
    teacher = train.cached_teacher(cfg, cache_dir)
    result = train.qat(cfg, teacher)
    run_dir = Path(out_dir) / cfg.data.task / mode / f"seed-{seed}"
    train.write_run(dataclasses.replace(result, config=cfg.replace(out_dir=str(run_dir))), run_dir)
    return cfg.data.task, mode, seed, result.final_metric


def cmd_sweep(args) -> None:
    cfg = _load_config(args)
    modes = args.modes.split(",")
    for m in modes:
        if m not in MODES:
            raise ConfigError("/schedule/mode", f"unknown mode {m!r}")
    tasks = args.tasks.split(",") if args.tasks else [cfg.data.task]
    out = _out_dir(args, cfg)
    cache = _path(args, args.teacher_cache) if args.teacher_cache else out / "teachers"
    jobs = [(cfg.replace(data={"task": t}).to_dict(), m, s, str(out), str(cache))
            for t in tasks for s in range(args.seeds) for m in modes]
    if args.workers > 1:
        # teachers first, serially, so parallel workers never race on the cache
        for t in tasks:
            for s in range(args.seeds):
                train.cached_teacher(cfg.replace(seed=s, data={"task": t, "seed": s}), cache)
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    lines = [",".join(SWEEP_COLUMNS)]
    for t in tasks:
        for m in modes:
            vals = [r[3] for r in results if r[0] == t and r[1] == m]
            std = statistics.stdev(vals) if len(vals) > 1 else 0.0
            lines.append(f"{m},{t},{len(vals)},{statistics.fmean(vals)!r},{std!r}")
    table = "\n".join(lines) + "\n"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(table)
    sys.stdout.write(table)


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tiqat", description=__doc__.splitlines()[0])
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic dataset as JSON lines")
    s.add_argument("--task", required=True, choices=D.TASKS)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--train", type=int, required=True)
    s.add_argument("--dev", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-teacher", help="full-precision fine-tuning")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory (default: config out_dir)")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("qat", help="quantization-aware training against a teacher")
    s.add_argument("--config")
    s.add_argument("--teacher", required=True, help="teacher checkpoint directory")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_qat)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--quantized", action="store_true")
    s.add_argument("--split", default="dev", choices=("train", "dev"))
    s.add_argument("--granularity", default="per_tensor")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("diagnose", help="analysis reports (JSON / CSV)")
    s.add_argument("kind", choices=("mse", "hessian", "landscape", "ranking", "attention"))
    s.add_argument("--ckpt", required=True, help="student checkpoint")
    s.add_argument("--teacher")
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="dev", choices=("train", "dev"))
    s.add_argument("--batch", type=int, default=64, help="examples used by the analysis")
    s.add_argument("--full-precision", action="store_true",
                   help="analyse the latent weights instead of their ternary form")
    s.add_argument("--granularity", default="per_tensor")
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--tol", type=float, default=1e-2)
    s.add_argument("--grid-n", type=int, default=11)
    s.add_argument("--layer", type=int, default=0)
    s.add_argument("--head", type=int, default=0)
    s.add_argument("--index", type=int, default=0, help="example index for attention dumps")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="report file (default: stdout)")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("sweep", help="modes x seeds comparison table")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--modes", default="none,ti_o,ti_m,ti_g")
    s.add_argument("--tasks", help="comma-separated tasks (default: the config's task)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--teacher-cache")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def _error_line(code: str, message: str, pointer: str = "") -> str:
    return json.dumps({"error": code, "pointer": pointer, "message": message})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(_error_line(exc.code, exc.message, exc.pointer), file=sys.stderr)
        return 2
    except CliError as exc:
        print(_error_line(exc.code, exc.message, exc.pointer), file=sys.stderr)
        return 2
    except TiqatError as exc:
        print(_error_line(exc.code, str(exc)), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
