import math

import numpy as np
import pytest
from scipy import stats

from tiqat import config as C
from tiqat import data as D
from tiqat import train
from tiqat.checkpoint import load_checkpoint, model_hash
from tiqat.errors import CheckpointMismatch, DatasetMissing, NonFiniteLoss
from tiqat.model import init_model
from tiqat.schedule import STEP2

SMALL_MODEL = {"L": 2, "d": 16, "H": 2, "d_ff": 32}


def cfg(**kw):
    base = C.RunConfig().replace(
        model=SMALL_MODEL, data={"task": "induction", "n_train": 64, "n_dev": 64},
        teacher={"iters": 40, "eval_every": 20},
        schedule={"budget": {"total_iters": 40, "eval_every": 10, "batch_size": 16}})
    return base.replace(**kw)


@pytest.fixture(scope="module")
def teacher_run():
    return train.train_teacher(cfg())


def test_lr_schedule():
    lrs = [train.lr_at(i, 100, 1.0, 0.1, 1e-3) for i in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert lrs[-1] == pytest.approx(1e-3)
    assert all(b <= a for a, b in zip(lrs[9:], lrs[10:]))
    assert all(b >= a for a, b in zip(lrs[:9], lrs[1:10]))


def test_adam_first_step_size():
    from tiqat.tensor import Tensor
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = np.array([1.0, -2.0, 0.5], np.float32)
    train.OptimizerState().step([p], 0.1)
    np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1], rtol=1e-5)


def test_batches_cover_epoch():
    gen = train._batches(10, 4, seed=0)
    first = np.concatenate([next(gen), next(gen)])
    assert len(set(first.tolist())) == 8  # no repeats within an epoch; tail dropped


@pytest.mark.slow
def test_copy_pair_teacher_fits_train():
    # reaching 95% train accuracy by iteration 1000 implies reaching it within 2000
    for seed in range(5):
        c = C.RunConfig().replace(seed=seed, data={"task": "copy_pair", "seed": seed, "n_train": 256},
                                  teacher={"iters": 1000, "eval_every": 250})
        rows = train.train_teacher(c).rows
        assert max(r["train_metric"] for r in rows) >= 0.95, f"seed {seed}"


def test_overfit_batch_monotone():
    c = cfg(data={"n_train": 8}, teacher={"iters": 50, "eval_every": 1, "batch_size": 8,
                                          "peak_lr": 1e-3},
            optim={"warmup_frac": 0.0})
    losses = [r["total"] for r in train.train_teacher(c).rows[1:]]
    assert len(losses) == 50
    assert sum(b < a for a, b in zip(losses, losses[1:])) >= 45


def test_zero_iters_is_init(tmp_path):
    c = cfg(teacher={"iters": 0})
    res = train.train_teacher(c)
    train.write_run(res, tmp_path / "t")
    ds = train.teacher_dataset(c)
    init = init_model(train.model_config(c, ds), seed=c.seed)
    assert model_hash(load_checkpoint(tmp_path / "t" / "checkpoint")) == model_hash(init)


def test_teacher_eval_reproduces_metric(teacher_run):
    ds = train.load_dataset(teacher_run.config)
    again = train.evaluate(teacher_run.model, ds, quantized=False)
    assert again == teacher_run.final
    assert teacher_run.rows[-1]["eval_metric"] == again["metric"]


def test_zero_model_quantized_chance():
    c = cfg(data={"task": "copy_pair", "n_dev": 400})
    ds = train.load_dataset(c)
    m = init_model(train.model_config(c, ds), 0)
    for t in m.parameters():
        t.data[...] = 0
    acc = train.evaluate(m, ds, quantized=True)["accuracy"]
    lo, hi = stats.binom.interval(0.999, len(ds.dev_y), 0.5)
    # all-zero logits: argmax picks class 0, so accuracy is the share of label 0
    assert acc == pytest.approx(1 - ds.dev_y.mean())
    assert lo / len(ds.dev_y) <= acc <= hi / len(ds.dev_y)


def test_qat_deterministic_csv(teacher_run, tmp_path):
    c = C.with_mode(cfg(), "ti_g")
    a = train.qat(c, teacher_run.model)
    b = train.qat(c, teacher_run.model)
    assert train.metrics_csv(a.rows) == train.metrics_csv(b.rows)
    assert model_hash(a.model) == model_hash(b.model)


def test_qat_leaves_teacher_untouched(teacher_run):
    before = model_hash(teacher_run.model)
    train.qat(C.with_mode(cfg(), "ti_o"), teacher_run.model)
    assert model_hash(teacher_run.model) == before


def test_mode_none_is_baseline_loop(teacher_run):
    seen = []
    train.qat(C.with_mode(cfg(), "none"), teacher_run.model,
              on_iteration=lambda it, plan, lb: seen.append((plan, lb.l_output)))
    assert len(seen) == 40
    assert all(plan == STEP2 and l_out == 0.0 for plan, l_out in seen)


def test_ti_g_plan_transitions(teacher_run):
    c = C.with_mode(cfg(schedule={"budget": {"total_iters": 40, "step1_fraction": 0.5}}), "ti_g")
    phases = []
    train.qat(c, teacher_run.model, on_iteration=lambda it, plan, lb: phases.append(plan.phase))
    assert phases == ["step1_phase1"] * 10 + ["step1_phase2"] * 10 + ["step2"] * 20


def test_output_loss_follows_plan(teacher_run):
    c = C.with_mode(cfg(schedule={"budget": {"total_iters": 20, "step1_fraction": 0.5}}), "ti_g")
    out = []
    train.qat(c, teacher_run.model, on_iteration=lambda it, plan, lb: out.append(lb.l_output))
    assert all(v > 0 for v in out[:5]) and all(v == 0 for v in out[5:])


def test_metrics_columns(teacher_run, tmp_path):
    res = train.qat(C.with_mode(cfg(), "case2"), teacher_run.model)
    train.write_run(res, tmp_path / "s")
    text = (tmp_path / "s" / "metrics.csv").read_text()
    assert text.splitlines()[0] == "iter,lr,total,l_trm,l_pred,l_output,train_metric,eval_metric,phase"
    rows = train.read_metrics(tmp_path / "s" / "metrics.csv")
    assert [r["iter"] for r in rows] == [0, 10, 20, 30, 40]
    assert "intervened_metric" in res.final


def test_checkpoint_reload_keeps_metric(teacher_run, tmp_path):
    res = train.qat(C.with_mode(cfg(), "ti_m"), teacher_run.model)
    train.write_run(res, tmp_path / "s", ternary=True)
    back = load_checkpoint(tmp_path / "s" / "checkpoint")
    ds = train.load_dataset(res.config)
    assert train.evaluate(back, ds, quantized=True) == res.final


def test_qat_rejects_mismatched_teacher(teacher_run):
    with pytest.raises(CheckpointMismatch):
        train.qat(cfg(model={"d": 8}), teacher_run.model)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(teacher_run):
    bad = teacher_run.model.clone()
    bad.layers[0].W_1.data[...] = 1e38  # finite, so ternarization succeeds
    with pytest.raises(NonFiniteLoss) as exc:
        train.qat(cfg(), bad)
    assert exc.value.diagnostics["iter"] == 0


def test_missing_dataset_file(tmp_path):
    with pytest.raises(DatasetMissing):
        train.load_dataset(cfg(data={"path": str(tmp_path / "none.jsonl")}))


def test_dataset_file_used(tmp_path):
    ds = D.generate("copy_pair", 9, 16, 8)
    D.save(ds, tmp_path / "d.jsonl")
    got = train.load_dataset(cfg(data={"path": str(tmp_path / "d.jsonl")}))
    assert got.train_x.tobytes() == ds.train_x.tobytes()


def test_teacher_pool_prefix():
    c = cfg(teacher={"pool": 200})
    pool, qat_set = train.teacher_dataset(c), train.load_dataset(c)
    assert len(pool.train_y) == 200 and len(qat_set.train_y) == 64
    np.testing.assert_array_equal(pool.train_x[:64], qat_set.train_x)
    np.testing.assert_array_equal(pool.dev_x, qat_set.dev_x)


def test_teacher_cache(tmp_path):
    c = cfg(teacher={"iters": 5, "pool": 100})
    a = train.cached_teacher(c, tmp_path)
    b = train.cached_teacher(c, tmp_path)
    assert model_hash(a) == model_hash(b)
    assert len(list(tmp_path.iterdir())) == 1
    # QAT-only settings share the teacher
    train.cached_teacher(C.with_mode(c, "none").replace(data={"n_train": 32}), tmp_path)
    assert len(list(tmp_path.iterdir())) == 1


def test_regression_metric():
    y = np.array([0.1, 0.5, 0.9, 0.3])
    assert train.task_metric(y[:, None] * 2 + 1, y, True) == pytest.approx(1.0)
    assert train.task_metric(np.zeros((4, 1)), y, True) == 0.0
    assert math.isfinite(train.task_metric(np.array([[0.2, 0.8]]), np.array([1]), False))
