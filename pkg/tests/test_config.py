import json

import pytest

from tiqat import config as C
from tiqat.errors import ConfigError


def test_defaults_round_trip(tmp_path):
    cfg = C.RunConfig()
    C.save(cfg, tmp_path / "c.json")
    back = C.load(tmp_path / "c.json")
    assert back == cfg
    assert back.to_json() == cfg.to_json()


def test_desk_defaults():
    cfg = C.RunConfig()
    m = cfg.model
    assert (m.L, m.d, m.H, m.d_ff, m.n, m.attn_scale) == (4, 32, 4, 64, 16, "sqrt_d")
    assert cfg.optim.peak_lr == 1e-3 and cfg.optim.warmup_frac == 0.1
    assert cfg.optim.end_lr_ratio == 1e-3
    assert cfg.schedule.budget.step1_fraction == 0.1 and cfg.schedule.budget.phase_split == 0.5
    assert cfg.quant.granularity == "per_tensor" and cfg.student_init == "teacher"
    assert cfg.label_loss is False


def test_partial_document_fills_defaults():
    cfg = C.from_dict({"schedule": {"mode": "none"}, "seed": 4})
    assert cfg.schedule.mode == "none" and cfg.seed == 4 and cfg.model.d == 32


@pytest.mark.parametrize("doc, pointer", [
    ({"model": {"d": "big"}}, "/model/d"),
    ({"model": {"wings": 2}}, "/model/wings"),
    ({"schedule": {"budget": {"step1_fraction": 0.9}}}, "/schedule/budget/step1_fraction"),
    ({"schedule": {"mode": "ti_x"}}, "/schedule/mode"),
    ({"quant": {"granularity": "per_col"}}, "/quant/granularity"),
    ({"optim": {"peak_lr": True}}, "/optim/peak_lr"),
    ({"model": {"d": 30, "H": 4}}, "/model/H"),
    ({"schedule": []}, "/schedule"),
])
def test_errors_carry_pointer(doc, pointer):
    with pytest.raises(ConfigError) as exc:
        C.from_dict(doc)
    assert exc.value.pointer == pointer


def test_step1_message():
    with pytest.raises(ConfigError, match="step1_fraction exceeds 0.5"):
        C.from_dict({"schedule": {"budget": {"step1_fraction": 0.9}}})


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{nope")
    with pytest.raises(ConfigError, match="line 1"):
        C.load(tmp_path / "c.json")


def test_env_seed_override():
    cfg = C.RunConfig()
    assert C.apply_env(cfg, {"TIQAT_SEED": "17"}).seed == 17
    assert C.apply_env(cfg, {}).seed == cfg.seed
    with pytest.raises(ConfigError):
        C.apply_env(cfg, {"TIQAT_SEED": "x"})


def test_with_mode():
    assert C.with_mode(C.RunConfig(), "case3").schedule.two_step_enabled is False
    assert C.with_mode(C.RunConfig(), "ti_g").schedule.two_step_enabled is True


def test_replace_nested():
    cfg = C.RunConfig().replace(schedule={"budget": {"total_iters": 7}})
    assert cfg.schedule.budget.total_iters == 7 and cfg.schedule.budget.batch_size == 32


def test_json_is_sorted_and_complete():
    doc = json.loads(C.RunConfig().to_json())
    assert list(doc) == sorted(doc)
    assert doc["schedule"]["budget"]["eval_every"] == 20
