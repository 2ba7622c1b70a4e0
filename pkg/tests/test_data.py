import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiqat import data as D
from tiqat.errors import ParseError


@pytest.fixture(scope="module")
def sets():
    return {t: D.generate(t, 0, 512, 128) for t in D.TASKS}


def test_shapes_and_vocab(sets):
    for ds in sets.values():
        assert ds.train_x.shape == (512, D.SEQ_LEN) and ds.dev_x.shape == (128, D.SEQ_LEN)
        assert ds.train_x.min() >= 0 and ds.train_x.max() < ds.vocab
        assert np.all(ds.train_x[:, 0] == D.CLS)


def test_splits_disjoint(sets):
    for ds in sets.values():
        train = {tuple(r) for r in ds.train_x}
        assert not train & {tuple(r) for r in ds.dev_x}
        assert len(train) == len(ds.train_x)


def test_copy_pair_contract(sets):
    ds = sets["copy_pair"]
    for x, y in zip(ds.train_x, ds.train_y):
        marked = x[x >= 2 + D.COPY_CONTENT] - D.COPY_CONTENT
        assert len(marked) == 2
        assert y == int(marked[0] == marked[1]) == D.copy_pair_label(x.tolist())


def test_copy_pair_duplicate_marked_is_positive():
    m = 2 + D.COPY_CONTENT
    seq = [0, 3, m + 4, 5, 2, m + 4] + [2] * 10
    assert D.copy_pair_label(seq) == 1
    seq[5] = m + 5
    assert D.copy_pair_label(seq) == 0


def test_copy_pair_balance():
    ds = D.gen_copy_pair(1, 1024, 16)
    assert 0.45 <= ds.train_y.mean() <= 0.55


def test_induction_contract(sets):
    ds = sets["induction"]
    for x, y in zip(ds.train_x, ds.train_y):
        seq = x.tolist()
        assert y == D.induction_label(seq)
        last = len(seq) - 1
        q = max(i for i in range(1, last) if seq[i] == seq[last])
        assert y == seq[q + 1]


def test_induction_label_hand():
    assert D.induction_label([0, 3, 5, 3, 7, 2, 3]) == 7


def test_induction_balance():
    ds = D.gen_induction(2, 4096, 16)
    freq = np.bincount(ds.train_y, minlength=ds.num_classes) / len(ds.train_y)
    assert freq[0] == 0
    content = freq[1:1 + D.INDUCTION_CONTENT]
    assert np.all(np.abs(content - 1 / D.INDUCTION_CONTENT) < 0.03)


def test_jaccard_examples():
    assert D.jaccard([2, 3, 4], [4, 3, 2]) == 1.0
    assert D.jaccard([2, 3], [4, 5]) == 0.0
    assert D.jaccard([2, 3, 4, 5], [4, 5, 6, 7]) == pytest.approx(1 / 3)


def test_similarity_contract(sets):
    ds = sets["similarity"]
    assert ds.is_regression and ds.train_y.dtype == np.float32
    k = (D.SEQ_LEN - 2) // 2
    for x, y in zip(ds.train_x[:100], ds.train_y[:100]):
        assert x[1 + k] == D.SEP
        assert y == np.float32(D.jaccard(x[1:1 + k].tolist(), x[2 + k:2 + 2 * k].tolist()))
    assert 0.0 <= ds.train_y.min() and ds.train_y.max() <= 1.0
    assert ds.train_y.std() > 0.1


@pytest.mark.parametrize("task", D.TASKS)
def test_deterministic_bytes(task):
    assert D.dumps(D.generate(task, 5, 64, 16)) == D.dumps(D.generate(task, 5, 64, 16))
    assert D.dumps(D.generate(task, 5, 64, 16)) != D.dumps(D.generate(task, 6, 64, 16))


@pytest.mark.parametrize("task", D.TASKS)
def test_train_prefix_property(task):
    small, big = D.generate(task, 3, 32, 16), D.generate(task, 3, 128, 16)
    np.testing.assert_array_equal(small.dev_x, big.dev_x)
    np.testing.assert_array_equal(small.train_x, big.train_x[:32])


@pytest.mark.parametrize("task", D.TASKS)
def test_round_trip(task, tmp_path):
    ds = D.generate(task, 0, 20, 10)
    D.save(ds, tmp_path / "d.jsonl")
    back = D.load(tmp_path / "d.jsonl")
    assert D.dumps(back) == D.dumps(ds)
    for a, b in ((ds.train_x, back.train_x), (ds.train_y, back.train_y), (ds.dev_y, back.dev_y)):
        assert a.tobytes() == b.tobytes()


@given(st.sampled_from(D.TASKS), st.integers(0, 2**64 - 1), st.integers(1, 20), st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_round_trip_property(task, seed, n_train, n_dev):
    ds = D.generate(task, seed, n_train, n_dev)
    text = D.dumps(ds)
    assert D.dumps(D.loads(text)) == text


def test_header_format():
    header = json.loads(D.dumps(D.generate("induction", 0, 2, 1)).splitlines()[0])
    assert {"name", "vocab", "n", "seed", "version"} <= set(header)


def test_truncated_file():
    text = D.dumps(D.generate("induction", 0, 5, 5))
    with pytest.raises(ParseError) as exc:
        D.loads("\n".join(text.splitlines()[:4]))
    assert exc.value.line is not None


def test_cut_mid_line():
    text = D.dumps(D.generate("induction", 0, 5, 5))
    with pytest.raises(ParseError) as exc:
        D.loads(text[:-20])
    assert exc.value.line == 11 and exc.value.column is not None


def test_version_mismatch_names_versions():
    lines = D.dumps(D.generate("induction", 0, 2, 1)).splitlines()
    header = json.loads(lines[0])
    header["version"] = 7
    with pytest.raises(ParseError, match="7.*1"):
        D.loads("\n".join([json.dumps(header)] + lines[1:]))


def test_token_out_of_range():
    lines = D.dumps(D.generate("induction", 0, 2, 1)).splitlines()
    row = json.loads(lines[1])
    row["tokens"][3] = 99
    lines[1] = json.dumps(row)
    with pytest.raises(ParseError) as exc:
        D.loads("\n".join(lines))
    assert exc.value.line == 2


def test_unknown_task():
    with pytest.raises(KeyError):
        D.generate("nope", 0, 1, 1)
