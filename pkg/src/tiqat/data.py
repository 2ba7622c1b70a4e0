"""Synthetic sequence tasks and their JSON-lines file format.

Every sequence starts with a CLS token (id 0) whose final hidden state feeds
the task head. All randomness comes from :class:`~tiqat.rng.Xoshiro256`, so a
dataset is a pure function of ``(task, seed, n_train, n_dev)``.

Tasks
-----
copy_pair
    Every content value has a plain and a marked token id; exactly two
    positions carry marked tokens. Label 1 iff the two marked values agree.
induction
    Predict the token that followed the most recent earlier occurrence of the
    final token. Classes are the full vocabulary.
similarity
    ``CLS a1..ak SEP b1..bk``; the target is the Jaccard overlap of the token
    sets of the two halves.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ParseError
from .rng import Xoshiro256

FORMAT_VERSION = 1
SEQ_LEN = 16

CLS = 0
SEP = 1

COPY_CONTENT = 8
INDUCTION_CONTENT = 8
SIMILARITY_CONTENT = 8


@dataclass
class Dataset:
    name: str
    vocab: int
    n: int
    seed: int
    num_classes: int | None  # None for regression
    train_x: np.ndarray
    train_y: np.ndarray
    dev_x: np.ndarray
    dev_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def is_regression(self) -> bool:
        return self.num_classes is None

    @property
    def out_dim(self) -> int:
        return 1 if self.num_classes is None else self.num_classes

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if which == "train":
            return self.train_x, self.train_y
        if which == "dev":
            return self.dev_x, self.dev_y
        raise KeyError(which)


# -- generators --------------------------------------------------------------

def _copy_pair_example(rng: Xoshiro256, n: int) -> tuple[list[int], int]:
    # plain content value v is token 2+v; its marked twin is 2+COPY_CONTENT+v
    content = lambda: rng.below(COPY_CONTENT)  # noqa: E731
    vals = [content() for _ in range(n - 1)]
    p1 = rng.below(n - 1)
    p2 = rng.below(n - 2)
    p2 += p2 >= p1
    label = rng.below(2)
    if label:
        vals[p2] = vals[p1]
    else:
        while vals[p2] == vals[p1]:
            vals[p2] = content()
    seq = [CLS] + [2 + v for v in vals]
    for p in (p1, p2):
        seq[1 + p] += COPY_CONTENT
    return seq, label


def copy_pair_label(seq) -> int:
    marked = [t - 2 - COPY_CONTENT for t in seq if t >= 2 + COPY_CONTENT]
    if len(marked) != 2:
        raise ValueError("copy_pair sequences carry exactly two marked tokens")
    return int(marked[0] == marked[1])


def _induction_example(rng: Xoshiro256, n: int) -> tuple[list[int], int]:
    content = lambda: 1 + rng.below(INDUCTION_CONTENT)  # noqa: E731
    seq = [CLS] + [content() for _ in range(n - 1)]
    last = n - 1
    p = 1 + rng.below(last - 2)
    seq[last] = seq[p]
    while seq[last - 1] == seq[last]:
        seq[last - 1] = content()
    return seq, induction_label(seq)


def induction_label(seq) -> int:
    last = len(seq) - 1
    for q in range(last - 1, 0, -1):
        if seq[q] == seq[last]:
            return int(seq[q + 1])
    raise ValueError("final token has no earlier occurrence")


def _similarity_example(rng: Xoshiro256, n: int) -> tuple[list[int], float]:
    k = (n - 2) // 2
    content = lambda: 2 + rng.below(SIMILARITY_CONTENT)  # noqa: E731
    a = [content() for _ in range(k)]
    copy_p = rng.uniform()
    b = [a[rng.below(k)] if rng.uniform() < copy_p else content() for _ in range(k)]
    seq = [CLS] + a + [SEP] + b
    seq += [SEP] * (n - len(seq))
    return seq, jaccard(a, b)


def jaccard(a, b) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    return float(np.float32(len(sa & sb) / len(union))) if union else 1.0


_GENERATORS: dict[str, tuple[Callable, int, int | None]] = {
    "copy_pair": (_copy_pair_example, 2 + 2 * COPY_CONTENT, 2),
    "induction": (_induction_example, 1 + INDUCTION_CONTENT, 1 + INDUCTION_CONTENT),
    "similarity": (_similarity_example, 2 + SIMILARITY_CONTENT, None),
}

TASKS = tuple(_GENERATORS)


def generate(task: str, seed: int, n_train: int, n_dev: int, n: int = SEQ_LEN) -> Dataset:
    if task not in _GENERATORS:
        raise KeyError(f"unknown task {task!r}; expected one of {TASKS}")
    if n_train < 1 or n_dev < 1:
        raise ValueError("split sizes must be >= 1")
    make, vocab, num_classes = _GENERATORS[task]
    rng = Xoshiro256(seed)
    seen: set[tuple[int, ...]] = set()
    rows: list[tuple[list[int], float]] = []
    attempts = 0
    while len(rows) < n_train + n_dev:
        seq, label = make(rng, n)
        attempts += 1
        if attempts > 50 * (n_train + n_dev):
            raise RuntimeError(f"{task}: could not draw {n_train + n_dev} distinct sequences")
        key = tuple(seq)
        if key in seen:
            continue
        seen.add(key)
        rows.append((seq, label))
    # dev is drawn first, so the train split for a smaller n_train is a
    # prefix of the train split for a larger one (same seed and n_dev)
    x = np.array([r[0] for r in rows], dtype=np.int64)
    ydtype = np.float32 if num_classes is None else np.int64
    y = np.array([r[1] for r in rows], dtype=ydtype)
    return Dataset(task, vocab, n, seed, num_classes,
                   x[n_dev:], y[n_dev:], x[:n_dev], y[:n_dev])


def gen_copy_pair(seed: int, n_train: int, n_dev: int) -> Dataset:
    return generate("copy_pair", seed, n_train, n_dev)


def gen_induction(seed: int, n_train: int, n_dev: int) -> Dataset:
    return generate("induction", seed, n_train, n_dev)


def gen_similarity(seed: int, n_train: int, n_dev: int) -> Dataset:
    return generate("similarity", seed, n_train, n_dev)


# -- file IO -----------------------------------------------------------------

def _label_json(label, regression: bool):
    return float(label) if regression else int(label)


def dumps(ds: Dataset) -> str:
    header = {
        "name": ds.name, "vocab": ds.vocab, "n": ds.n, "seed": ds.seed,
        "version": FORMAT_VERSION, "num_classes": ds.num_classes,
        "n_train": int(len(ds.train_y)), "n_dev": int(len(ds.dev_y)),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for xs, ys in ((ds.train_x, ds.train_y), (ds.dev_x, ds.dev_y)):
        for tokens, label in zip(xs, ys):
            lines.append(json.dumps({"tokens": tokens.tolist(),
                                     "label": _label_json(label, ds.is_regression)}))
    return "\n".join(lines) + "\n"


def save(ds: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps(ds))


def _parse_line(text: str, lineno: int) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", lineno, exc.colno) from None
    if not isinstance(obj, dict):
        raise ParseError("expected a JSON object", lineno, 1)
    return obj


def loads(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty dataset file", 1, 1)
    header = _parse_line(lines[0], 1)
    for key in ("name", "vocab", "n", "seed", "version", "n_train", "n_dev"):
        if key not in header:
            raise ParseError(f"header missing field {key!r}", 1, 1)
    if header["version"] != FORMAT_VERSION:
        raise ParseError(f"unsupported dataset version {header['version']} "
                         f"(this build reads version {FORMAT_VERSION})", 1, 1)
    n, vocab = header["n"], header["vocab"]
    num_classes = header.get("num_classes")
    total = header["n_train"] + header["n_dev"]
    body = lines[1:]
    if len(body) < total:
        raise ParseError(f"truncated file: expected {total} examples, found {len(body)}",
                         len(lines) + 1, 1)
    x = np.zeros((total, n), dtype=np.int64)
    y = np.zeros(total, dtype=np.float32 if num_classes is None else np.int64)
    for i, raw in enumerate(body[:total]):
        lineno = i + 2
        row = _parse_line(raw, lineno)
        tokens = row.get("tokens")
        if not isinstance(tokens, list) or len(tokens) != n:
            raise ParseError(f"expected {n} tokens", lineno, 1)
        if any(not isinstance(t, int) or t < 0 or t >= vocab for t in tokens):
            raise ParseError(f"token id outside [0, {vocab})", lineno, 1)
        if "label" not in row:
            raise ParseError("missing label", lineno, 1)
        x[i] = tokens
        y[i] = row["label"]
    k = header["n_train"]
    return Dataset(header["name"], vocab, n, header["seed"], num_classes,
                   x[:k], y[:k], x[k:], y[k:])


def load(path: str | Path) -> Dataset:
    return loads(Path(path).read_text())
