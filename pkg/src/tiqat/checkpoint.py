"""Checkpoint directory: ``manifest.json`` plus little-endian f32 ``weights.bin``."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import CheckpointMismatch
from .model import ModelConfig, TransformerModel, init_model
from .quant import QuantPlan, ternarize

FORMAT_VERSION = 1


def save_checkpoint(model: TransformerModel, path: str | Path,
                    ternary_plan: QuantPlan | None = None, granularity: str = "per_tensor") -> None:
    """Write the model; with ``ternary_plan`` the int8 codes and scales are exported too."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.named_parameters():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "f32",
                        "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    if ternary_plan is not None:
        for i, lw in enumerate(model.layers):
            for m in sorted(ternary_plan.layers[i]):
                tw = ternarize(getattr(lw, m), granularity)
                raw = np.ascontiguousarray(tw.codes, dtype=np.int8).tobytes()
                entries.append({"name": f"ternary.layers.{i}.{m}", "shape": list(tw.codes.shape),
                                "dtype": "i8", "byte_offset": offset, "byte_len": len(raw),
                                "scale": np.atleast_1d(tw.scale).astype(float).tolist()})
                chunks.append(raw)
                offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "config": model.config.to_dict(),
                "tensors": entries}
    (path / "weights.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointMismatch(f"{path}: no manifest.json") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointMismatch(f"checkpoint format {manifest.get('format_version')} "
                                 f"!= supported {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path: str | Path) -> TransformerModel:
    path = Path(path)
    manifest = load_manifest(path)
    blob = (path / "weights.bin").read_bytes()
    model = init_model(ModelConfig(**manifest["config"]), seed=0)
    params = dict(model.named_parameters())
    seen = set()
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            continue
        name = e["name"]
        if name not in params:
            raise CheckpointMismatch(f"unexpected tensor {name!r}")
        start, stop = e["byte_offset"], e["byte_offset"] + e["byte_len"]
        if stop > len(blob):
            raise CheckpointMismatch(f"weights.bin truncated while reading {name!r}")
        arr = np.frombuffer(blob[start:stop], dtype="<f4").astype(np.float32)
        if tuple(e["shape"]) != params[name].shape or arr.size != params[name].data.size:
            raise CheckpointMismatch(f"{name}: shape {e['shape']} vs model {params[name].shape}")
        params[name].data = arr.reshape(e["shape"])
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks {sorted(missing)}")
    return model


def load_ternary(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    path = Path(path)
    manifest = load_manifest(path)
    blob = (path / "weights.bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] == "i8":
            start = e["byte_offset"]
            codes = np.frombuffer(blob[start:start + e["byte_len"]], dtype=np.int8).reshape(e["shape"])
            out[e["name"]] = (codes.copy(), np.asarray(e["scale"], dtype=np.float32))
    return out


def model_hash(model: TransformerModel) -> str:
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()
