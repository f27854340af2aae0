"""Correspondence-weighting transformer, forward pass only.

Embedding rows -> input projection -> pre-norm self-attention blocks ->
per-row MLP score -> softmax over all rows.  There is no positional
encoding, so the map is permutation-equivariant in its rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_LN_EPS = 1e-5


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    blocks: int = 2
    model_dim: int = 32
    heads: int = 2
    input_dim: int = 48

    def __post_init__(self):
        if self.blocks < 1:
            raise FusionError("blocks must be >= 1")
        if self.heads < 1 or self.model_dim % self.heads:
            raise FusionError("model_dim must be divisible by heads")
        if self.input_dim < 1:
            raise FusionError("input_dim must be >= 1")


# Dimensions reported for the full-scale model.
PAPER_CONFIG = FusionConfig(blocks=2, model_dim=768, heads=4, input_dim=48)


@dataclass(frozen=True, eq=False)
class FusionParams:
    config: FusionConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = _shapes(self.config)
        if set(expected) != set(self.tensors):
            raise FusionError("parameter names do not match the configuration")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise FusionError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise FusionError(f"{name}: non-finite values")

    def save(self, directory) -> None:
        """JSON manifest plus one little-endian float64 blob per tensor."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"config": self.config.__dict__, "tensors": {}}
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            fname = f"{name}.bin"
            (directory / fname).write_bytes(arr.astype("<f8").tobytes())
            manifest["tensors"][name] = {"file": fname, "shape": list(arr.shape)}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "FusionParams":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        cfg = FusionConfig(**manifest["config"])
        tensors = {}
        for name, meta in manifest["tensors"].items():
            raw = np.frombuffer((directory / meta["file"]).read_bytes(), dtype="<f8")
            tensors[name] = raw.reshape(meta["shape"]).astype(float)
        return cls(cfg, tensors)


def _shapes(cfg: FusionConfig) -> dict[str, tuple[int, ...]]:
    d = cfg.model_dim
    shapes = {"in.w": (cfg.input_dim, d), "in.b": (d,)}
    for i in range(cfg.blocks):
        p = f"block{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, 4 * d), p + "ff.b1": (4 * d,),
            p + "ff.w2": (4 * d, d), p + "ff.b2": (d,),
        })
    shapes.update({"head.w1": (d, d), "head.b1": (d,), "head.w2": (d, 1), "head.b2": (1,)})
    return shapes


def init_params(cfg: FusionConfig = FusionConfig(), seed: int = 0) -> FusionParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, 0.02, size=shape)
    return FusionParams(cfg, tensors)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * g + b


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _attention(h, p: dict, prefix: str, heads: int):
    n, d = h.shape
    dh = d // heads
    q = (h @ p[prefix + "wq"] + p[prefix + "bq"]).reshape(n, heads, dh).transpose(1, 0, 2)
    k = (h @ p[prefix + "wk"] + p[prefix + "bk"]).reshape(n, heads, dh).transpose(1, 0, 2)
    v = (h @ p[prefix + "wv"] + p[prefix + "bv"]).reshape(n, heads, dh).transpose(1, 0, 2)
    a = softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh), axis=-1)
    out = (a @ v).transpose(1, 0, 2).reshape(n, d)
    return out @ p[prefix + "wo"] + p[prefix + "bo"]


def fusion_logits(params: FusionParams, e) -> np.ndarray:
    cfg, p = params.config, params.tensors
    e = np.asarray(e, dtype=float)
    if e.ndim != 2 or e.shape[1] != cfg.input_dim or e.shape[0] < 1:
        raise FusionError(f"expected an (N, {cfg.input_dim}) embedding matrix with N >= 1")
    x = e @ p["in.w"] + p["in.b"]
    for i in range(cfg.blocks):
        pre = f"block{i}."
        x = x + _attention(layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre + "attn.", cfg.heads)
        h = layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        x = x + gelu(h @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
    return (gelu(x @ p["head.w1"] + p["head.b1"]) @ p["head.w2"] + p["head.b2"])[:, 0]


def fusion_forward(params: FusionParams, e) -> np.ndarray:
    """Per-correspondence weights: positive, summing to one over the rows of ``e``."""
    return softmax(fusion_logits(params, e))
