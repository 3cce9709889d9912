"""Parameter container, initialization and checkpoint serialization."""

import json
import os

import numpy as np

from .. import io, rng
from .config import ModelConfig


class Parameters:
    """Named tensors with a stable iteration order (creation order)."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.tensors.values())

    def astype(self, dtype) -> "Parameters":
        return Parameters({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def tensor_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Analytic shape map; the ground truth for parameter counting."""
    d, k, f = cfg.hidden_dim, cfg.codebook_size, cfg.feature_dim
    shapes: dict[str, tuple[int, ...]] = {
        "id_emb": (cfg.vocab_size, d),
        "dnn.W_a": (f, d),
        "dnn.b_a": (d,),
        "dnn.W_b": (f, d),
        "dnn.b_b": (d,),
        "dnn.W_out": (d, d),
        "dnn.b_out": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        shapes[f"{p}.W_in"] = (d, 4 * d)
        shapes[f"{p}.b_in"] = (4 * d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.W_o"] = (d, d)
        shapes[f"{p}.b_o"] = (d,)
        if cfg.use_moe:
            h = cfg.expert_hidden
            shapes[f"{p}.ln3.g"] = (d,)
            shapes[f"{p}.ln3.b"] = (d,)
            shapes[f"{p}.gate.W"] = (d, cfg.n_experts)
            shapes[f"{p}.experts.W1"] = (cfg.n_experts, d, h)
            shapes[f"{p}.experts.b1"] = (cfg.n_experts, h)
            shapes[f"{p}.experts.W2"] = (cfg.n_experts, h, d)
            shapes[f"{p}.experts.b2"] = (cfg.n_experts, d)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["sid1.W_q"] = (d, d)
    shapes["sid1.W_k"] = (d, d)
    shapes["sid1.W_v"] = (d, d)
    shapes["sid1.W_p"] = (d, k)
    shapes["sid1.b_p"] = (k,)
    shapes["sid2.code_emb"] = (k, d)
    shapes["sid2.W_f"] = (2 * d, d)
    shapes["sid2.b_f"] = (d,)
    shapes["sid2.W_p"] = (d, k)
    shapes["sid2.b_p"] = (k,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in tensor_shapes(cfg).values())


def init_parameters(cfg: ModelConfig, seed: int, dtype=np.float32) -> Parameters:
    """Seeded init: N(0, 1/sqrt(fan_in)) weights, damped residual projections,
    unit LayerNorm gains, zero biases."""
    if cfg.vocab_size < 2:
        raise ValueError("vocab_size must be set before init (items + pad row)")
    g = rng.make_rng(seed, rng.INIT)
    residual_scale = 1.0 / np.sqrt(2.0 * max(1, cfg.n_layers))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg).items():
        base = name.rsplit(".", 1)[-1]
        if base in ("b", "b_a", "b_b", "b_out", "b_in", "b_o", "b_f", "b_p", "b1", "b2"):
            arr = np.zeros(shape)
        elif base == "g":
            arr = np.ones(shape)
        elif name == "id_emb" or name == "sid2.code_emb":
            arr = g.standard_normal(shape) / np.sqrt(cfg.hidden_dim)
        else:
            fan_in = shape[-2] if len(shape) >= 2 else shape[0]
            arr = g.standard_normal(shape) / np.sqrt(fan_in)
            if base in ("W_o",) or name.endswith("experts.W2"):
                arr *= residual_scale
        tensors[name] = arr.astype(dtype)
    return Parameters(tensors)


def _blob_name(name: str) -> str:
    return name.replace(".", "__") + ".bin"


def save_checkpoint(path: str, cfg: ModelConfig, params: Parameters) -> None:
    io.ensure_dir(path)
    io.ensure_dir(os.path.join(path, "tensors"))
    manifest = {
        "format": 1,
        "config": cfg.to_dict(),
        "tensors": {
            name: {"shape": list(arr.shape), "file": f"tensors/{_blob_name(name)}"}
            for name, arr in params.items()
        },
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    for name, arr in params.items():
        flat = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr
        io.save_matrix(os.path.join(path, "tensors", _blob_name(name)), flat)


def load_checkpoint(path: str, dtype=np.float32) -> tuple[ModelConfig, Parameters]:
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != 1:
        raise ValueError("unsupported checkpoint format")
    cfg = ModelConfig.from_dict(manifest["config"])
    tensors: dict[str, np.ndarray] = {}
    for name, meta in manifest["tensors"].items():
        arr = io.load_matrix(os.path.join(path, meta["file"]))
        tensors[name] = arr.reshape(meta["shape"]).astype(dtype)
    expected = tensor_shapes(cfg)
    if set(expected) != set(tensors):
        raise ValueError("checkpoint tensors do not match the config's tensor map")
    return cfg, Parameters({name: tensors[name] for name in expected})
