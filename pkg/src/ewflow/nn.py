"""Small fully-connected networks with hand-rolled reverse-mode gradients.

The architectures here are tiny and fixed, so the backward pass is written
layer by layer rather than through a general tape; every gradient is checked
against finite differences in the test suite.  Inputs are the concatenation
x (+) sinusoidal-time-embedding (+) optional context (+) optional embedded
guidance scale.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng

__all__ = [
    "MlpModel",
    "time_embedding",
    "forward",
    "forward_cached",
    "backward",
    "AdamState",
    "adam_step",
    "soft_update",
    "save_checkpoint",
    "load_checkpoint",
    "file_sha256",
]


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of a scalar in [0, 1]; frequencies ladder 1..1e4."""
    if dim % 2 != 0:
        raise ValueError("embedding dimension must be even")
    half = dim // 2
    freqs = 10.0 ** (4.0 * np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def _dsilu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class MlpModel:
    """MLP over [x, emb(t), context?, emb(beta)?] with SiLU hidden layers."""

    in_dim: int
    out_dim: int
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 64
    context_dim: int = 0
    accepts_beta: bool = False
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return (
            self.in_dim
            + self.embed_dim
            + self.context_dim
            + (self.embed_dim if self.accepts_beta else 0)
        )

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_width, *self.hidden, self.out_dim]

    @property
    def n_params(self) -> int:
        sizes = self.layer_sizes
        return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))

    @staticmethod
    def init(
        in_dim: int,
        out_dim: int,
        rng: Rng,
        hidden: tuple[int, ...] = (256, 256, 256),
        embed_dim: int = 64,
        context_dim: int = 0,
        accepts_beta: bool = False,
    ) -> "MlpModel":
        model = MlpModel(in_dim, out_dim, tuple(hidden), embed_dim, context_dim, accepts_beta)
        sizes = model.layer_sizes
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            model.weights.append(rng.normal((fan_in, fan_out)) / np.sqrt(fan_in))
            model.biases.append(np.zeros(fan_out))
        return model

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.in_dim,
            self.out_dim,
            self.hidden,
            self.embed_dim,
            self.context_dim,
            self.accepts_beta,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def arch(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "hidden": list(self.hidden),
            "embed_dim": self.embed_dim,
            "context_dim": self.context_dim,
            "accepts_beta": self.accepts_beta,
        }


def _assemble_input(model: MlpModel, x, t, context, beta_norm) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != model in_dim {model.in_dim}")
    parts = [x]
    if model.embed_dim > 0:
        if t is None:
            raise ValueError("model embeds time; t is required")
        t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
        parts.append(time_embedding(t, model.embed_dim))
    if model.context_dim > 0:
        if context is None:
            raise ValueError("model expects a context vector")
        context = np.atleast_2d(np.asarray(context, dtype=float))
        if context.shape != (x.shape[0], model.context_dim):
            raise ValueError(
                f"context shape {context.shape} != {(x.shape[0], model.context_dim)}"
            )
        parts.append(context)
    elif context is not None:
        raise ValueError("model takes no context")
    if model.accepts_beta:
        if beta_norm is None:
            raise ValueError("model conditions on beta; beta_norm is required")
        bn = np.broadcast_to(np.asarray(beta_norm, dtype=float), (x.shape[0],))
        if np.any(bn < 0) or np.any(bn > 1):
            raise ValueError("beta_norm must lie in [0, 1]")
        parts.append(time_embedding(bn, model.embed_dim))
    elif beta_norm is not None:
        raise ValueError("model does not condition on beta")
    return np.concatenate(parts, axis=1)


def forward(model: MlpModel, x, t=None, context=None, beta_norm=None) -> np.ndarray:
    return forward_cached(model, x, t, context, beta_norm)[0]


def forward_cached(model: MlpModel, x, t=None, context=None, beta_norm=None):
    """Forward pass returning (output, cache) for a subsequent backward call."""
    h = _assemble_input(model, x, t, context, beta_norm)
    activations = [h]
    pre = []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _silu(z)
        activations.append(h)
    if not np.all(np.isfinite(h)):
        raise FloatingPointError("non-finite network output")
    return h, (activations, pre)


def backward(model: MlpModel, cache, upstream: np.ndarray):
    """Gradients of sum(output * upstream) w.r.t. all weights and biases."""
    activations, pre = cache
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        if i != len(model.weights) - 1:
            g = g * _dsilu(pre[i])
        grads_w[i] = activations[i].T @ g
        grads_b[i] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i].T
    return grads_w, grads_b


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)

    @staticmethod
    def for_model(model: MlpModel, lr: float = 1e-4) -> "AdamState":
        st = AdamState(lr=lr)
        st.m_w = [np.zeros_like(w) for w in model.weights]
        st.v_w = [np.zeros_like(w) for w in model.weights]
        st.m_b = [np.zeros_like(b) for b in model.biases]
        st.v_b = [np.zeros_like(b) for b in model.biases]
        return st


def adam_step(state: AdamState, model: MlpModel, grads_w, grads_b) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for i in range(len(model.weights)):
        for params, grads, m, v in (
            (model.weights, grads_w, state.m_w, state.v_w),
            (model.biases, grads_b, state.m_b, state.v_b),
        ):
            if grads[i].shape != params[i].shape:
                raise ValueError(f"gradient shape {grads[i].shape} != {params[i].shape}")
            m[i] *= state.beta1
            m[i] += (1.0 - state.beta1) * grads[i]
            v[i] *= state.beta2
            v[i] += (1.0 - state.beta2) * grads[i] ** 2
            params[i] -= state.lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + state.eps)


def soft_update(target: MlpModel, online: MlpModel, lam: float) -> None:
    """Polyak average: target <- (1 - lam) target + lam online, in place."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    for tw, ow in zip(target.weights, online.weights):
        tw *= 1.0 - lam
        tw += lam * ow
    for tb, ob in zip(target.biases, online.biases):
        tb *= 1.0 - lam
        tb += lam * ob


def save_checkpoint(model: MlpModel, path, meta: dict | None = None) -> None:
    """JSON header line + little-endian float32 parameter blob.

    The header's "layout" lists (name, shape, offset-in-floats) in blob order.
    """
    layout = []
    offset = 0
    blobs = []
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        for name, arr in ((f"w{i}", w), (f"b{i}", b)):
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size
            blobs.append(arr.astype("<f4").ravel())
    header = {
        "format": "ewflow-mlp-v1",
        "arch": model.arch(),
        "dtype": "<f4",
        "n_params": int(offset),
        "layout": layout,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.concatenate(blobs).tobytes())


def load_checkpoint(path):
    """Returns (model, meta)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        blob = np.frombuffer(fh.read(), dtype="<f4").astype(float)
    if header.get("format") != "ewflow-mlp-v1":
        raise ValueError(f"unrecognized checkpoint format in {path}")
    arch = header["arch"]
    model = MlpModel(
        arch["in_dim"],
        arch["out_dim"],
        tuple(arch["hidden"]),
        arch["embed_dim"],
        arch["context_dim"],
        arch["accepts_beta"],
    )
    if header["n_params"] != model.n_params or len(blob) != model.n_params:
        raise ValueError(
            f"checkpoint parameter count {len(blob)} does not match architecture "
            f"({model.n_params} expected)"
        )
    by_name = {entry["name"]: entry for entry in header["layout"]}
    sizes = model.layer_sizes
    for i in range(len(sizes) - 1):
        for kind, store in (("w", model.weights), ("b", model.biases)):
            entry = by_name[f"{kind}{i}"]
            shape = tuple(entry["shape"])
            start = entry["offset"]
            store.append(blob[start : start + int(np.prod(shape))].reshape(shape).copy())
    return model, header.get("meta", {})


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
