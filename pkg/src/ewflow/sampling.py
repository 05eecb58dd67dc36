"""Generation from trained or analytic fields.

Velocity models integrate the probability-flow ODE from the noise end
(t = 1) to the data end (t = 0); score models can either be converted to a
velocity and integrated the same way, or run through an ancestral chain over
a decreasing time grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nn import MlpModel, forward
from .paths import T_EPS, PathSchedule, velocity_from_score
from .rng import Rng

__all__ = [
    "SamplerConfig",
    "sample_ode",
    "sample_ancestral",
    "cfg_compose",
    "model_velocity_fn",
    "model_score_fn",
    "generate",
    "write_samples_csv",
    "read_samples_csv",
]


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "heun_ode"  # euler_ode | heun_ode | ancestral
    steps: int = 15
    n: int = 2000

    def __post_init__(self):
        if self.kind not in ("euler_ode", "heun_ode", "ancestral"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def sample_ode(
    velocity_fn,
    sched: PathSchedule,
    n: int,
    dim: int,
    rng: Rng,
    steps: int = 15,
    method: str = "heun",
) -> np.ndarray:
    """Integrate dx/dt = v(x, t) from t = 1-eps down to t = eps.

    Initial particles are N(0, sigma(1-eps)^2 I).  Heun (trapezoidal
    predictor-corrector) is second order; Euler is the first-order fallback.
    """
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown ODE method {method!r}")
    ts = np.linspace(1.0 - T_EPS, T_EPS, steps + 1)
    x = rng.normal((n, dim)) * float(sched.sigma(ts[0]))
    for i in range(steps):
        t0, t1 = float(ts[i]), float(ts[i + 1])
        h = t1 - t0
        k1 = velocity_fn(x, t0)
        if method == "euler":
            x = x + h * k1
        else:
            k2 = velocity_fn(x + h * k1, t1)
            x = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at ODE step {i + 1}/{steps} (t={t1:.4f})")
    return x


def sample_ancestral(
    score_fn,
    sched: PathSchedule,
    n: int,
    dim: int,
    rng: Rng,
    steps: int = 50,
) -> np.ndarray:
    """Ancestral chain over a uniform decreasing time grid (variance-preserving paths).

    Stepping t -> s uses the Gaussian-path transition ratio r = mu_t / mu_s:
    the next mean given the score estimate is x/r + (sig_ts^2 / r) * score with
    sig_ts^2 = sigma_t^2 - r^2 sigma_s^2, and the injected noise has variance
    sig_ts^2.  With that noise level a Gaussian data distribution is inverted
    exactly at any step count; the final step adds no noise.
    """
    if sched.kind != "vp":
        raise ValueError("ancestral sampling assumes a variance-preserving schedule")
    ts = np.linspace(1.0 - T_EPS, T_EPS, steps + 1)
    x = rng.normal((n, dim)) * float(sched.sigma(ts[0]))
    for i in range(steps):
        t, s = float(ts[i]), float(ts[i + 1])
        mu_t, mu_s = float(sched.mu(t)), float(sched.mu(s))
        sig_t2, sig_s2 = float(sched.sigma(t)) ** 2, float(sched.sigma(s)) ** 2
        r = mu_t / mu_s
        sig_ts2 = max(sig_t2 - r**2 * sig_s2, 0.0)
        score = score_fn(x, t)
        mean = x / r + (sig_ts2 / r) * score
        if i < steps - 1:
            x = mean + np.sqrt(sig_ts2) * rng.normal((n, dim))
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite state at ancestral step {i + 1}/{steps}")
    return x


def cfg_compose(score_uncond: np.ndarray, score_cond: np.ndarray, beta: float) -> np.ndarray:
    """Affine guidance mix: (1 - beta) * unconditional + beta * conditional."""
    su = np.asarray(score_uncond, dtype=float)
    sc = np.asarray(score_cond, dtype=float)
    if su.shape != sc.shape:
        raise ValueError(f"shape mismatch {su.shape} vs {sc.shape}")
    return (1.0 - beta) * su + beta * sc


_CTX_NULL = np.array([1.0, 0.0])
_CTX_COND = np.array([0.0, 1.0])


def model_score_fn(
    model: MlpModel,
    meta: dict,
    sched: PathSchedule,
    guidance_beta: float | None = None,
    context: np.ndarray | None = None,
):
    """Score callable (x, t) -> s from a checkpointed model plus its metadata.

    Score-style checkpoints store noise predictors; the score at (x, t) is
    -n(x, t) / sigma_t.  Classifier-pair checkpoints compose the null-token
    and class-token heads with the affine guidance rule before rescaling.
    """
    kind = meta.get("model_kind", "score")
    if kind == "velocity":
        raise ValueError("velocity models have no score head; sample through the ODE instead")
    if kind == "cfg_pair":
        beta = 1.0 if guidance_beta is None else float(guidance_beta)

        def fn(x, t):
            n = len(x)
            nu = forward(model, x, t, context=np.repeat(_CTX_NULL[None], n, axis=0))
            nc = forward(model, x, t, context=np.repeat(_CTX_COND[None], n, axis=0))
            return -cfg_compose(nu, nc, beta) / float(sched.sigma(t))

        return fn
    if model.accepts_beta:
        beta_max = meta.get("beta_max")
        if beta_max is None:
            raise ValueError("checkpoint conditions on beta but records no beta_max")
        if guidance_beta is None:
            raise ValueError("this checkpoint needs an explicit guidance beta")
        bn = float(guidance_beta) / float(beta_max)

        def fn(x, t):
            return -forward(model, x, t, beta_norm=np.full(len(x), bn)) / float(sched.sigma(t))

        return fn

    def fn(x, t):
        ctx = None if context is None else np.broadcast_to(context, (len(x), len(context)))
        return -forward(model, x, t, context=ctx) / float(sched.sigma(t))

    return fn


def model_velocity_fn(
    model: MlpModel,
    meta: dict,
    sched: PathSchedule,
    guidance_beta: float | None = None,
    context: np.ndarray | None = None,
):
    """Velocity callable (x, t) -> v; score-style models are converted pointwise."""
    kind = meta.get("model_kind", "velocity")
    if kind == "velocity":

        def fn(x, t):
            ctx = None if context is None else np.broadcast_to(context, (len(x), len(context)))
            return forward(model, x, t, context=ctx)

        return fn
    score_fn = model_score_fn(model, meta, sched, guidance_beta, context)

    def fn(x, t):
        return velocity_from_score(sched, x, score_fn(x, t), t)

    return fn


def generate(
    model: MlpModel,
    meta: dict,
    sched: PathSchedule,
    cfg: SamplerConfig,
    rng: Rng,
    guidance_beta: float | None = None,
    context: np.ndarray | None = None,
) -> np.ndarray:
    """Dispatch to the configured sampler for a checkpointed model."""
    dim = model.out_dim
    if cfg.kind == "ancestral":
        fn = model_score_fn(model, meta, sched, guidance_beta, context)
        return sample_ancestral(fn, sched, cfg.n, dim, rng, steps=cfg.steps)
    fn = model_velocity_fn(model, meta, sched, guidance_beta, context)
    method = "euler" if cfg.kind == "euler_ode" else "heun"
    return sample_ode(fn, sched, cfg.n, dim, rng, steps=cfg.steps, method=method)


def write_samples_csv(path, samples: np.ndarray, meta: dict) -> None:
    """Metadata as a leading '# {json}' line, then one point per row."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    cols = [f"x{i}" for i in range(samples.shape[1])]
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(cols) + "\n")
        for row in samples:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path):
    """Returns (samples, meta)."""
    with open(path) as fh:
        first = fh.readline()
        meta = json.loads(first[1:].strip()) if first.startswith("#") else {}
        header = fh.readline() if first.startswith("#") else first
        del header
        rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
    return np.array(rows), meta
