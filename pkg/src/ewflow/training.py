"""Training objectives and the training loop.

Per-sample weights follow the batch-softmax rule: within a batch the weight
of sample i is softmax_i(-beta E(x0_i)), a self-normalized estimate of
exp(-beta E) / E[exp(-beta E)].  It is biased at finite batch size; the
exact-quadrature losses below serve as the unbiased reference.

Conventions: velocity networks emit the velocity directly and their losses
carry time weight 1.  Score networks emit a noise prediction n(x, t) that
defines the score as -n / sigma_t, and score losses carry time weight
sigma_t^2, so the optimized quantity is the plain noise MSE
sum_i g_i ||n(x_t_i) - eps_i||^2; the raw score regression with unit time
weight is numerically intractable near the data end where the target
-eps / sigma blows up.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import make_dataset
from .energies import EnergySpec
from .mixtures import GaussianMixture, gmm_sample
from .nn import AdamState, MlpModel, adam_step, backward, forward, forward_cached
from .oracle import GuidedOracle
from .paths import T_EPS, PathSchedule, cond_velocity, perturb
from .rng import Rng

__all__ = [
    "WeightedBatch",
    "LOSS_KINDS",
    "batch_softmax",
    "build_weighted_batch",
    "loss_cfm",
    "loss_cefm",
    "loss_ced",
    "loss_cfg_pair",
    "loss_efm_exact",
    "loss_cefm_exact",
    "loss_ed_exact",
    "loss_ced_exact",
    "make_classifier_labels",
    "TrainConfig",
    "TrainResult",
    "train_density_model",
]

LOSS_KINDS = ("cfm", "cefm", "ced", "cfg", "ced_beta_input", "efm_exact", "ed_exact")

_VELOCITY_LOSSES = {"cfm", "cefm", "efm_exact"}


def batch_softmax(energies: np.ndarray, beta: float) -> np.ndarray:
    """softmax(-beta * E) over the batch; invariant to shifting E by a constant."""
    e = np.asarray(energies, dtype=float)
    if not np.all(np.isfinite(e)):
        raise ValueError("energies must be finite")
    logits = -beta * e
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


@dataclass
class WeightedBatch:
    x0: np.ndarray
    energies: np.ndarray
    weights: np.ndarray
    times: np.ndarray
    eps: np.ndarray
    x_t: np.ndarray


def build_weighted_batch(
    data: np.ndarray,
    energy: EnergySpec | None,
    sched: PathSchedule,
    rng: Rng,
    batch_size: int,
    beta: float | None = None,
) -> WeightedBatch:
    """Uniform draw of batch points, softmax guidance weights, perturbed inputs."""
    if batch_size < 2:
        raise ValueError("softmax weighting needs a batch of at least 2")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    idx = rng.integers(0, len(data), batch_size)
    x0 = data[idx]
    if energy is None:
        e = np.zeros(batch_size)
        b = 0.0
    else:
        e = np.asarray(energy(x0), dtype=float)
        b = energy.beta if beta is None else float(beta)
    g = batch_softmax(e, b)
    t = rng.uniform(T_EPS, 1.0 - T_EPS, batch_size)
    x_t, eps = perturb(sched, x0, t, rng)
    return WeightedBatch(x0, e, g, t, eps, x_t)


def _weighted_field_loss(model: MlpModel, inputs, targets, weights, t, context=None, beta_norm=None):
    pred, cache = forward_cached(model, inputs, t, context=context, beta_norm=beta_norm)
    resid = pred - targets
    loss = float((weights * (resid**2).sum(axis=1)).sum())
    upstream = 2.0 * weights[:, None] * resid
    grads = backward(model, cache, upstream)
    return loss, grads


def loss_cfm(model: MlpModel, batch: WeightedBatch, sched: PathSchedule):
    """Unweighted conditional flow matching (mean over the batch)."""
    target = cond_velocity(sched, batch.x_t, batch.x0, batch.times)
    uniform = np.full(len(batch.x0), 1.0 / len(batch.x0))
    return _weighted_field_loss(model, batch.x_t, target, uniform, batch.times)


def loss_cefm(model: MlpModel, batch: WeightedBatch, sched: PathSchedule):
    """Energy-weighted conditional flow matching: weights on per-datum velocities."""
    target = cond_velocity(sched, batch.x_t, batch.x0, batch.times)
    return _weighted_field_loss(model, batch.x_t, target, batch.weights, batch.times)


def loss_ced(model: MlpModel, batch: WeightedBatch, sched: PathSchedule, beta_norm=None):
    """Energy-weighted denoising score matching in noise-prediction form.

    Per sample this is sigma_t^2 * g_i * ||s_theta(x_t) + eps/sigma_t||^2 with
    s_theta = -n_theta / sigma_t, i.e. g_i * ||n_theta(x_t) - eps||^2.
    """
    return _weighted_field_loss(
        model, batch.x_t, batch.eps, batch.weights, batch.times, beta_norm=beta_norm
    )


_CTX_NULL = np.array([1.0, 0.0])
_CTX_COND = np.array([0.0, 1.0])


def make_classifier_labels(data: np.ndarray, energy: EnergySpec, rng: Rng) -> np.ndarray:
    """Binary labels with P(c=1 | x) = exp(-E(x)); requires a classifier energy."""
    p = energy.prob_c(data)
    return (rng.uniform(size=len(data)) < p).astype(np.int64)


def loss_cfg_pair(model: MlpModel, batch: WeightedBatch, labels: np.ndarray, sched: PathSchedule):
    """Denoising losses for the null-token and class-token passes of one network.

    The unconditional term sees every sample; the conditional term only the
    label-1 subset.  Returns (loss_uncond, loss_cond, grads).
    """
    if model.context_dim != 2:
        raise ValueError("classifier-pair training expects context_dim=2 (null/class tokens)")
    n = len(batch.x0)
    target = batch.eps  # noise-prediction form, as in loss_ced

    ctx_u = np.repeat(_CTX_NULL[None], n, axis=0)
    pred_u, cache_u = forward_cached(model, batch.x_t, batch.times, context=ctx_u)
    resid_u = pred_u - target
    loss_u = float((resid_u**2).sum() / n)
    gw_u, gb_u = backward(model, cache_u, 2.0 * resid_u / n)

    mask = labels.astype(float)
    m = max(mask.sum(), 1.0)
    ctx_c = np.repeat(_CTX_COND[None], n, axis=0)
    pred_c, cache_c = forward_cached(model, batch.x_t, batch.times, context=ctx_c)
    resid_c = pred_c - target
    loss_c = float((mask * (resid_c**2).sum(axis=1)).sum() / m)
    gw_c, gb_c = backward(model, cache_c, 2.0 * mask[:, None] * resid_c / m)

    grads = ([a + b for a, b in zip(gw_u, gw_c)], [a + b for a, b in zip(gb_u, gb_c)])
    return loss_u, loss_c, grads


# ---------------------------------------------------------------------------
# Exact (quadrature) losses over the oracle's node set.  The marginal-form and
# conditional-form losses differ by a model-independent constant but must have
# identical parameter gradients; the two implementations below share nothing
# beyond the node set, so comparing their gradients is a meaningful check.
# ---------------------------------------------------------------------------


def _exact_prep(oracle: GuidedOracle, t: float):
    oracle._ensure_nodes()
    nodes = oracle._nodes
    mu = float(oracle.sched.mu(t))
    sig2 = float(oracle.sched.sigma(t)) ** 2
    a_coef = float(oracle.sched.drift_coef(t))
    c_coef = float(oracle.sched.score_coef(t))
    return nodes, mu, sig2, a_coef, c_coef


def _marginal_weights(oracle: GuidedOracle, t: float) -> np.ndarray:
    """w_n = p_t(x_n) exp(-E_t(x_n)) * dx / Z on the node set, via log-space routes."""
    nodes = oracle._nodes
    log_p = oracle.marginal_logdensity(nodes, t, route="quad")
    e_t = oracle.intermediate_energy(nodes, t, route="quad")
    lw = oracle._log_mass - oracle.energy.beta * oracle._node_energy
    top = lw.max()
    log_z = float(top + np.log(np.exp(lw - top).sum()))
    return np.exp(log_p - e_t - log_z) * oracle._node_area


def loss_efm_exact(model: MlpModel, oracle: GuidedOracle, t_nodes):
    """Marginal-form flow loss: weighted squared error against the guided field."""
    total = 0.0
    acc_w = [np.zeros_like(w) for w in model.weights]
    acc_b = [np.zeros_like(b) for b in model.biases]
    for t in t_nodes:
        nodes, *_ = _exact_prep(oracle, t)
        w = _marginal_weights(oracle, t) / len(t_nodes)
        target = oracle.guided_velocity(nodes, t, route="quad")
        loss, (gw, gb) = _weighted_field_loss(model, nodes, target, w, float(t))
        total += loss
        for i in range(len(acc_w)):
            acc_w[i] += gw[i]
            acc_b[i] += gb[i]
    return total, (acc_w, acc_b)


def loss_ed_exact(model: MlpModel, oracle: GuidedOracle, t_nodes):
    """Marginal-form score loss in noise-prediction form.

    The network target is -sigma_t * (guided score), the image of the guided
    score under the package's score parameterization; weights carry the same
    sigma_t^2 time factor as loss_ced.
    """
    total = 0.0
    acc_w = [np.zeros_like(w) for w in model.weights]
    acc_b = [np.zeros_like(b) for b in model.biases]
    for t in t_nodes:
        nodes, _, sig2, _, _ = _exact_prep(oracle, t)
        w = _marginal_weights(oracle, t) / len(t_nodes)
        target = -np.sqrt(sig2) * oracle.guided_score(nodes, t, route="quad")
        loss, (gw, gb) = _weighted_field_loss(model, nodes, target, w, float(t))
        total += loss
        for i in range(len(acc_w)):
            acc_w[i] += gw[i]
            acc_b[i] += gb[i]
    return total, (acc_w, acc_b)


def _conditional_exact(model: MlpModel, oracle: GuidedOracle, t_nodes, form: str):
    """Double-quadrature conditional loss over (x0 nodes) x (x probes).

    Per-datum targets are affine in x0, so node sums reduce to zeroth, first,
    and second moments under the raw (non-log) Boltzmann-weighted kernel.
    """
    beta = oracle.energy.beta
    mass = np.exp(oracle._log_mass)
    shifted = mass * np.exp(-beta * (oracle._node_energy - oracle._node_energy.min()))
    bw = shifted / shifted.sum()  # mass_m exp(-beta E_m) / Z
    total = 0.0
    acc_w = [np.zeros_like(w) for w in model.weights]
    acc_b = [np.zeros_like(b) for b in model.biases]
    for t in t_nodes:
        nodes, mu, sig2, a_coef, c_coef = _exact_prep(oracle, t)
        dim = nodes.shape[1]
        sq = (
            (nodes**2).sum(-1)[:, None]
            - 2.0 * mu * (nodes @ nodes.T)
            + mu**2 * (nodes**2).sum(-1)[None, :]
        )
        kern = np.exp(-0.5 * sq / sig2) / (2.0 * np.pi * sig2) ** (dim / 2.0)
        r = kern * bw[None, :] * oracle._node_area  # (x probe, x0 node)
        s0 = r.sum(axis=1)
        s1 = r @ nodes
        s2 = r @ (nodes**2).sum(-1)
        if form == "flow":
            # u(x|x0) = (a - c/sig2) x + (c mu / sig2) x0
            px = (a_coef - c_coef / sig2) * nodes
            k = c_coef * mu / sig2
        else:
            # noise-prediction target: eps(x|x0) = x/sigma - (mu/sigma) x0
            sig = np.sqrt(sig2)
            px = nodes / sig
            k = -mu / sig
        pred, cache = forward_cached(model, nodes, float(t))
        target_sum = px * s0[:, None] + k * s1
        const = (px**2).sum(-1) * s0 + 2.0 * k * (px * s1).sum(-1) + k**2 * s2
        loss = float(
            ((pred**2).sum(-1) * s0 - 2.0 * (pred * target_sum).sum(-1) + const).sum()
        ) / len(t_nodes)
        upstream = 2.0 * (pred * s0[:, None] - target_sum) / len(t_nodes)
        gw, gb = backward(model, cache, upstream)
        total += loss
        for i in range(len(acc_w)):
            acc_w[i] += gw[i]
            acc_b[i] += gb[i]
    return total, (acc_w, acc_b)


def loss_cefm_exact(model: MlpModel, oracle: GuidedOracle, t_nodes):
    return _conditional_exact(model, oracle, t_nodes, "flow")


def loss_ced_exact(model: MlpModel, oracle: GuidedOracle, t_nodes):
    return _conditional_exact(model, oracle, t_nodes, "score")


# --------------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    dataset: str
    loss: str
    sched: PathSchedule
    energy: EnergySpec | None = None
    steps: int = 20_000
    batch: int = 256
    lr: float = 1e-4
    seed: int = 0
    hidden: tuple[int, ...] = (256, 256, 256)
    embed_dim: int = 64
    n_data: int = 100_000
    beta_max: float = 10.0
    log_every: int = 100
    oracle_res: int = 48
    exact_t_nodes: int = 8

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSS_KINDS}")
        if self.loss != "cfm" and self.energy is None:
            raise ValueError(f"loss {self.loss!r} requires an energy specification")
        if self.loss == "cfg" and not self.energy.classifier:
            raise ValueError("classifier-pair training requires a classifier energy")


@dataclass
class TrainResult:
    model: MlpModel
    log_rows: list
    meta: dict
    gmm: GaussianMixture


def _model_kind(loss: str) -> str:
    if loss == "cfg":
        return "cfg_pair"
    return "velocity" if loss in _VELOCITY_LOSSES else "score"


def train_density_model(cfg: TrainConfig) -> TrainResult:
    """Run the configured objective; deterministic given the seed."""
    rng = Rng(cfg.seed)
    gmm = make_dataset(cfg.dataset)
    dim = gmm.dim
    kind = _model_kind(cfg.loss)

    model = MlpModel.init(
        dim,
        dim,
        rng.derive(1),
        hidden=cfg.hidden,
        embed_dim=cfg.embed_dim,
        context_dim=2 if cfg.loss == "cfg" else 0,
        accepts_beta=cfg.loss == "ced_beta_input",
    )
    adam = AdamState.for_model(model, lr=cfg.lr)

    oracle = None
    data = labels = None
    if cfg.loss in ("efm_exact", "ed_exact"):
        oracle = GuidedOracle(gmm, cfg.energy, cfg.sched, grid_res=cfg.oracle_res)
        t_nodes = np.linspace(T_EPS, 1.0 - T_EPS, cfg.exact_t_nodes + 2)[1:-1]
    else:
        data = gmm_sample(gmm, rng.derive(0), cfg.n_data)
        if cfg.loss == "cfg":
            labels = make_classifier_labels(data, cfg.energy, rng.derive(3))

    batch_rng = rng.derive(2)
    rows = []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if cfg.loss in ("efm_exact", "ed_exact"):
            fn = loss_efm_exact if cfg.loss == "efm_exact" else loss_ed_exact
            loss, grads = fn(model, oracle, t_nodes)
        elif cfg.loss == "ced_beta_input":
            beta = float(batch_rng.uniform(0.0, cfg.beta_max))
            batch = build_weighted_batch(
                data, cfg.energy, cfg.sched, batch_rng, cfg.batch, beta=beta
            )
            loss, grads = loss_ced(model, batch, cfg.sched, beta_norm=beta / cfg.beta_max)
        elif cfg.loss == "cfg":
            idx = batch_rng.integers(0, len(data), cfg.batch)
            x0 = data[idx]
            t = batch_rng.uniform(T_EPS, 1.0 - T_EPS, cfg.batch)
            x_t, eps = perturb(cfg.sched, x0, t, batch_rng)
            batch = WeightedBatch(
                x0, np.zeros(cfg.batch), np.full(cfg.batch, 1.0 / cfg.batch), t, eps, x_t
            )
            lu, lc, grads = loss_cfg_pair(model, batch, labels[idx], cfg.sched)
            loss = lu + lc
        else:
            batch = build_weighted_batch(data, cfg.energy, cfg.sched, batch_rng, cfg.batch)
            if cfg.loss == "cfm":
                loss, grads = loss_cfm(model, batch, cfg.sched)
            elif cfg.loss == "cefm":
                loss, grads = loss_cefm(model, batch, cfg.sched)
            else:
                loss, grads = loss_ced(model, batch, cfg.sched)
        adam_step(adam, model, *grads)
        if step % cfg.log_every == 0 or step == cfg.steps:
            rows.append((step, loss, (time.perf_counter() - start) * 1000.0))

    meta = {
        "model_kind": kind,
        "dataset": cfg.dataset,
        "loss": cfg.loss,
        "seed": cfg.seed,
        "beta": None if cfg.energy is None else cfg.energy.beta,
        "beta_max": cfg.beta_max if cfg.loss == "ced_beta_input" else None,
        "path": cfg.sched.config(),
    }
    return TrainResult(model, rows, meta, gmm)
