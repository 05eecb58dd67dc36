"""Q-weighted iterative policy refinement on analytically tractable tasks.

The linear-Gaussian bandit has behavior N(0, I) and Q(x, a) = w . a, so the
softmax-reweighted target policy after r refinement rounds is exactly
N(r * beta * w, I): each round multiplies the current policy by exp(beta Q)
and refits, compounding the guidance scale.  The chain MDP provides a
tabular fixed point for the in-support softmax Q-learning backup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import sliced_wasserstein
from .nn import AdamState, MlpModel, adam_step, backward, forward, forward_cached, soft_update
from .paths import T_EPS, PathSchedule, cond_velocity, perturb, velocity_from_score
from .rng import Rng
from .sampling import sample_ode
from .training import batch_softmax

__all__ = [
    "OfflineDataset",
    "BanditSpec",
    "ChainMdpSpec",
    "make_bandit_dataset",
    "make_chain_dataset",
    "soft_value_iteration",
    "behavior_pretrain",
    "sample_policy_actions",
    "build_support_set",
    "support_weights",
    "q_learning_step",
    "train_chain_q",
    "train_bandit_q",
    "QipoConfig",
    "qipo_iterate",
]


@dataclass
class OfflineDataset:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        n = len(self.states)
        for name in ("actions", "rewards", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != number of states")
        if not all(
            np.all(np.isfinite(getattr(self, f)))
            for f in ("states", "actions", "rewards", "next_states")
        ):
            raise ValueError("dataset entries must be finite")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def save_csv(self, path) -> None:
        ds, da = self.state_dim, self.action_dim
        cols = (
            [f"state{i}" for i in range(ds)]
            + [f"action{i}" for i in range(da)]
            + ["reward"]
            + [f"next_state{i}" for i in range(ds)]
            + ["done"]
        )
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(self)):
                row = (
                    list(self.states[i]) + list(self.actions[i]) + [self.rewards[i]]
                    + list(self.next_states[i]) + [int(self.terminals[i])]
                )
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def load_csv(path) -> "OfflineDataset":
        with open(path) as fh:
            cols = fh.readline().strip().split(",")
            rows = np.array([list(map(float, ln.split(","))) for ln in fh if ln.strip()])
        ds = sum(c.startswith("state") for c in cols)
        da = sum(c.startswith("action") for c in cols)
        i = 0
        states = rows[:, i : i + ds]; i += ds
        actions = rows[:, i : i + da]; i += da
        rewards = rows[:, i]; i += 1
        next_states = rows[:, i : i + ds]; i += ds
        terminals = rows[:, i].astype(bool)
        return OfflineDataset(states, actions, rewards, next_states, terminals)


@dataclass(frozen=True)
class BanditSpec:
    """One-step task: behavior N(0, I), Q(x, a) = w . a, state is a vacuous scalar."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float))

    @property
    def action_dim(self) -> int:
        return len(self.w)

    @property
    def state_dim(self) -> int:
        return 1

    def q_values(self, states, actions) -> np.ndarray:
        return np.asarray(actions, dtype=float) @ self.w

    def target_mean(self, cycles: int, beta: float) -> np.ndarray:
        """Policy mean after the given number of complete refinement cycles."""
        return cycles * beta * self.w

    def target_samples(self, cycles: int, beta: float, rng: Rng, n: int) -> np.ndarray:
        return self.target_mean(cycles, beta)[None, :] + rng.normal((n, self.action_dim))


def make_bandit_dataset(spec: BanditSpec, n: int, rng: Rng) -> OfflineDataset:
    actions = rng.normal((n, spec.action_dim))
    states = np.zeros((n, 1))
    rewards = spec.q_values(states, actions)
    return OfflineDataset(states, actions, rewards, states.copy(), np.ones(n, dtype=bool))


@dataclass(frozen=True)
class ChainMdpSpec:
    """Deterministic line of states; action 0 steps left, action 1 steps right.

    Reward 1 for pushing right at the rightmost state, else 0; discounted,
    non-terminating.
    """

    n_states: int = 5
    gamma: float = 0.9

    @property
    def n_actions(self) -> int:
        return 2

    def step(self, s: int, a: int) -> tuple[int, float]:
        s2 = min(s + 1, self.n_states - 1) if a == 1 else max(s - 1, 0)
        r = 1.0 if (s == self.n_states - 1 and a == 1) else 0.0
        return s2, r

    def one_hot(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=int)
        out = np.zeros((s.size, self.n_states))
        out[np.arange(s.size), s.ravel()] = 1.0
        return out

    def action_one_hot(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=int)
        out = np.zeros((a.size, self.n_actions))
        out[np.arange(a.size), a.ravel()] = 1.0
        return out


def make_chain_dataset(spec: ChainMdpSpec, repeats: int, rng: Rng) -> OfflineDataset:
    """Every (state, action) pair, repeated; uniform behavior coverage."""
    pairs = [(s, a) for s in range(spec.n_states) for a in range(spec.n_actions)]
    order = rng.permutation(len(pairs) * repeats) % len(pairs)
    s = np.array([pairs[i][0] for i in order])
    a = np.array([pairs[i][1] for i in order])
    nxt = np.empty_like(s)
    rew = np.empty(len(s))
    for i in range(len(s)):
        nxt[i], rew[i] = spec.step(int(s[i]), int(a[i]))
    return OfflineDataset(
        spec.one_hot(s), spec.action_one_hot(a), rew, spec.one_hot(nxt),
        np.zeros(len(s), dtype=bool),
    )


def soft_value_iteration(spec: ChainMdpSpec, beta: float, tol: float = 1e-12, max_iter: int = 100_000):
    """Fixed point of Q(s,a) = r + gamma * sum_a' softmax(beta Q(s',.)) Q(s',.)."""
    q = np.zeros((spec.n_states, spec.n_actions))
    for _ in range(max_iter):
        v = np.empty(spec.n_states)
        for s in range(spec.n_states):
            w = batch_softmax(-q[s], beta)  # softmax of +beta q
            v[s] = w @ q[s]
        q_new = np.empty_like(q)
        for s in range(spec.n_states):
            for a in range(spec.n_actions):
                s2, r = spec.step(s, a)
                q_new[s, a] = r + spec.gamma * v[s2]
        if np.abs(q_new - q).max() < tol:
            return q_new
        q = q_new
    raise RuntimeError("soft value iteration did not converge")


# ------------------------------------------------------------------ policies


def _policy_loss(model, kind, sched, a_t, t, targets_eps, actions, states, weights):
    if kind == "score":
        target = targets_eps  # noise-prediction form (see training module conventions)
    else:
        target = cond_velocity(sched, a_t, actions, t)
    pred, cache = forward_cached(model, a_t, t, context=states)
    resid = pred - target
    loss = float((weights * (resid**2).sum(axis=1)).sum())
    grads = backward(model, cache, 2.0 * weights[:, None] * resid)
    return loss, grads


def behavior_pretrain(
    dataset: OfflineDataset,
    sched: PathSchedule,
    rng: Rng,
    kind: str = "score",
    hidden: tuple[int, ...] = (64, 64),
    embed_dim: int = 32,
    steps: int = 10_000,
    batch: int = 512,
    lr: float = 5e-4,
) -> MlpModel:
    """Unweighted conditional matching of the behavior policy a | x."""
    if kind not in ("score", "velocity"):
        raise ValueError("policy kind must be 'score' or 'velocity'")
    model = MlpModel.init(
        dataset.action_dim, dataset.action_dim, rng.derive(0),
        hidden=hidden, embed_dim=embed_dim, context_dim=dataset.state_dim,
    )
    adam = AdamState.for_model(model, lr=lr)
    srng = rng.derive(1)
    uniform = np.full(batch, 1.0 / batch)
    for _ in range(steps):
        idx = srng.integers(0, len(dataset), batch)
        actions = dataset.actions[idx]
        states = dataset.states[idx]
        t = srng.uniform(T_EPS, 1.0 - T_EPS, batch)
        a_t, eps = perturb(sched, actions, t, srng)
        _, grads = _policy_loss(model, kind, sched, a_t, t, eps, actions, states, uniform)
        adam_step(adam, model, *grads)
    return model


def sample_policy_actions(
    model: MlpModel,
    kind: str,
    sched: PathSchedule,
    states: np.ndarray,
    rng: Rng,
    n_per_state: int = 1,
    ode_steps: int = 15,
) -> np.ndarray:
    """(len(states), n_per_state, action_dim) draws through the flow ODE."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    reps = np.repeat(states, n_per_state, axis=0)
    meta = {"model_kind": "velocity" if kind == "velocity" else "score"}

    def vfn(x, t):
        return model_velocity_fn_batch(model, meta, sched, reps, x, t)

    out = sample_ode(vfn, sched, len(reps), model.out_dim, rng, steps=ode_steps)
    return out.reshape(len(states), n_per_state, model.out_dim)


def model_velocity_fn_batch(model, meta, sched, contexts, x, t):
    pred = forward(model, x, t, context=contexts)
    if meta["model_kind"] == "score":
        return velocity_from_score(sched, x, -pred / float(sched.sigma(t)), t)
    return pred


def build_support_set(
    model: MlpModel,
    kind: str,
    sched: PathSchedule,
    states: np.ndarray,
    dataset_actions: np.ndarray,
    m: int,
    rng: Rng,
    ode_steps: int = 15,
) -> np.ndarray:
    """(B, M+1, action_dim): slot 0 is the dataset action, then M policy draws."""
    if m < 1:
        raise ValueError("support size M must be >= 1")
    sampled = sample_policy_actions(model, kind, sched, states, rng, m, ode_steps)
    return np.concatenate([dataset_actions[:, None, :], sampled], axis=1)


def support_weights(q_values: np.ndarray, beta: float) -> np.ndarray:
    """Per-state softmax of beta * Q over the support axis."""
    q = np.asarray(q_values, dtype=float)
    logits = beta * q
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------------ Q-learning


def q_forward(qnet: MlpModel, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return forward(qnet, np.concatenate([states, actions], axis=1))[:, 0]


def q_learning_step(
    qnet: MlpModel,
    q_target: MlpModel,
    adam: AdamState,
    batch: dict,
    support_next: np.ndarray,
    beta: float,
    gamma: float,
    lam_soft: float = 0.005,
) -> float:
    """TD regression toward r + gamma * softmax-weighted target-network value.

    support_next holds candidate next-state actions (B, M', da); the target
    network supplies their values and receives a Polyak update afterwards.
    """
    states, actions = batch["states"], batch["actions"]
    rewards, next_states = batch["rewards"], batch["next_states"]
    terminals = batch["terminals"]
    b, m_sup, da = support_next.shape
    flat_states = np.repeat(next_states, m_sup, axis=0)
    q_next = q_forward(q_target, flat_states, support_next.reshape(-1, da)).reshape(b, m_sup)
    w = support_weights(q_next, beta)
    v_next = (w * q_next).sum(axis=1)
    y = rewards + gamma * v_next * (1.0 - terminals.astype(float))

    inputs = np.concatenate([states, actions], axis=1)
    pred, cache = forward_cached(qnet, inputs)
    resid = pred[:, 0] - y
    loss = float((resid**2).mean())
    grads = backward(qnet, cache, (2.0 * resid / b)[:, None])
    adam_step(adam, qnet, *grads)
    soft_update(q_target, qnet, lam_soft)
    return loss


def train_chain_q(
    spec: ChainMdpSpec,
    dataset: OfflineDataset,
    beta: float,
    rng: Rng,
    hidden: tuple[int, ...] = (64, 64),
    steps: int = 8000,
    batch: int = 128,
    lr: float = 1e-3,
    lam_soft: float = 0.05,
) -> MlpModel:
    """Fit the in-support softmax backup on a chain MDP; support = all actions."""
    qnet = MlpModel.init(
        spec.n_states + spec.n_actions, 1, rng.derive(0), hidden=hidden, embed_dim=0
    )
    q_target = qnet.copy()
    adam = AdamState.for_model(qnet, lr=lr)
    srng = rng.derive(1)
    all_actions = np.eye(spec.n_actions)
    for _ in range(steps):
        idx = srng.integers(0, len(dataset), batch)
        b = {
            "states": dataset.states[idx],
            "actions": dataset.actions[idx],
            "rewards": dataset.rewards[idx],
            "next_states": dataset.next_states[idx],
            "terminals": dataset.terminals[idx],
        }
        support = np.repeat(all_actions[None], batch, axis=0)
        q_learning_step(qnet, q_target, adam, b, support, beta, spec.gamma, lam_soft)
    return qnet


def train_bandit_q(
    spec: BanditSpec,
    dataset: OfflineDataset,
    rng: Rng,
    hidden: tuple[int, ...] = (64, 64),
    steps: int = 4000,
    batch: int = 256,
    lr: float = 1e-3,
):
    """Learned value head for the one-step task: pure reward regression.

    With immediate termination the TD target reduces to the reward, so this is
    q_learning_step with gamma = 0; returns a (states, actions) -> Q callable.
    """
    qnet = MlpModel.init(
        spec.state_dim + spec.action_dim, 1, rng.derive(0), hidden=hidden, embed_dim=0
    )
    q_target = qnet.copy()
    adam = AdamState.for_model(qnet, lr=lr)
    srng = rng.derive(1)
    for _ in range(steps):
        idx = srng.integers(0, len(dataset), batch)
        b = {
            "states": dataset.states[idx],
            "actions": dataset.actions[idx],
            "rewards": dataset.rewards[idx],
            "next_states": dataset.next_states[idx],
            "terminals": dataset.terminals[idx],
        }
        support = dataset.actions[idx][:, None, :]  # unused at gamma = 0
        q_learning_step(qnet, q_target, adam, b, support, beta=0.0, gamma=0.0)
    return lambda states, actions: q_forward(qnet, states, actions)


# ----------------------------------------------------------------------- QIPO


@dataclass
class QipoConfig:
    beta: float = 1.0
    m_support: int = 16
    k_renew: int = 10
    k3: int = 100
    batch: int = 128
    lr: float = 1e-4
    lambda_soft: float = 0.005
    ode_steps: int = 15
    eval_every: int = 5
    eval_n: int = 4000
    policy_kind: str = "score"
    q_mode: str = "oracle"
    divergence_factor: float = 10.0


@dataclass
class QipoResult:
    policy: MlpModel
    eval_rows: list
    support_renewals: int


def qipo_iterate(
    policy: MlpModel,
    q_fn,
    dataset: OfflineDataset,
    sched: PathSchedule,
    cfg: QipoConfig,
    rng: Rng,
    spec: BanditSpec | None = None,
) -> QipoResult:
    """Iterative Q-weighted refinement with periodic support renewal.

    Support actions come from a Polyak-averaged copy of the policy (refreshed
    every cfg.k_renew epochs); times and noise are redrawn every epoch while
    support actions and their guidance weights are reused between renewals.
    q_fn(states, actions) supplies values for the guidance softmax.
    """
    n = len(dataset)
    order = rng.derive(0).permutation(n)
    n_batches = max(n // cfg.batch, 1)
    batches = [order[i * cfg.batch : (i + 1) * cfg.batch] for i in range(n_batches)]
    policy_target = policy.copy()
    adam = AdamState.for_model(policy, lr=cfg.lr)
    action_scale = max(float(np.abs(dataset.actions).mean()), 1e-6)

    support: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    eval_rows = []
    renewals = 0
    sampler_policy = policy_target.copy()
    epoch_rng = rng.derive(1)
    for k in range(1, cfg.k3 + 1):
        renew = (k - 1) % cfg.k_renew == 0
        if renew:
            # Freeze the averaged policy for this renewal round so every
            # batch's support reflects the same refinement stage.
            sampler_policy = policy_target.copy()
            support.clear()
            renewals += 1
        for bi, idx in enumerate(batches):
            states = dataset.states[idx]
            actions = dataset.actions[idx]
            if renew:
                acts = build_support_set(
                    sampler_policy, cfg.policy_kind, sched, states, actions,
                    cfg.m_support, epoch_rng.derive(k, bi), ode_steps=cfg.ode_steps,
                )
                scale = float(np.abs(acts[:, 1:, :]).mean())
                if scale > cfg.divergence_factor * max(action_scale, 1.0):
                    raise RuntimeError(
                        f"support actions diverged at epoch {k}: mean |a| = {scale:.3g} "
                        f"exceeds {cfg.divergence_factor}x the dataset scale {action_scale:.3g}"
                    )
                qv = q_fn(
                    np.repeat(states, cfg.m_support + 1, axis=0),
                    acts.reshape(-1, acts.shape[-1]),
                ).reshape(len(idx), cfg.m_support + 1)
                support[bi] = (acts, support_weights(qv, cfg.beta))
            acts, g = support[bi]
            bsz, m1, da = acts.shape
            flat_a = acts.reshape(-1, da)
            flat_s = np.repeat(states, m1, axis=0)
            t = epoch_rng.uniform(T_EPS, 1.0 - T_EPS, bsz * m1)
            a_t, eps = perturb(sched, flat_a, t, epoch_rng)
            _, grads = _policy_loss(
                policy, cfg.policy_kind, sched, a_t, t, eps, flat_a, flat_s,
                g.ravel() / bsz,
            )
            adam_step(adam, policy, *grads)
            soft_update(policy_target, policy, cfg.lambda_soft)
        if k % cfg.eval_every == 0 or k == cfg.k3:
            eval_rows.append(_eval_row(policy, cfg, sched, dataset, spec, k, rng.derive(2, k)))
    return QipoResult(policy, eval_rows, renewals)


def _eval_row(policy, cfg, sched, dataset, spec, epoch, rng):
    eval_state = np.zeros((1, dataset.state_dim))
    draws = sample_policy_actions(
        policy, cfg.policy_kind, sched, eval_state, rng, cfg.eval_n, ode_steps=cfg.ode_steps
    )[0]
    mean = draws.mean(axis=0)
    cycles = max(epoch // cfg.k_renew, 0)
    if spec is not None:
        target = spec.target_mean(cycles, cfg.beta)
        ref = spec.target_samples(cycles, cfg.beta, rng.derive(0), cfg.eval_n)
        sw = sliced_wasserstein(draws, ref, rng=rng.derive(1))
    else:
        target = np.full_like(mean, np.nan)
        sw = float("nan")
    return {
        "epoch": epoch,
        "policy_mean": mean,
        "analytic_target": target,
        "sw_distance": sw,
        "cycles": cycles,
    }
