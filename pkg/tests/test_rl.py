import numpy as np
import pytest

from ewflow.metrics import sliced_wasserstein
from ewflow.nn import AdamState, MlpModel
from ewflow.paths import PathSchedule
from ewflow.rl import (
    BanditSpec,
    ChainMdpSpec,
    OfflineDataset,
    QipoConfig,
    behavior_pretrain,
    build_support_set,
    make_bandit_dataset,
    make_chain_dataset,
    q_forward,
    q_learning_step,
    qipo_iterate,
    sample_policy_actions,
    soft_value_iteration,
    support_weights,
    train_bandit_q,
    train_chain_q,
)
from ewflow.rng import Rng

SCHED = PathSchedule.vp()


def test_bandit_dataset_shapes_and_rewards():
    spec = BanditSpec(w=[1.0, -2.0])
    ds = make_bandit_dataset(spec, 512, Rng(0))
    assert ds.actions.shape == (512, 2)
    assert np.allclose(ds.rewards, ds.actions @ np.array([1.0, -2.0]))
    assert np.all(ds.terminals)


def test_dataset_csv_round_trip(tmp_path):
    ds = make_bandit_dataset(BanditSpec(w=[1.0]), 64, Rng(1))
    path = tmp_path / "dataset.csv"
    ds.save_csv(path)
    back = OfflineDataset.load_csv(path)
    assert np.allclose(back.actions, ds.actions)
    assert np.allclose(back.rewards, ds.rewards)
    assert np.array_equal(back.terminals, ds.terminals)


def test_behavior_pretrain_matches_behavior_moments():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 8192, Rng(2))
    policy = behavior_pretrain(ds, SCHED, Rng(3), steps=10_000)
    acts = sample_policy_actions(policy, "score", SCHED, np.zeros((1, 1)), Rng(4), 4000)[0]
    assert abs(acts.mean()) < 0.05
    assert abs(acts.std() - 1.0) < 0.05


def test_behavior_pretrain_degenerate_single_action():
    n = 4096
    a_star = 0.7
    ds = OfflineDataset(
        np.zeros((n, 1)), np.full((n, 1), a_star), np.zeros(n), np.zeros((n, 1)),
        np.ones(n, dtype=bool),
    )
    policy = behavior_pretrain(ds, SCHED, Rng(5), steps=5000)
    acts = sample_policy_actions(policy, "score", SCHED, np.zeros((1, 1)), Rng(6), 2000)[0]
    assert abs(acts.mean() - a_star) < 0.1
    assert acts.std() < 0.1


def test_behavior_pretrain_conditions_on_state():
    n = 8192
    rng = Rng(7)
    states = np.where(rng.uniform(size=(n, 1)) < 0.5, -1.0, 1.0)
    actions = 2.0 * states + 0.2 * rng.normal((n, 1))
    ds = OfflineDataset(states, actions, np.zeros(n), states.copy(), np.ones(n, dtype=bool))
    policy = behavior_pretrain(ds, SCHED, Rng(8), steps=6000)
    lo = sample_policy_actions(policy, "score", SCHED, np.array([[-1.0]]), Rng(9), 1000)[0]
    hi = sample_policy_actions(policy, "score", SCHED, np.array([[1.0]]), Rng(10), 1000)[0]
    assert lo.mean() < -1.5 and hi.mean() > 1.5


def test_flow_policy_pretrain_works_too():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 8192, Rng(11))
    sched = PathSchedule.ot()
    policy = behavior_pretrain(ds, sched, Rng(12), kind="velocity", steps=8000)
    acts = sample_policy_actions(policy, "velocity", sched, np.zeros((1, 1)), Rng(13), 2000)[0]
    assert abs(acts.mean()) < 0.08
    assert abs(acts.std() - 1.0) < 0.08


def test_support_set_layout_and_weights():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 512, Rng(14))
    policy = behavior_pretrain(ds, SCHED, Rng(15), steps=800)
    states = ds.states[:8]
    acts = build_support_set(policy, "score", SCHED, states, ds.actions[:8], 4, Rng(16))
    assert acts.shape == (8, 5, 1)
    assert np.array_equal(acts[:, 0, :], ds.actions[:8])
    with pytest.raises(ValueError):
        build_support_set(policy, "score", SCHED, states, ds.actions[:8], 0, Rng(17))

    q = np.zeros((8, 5))
    assert np.allclose(support_weights(q, 2.0), 0.2)
    qv = spec.q_values(None, acts.reshape(-1, 1)).reshape(8, 5)
    w = support_weights(qv, 1.0)
    assert np.array_equal(w.argmax(axis=1), qv.argmax(axis=1))
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9


def test_q_learning_td_targets():
    rng = Rng(18)
    qnet = MlpModel.init(2, 1, rng, hidden=(8,), embed_dim=0)
    q_target = qnet.copy()
    adam = AdamState.for_model(qnet, lr=0.0)  # inspect loss without moving
    batch = {
        "states": rng.normal((16, 1)),
        "actions": rng.normal((16, 1)),
        "rewards": rng.normal(16),
        "next_states": rng.normal((16, 1)),
        "terminals": np.zeros(16, dtype=bool),
    }
    support = rng.normal((16, 1, 1))  # single support action
    # gamma = 0: target is exactly the reward
    pred = q_forward(qnet, batch["states"], batch["actions"])
    want = float(((pred - batch["rewards"]) ** 2).mean())
    loss = q_learning_step(qnet, q_target, adam, batch, support, beta=3.0, gamma=0.0, lam_soft=0.0)
    assert loss == pytest.approx(want, rel=1e-12)
    # single support action: softmax weight 1, target r + gamma * Q_target
    qn = q_forward(q_target, batch["next_states"], support[:, 0, :])
    want_target = batch["rewards"] + 0.9 * qn
    pred = q_forward(qnet, batch["states"], batch["actions"])
    want = float(((pred - want_target) ** 2).mean())
    loss = q_learning_step(qnet, q_target, adam, batch, support, beta=3.0, gamma=0.9, lam_soft=0.0)
    assert loss == pytest.approx(want, rel=1e-12)


def test_soft_value_iteration_chain_properties():
    spec = ChainMdpSpec()
    q = soft_value_iteration(spec, beta=1.0)
    assert q.shape == (5, 2)
    # pushing right is better everywhere on this chain
    assert np.all(q[:, 1] > q[:, 0])
    # values increase toward the rewarding end
    assert np.all(np.diff(q[:, 1]) > 0)


def test_chain_q_learning_converges_to_soft_value_iteration():
    spec = ChainMdpSpec()
    q_star = soft_value_iteration(spec, beta=1.0)
    ds = make_chain_dataset(spec, repeats=64, rng=Rng(19))
    qnet = train_chain_q(spec, ds, beta=1.0, rng=Rng(20), steps=8000)
    states = spec.one_hot(np.repeat(np.arange(5), 2))
    actions = spec.action_one_hot(np.tile(np.arange(2), 5))
    q_learned = q_forward(qnet, states, actions).reshape(5, 2)
    assert np.abs(q_learned - q_star).max() < 0.05


def test_bandit_q_regression():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 8192, Rng(21))
    q_fn = train_bandit_q(spec, ds, Rng(22), steps=4000)
    probes = np.linspace(-2, 2, 9)[:, None]
    got = q_fn(np.zeros((9, 1)), probes)
    assert np.abs(got - probes[:, 0]).max() < 0.1


def test_qipo_beta_zero_stays_at_behavior():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 2048, Rng(23))
    policy = behavior_pretrain(ds, SCHED, Rng(24), steps=4000)
    cfg = QipoConfig(beta=0.0, m_support=8, k_renew=10, k3=3, batch=128, lr=1e-4, eval_n=2000)
    res = qipo_iterate(policy, spec.q_values, ds, SCHED, cfg, Rng(25), spec=spec)
    assert abs(res.eval_rows[-1]["policy_mean"][0]) < 0.1


def test_qipo_one_shot_large_support_matches_single_tilt():
    # K_renew > K3: one renewal only; with a large support the fit target is
    # the exact exp(Q)-tilt of the behavior, N(1, 1)
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 1024, Rng(26))
    policy = behavior_pretrain(ds, SCHED, Rng(27), steps=6000)
    cfg = QipoConfig(
        beta=1.0, m_support=128, k_renew=1000, k3=30, batch=64, lr=3e-4, eval_n=4000,
        eval_every=30,
    )
    res = qipo_iterate(policy, spec.q_values, ds, SCHED, cfg, Rng(28), spec=spec)
    draws = sample_policy_actions(
        res.policy, "score", SCHED, np.zeros((1, 1)), Rng(29), 4000
    )[0]
    ref = np.array([[1.0]]) + Rng(30).normal((4000, 1))
    assert res.support_renewals == 1
    assert sliced_wasserstein(draws, ref, rng=Rng(31)) < 0.1


def test_qipo_divergence_detector():
    spec = BanditSpec(w=[1.0])
    ds = make_bandit_dataset(spec, 512, Rng(32))
    policy = behavior_pretrain(ds, SCHED, Rng(33), steps=500)
    cfg = QipoConfig(beta=1.0, m_support=4, k3=2, batch=64, divergence_factor=1e-6)
    with pytest.raises(RuntimeError, match="diverged"):
        qipo_iterate(policy, spec.q_values, ds, SCHED, cfg, Rng(34), spec=spec)
