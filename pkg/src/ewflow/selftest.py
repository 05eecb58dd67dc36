"""Built-in invariant suite: fast structural checks behind `ewflow selftest`.

Each check returns pass/fail with wall-clock; the continuity check accepts an
injectable velocity override so the suite itself can be validated by breaking
one ingredient (a sign flip must make it fail).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .datasets import make_dataset
from .energies import EnergySpec
from .mixtures import gmm_logpdf, path_marginal
from .nn import MlpModel, backward, forward, forward_cached
from .oracle import GuidedOracle
from .paths import PathSchedule, T_EPS, cond_velocity, perturb, score_from_velocity, velocity_from_score
from .rng import Rng
from .training import loss_ced_exact, loss_cefm_exact, loss_ed_exact, loss_efm_exact

__all__ = ["CheckResult", "run_selftest"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    seconds: float
    detail: str


def _timed(name, fn):
    start = time.perf_counter()
    try:
        passed, detail = fn()
    except Exception as exc:  # noqa: BLE001
        passed, detail = False, f"raised {type(exc).__name__}: {exc}"
    return CheckResult(name, passed, time.perf_counter() - start, detail)


def _check_conversion_roundtrip():
    rng = Rng(101)
    worst = 0.0
    for sched in (PathSchedule.ot(), PathSchedule.vp()):
        x = rng.normal((64, 2))
        s = rng.normal((64, 2))
        t = rng.uniform(T_EPS, 1 - T_EPS, 64)
        v = velocity_from_score(sched, x, s, t)
        s2 = score_from_velocity(sched, x, v, t)
        worst = max(worst, float(np.abs(s2 - s).max()))
    return worst < 1e-10, f"max round-trip error {worst:.2e}"


def _check_cond_velocity_derivative():
    rng = Rng(102)
    worst = 0.0
    h = 1e-6
    for sched in (PathSchedule.ot(), PathSchedule.vp()):
        x0 = rng.normal((8, 2))
        eps = rng.normal((8, 2))
        # strictly interior times: sigma(t) ~ sqrt(t) for vp makes central
        # differences unreliable right at the clamp boundary
        for t in np.linspace(0.0, 1.0, 103)[1:-1]:
            x_t = float(sched.mu(t)) * x0 + float(sched.sigma(t)) * eps
            u = cond_velocity(sched, x_t, x0, np.full(8, t))
            xp = float(sched.mu(t + h)) * x0 + float(sched.sigma(t + h)) * eps
            xm = float(sched.mu(t - h)) * x0 + float(sched.sigma(t - h)) * eps
            fd = (xp - xm) / (2 * h)
            worst = max(worst, float(np.abs(u - fd).max()))
    return worst < 1e-6, f"max |analytic - finite difference| {worst:.2e}"


def _check_nn_gradients():
    rng = Rng(103)
    model = MlpModel.init(2, 2, rng, hidden=(16, 16), embed_dim=8)
    x = rng.normal((4, 2))
    t = rng.uniform(0.1, 0.9, 4)
    up = rng.normal((4, 2))
    out, cache = forward_cached(model, x, t)
    gw, gb = backward(model, cache, up)
    h = 1e-5
    worst = 0.0
    probes = 0
    prng = Rng(104)
    while probes < 20:
        li = int(prng.integers(0, len(model.weights)))
        r = int(prng.integers(0, model.weights[li].shape[0]))
        c = int(prng.integers(0, model.weights[li].shape[1]))
        orig = model.weights[li][r, c]
        model.weights[li][r, c] = orig + h
        fp = float((forward(model, x, t) * up).sum())
        model.weights[li][r, c] = orig - h
        fm = float((forward(model, x, t) * up).sum())
        model.weights[li][r, c] = orig
        fd = (fp - fm) / (2 * h)
        rel = abs(fd - gw[li][r, c]) / max(abs(fd), 1e-8)
        worst = max(worst, rel)
        probes += 1
    return worst < 1e-4, f"max relative gradient error {worst:.2e} over 20 probes"


def _gradient_equality(flow: bool, oracle, model, t_nodes):
    a = (loss_efm_exact if flow else loss_ed_exact)(model, oracle, t_nodes)
    b = (loss_cefm_exact if flow else loss_ced_exact)(model, oracle, t_nodes)
    fa = np.concatenate([g.ravel() for g in a[1][0] + a[1][1]])
    fb = np.concatenate([g.ravel() for g in b[1][0] + b[1][1]])
    rel = float(np.linalg.norm(fa - fb) / max(np.linalg.norm(fa), 1e-300))
    return rel


def _check_gradient_equality():
    rng = Rng(105)
    gmm = make_dataset("8gaussians")
    energy = EnergySpec.quadratic([0.25, 0.25], beta=1.0, center=[4.0, 0.0], classifier=True)
    oracle = GuidedOracle(gmm, energy, PathSchedule.ot(), grid_res=32)
    model = MlpModel.init(2, 2, rng, hidden=(16,), embed_dim=8)
    rel_flow = _gradient_equality(True, oracle, model, [0.5])
    rel_score = _gradient_equality(False, oracle, model, [0.5])
    ok = rel_flow < 1e-5 and rel_score < 1e-5
    return ok, f"relative gradient gap: flow {rel_flow:.2e}, score {rel_score:.2e}"


def _check_guidance_composition_identity():
    gmm = make_dataset("bimodal2d")
    energy = EnergySpec.quadratic([0.25, 0.25], beta=1.0, center=[2.0, 0.0], classifier=True)
    oracle = GuidedOracle(gmm, energy, PathSchedule.vp())
    rng = Rng(106)
    x = rng.normal((100, 2)) * 2.0
    worst = 0.0
    for t in (0.25, 0.5, 0.75):
        a = oracle.cfg_score_exact(x, t, beta=1.0)
        b = oracle.cep_score_exact(x, t, beta=1.0)
        worst = max(worst, float(np.abs(a - b).max()))
    return worst < 1e-6, f"max |affine - exact| at unit scale {worst:.2e}"


def _continuity_residual(oracle, t, resolution, velocity_override=None):
    ref = oracle._reference_grid(resolution)
    pts = ref.centers()
    hx = (ref.x_max - ref.x_min) / resolution
    hy = (ref.y_max - ref.y_min) / resolution
    dt = 1e-3
    q_plus = oracle._qt_values(pts, t + dt, "analytic")
    q_minus = oracle._qt_values(pts, t - dt, "analytic")
    dq_dt = (q_plus - q_minus) / (2 * dt)
    q = oracle._qt_values(pts, t, "analytic")
    if velocity_override is None:
        u = oracle.guided_velocity(pts, t, route="analytic")
    else:
        u = velocity_override(pts, t)
    fx = (q * u[:, 0]).reshape(resolution, resolution)
    fy = (q * u[:, 1]).reshape(resolution, resolution)
    div = np.gradient(fy, hy, axis=0) + np.gradient(fx, hx, axis=1)
    return float(np.abs(dq_dt.reshape(resolution, resolution) + div).sum() * hx * hy)


def _check_continuity(mutations=frozenset(), resolution=768):
    gmm = make_dataset("8gaussians")
    energy = EnergySpec.quadratic([0.25, 0.25], beta=1.0, center=[4.0, 0.0], classifier=True)
    worst = 0.0
    for sched in (PathSchedule.ot(), PathSchedule.vp()):
        oracle = GuidedOracle(gmm, energy, sched)
        override = None
        if "cond_score_sign" in mutations:

            def override(pts, t, _o=oracle, _s=sched):
                flipped = -_o.guided_score(pts, t, route="analytic")
                return velocity_from_score(_s, pts, flipped, t)

        worst = max(worst, _continuity_residual(oracle, 0.5, resolution, override))
    return worst < 5e-3, f"max integrated residual {worst:.2e} (budget 5e-3)"


def _check_perturb_statistics():
    rng = Rng(107)
    sched = PathSchedule.ot()
    x0 = np.full((200_000, 1), 2.0)
    t = np.full(200_000, 0.5)
    x_t, eps = perturb(sched, x0, t, rng)
    mean_err = abs(float(x_t.mean()) - 2.0 * 0.5)
    sig = float(sched.sigma(0.5))
    var_err = abs(float(x_t.var()) - sig**2)
    ok = mean_err < 0.005 and var_err < 0.005 and abs(float(eps.mean())) < 0.01
    return ok, f"mean err {mean_err:.4f}, var err {var_err:.4f}"


def _check_marginal_consistency():
    gmm = make_dataset("bimodal1d")
    sched = PathSchedule.vp()
    rng = Rng(108)
    x = np.linspace(-4, 4, 41)[:, None]
    worst = 0.0
    for t in (0.3, 0.7):
        analytic = gmm_logpdf(path_marginal(gmm, sched, t), x)
        oracle = GuidedOracle(gmm, EnergySpec.linear([0.0], 0.0), sched, grid_res=64)
        quad = oracle.marginal_logdensity(x, t, route="quad")
        worst = max(worst, float(np.abs(analytic - quad).max()))
    del rng
    return worst < 1e-4, f"max |log p_t analytic - quadrature| {worst:.2e}"


def run_selftest(fast: bool = True, mutations: frozenset = frozenset()) -> list[CheckResult]:
    resolution = 768 if fast else 1024
    checks = [
        ("velocity/score round trip", _check_conversion_roundtrip),
        ("conditional velocity = path derivative", _check_cond_velocity_derivative),
        ("network gradients vs finite differences", _check_nn_gradients),
        ("marginal vs conditional loss gradients", _check_gradient_equality),
        ("guidance compositions agree at unit scale", _check_guidance_composition_identity),
        ("guided field satisfies continuity", lambda: _check_continuity(mutations, resolution)),
        ("perturbation statistics", _check_perturb_statistics),
        ("analytic vs quadrature marginals", _check_marginal_consistency),
    ]
    return [_timed(name, fn) for name, fn in checks]
