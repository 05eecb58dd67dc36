import numpy as np
import pytest

from ewflow.datasets import make_dataset
from ewflow.energies import EnergySpec, tilt_mixture
from ewflow.grids import grid_tv_distance
from ewflow.mixtures import GaussianMixture, gmm_score, path_marginal
from ewflow.oracle import GuidedOracle
from ewflow.paths import PathSchedule, velocity_from_score
from ewflow.rng import Rng


def _gauss_linear_oracle(beta=1.0, sched=None):
    gmm = GaussianMixture.create([1.0], [[0.0]], [[1.0]])
    return GuidedOracle(gmm, EnergySpec.linear([1.0], beta), sched or PathSchedule.ot(), grid_res=64)


def _bimodal_classifier_oracle(beta=1.0, sched=None):
    gmm = make_dataset("bimodal1d")
    energy = EnergySpec.quadratic([0.25], beta, center=[2.0], classifier=True)
    return GuidedOracle(gmm, energy, sched or PathSchedule.vp(), grid_res=64)


def test_log_z_routes_agree():
    orc = _gauss_linear_oracle(beta=1.3)
    assert orc.log_z() == pytest.approx(1.3**2 / 2, rel=1e-10)
    quad = GuidedOracle(orc.base, orc.energy, orc.sched, grid_res=64)
    quad.analytic = False
    assert quad.log_z() == pytest.approx(orc.log_z(), abs=1e-6)


def test_intermediate_energy_zero_guidance():
    orc = _gauss_linear_oracle(beta=0.0)
    x = np.linspace(-2, 2, 7)[:, None]
    assert np.abs(orc.intermediate_energy(x, 0.4)).max() == 0.0


def test_intermediate_energy_gaussian_linear_closed_form():
    beta = 1.0
    orc = _gauss_linear_oracle(beta)
    sched = orc.sched
    x = np.linspace(-3, 3, 11)[:, None]
    for t in (0.2, 0.5, 0.8):
        mu, sig = float(sched.mu(t)), float(sched.sigma(t))
        m = mu * x[:, 0] / (mu**2 + sig**2)
        v = sig**2 / (mu**2 + sig**2)
        want = beta * m - beta**2 * v / 2
        got_a = orc.intermediate_energy(x, t, route="analytic")
        got_q = orc.intermediate_energy(x, t, route="quad")
        assert np.abs(got_a - want).max() < 1e-10
        assert np.abs(got_q - want).max() < 1e-6


def test_intermediate_energy_flattens_to_minus_log_z():
    orc = _gauss_linear_oracle(1.0)
    x = np.linspace(-3, 3, 31)[:, None]
    e = orc.intermediate_energy(x, 0.999, route="quad")
    assert np.ptp(e) < 0.01
    assert abs(e.mean() + (-orc.log_z())) < 2e-2 or abs(e.mean() - (-orc.log_z())) < 2e-2


def test_guided_q0_gaussian_linear_grid_moments():
    # 2D version of N(0,1) with E = x . (1, 0): q0 = N((-1, 0), I)
    gmm = GaussianMixture.create([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    orc = GuidedOracle(gmm, EnergySpec.linear([1.0, 0.0], 1.0), PathSchedule.ot(), grid_res=128)
    grid = orc.guided_q0_grid(256)
    pts = grid.centers()
    mass = grid.masses().ravel()
    mean = mass @ pts
    var = mass @ (pts - mean) ** 2
    assert abs(mean[0] + 1.0) < 0.01 and abs(mean[1]) < 0.01
    assert abs(var[0] - 1.0) < 0.02 and abs(var[1] - 1.0) < 0.02


def test_guided_q0_gaussian_quadratic_variance():
    gmm = GaussianMixture.create([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
    orc = GuidedOracle(gmm, EnergySpec.quadratic([1.0, 1.0], 1.0), PathSchedule.ot(), grid_res=128)
    grid = orc.guided_q0_grid(256)
    pts = grid.centers()
    mass = grid.masses().ravel()
    var = mass @ (pts - mass @ pts) ** 2
    assert np.abs(var - 0.5).max() < 0.02


@pytest.mark.parametrize("t", [0.25, 0.5, 0.75])
def test_qt_closed_form_vs_convolution(t):
    gmm = make_dataset("bimodal2d")
    energy = EnergySpec.quadratic([0.25, 0.25], 2.0, center=[2.0, 0.0], classifier=True)
    orc = GuidedOracle(gmm, energy, PathSchedule.ot(), grid_res=96)
    orc.analytic = False  # force both routes through quadrature machinery
    a = orc.guided_qt_grid(t, resolution=96)
    b = orc.guided_qt_grid(t, resolution=96, route="convolve")
    tv = 0.5 * np.abs(a.masses() - b.masses()).sum()
    assert tv < 0.01


def test_guided_velocity_zero_guidance_equals_marginal_velocity():
    gmm = make_dataset("bimodal1d")
    sched = PathSchedule.ot()
    orc = GuidedOracle(gmm, EnergySpec.linear([0.0], 0.0), sched, grid_res=64)
    x = np.linspace(-4, 4, 21)[:, None]
    for t in (0.3, 0.7):
        marg = path_marginal(gmm, sched, t)
        want = velocity_from_score(sched, x, gmm_score(marg, x), np.full(len(x), t))
        got = orc.guided_velocity(x, t, route="quad")
        assert np.abs(got - want).max() < 1e-4


def test_guided_score_gaussian_linear_closed_form_and_quadrature():
    beta = 1.0
    orc = _gauss_linear_oracle(beta)
    sched = orc.sched
    x = np.linspace(-3, 3, 11)[:, None]
    for t in (0.25, 0.6):
        mu, sig = float(sched.mu(t)), float(sched.sigma(t))
        want = -(x + beta * mu) / (mu**2 + sig**2)
        assert np.abs(orc.guided_score(x, t, route="analytic") - want).max() < 1e-10
        assert np.abs(orc.guided_score(x, t, route="quad") - want).max() < 1e-4


def test_guided_velocity_routes_agree():
    gmm = make_dataset("8gaussians")
    energy = EnergySpec.quadratic([0.25, 0.25], 1.0, center=[4.0, 0.0], classifier=True)
    # node bounds must cover the p0-weighted posterior support; the default
    # 4-sigma padding truncates it for probes mapped outward by 1/mu_t
    orc = GuidedOracle(gmm, energy, PathSchedule.ot(), grid_res=160, pad_sigmas=8.0)
    pts = Rng(1).normal((20, 2)) * 1.2
    for t in (0.3, 0.6):
        a = orc.guided_velocity(pts, t, route="analytic")
        q = orc.guided_velocity(pts, t, route="quad")
        assert np.abs(a - q).max() < 1e-4


def test_score_decomposition_identity():
    # grad log q_t = grad log p_t - grad E_t, each computed independently by
    # quadrature (E_t gradient via central differences)
    orc = _bimodal_classifier_oracle(beta=2.0)
    x = np.linspace(-3.5, 3.5, 15)[:, None]
    h = 1e-4
    for t in (0.35, 0.7):
        s_q = orc.guided_score(x, t, route="quad")[:, 0]
        s_p = orc.marginal_score(x, t, route="quad")[:, 0]
        de = (
            orc.intermediate_energy(x + h, t, route="quad")
            - orc.intermediate_energy(x - h, t, route="quad")
        ) / (2 * h)
        assert np.abs(s_q - (s_p - de)).max() < 1e-4


def test_normalizer_constant_across_time():
    orc = _bimodal_classifier_oracle(beta=1.5)
    orc._ensure_nodes()
    nodes = orc._nodes
    z = np.exp(orc.log_z())
    for t in np.linspace(0.1, 0.9, 9):
        log_p = orc.marginal_logdensity(nodes, t, route="quad")
        e_t = orc.intermediate_energy(nodes, t, route="quad")
        z_t = float(np.exp(log_p - e_t).sum() * orc._node_area)
        assert abs(z_t - z) < 1e-3 * max(z, 1.0)


def test_cfg_cep_equal_at_unit_scale_and_differ_beyond():
    orc = _bimodal_classifier_oracle(beta=1.0)
    rng = Rng(2)
    worst = 0.0
    for _ in range(100):
        x = rng.normal((1, 1)) * 2.0
        t = float(rng.uniform(0.05, 0.95))
        d = np.abs(orc.cfg_score_exact(x, t, beta=1.0) - orc.cep_score_exact(x, t, beta=1.0))
        worst = max(worst, float(d.max()))
    assert worst < 1e-6
    # at beta = 2 the exponent placement matters on a bimodal target
    grid = np.linspace(-4, 4, 81)[:, None]
    gap = 0.0
    for t in (0.2, 0.5, 0.8):
        d = np.abs(orc.cfg_score_exact(grid, t, beta=2.0) - orc.cep_score_exact(grid, t, beta=2.0))
        gap = max(gap, float(d.max()))
    assert gap > 0.1


def test_cfg_cep_zero_scale_is_marginal_score():
    orc = _bimodal_classifier_oracle()
    x = np.linspace(-3, 3, 11)[:, None]
    s_p = orc.marginal_score(x, 0.4)
    assert np.abs(orc.cfg_score_exact(x, 0.4, beta=0.0) - s_p).max() < 1e-12
    assert np.abs(orc.cep_score_exact(x, 0.4, beta=0.0) - s_p).max() < 1e-10


def test_cfg_requires_classifier_energy():
    orc = _gauss_linear_oracle()
    with pytest.raises(ValueError, match="classifier"):
        orc.cfg_score_exact(np.zeros((1, 1)), 0.5, beta=2.0)


def test_shift_invariance_of_guided_quantities():
    gmm = make_dataset("bimodal2d")
    base_energy = EnergySpec.quadratic([0.25, 0.25], 1.5, center=[2.0, 0.0])
    shifted = base_energy.with_shift(-3.0)  # E + 3
    sched = PathSchedule.ot()
    a = GuidedOracle(gmm, base_energy, sched, grid_res=96)
    b = GuidedOracle(gmm, shifted, sched, grid_res=96)
    assert b.log_z() == pytest.approx(a.log_z() - 1.5 * 3.0, abs=1e-10)
    pts = Rng(3).normal((10, 2)) * 2
    for t in (0.3, 0.7):
        assert np.abs(a.guided_velocity(pts, t) - b.guided_velocity(pts, t)).max() < 1e-8
        assert np.abs(a.guided_score(pts, t) - b.guided_score(pts, t)).max() < 1e-8
    ga = a.guided_q0_grid(96)
    gb = b.guided_q0_grid(96)
    assert np.abs(ga.values - gb.values).max() < 1e-8


def test_large_beta_stays_finite():
    orc = _bimodal_classifier_oracle(beta=50.0)
    x = np.linspace(-4, 4, 17)[:, None]
    e = orc.intermediate_energy(x, 0.5, route="quad")
    s = orc.guided_score(x, 0.5, route="quad")
    assert np.all(np.isfinite(e)) and np.all(np.isfinite(s))


def test_grid_base_oracle_matches_mixture_oracle():
    from ewflow.grids import DensityGrid, grid_sample

    gmm = make_dataset("bimodal2d")
    base = DensityGrid.from_mixture(gmm, 128, pad_sigmas=6.0)
    energy = EnergySpec.quadratic([0.25, 0.25], 1.0, center=[2.0, 0.0], classifier=True)
    orc = GuidedOracle(base, energy, PathSchedule.ot())
    exact = GuidedOracle(gmm, energy, PathSchedule.ot())
    pts = grid_sample(exact.guided_q0_grid(128), Rng(4), 10)
    for t in (0.4,):
        assert np.abs(orc.guided_score(pts, t) - exact.guided_score(pts, t)).max() < 1e-3
    a = orc.guided_q0_grid(128)
    b = DensityGrid.from_fn(
        lambda p: np.asarray(_tilted_density(exact, p)), ((a.x_min, a.x_max), (a.y_min, a.y_max)), 128
    )
    assert 0.5 * np.abs(a.masses() - b.masses()).sum() < 5e-3


def _tilted_density(oracle, pts):
    from ewflow.mixtures import gmm_logpdf

    return np.exp(gmm_logpdf(oracle.tilted_base(), pts))
