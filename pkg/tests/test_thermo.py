import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anharmonic import ensembles as ensm
from anharmonic import thermo as th
from anharmonic.dynamics import Configuration
from anharmonic.model import LatticeModel, PotentialSpec, box_sites, reference_model

HALF_LOG_2PI_E = 0.5 * math.log(2 * math.pi * math.e)
HARMONIC_ONSITE = PotentialSpec("polynomial", (0.0, 0.0, 0.5))


def single_site():
    return LatticeModel(1, 1, HARMONIC_ONSITE, name="harmonic-site")


# --- energy -----------------------------------------------------------------

def test_energy_of_zero_configuration():
    for name in ("harmonic-chain", "fpu-chain", "quartic-lattice-2d"):
        m = reference_model(name)
        g = box_sites(m.nu, 2)
        cfg = Configuration.zeros(g)
        assert th.energy(cfg, m, "box").value == 0.0
        assert th.energy(cfg, m, "full").value == 0.0


def test_box_energy_by_hand():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 2)
    cfg = Configuration.zeros(g)
    cfg.q[g.index((-1,))] = 1.0
    # on-site 1/2 plus one pair term 1/4
    assert th.energy(cfg, m, "box").value == pytest.approx(0.75)


def test_full_energy_needs_complete_site():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 2)
    with pytest.raises(ValueError):
        th.energy(Configuration.zeros(g), m, "full", site=(2,))
    with pytest.raises(ValueError):
        th.energy(Configuration.zeros(g), m, "kinetic")


def test_local_energies_sum_to_box_energy(shipped_model, rng):
    g = box_sites(shipped_model.nu, 3 if shipped_model.nu == 1 else 2)
    q = shipped_model.wrap(rng.standard_normal((g.n_sites, shipped_model.site_dim)))
    p = rng.standard_normal(q.shape)
    from anharmonic.dynamics import BoxSystem

    sys_ = BoxSystem(shipped_model, g)
    assert sys_.energy_local(q, p).sum() == pytest.approx(sys_.hamiltonian(q, p), rel=1e-12)


def test_box_and_local_energy_gap_shrinks():
    m = reference_model("harmonic-chain")
    gaps = []
    for a in (4, 8, 16):
        g = box_sites(1, a)
        ens = ensm.sample(ensm.ProductGaussian(g), 20_000, a, model=m)
        gaps.append(th.energy(ens, m, "full").value - th.energy(ens, m, "box").value)
    # exact gap for this state is kappa/4 E(dq^2) / n = 0.5 / (2a)
    assert gaps[0] > gaps[1] > gaps[2] > 0
    assert gaps[0] * 4 / 16 == pytest.approx(0.5 / 32, abs=0.01)


# --- entropy ----------------------------------------------------------------

def test_gaussian_entropy_examples():
    g1 = box_sites(1, 1)
    assert th.gaussian_entropy(1.0) == pytest.approx(1.41894, abs=1e-5)
    assert th.entropy_analytic(ensm.ProductGaussian(g1)).value == pytest.approx(4 * 1.418938533, abs=1e-8)
    assert th.gaussian_entropy(4.0) == pytest.approx(1.418938533 + math.log(2))
    with pytest.raises(ValueError):
        th.gaussian_entropy(np.diag([1.0, -1.0]))
    with pytest.raises(TypeError):
        th.entropy_analytic("not a state")


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(1, 6))
def test_gaussian_entropy_scaling(var, dim):
    cov = var * np.eye(dim)
    assert th.gaussian_entropy(cov) == pytest.approx(dim * (HALF_LOG_2PI_E + 0.5 * math.log(var)), rel=1e-12)


def test_knn_unit_gaussian_2d(rng):
    x = rng.standard_normal((100_000, 2))
    r = th.entropy_knn(x, seed=1)
    assert abs(r.value - 2 * 1.418938533) < 0.05
    assert r.method == "KNN" and r.stderr > 0


def test_knn_uniform_square(rng):
    r = th.entropy_knn(rng.random((100_000, 2)), seed=2)
    assert abs(r.value) < 0.05


def test_knn_torus_uniform(rng):
    x = 2 * np.pi * rng.random((20_000, 2))
    r = th.entropy_knn(x, period=[2 * np.pi, 2 * np.pi], seed=3)
    assert r.value == pytest.approx(2 * math.log(2 * math.pi), abs=0.05)


def test_knn_guards(rng):
    with pytest.raises(ValueError, match="cap"):
        th.entropy_knn(rng.standard_normal((20_000, 13)))
    with pytest.raises(ValueError):
        th.entropy_knn(rng.standard_normal((100, 2)))


def test_knn_ties_are_jittered(rng):
    x = rng.standard_normal((10_000, 2))
    x[5000:] = x[:5000]
    r = th.entropy_knn(x, seed=4)
    assert r.extra["ties_jittered"] > 0 and math.isfinite(r.value)


def test_knn_below_floor_flag(rng):
    x = 1e-30 * rng.standard_normal((10_000, 2))
    r = th.entropy_knn(x, seed=5, n_sites=1)
    assert r.extra["below_floor"]


def test_knn_calibration_reduces_bias(rng):
    A = rng.standard_normal((6, 6))
    cov = A @ A.T + np.eye(6)
    x = rng.multivariate_normal(np.zeros(6), cov, 20_000)
    exact = th.gaussian_entropy(cov)
    raw = th.entropy_knn(x, seed=6)
    cal = th.entropy_knn(x, seed=6, calibrate=True)
    assert abs(cal.value - exact) < abs(raw.value - exact) + 0.01
    assert abs(cal.value - exact) < 3 * cal.stderr + 0.01


def test_specific_entropy_product_state_constant():
    r = th.specific_entropy(lambda a: th.entropy_analytic(ensm.ProductGaussian(box_sites(1, a))), [1, 2, 3, 4])
    assert np.allclose(r.per_site, 2 * 1.418938533)
    assert r.fekete_ok


def test_specific_entropy_coupled_chain_decreases_to_limit():
    m = reference_model("harmonic-chain")
    r = th.specific_entropy(lambda a: th.gaussian_entropy(th.gibbs_covariance(m, box_sites(1, a), 1.0)),
                            range(1, 9))
    vals = np.array(r.per_site)
    limit = th.harmonic_chain_specific_entropy(1.0, 1.0)
    assert np.all(np.diff(vals) < 0)
    assert np.all(vals > limit)
    assert r.fekete_ok
    assert vals[-1] - limit < 0.02


def test_harmonic_oracles_agree_with_large_box():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 40)
    C = th.gibbs_covariance(m, g, 2.0)[:80, :80]
    ref = th.harmonic_chain_covariance(1.0, 2.0, 5)
    k = g.index((0,))
    assert np.allclose(C[k:k + 5, k:k + 5], ref, atol=1e-12)


def test_subadditivity_analytic():
    prod = th.subadditivity_check(np.eye(4), [0, 1])
    assert prod["equality"]
    rho = 0.5
    r = th.subadditivity_check(np.array([[1, rho], [rho, 1]]), [0])
    assert r["mutual_information"] == pytest.approx(-0.5 * math.log(1 - rho**2))
    assert r["S_joint"] < r["S_first"] + r["S_second"]
    with pytest.raises(ValueError):
        th.subadditivity_check(np.eye(2), [0, 1])


# --- linear flows -----------------------------------------------------------

def test_linear_flow_is_symplectic():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 3)
    n = g.n_sites
    J = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    for M in (th.linear_flow_matrix(m, g, 1.3), th.linear_flow_matrix(m, g, 1.3, h=1e-2)):
        assert np.allclose(M @ J @ M.T, J, atol=1e-10)
    with pytest.raises(ValueError):
        th.linear_flow_matrix(reference_model("fpu-chain"), g, 1.0)


def test_gibbs_covariance_is_flow_invariant():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 3)
    C = th.gibbs_covariance(m, g, 1.5)
    M = th.linear_flow_matrix(m, g, 2.0)
    assert np.allclose(M @ C @ M.T, C, atol=1e-10)


# --- pressure ---------------------------------------------------------------

def test_single_free_site_pressure():
    g = box_sites(1, 1)
    for method in ("quadrature", "MC"):
        r = th.pressure(single_site(), 1.0, g, method, n_samples=2000)
        assert r.value == pytest.approx(math.log(2 * math.pi), abs=1e-9)


def test_kinetic_part():
    assert th.kinetic_pressure(1, 2.0) == pytest.approx(0.5 * math.log(math.pi))
    r = th.pressure(reference_model("fpu-chain"), 2.0, box_sites(1, 2), "quadrature")
    assert r.extra["kinetic"] == 0.5 * math.log(2 * math.pi / 2.0)


def test_transfer_pressure_harmonic_limit():
    for beta in (0.5, 1.0, 3.0):
        r = th.transfer_pressure(reference_model("harmonic-chain"), beta)
        assert r.value == pytest.approx(th.harmonic_chain_pressure(1.0, beta)["potential"], abs=1e-8)


def test_box_quadrature_matches_gaussian_determinant():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 3)
    beta = 1.7
    K = th.severed_hessian(m, g)
    n = g.n_sites
    exact = 0.5 * n * math.log(2 * math.pi / beta) - 0.5 * np.linalg.slogdet(K)[1]
    r = th.pressure(m, beta, g, "quadrature")
    assert r.extra["potential"] * n == pytest.approx(exact, abs=1e-8)


def test_fpu_pressure_two_routes():
    m = reference_model("fpu-chain")
    g = box_sites(1, 2)
    mc = th.pressure(m, 1.0, g, "MC", n_samples=100_000, seed=3)
    qd = th.pressure(m, 1.0, g, "quadrature")
    assert abs(mc.value - qd.value) < 4 * mc.stderr + 1e-4
    assert not mc.extra["unreliable"]


def test_rotator_pressure_two_routes():
    m = reference_model("rotator-chain")
    g = box_sites(1, 2)
    mc = th.pressure(m, 1.0, g, "MC", n_samples=100_000, seed=3)
    qd = th.pressure(m, 1.0, g, "quadrature", n_nodes=256)
    assert abs(mc.value - qd.value) < 4 * mc.stderr + 1e-4


def test_pressure_curve_convex_and_derivative():
    m = reference_model("fpu-chain")
    betas = np.geomspace(0.25, 4, 9)
    curve = th.pressure_curve(m, betas, method="quadrature", infinite_volume=True)
    assert curve.is_convex()
    assert curve.kinetic_exact()
    # -dp/dbeta against the direct mean energy
    fd = -np.gradient(curve.p, curve.betas)
    assert np.allclose(curve.minus_derivative()[2:-2], fd[2:-2], rtol=0.05)


def test_pressure_curve_csv(tmp_path):
    curve = th.PressureCurve.from_function([0.5, 1.0, 2.0], lambda b: 0.0)
    curve.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1] == "beta,p,p_kin,p_pot,stderr"
    assert len(lines) == 5


def test_compatible_beta_examples():
    betas = np.geomspace(0.05, 20, 60)
    free = th.PressureCurve.from_function(betas, lambda b: 0.0, energy_fn=lambda b: 0.5 / b)
    assert th.compatible_beta(free, 0.5).beta == pytest.approx(1.0, rel=1e-6)
    site = th.PressureCurve.from_function(betas, lambda b: 0.5 * math.log(2 * math.pi / b),
                                          energy_fn=lambda b: 1.0 / b)
    assert th.compatible_beta(site, 1.0).beta == pytest.approx(1.0, rel=1e-6)
    out = th.compatible_beta(site, -1.0)
    assert not out.in_range and out.beta is None


# --- identities -------------------------------------------------------------

def test_variational_gap_harmonic_gibbs():
    for beta in (0.5, 1.0, 2.0):
        s = th.harmonic_chain_specific_entropy(1.0, beta)
        pr = th.harmonic_chain_pressure(1.0, beta)
        # the Gibbs state saturates at its own beta and not elsewhere
        assert abs(th.variational_gap(s, pr["energy"], pr["total"], beta)["gap"]) < 1e-12
        other = th.harmonic_chain_pressure(1.0, 2 * beta)["total"]
        assert th.variational_gap(s, pr["energy"], other, 2 * beta)["gap"] > 0


def test_variational_gap_grows_for_concentrated_states():
    m = reference_model("harmonic-chain")
    pr = th.harmonic_chain_pressure(1.0, 1.0)
    gaps = []
    for var in (1.0, 1e-2, 1e-4):
        g = box_sites(1, 3)
        spec = ensm.ProductGaussian(g, var, var)
        s = th.entropy_analytic(spec).value / g.n_sites
        e0 = var  # <p^2/2 + q^2/2> with zero mean pair differences up to var/2
        e0 += 0.25 * 2 * var * 2 / 2
        gaps.append(th.variational_gap(s, e0, pr["total"], 1.0)["gap"])
    assert gaps[0] < gaps[1] < gaps[2]


def test_gibbs_identity_single_site_and_chain():
    r = th.gibbs_identity_check(single_site(), 1.0, box_sites(1, 1))
    assert r.extra["S"] / 2 == pytest.approx(1 + math.log(2 * math.pi), abs=1e-12)
    assert abs(r.value) < 1e-10
    r = th.gibbs_identity_check(reference_model("harmonic-chain"), 0.7, box_sites(1, 3))
    assert abs(r.value) < 1e-10


def test_gibbs_identity_quartic_single_site():
    m = LatticeModel(1, 1, PotentialSpec("polynomial", (0.0, 0.0, 0.5, 0.0, 0.25)), name="quartic-site")
    r = th.gibbs_identity_check(m, 1.0, box_sites(1, 1), n_samples=20_000, burn_in=2000)
    assert abs(r.value) < 3 * r.stderr


def test_bracket_zero_on_symmetric_ensemble():
    m = reference_model("fpu-chain")
    ens = ensm.sample(ensm.ProductGaussian(box_sites(1, 4)), 10_000, 3, model=m)
    r = th.bracket_mean_zero(ens, m)
    assert r.extra["z"] < 3


def test_thermo_report_contract():
    with pytest.raises(ValueError):
        th.ThermoReport(1.0, 0.1, "analytic")
    with pytest.raises(ValueError):
        th.ThermoReport(1.0, 0.1, "guess")
    r = th.ThermoReport(1.0, 0.1, "MC", 10, 3, extra={"arr": np.zeros(3), "x": 2})
    d = r.to_dict()
    assert d["x"] == 2 and "arr" not in d
    assert r.within(1.25) and not r.within(1.5)


# --- periodization ----------------------------------------------------------

@pytest.mark.parametrize("a", [1, 2, 3])
def test_periodized_entropy_per_site(a, rng):
    k = 4 * a
    A = rng.standard_normal((k, k))
    cov = A @ A.T + np.eye(k)
    r = th.periodized_specific_entropy(cov, a)
    assert r["max_deviation"] < 1e-6
    assert r["per_site"] == pytest.approx(th.gaussian_entropy(cov) / (2 * a), abs=1e-6)


def test_periodized_window_entropy_product_case():
    cov = np.eye(8)
    # product blocks: entropy is additive over sites, whatever the shift
    for shift in range(4):
        assert th.periodized_window_entropy(cov, 2, 6, shift) == pytest.approx(12 * 2 * HALF_LOG_2PI_E)
