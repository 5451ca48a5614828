import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from anharmonic import ensembles as ensm
from anharmonic import thermo as th
from anharmonic.dynamics import BoxSystem, IntegratorSchedule
from anharmonic.model import LatticeModel, PotentialSpec, box_sites, reference_model

HARMONIC_ONSITE = PotentialSpec("polynomial", (0.0, 0.0, 0.5))


def uncoupled():
    return LatticeModel(1, 1, HARMONIC_ONSITE, name="uncoupled")


def test_sampling_is_deterministic_and_thread_independent():
    g = box_sites(1, 3)
    spec = ensm.ProductGaussian(g, 2.0, 0.5)
    a = ensm.sample(spec, 3000, 11, threads=1)
    b = ensm.sample(spec, 3000, 11, threads=4)
    c = ensm.sample(spec, 3000, 12)
    assert np.array_equal(a.q, b.q) and np.array_equal(a.p, b.p)
    assert not np.array_equal(a.q, c.q)
    # prefix property: chunks are independent of the total size
    d = ensm.sample(spec, 1500, 11)
    assert np.array_equal(d.q, a.q[:1500])


def test_product_gaussian_moments():
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.ProductGaussian(g, 2.0, 0.5, 1.0, -1.0), 40_000, 0)
    assert ens.q.mean() == pytest.approx(1.0, abs=0.02)
    assert ens.p.mean() == pytest.approx(-1.0, abs=0.02)
    assert ens.q.var() == pytest.approx(2.0, rel=0.02)
    assert ens.p.var() == pytest.approx(0.5, rel=0.02)
    assert ens.meta["translation_invariant"]
    ramp = ensm.ProductGaussian(g, np.arange(1.0, 5.0))
    assert not ramp.translation_invariant


def test_product_custom_matches_quadrature():
    m = reference_model("fpu-chain")
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.ProductCustom.onsite_gibbs(m, g, 1.0), 40_000, 3)
    oq = th.onsite_quadrature(m, 1.0)
    w0 = m.onsite.value(ens.q)
    assert w0.mean() == pytest.approx(oq["mean_w0"], abs=4 * w0.std() / math.sqrt(w0.size))


def test_product_custom_on_torus():
    m = reference_model("rotator-chain")
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.ProductCustom.onsite_gibbs(m, g, 1.0), 20_000, 3, model=m)
    assert np.all((ens.q >= 0) & (ens.q < m.period[0]))
    oq = th.onsite_quadrature(m, 1.0)
    w0 = m.onsite.value(ens.q)
    assert w0.mean() == pytest.approx(oq["mean_w0"], abs=4 * w0.std() / math.sqrt(w0.size))


def test_gaussian_block_covariance(rng):
    g = box_sites(1, 1)
    A = rng.standard_normal((4, 4))
    cov = A @ A.T + np.eye(4)
    ens = ensm.sample(ensm.GaussianBlock(g, cov), 50_000, 5)
    x = np.concatenate([ens.q.reshape(ens.N, -1), ens.p.reshape(ens.N, -1)], axis=1)
    assert np.allclose(np.cov(x, rowvar=False), cov, atol=0.1 * np.abs(cov).max())


def test_gaussian_block_rejects_bad_covariance():
    g = box_sites(1, 1)
    with pytest.raises(ValueError):
        ensm.GaussianBlock(g, np.eye(3))
    with pytest.raises(ValueError):
        ensm.GaussianBlock(g, -np.eye(4))


def test_mean_noninteracting_energy_product_gaussian():
    m = uncoupled()
    g = box_sites(1, 4)
    ens = ensm.sample(ensm.ProductGaussian(g), 20_000, 0, model=m)
    r = th.energy(ens, m, "noninteracting")
    assert abs(r.value - 1.0) < 3 * r.stderr


def test_moments():
    m = uncoupled()
    g = box_sites(1, 4)
    ens = ensm.sample(ensm.ProductGaussian(g), 20_000, 1, model=m)
    m1 = ensm.moment_M(ens, m, 1.0)
    m2 = ensm.moment_M(ens, m, 2.0)
    assert abs(m1.value - 1.0) < 3 * m1.stderr
    # per-site second moment 2; the site-averaged estimator has a larger spread
    sys_ = BoxSystem(m, g)
    per = sys_.energy_noninteracting(ens.q, ens.p) ** 2
    se = per.std() / math.sqrt(per.size) * 2
    assert abs(m2.value - 2.0) < 4 * se
    with pytest.raises(ValueError):
        ensm.moment_M(ens, m, 0.5)


def test_moment_fpu_stable_across_N():
    m = reference_model("fpu-chain")
    g = box_sites(1, 4)
    spec = ensm.ProductCustom.onsite_gibbs(m, g)
    vals = [ensm.moment_M(ensm.sample(spec, n, 2, model=m), m, 2.0) for n in (5000, 20_000)]
    assert all(math.isfinite(v.value) for v in vals)
    assert abs(vals[0].value - vals[1].value) < 3 * math.hypot(vals[0].stderr, vals[1].stderr)


def test_membership_fraction():
    m = uncoupled()
    g = box_sites(1, 4)
    ens = ensm.sample(ensm.ProductGaussian(g), 5000, 2, model=m)
    fr = [ensm.membership_fraction(ens, m, 1.0, C) for C in (0.0, 0.5, 1.0, 2.0, 1e9)]
    assert fr[0] == 0.0 and fr[-1] == 1.0
    assert all(a <= b for a, b in zip(fr, fr[1:]))


def test_gibbs_uncoupled_variance():
    m = uncoupled()
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.GibbsFiniteVolume(m, g, 1.0, burn_in=1000), 8192, 4)
    diag = ens.meta["sampler"]
    assert 0.45 < diag["acceptance"] < 0.7
    v = ens.q.var(axis=0).mean()
    assert v == pytest.approx(1.0, abs=0.06)


def test_gibbs_harmonic_chain_energy_matches_covariance():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 2)
    beta = 2.0
    ens = ensm.sample(ensm.GibbsFiniteVolume(m, g, beta, burn_in=2000), 8192, 5)
    sys_ = BoxSystem(m, g)
    h = sys_.hamiltonian(ens.q, ens.p) / g.n_sites
    C = th.gibbs_covariance(m, g, beta)
    Hq = th.severed_hessian(m, g)
    n = g.n_sites
    exact = (0.5 * np.trace(Hq @ C[:n, :n]) + 0.5 * np.trace(C[n:, n:])) / n
    assert abs(h.mean() - exact) < 4 * h.std() / math.sqrt(len(h)) * 2


def test_gibbs_sampler_reports_poor_acceptance():
    m = reference_model("fpu-chain")
    g = box_sites(1, 2)
    with pytest.raises(ensm.SamplerError):
        ensm.sample(ensm.GibbsFiniteVolume(m, g, 1.0, burn_in=100, step=5.0), 512, 0)


def test_gibbs_invariant_under_flow():
    m = reference_model("fpu-chain")
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.GibbsFiniteVolume(m, g, 1.0, burn_in=2000), 8192, 6)
    out = ensm.pushforward(ens, m, IntegratorSchedule(1e-2, 1.0))
    sys_ = BoxSystem(m, g)
    # the severed energy is conserved sample by sample; the law as a whole is invariant
    h0 = sys_.hamiltonian(ens.q, ens.p)
    h1 = sys_.hamiltonian(out.q, out.p)
    assert np.max(np.abs(h1 - h0) / h0) < 1e-3
    assert stats.ks_2samp(ens.q[:, 0, 0], out.q[:, 0, 0]).pvalue > 0.001


def test_pushforward_zero_time_and_reversal():
    m = reference_model("fpu-chain")
    g = box_sites(1, 3)
    ens = ensm.sample(ensm.ProductGaussian(g), 2000, 7, model=m)
    same = ensm.pushforward(ens, m, IntegratorSchedule(1e-3, 0.0))
    assert np.array_equal(same.q, ens.q)
    sched = IntegratorSchedule(1e-3, 1.0)
    fwd = ensm.pushforward(ens, m, sched)
    assert fwd.meta["t"] == 1.0
    back = ensm.time_reverse_ensemble(ensm.pushforward(ensm.time_reverse_ensemble(fwd), m, sched))
    assert np.max(np.abs(back.q - ens.q)) < 1e-8 and np.max(np.abs(back.p - ens.p)) < 1e-8


def test_pushforward_rejects_other_model():
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.ProductGaussian(g), 10, 0, model=reference_model("fpu-chain"))
    with pytest.raises(ValueError):
        ensm.pushforward(ens, reference_model("harmonic-chain"), IntegratorSchedule(1e-2, 0.1))


def test_time_average_zero_T_is_identity():
    m = reference_model("fpu-chain")
    g = box_sites(1, 3)
    ens = ensm.sample(ensm.ProductGaussian(g), 100, 8, model=m)
    avg = ensm.time_average(ens, m, 0.0)
    assert np.array_equal(avg.q, ens.q)


def test_time_average_gibbs_energy_unchanged():
    m = reference_model("harmonic-chain")
    g = box_sites(1, 2)
    ens = ensm.sample(ensm.GibbsFiniteVolume(m, g, 1.0, burn_in=2000), 8192, 9)
    avg = ensm.time_average(ens, m, 3.0, 2, h=1e-2)
    sys_ = BoxSystem(m, g)
    h0 = sys_.hamiltonian(ens.q, ens.p).mean()
    h1 = sys_.hamiltonian(avg.q, avg.p)
    assert abs(h1.mean() - h0) < 1e-3 * abs(h0)


def test_interior_sites():
    m = reference_model("fpu-chain")
    g = box_sites(1, 6)
    assert len(ensm.interior_sites(m, g, 0.0)) == 12 - 2 * 2
    assert len(ensm.interior_sites(m, g, 2.0)) == 12 - 2 * 4
    assert len(ensm.interior_sites(m, box_sites(1, 2), 5.0)) == 0


# --- observables ------------------------------------------------------------

def test_constant_observable_exact():
    g = box_sites(1, 4)
    ens = ensm.sample(ensm.ProductGaussian(g), 500, 1)
    f = ensm.Observable("one", ((0,),), lambda q, p: np.full(q.shape[0], 0.75))
    r = ensm.expect(ens, f)
    assert r.value == 0.75 and r.stderr == 0.0


def test_odd_observable_on_symmetric_law():
    g = box_sites(1, 4)
    ens = ensm.sample(ensm.ProductGaussian(g), 10_000, 2)
    r = ensm.expect(ens, ensm.standard_panel(1)[0])
    assert abs(r.value) < 3 * r.stderr


def test_distance_to_itself_is_noise_level():
    g = box_sites(1, 4)
    a = ensm.sample(ensm.ProductGaussian(g), 5000, 3)
    b = ensm.sample(ensm.ProductGaussian(g), 5000, 4)
    d = ensm.observable_distance(a, b)
    assert d.z_max < 4.0
    same = ensm.observable_distance(a, a)
    assert same.value == 0.0


def test_distance_detects_change():
    g = box_sites(1, 4)
    a = ensm.sample(ensm.ProductGaussian(g), 5000, 3)
    b = ensm.sample(ensm.ProductGaussian(g, 2.0), 5000, 4)
    assert ensm.observable_distance(a, b).z_max > 10


def test_observable_support_must_fit():
    g = box_sites(1, 1)
    ens = ensm.sample(ensm.ProductGaussian(g), 10, 0)
    wide = ensm.Observable("far", ((0,), (3,)), lambda q, p: q[:, 0, 0])
    with pytest.raises(ValueError):
        ensm.expect(ens, wide)


# --- periodization ----------------------------------------------------------

def test_periodize_single_site_blocks_give_products():
    # a = 1 blocks carry two sites; make them independent and identical
    g = box_sites(1, 1)
    block = ensm.sample(ensm.ProductGaussian(g, 3.0), 20_000, 1)
    per = ensm.periodize(block, 4, 20_000, 2)
    assert per.geom.n_sites == 8
    for k in range(per.geom.n_sites):
        assert per.q[:, k, 0].var() == pytest.approx(3.0, rel=0.05)


def test_periodize_point_mass_block():
    g = box_sites(1, 2)
    q = np.tile(np.array([1.0, 2.0, 3.0, 4.0])[None, :, None], (5, 1, 1))
    block = ensm.Ensemble(q, -q, g)
    per = ensm.periodize(block, 6, 50, 0)
    # every sample is a shifted periodic tiling of (1, 2, 3, 4)
    for s in range(50):
        row = per.q[s, :, 0]
        assert set(row.tolist()) <= {1.0, 2.0, 3.0, 4.0}
        assert np.all(np.diff(row)[np.diff(row) != -3.0] == 1.0)


def test_periodize_requires_large_window():
    g = box_sites(1, 3)
    block = ensm.sample(ensm.ProductGaussian(g), 10, 0)
    with pytest.raises(ValueError):
        ensm.periodize(block, 2, 10)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 3), st.integers(0, 6))
def test_periodize_window_tiles(a, extra):
    g = box_sites(1, a)
    q = np.arange(g.n_sites, dtype=float)[None, :, None]
    block = ensm.Ensemble(q, q.copy(), g)
    per = ensm.periodize(block, a + extra, 20, extra)
    # consecutive sites advance by one inside a tile and wrap to 0 across tiles
    d = np.diff(per.q[:, :, 0], axis=1)
    assert np.all((d == 1.0) | (d == -(g.n_sites - 1)))


# --- files ------------------------------------------------------------------

def test_ensemble_file_roundtrip(tmp_path):
    g = box_sites(2, 1)
    ens = ensm.sample(ensm.ProductGaussian(g), 300, 5, model=reference_model("quartic-lattice-2d"))
    path = tmp_path / "ens.npz"
    ensm.save_ensemble(path, ens)
    back = ensm.load_ensemble(path)
    assert np.array_equal(back.q, ens.q) and np.array_equal(back.p, ens.p)
    assert back.model_hash == ens.model_hash and back.meta["seed"] == 5
    ensm.export_csv(tmp_path / "ens.csv", ens)
    rows = [r for r in (tmp_path / "ens.csv").read_text().splitlines() if r and not r.startswith("#")]
    assert len(rows) == ens.N * g.n_sites
    with pytest.raises(ValueError):
        ensm.export_csv(tmp_path / "big.csv", ens, max_samples=10)


def test_estimate_serialization():
    e = ensm.Estimate(1.5, 0.1, 100, 3, "MC")
    assert e.within(1.7) and not e.within(2.0)
    assert '"value": 1.5' in e.to_json()
