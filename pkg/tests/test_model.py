import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anharmonic.model import (InteractionTerm, LatticeModel, PotentialSpec, ProbePlan, REFERENCE_MODELS, box_sites,
                              gamma_distance, gamma_to_complement, interior_boundary, load_model, model_from_dict,
                              polynomial_degree_check, reference_model, save_model, validate_assumptions)

HARMONIC_ONSITE = PotentialSpec("polynomial", (0.0, 0.0, 0.5))


def nn_model_2d():
    return model_from_dict({
        "nu": 2, "site_dim": 1, "range": 1, "onsite": {"kind": "polynomial", "coeffs": [0, 0, 0.5]},
        "terms": [{"offsets": [[0, 0], [1, 0]], "difference": [0, 0, 0.25]},
                  {"offsets": [[0, 0], [0, 1]], "difference": [0, 0, 0.25]}]})


def range2_chain():
    return LatticeModel(1, 1, HARMONIC_ONSITE, (InteractionTerm.pair_difference((1,), (0, 0, 0.25)),
                                                InteractionTerm.pair_difference((2,), (0, 0, 0.1))), range=2)


# --- potentials -------------------------------------------------------------

def test_polynomial_needs_even_degree_positive_leading():
    with pytest.raises(ValueError):
        PotentialSpec("polynomial", (0, 0, 0, 1.0))
    with pytest.raises(ValueError):
        PotentialSpec("polynomial", (0, 0, -1.0))


def test_cosine_only_on_torus():
    with pytest.raises(ValueError):
        LatticeModel(1, 1, PotentialSpec("cosine", (1.0,)))
    with pytest.raises(ValueError):
        LatticeModel(1, 1, HARMONIC_ONSITE, period=2 * math.pi)


@given(st.floats(-5, 5), st.floats(-5, 5))
def test_onsite_gradient_matches_finite_difference(x, y):
    w = reference_model("fpu-chain").onsite
    q = np.array([[x], [y]])
    eps = 1e-6
    g = w.grad(q)
    fd = (w.value(q + eps) - w.value(q - eps)) / (2 * eps)
    assert np.allclose(g[:, 0], fd, rtol=1e-6, atol=1e-6)


# --- boxes ------------------------------------------------------------------

@pytest.mark.parametrize("nu,a,count", [(1, 2, 4), (2, 1, 4), (3, 2, 64), (2, 3, 36)])
def test_box_counts(nu, a, count):
    g = box_sites(nu, a)
    assert g.n_sites == count == 2**nu * a**nu
    assert len({tuple(s) for s in g.sites}) == count


def test_box_one_dimensional_sites():
    assert box_sites(1, 2).sites[:, 0].tolist() == [-1, 0, 1, 2]
    assert sorted(map(tuple, box_sites(2, 1).sites)) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_box_index_roundtrip():
    g = box_sites(2, 3)
    assert np.array_equal(g.index(g.sites), np.arange(g.n_sites))
    with pytest.raises(IndexError):
        g.index((3, 4))


# --- interaction distance ---------------------------------------------------

def test_gamma_examples():
    assert gamma_distance(nn_model_2d(), (0, 0), (2, 1)) == 3
    assert gamma_distance(reference_model("fpu-chain"), (4,), (4,)) == 0
    uncoupled = LatticeModel(1, 1, HARMONIC_ONSITE)
    assert gamma_distance(uncoupled, (0,), (1,)) == math.inf


sites2 = st.tuples(st.integers(-6, 6), st.integers(-6, 6))


@settings(max_examples=60, deadline=None)
@given(sites2, sites2, sites2)
def test_gamma_metric_properties(i, j, k):
    m = reference_model("quartic-lattice-2d")
    gij, gji = gamma_distance(m, i, j), gamma_distance(m, j, i)
    assert gij == gji
    assert gij <= gamma_distance(m, i, k) + gamma_distance(m, k, j)
    assert (gij == 0) == (i == j)


@settings(max_examples=60, deadline=None)
@given(sites2, sites2)
def test_gamma_exceeds_one_beyond_range(i, j):
    m = nn_model_2d()
    linf = max(abs(x - y) for x, y in zip(i, j))
    if linf > m.range:
        assert gamma_distance(m, i, j) > 1


@settings(max_examples=40, deadline=None)
@given(st.integers(-20, 20), st.integers(-20, 20), st.integers(-10, 10))
def test_gamma_translation_invariant(i, j, shift):
    m = range2_chain()
    assert gamma_distance(m, (i,), (j,)) == gamma_distance(m, (i + shift,), (j + shift,))


def test_gamma_parity_lattice():
    # next-nearest-neighbour only: odd separations are never connected
    m = LatticeModel(1, 1, HARMONIC_ONSITE, (InteractionTerm.pair_difference((2,), (0, 0, 0.25)),), range=2)
    assert gamma_distance(m, (0,), (1,)) == math.inf
    assert gamma_distance(m, (0,), (4,)) == 2


def test_interior_boundary_examples():
    g = box_sites(1, 3)
    assert interior_boundary(reference_model("harmonic-chain"), g)[:, 0].tolist() == [-2, 3]
    assert interior_boundary(range2_chain(), g)[:, 0].tolist() == [-2, -1, 2, 3]
    assert len(interior_boundary(LatticeModel(1, 1, HARMONIC_ONSITE), g)) == 0


def test_gamma_to_complement_chain():
    g = box_sites(1, 3)
    assert gamma_to_complement(reference_model("harmonic-chain"), g).tolist() == [1, 2, 3, 3, 2, 1]


def test_boundary_fraction_shrinks():
    m = reference_model("quartic-lattice-2d")
    frac = [len(interior_boundary(m, box_sites(2, a))) / (2 * a) ** 2 for a in (2, 4)]
    assert frac[1] < frac[0]


# --- terms and models -------------------------------------------------------

def test_terms_are_canonical():
    t = InteractionTerm(((3,), (4,)), ((1.0, (1, 1)),))
    assert t.offsets[0] == (0,)
    assert t.arity == 2 and t.diameter == 1


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_three_body_term_gradient(x, y, z):
    t = reference_model("quartic-lattice-2d").terms[2]
    v = np.array([[[x], [y], [z]]])
    g = t.grad(v)
    eps = 1e-6
    for s in range(3):
        e = np.zeros_like(v)
        e[0, s, 0] = eps
        fd = (t.value(v + e) - t.value(v - e)) / (2 * eps)
        assert g[0, s, 0] == pytest.approx(fd[0], rel=1e-6, abs=1e-8)


def test_finite_range_enforced():
    with pytest.raises(ValueError):
        LatticeModel(1, 1, HARMONIC_ONSITE, (InteractionTerm.pair_difference((2,), (0, 0, 1.0)),), range=1)


def test_json_loader_rejects_out_of_range_offsets():
    d = reference_model("harmonic-chain").to_dict()
    d["terms"][0]["offsets"] = [[0], [3]]
    with pytest.raises(ValueError, match="range"):
        model_from_dict(d)
    with pytest.raises(ValueError):
        model_from_dict({"nu": 1, "site_dim": 1})


@pytest.mark.parametrize("name", sorted(REFERENCE_MODELS))
def test_model_json_roundtrip(name, tmp_path):
    m = reference_model(name)
    path = tmp_path / f"{name}.json"
    save_model(m, path)
    back = load_model(path)
    assert back.hash == m.hash
    assert back.to_dict() == m.to_dict()


@pytest.mark.parametrize("name", sorted(REFERENCE_MODELS))
def test_shipped_data_files_match_reference(name):
    from importlib import resources

    text = resources.files("anharmonic").joinpath("data", f"{name}.json").read_text()
    assert model_from_dict(json.loads(text)).hash == reference_model(name).hash


def test_unknown_reference_model():
    with pytest.raises(ValueError):
        reference_model("no-such-model")


# --- assumptions -------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(REFERENCE_MODELS))
def test_shipped_models_validate(name):
    rep = validate_assumptions(reference_model(name), ProbePlan(n_per_scale=400))
    assert rep.all_passed, {k: r for k, r in rep.results.items() if not r.passed}
    assert math.isfinite(rep.C1)


def test_negative_onsite_fails_pinning():
    m = LatticeModel(1, 1, PotentialSpec("polynomial", (-5.0, 0.0, 1.0)),
                     (InteractionTerm.pair_difference((1,), (0, 0, 0.25)),))
    rep = validate_assumptions(m, ProbePlan(n_per_scale=200))
    assert not rep["P1"].passed
    assert not rep.all_passed


def test_strong_coupling_fails_domination():
    # pair grows faster than the on-site potential
    m = LatticeModel(1, 1, HARMONIC_ONSITE, (InteractionTerm.pair_difference((1,), (0, 0, 0, 0, 1.0)),))
    rep = validate_assumptions(m, ProbePlan(n_per_scale=300))
    assert not rep["D1"].passed


def test_polynomial_degree_check():
    assert polynomial_degree_check(reference_model("fpu-chain")).passed
    m = LatticeModel(1, 1, HARMONIC_ONSITE, (InteractionTerm.pair_difference((1,), (0, 0, 0, 0, 1.0)),))
    assert not polynomial_degree_check(m).passed
