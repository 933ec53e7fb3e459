import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bergman_lab.expansion import b_coeff, ops_from_jets
from bergman_lab.jets import (
    FrameMap,
    InvalidJets,
    build_O1,
    build_O2,
    closed_O2_on_pn,
    derived_quantities,
    flat_jets,
    jets_from_json,
    jets_to_json,
    random_jets,
    recover_d2RL,
    recover_nnJ,
    validate,
)
from bergman_lab.scalar import Arith, PiRational
from bergman_lab.wick import DiffOp, apply, pn_kernel, to_normal
from symbolic_oracle import Oracle

seeds = st.integers(0, 10_000)


def test_flat_jets_are_valid():
    for n in (1, 2, 3):
        assert validate(flat_jets(n)) == []


def test_bianchi_violation_is_reported():
    j = random_jets(2, seed=1)
    R = j.RTX.copy()
    # a single component breaks the cyclic sum; keep the pair symmetries
    bump = PiRational.of(1)
    for idx, sign in (((0, 1, 2, 3), 1), ((1, 0, 2, 3), -1), ((0, 1, 3, 2), -1), ((1, 0, 3, 2), 1),
                      ((2, 3, 0, 1), 1), ((3, 2, 0, 1), -1), ((2, 3, 1, 0), -1), ((3, 2, 1, 0), 1)):
        R[idx] = R[idx] + sign * bump
    problems = validate(j.with_fields(RTX=R))
    assert "Bianchi" in problems


def test_hermiticity_violation_is_reported():
    j = flat_jets(1, rank=2)
    Phi = j.Phi.copy()
    Phi[0, 1] = PiRational.of(1)
    assert "Phi Hermitian" in validate(j.with_fields(Phi=Phi))


@given(seeds, st.integers(1, 2), st.booleans())
def test_random_jets_are_valid(seed, n, kahler):
    assert validate(random_jets(n, seed=seed, kahler=kahler)) == []


def test_random_jets_with_rank_two_are_valid():
    assert validate(random_jets(1, rank=2, seed=5)) == []
    assert validate(random_jets(2, rank=2, seed=5, kahler=True)) == []


@given(seeds)
def test_random_jets_are_deterministic(seed):
    a = jets_to_json(random_jets(2, seed=seed))
    b = jets_to_json(random_jets(2, seed=seed))
    assert a == b


def test_kahler_eigenvalues_are_two_pi():
    j = random_jets(2, seed=3, kahler=True)
    assert all(x == 2 * PiRational.pi() for x in j.model.a)


def test_frame_normalization():
    fr = FrameMap(2, Arith("exact"))
    half = PiRational.of(Fraction(1, 2))
    assert fr.pair(fr.dz[0], fr.dzb[0]) == half
    assert not fr.pair(fr.dz[0], fr.dz[0])
    v = np.array([PiRational.of(k + 1, -k) for k in range(4)], dtype=object)
    back = fr.to_real(*fr.to_complex(v))
    assert all(x == y for x, y in zip(back, v))


def test_second_jet_maps_are_inverse():
    j = random_jets(2, seed=11)
    d2 = recover_d2RL(j.nnJ, j.RTX, j.RL0)
    assert all(x == y for x, y in zip(d2.ravel(), j.d2RL.ravel()))
    nn = recover_nnJ(j.d2RL, j.RTX, j.RL0)
    assert all(x == y for x, y in zip(nn.ravel(), j.nnJ.ravel()))


def test_json_round_trip_exact_and_float():
    j = random_jets(2, seed=9, kahler=True)
    back = jets_from_json(jets_to_json(j))
    assert jets_to_json(back) == jets_to_json(j)
    f = j.to_mode("float")
    fb = jets_from_json(jets_to_json(f))
    assert np.allclose(np.asarray(fb.RTX, complex), np.asarray(f.RTX, complex))


def test_invalid_jets_block_operator_construction():
    j = random_jets(1, seed=2)
    bad = j.with_fields(dRL=j.dRL * 0 + PiRational.of(1))
    with pytest.raises(InvalidJets):
        build_O1(bad)


# ---------------------------------------------------------------------------
# Taylor operators


def test_O1_vanishes_on_flat_jets():
    assert build_O1(flat_jets(2)).is_zero()


def test_O2_on_flat_jets_with_potential_is_constant():
    phi = Fraction(3, 7)
    j = flat_jets(2, phi=phi)
    assert build_O2(j) == DiffOp.const(j.model, PiRational.of(phi))


@given(seeds, st.booleans())
def test_projected_O1_vanishes(seed, kahler):
    j = random_jets(2, seed=seed, kahler=kahler)
    O1 = build_O1(j)
    assert to_normal(apply(O1, pn_kernel(j.model))).project_N().is_zero()


@given(seeds, st.booleans())
def test_O2_on_pn_closed_form(seed, kahler):
    j = random_jets(2, seed=seed, kahler=kahler)
    assert apply(build_O2(j), pn_kernel(j.model)) == closed_O2_on_pn(j)


@given(seeds, st.booleans())
def test_operators_are_formally_self_adjoint(seed, kahler):
    j = random_jets(2, seed=seed, kahler=kahler)
    O1, O2 = build_O1(j), build_O2(j)
    assert O1.adjoint() == O1
    assert O2.adjoint() == O2


@given(seeds)
def test_operator_parity_and_degree(seed):
    j = random_jets(2, seed=seed)
    O1, O2 = build_O1(j), build_O2(j)
    assert O1.degree_parities() <= {1} and O1.max_degree() <= 3
    assert O2.degree_parities() <= {0} and O2.max_degree() <= 4


def test_O1_self_adjoint_against_symbolic_oracle():
    j = random_jets(1, seed=4)
    o = Oracle(j.model)
    O1 = build_O1(j)
    f = o.pn() * (1 + o.z[0] * o.zb[0])
    assert o.equal(o.diffop(O1, f), o.diffop(O1.adjoint(), f))


# ---------------------------------------------------------------------------
# derived quantities


def test_flat_derived_quantities_vanish():
    d = derived_quantities(flat_jets(2))
    assert not d["r_X"] and not d["nablaJ_sq"] and not d["rho"]


def test_rho_vanishes_without_nabla_J():
    j = random_jets(2, seed=6, kahler=True)
    z = j.with_fields(nablaJ=j.nablaJ * 0, dRL=j.dRL * 0, dtau=j.dtau * 0)
    assert not derived_quantities(z)["rho"]


@given(seeds)
def test_scalar_curvature_identity_on_kahler_jets(seed):
    d = derived_quantities(random_jets(2, seed=seed, kahler=True))
    assert d["r_X"] == d["r_X_complex"]
    assert to_complex_real(d["nablaJ_sq"]) >= 0


def to_complex_real(x):
    v = complex(x)
    assert abs(v.imag) < 1e-12
    return v.real


# ---------------------------------------------------------------------------
# frame covariance


def _rotate(arr, R, axes):
    out = np.asarray(arr, dtype=complex)
    for ax in axes:
        out = np.moveaxis(np.tensordot(out, R, axes=([ax], [0])), -1, ax)
    return out


def test_frame_rotation_within_tied_eigenspace_leaves_coefficients_unchanged():
    j = random_jets(2, seed=21, kahler=True).to_mode("float")
    theta = 0.7
    c, s = math.cos(theta), math.sin(theta)
    # rotation mixing (e0, e1) with (e2, e3) that commutes with J
    R = np.array([[c, 0, -s, 0], [0, c, 0, -s], [s, 0, c, 0], [0, s, 0, c]])
    rot = j.with_fields(
        dRL=_rotate(j.dRL, R, (0, 1, 2)), d2RL=_rotate(j.d2RL, R, (0, 1, 2, 3)),
        RTX=_rotate(j.RTX, R, (0, 1, 2, 3)), RE=_rotate(j.RE, R, (0, 1)),
        dtau=_rotate(j.dtau, R, (0,)), d2tau=_rotate(j.d2tau, R, (0, 1)),
        nablaJ=_rotate(j.nablaJ, R, (0, 1, 2)), nnJ=_rotate(j.nnJ, R, (0, 1, 2, 3)),
    )
    assert validate(rot) == []
    for q, r in [(0, 1), (1, 0), (2, 0)]:
        v0 = complex(b_coeff(j.model, ops_from_jets(j), q, r))
        v1 = complex(b_coeff(rot.model, ops_from_jets(rot), q, r))
        assert abs(v0 - v1) <= 1e-8 * max(1.0, abs(v0))



