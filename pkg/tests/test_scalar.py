import cmath
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bergman_lab.scalar import Arith, Mat, NonMonomialDivision, PiRational, conj, to_complex

fractions = st.fractions(min_value=-20, max_value=20, max_denominator=12)


@st.composite
def pi_rationals(draw, max_terms=3):
    terms = {}
    for _ in range(draw(st.integers(0, max_terms))):
        g = draw(st.integers(-3, 3))
        terms[g] = (draw(fractions), draw(fractions))
    acc = PiRational()
    for g, (r, i) in terms.items():
        acc = acc + PiRational.of(r, i, g)
    return acc


@st.composite
def monomials(draw):
    r, i = draw(fractions), draw(fractions)
    if not r and not i:
        r = Fraction(1)
    return PiRational.of(r, i, draw(st.integers(-3, 3)))


@given(pi_rationals(), pi_rationals(), pi_rationals())
def test_ring_axioms(x, y, z):
    assert (x + y) + z == x + (y + z)
    assert x * (y + z) == x * y + x * z
    assert x * y == y * x
    assert (x - y) + y == x


@given(pi_rationals(), pi_rationals())
def test_numeric_image_is_a_homomorphism(x, y):
    assert cmath.isclose(to_complex(x * y), to_complex(x) * to_complex(y), rel_tol=1e-12, abs_tol=1e-9)
    assert cmath.isclose(to_complex(x + y), to_complex(x) + to_complex(y), rel_tol=1e-12, abs_tol=1e-9)


@given(pi_rationals(), monomials())
def test_division_by_monomials_is_exact(x, m):
    assert (x / m) * m == x
    assert m * m.inverse() == PiRational.of(1)


def test_non_monomial_inverse_is_rejected():
    with pytest.raises(NonMonomialDivision):
        (PiRational.pi() + 1).inverse()


@given(pi_rationals())
def test_conjugation_is_an_involution(x):
    assert conj(conj(x)) == x
    assert to_complex(conj(x)) == pytest.approx(to_complex(x).conjugate())


def test_repr_and_pi_grading():
    x = PiRational.of(Fraction(-509, 8), 0, -1)
    assert repr(x) == "-509/8*Pi^-1"
    assert to_complex(2 * PiRational.pi()) == pytest.approx(2 * math.pi)


def test_exact_arith_rejects_inexact_floats():
    with pytest.raises(TypeError):
        Arith("exact").s(0.1)


def test_float_close_is_relative():
    a = Arith("float", rtol=1e-10)
    assert a.close(1e6, 1e6 * (1 + 1e-11))
    assert not a.close(1.0, 1.0 + 1e-8)


def test_float_prune_drops_tiny_terms():
    a = Arith("float")
    assert a.prune({1: 1.0, 2: 1e-20}) == {1: 1.0}


@given(st.lists(st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False), min_size=8, max_size=8))
def test_matrix_product_matches_numpy(vals):
    a = Arith("float", rank=2)
    A = a.coeff([vals[:2], vals[2:4]])
    B = a.coeff([vals[4:6], vals[6:]])
    want = np.array([vals[:2], vals[2:4]]) @ np.array([vals[4:6], vals[6:]])
    assert np.allclose((A * B).to_numpy(), want)
    assert isinstance(A * B, Mat)
