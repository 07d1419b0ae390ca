import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kicdpm.bessel import bessel_k


def reference(nu, z):
    return float(mpmath.besselk(nu, z))


def test_half_order_value():
    assert bessel_k(0.5, 1.0) == pytest.approx(0.4610685044478946, rel=1e-14)
    assert bessel_k(0.5, 1.0) == pytest.approx(math.sqrt(math.pi / 2) * math.exp(-1), rel=1e-15)


def test_three_halves_from_recurrence():
    z = 2.0
    assert bessel_k(1.5, z) == pytest.approx(bessel_k(0.5, z) * (1 + 1 / z), rel=1e-14)


@pytest.mark.parametrize("nu", [0.0, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.3, 5.0])
@pytest.mark.parametrize("z", [1e-6, 1e-3, 0.1, 0.5, 1.0, 1.999, 2.0, 2.001, 5.0, 20.0, 50.0])
def test_against_mpmath(nu, z):
    assert bessel_k(nu, z) == pytest.approx(reference(nu, z), rel=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 3.5])
def test_general_path_matches_closed_form(nu):
    z = np.array([0.01, 0.7, 1.9, 2.0, 3.0, 30.0])
    np.testing.assert_allclose(bessel_k(nu, z, closed_form=False), bessel_k(nu, z), rtol=1e-12)


@given(st.floats(0.0, 5.0), st.floats(1e-4, 50.0))
def test_recurrence_property(nu, z):
    nu = max(nu, 1.0)
    lhs = bessel_k(nu + 1, z)
    rhs = bessel_k(nu - 1, z) + 2 * nu / z * bessel_k(nu, z)
    assert lhs == pytest.approx(rhs, rel=1e-9)


@given(st.floats(-5.0, 5.0), st.floats(0.01, 20.0))
def test_symmetric_in_order(nu, z):
    assert bessel_k(-nu, z) == pytest.approx(bessel_k(nu, z), rel=1e-13)


def test_array_input_and_errors():
    z = np.array([[0.5, 1.0], [2.0, 0.5]])
    out = bessel_k(1.0, z)
    assert out.shape == (2, 2) and out[0, 0] == out[1, 1]
    with pytest.raises(ValueError):
        bessel_k(1.0, 0.0)
    with pytest.raises(ValueError):
        bessel_k(1.0, -1.0)
    with pytest.raises(OverflowError):
        bessel_k(60.0, 1e-8)
