import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from lvhg.errors import SingularSigma
from lvhg.periodic_model import (
    CoefficientSpec,
    GridFunction,
    Lattice,
    Mode,
    PeriodicCoefficients,
    TorusGrid,
    check_wellposed,
    constant_coefficients,
    eval_b,
    eval_sigma,
    make_coefficients,
    wrap,
    wrap_frac,
)


def test_wrap_examples():
    L = Lattice.unit(2)
    assert np.allclose(wrap(np.array([1.25, -0.5]), L), [0.25, 0.5])
    assert np.allclose(wrap(np.array([3.0, -7.0]), L), [0.0, 0.0])


mats = st.tuples(st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))


@settings(max_examples=80, deadline=None)
@given(m=mats, x=st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=2))
@example(m=(0.25, 0.109375, 0.0, 0.0), x=[0.0, 3.973672570117161e-39])
def test_wrap_idempotent_and_in_domain(m, x):
    B = np.eye(2) + np.array(m).reshape(2, 2)
    L = Lattice(B)
    zf = wrap_frac(np.array(x), L)
    assert np.all(zf >= 0) and np.all(zf < 1)
    # the Cartesian round trip through a skew basis is exact only up to rounding
    w = wrap(np.array(x), L)
    z = L.to_frac(w)
    assert np.all(z > -1e-12) and np.all(z < 1 + 1e-12)
    d = L.to_frac(wrap(w, L)) - z
    assert np.allclose(d - np.round(d), 0.0, atol=1e-12)


def test_wrap_inside_is_identity():
    rng = np.random.default_rng(0)
    x = rng.random((100, 3))
    assert np.array_equal(wrap(x, Lattice.unit(3)), x)


def test_singular_lattice():
    with pytest.raises(Exception):
        Lattice(np.zeros((2, 2)))


def test_zero_amplitude_family():
    c = make_coefficients({"lattice": [[1, 0], [0, 1]], "b": {"const": [0.2, -0.1],
                           "modes": [{"component": 0, "m": [1, 0], "amp": 0.0, "phase": 0.0}]}})
    x = np.random.default_rng(1).random((20, 2))
    assert np.allclose(eval_b(c, x), [0.2, -0.1])
    assert np.allclose(eval_sigma(c, x), np.eye(2))


def test_sin_drift_closed_form():
    spec = CoefficientSpec(Lattice.unit(1), (0.0,), (Mode(0, (1,), 1.0, -math.pi / 2),))
    c = PeriodicCoefficients(spec)
    assert eval_b(c, np.array([[0.25]]))[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_periodicity_f1(f1):
    rng = np.random.default_rng(2)
    x = rng.uniform(-3, 3, (100, 2))
    k = rng.integers(-50, 50, (100, 2)).astype(float)
    assert np.max(np.abs(f1.eval_b(x + k) - f1.eval_b(x))) < 1e-10
    assert np.max(np.abs(f1.eval_sigma(x + k) - f1.eval_sigma(x))) < 1e-10
    assert np.allclose(f1.eval_b(wrap(x, f1.lattice)), f1.eval_b(x), atol=1e-12)


def test_periodicity_skew_lattice():
    B = np.array([[1.0, 0.3], [0.0, 0.8]])
    spec = CoefficientSpec(Lattice(B), (0.1, 0.0), (Mode(0, (1, 2), 0.3, 0.4),), (Mode(1, (2, -1), 0.5, 0.1),))
    c = PeriodicCoefficients(spec)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 2))
    k = rng.integers(-9, 9, (50, 2)).astype(float)
    assert np.max(np.abs(c.eval_b(x + k @ B.T) - c.eval_b(x))) < 1e-10
    assert np.max(np.abs(c.eval_sigma(x + k @ B.T) - c.eval_sigma(x))) < 1e-10


def test_wellposed_examples():
    # sigma = diag(1 + 0.5 sin(2 pi x1), 1): grid minimum of |det| is 0.5 (attained at x1 = 3/4)
    spec = CoefficientSpec(Lattice.unit(2), (0.0, 0.0), (), (Mode(0, (1, 0), 0.5, 0.0),))
    rep = check_wellposed(PeriodicCoefficients(spec), 64)
    assert rep.min_abs_det_sigma == pytest.approx(0.5, abs=1e-12)
    ident = check_wellposed(constant_coefficients(2), 16)
    assert ident.min_abs_det_sigma == 1.0 and ident.lipschitz_sigma == 0.0


def test_wellposed_f1(f1):
    assert check_wellposed(f1, 64).min_abs_det_sigma == pytest.approx(0.25, abs=1e-12)


def test_sigma_amplitude_limit():
    with pytest.raises(ValueError):
        CoefficientSpec(Lattice.unit(1), (0.0,), (), (Mode(0, (1,), 1.0, 0.0),))


def test_singular_sigma_constant():
    with pytest.raises(ValueError):
        constant_coefficients(2, sigma=(1.0, 0.0))


def test_grid_too_small(f1):
    with pytest.raises(ValueError):
        check_wellposed(f1, 4)


@pytest.mark.parametrize("n", [8, 16])
def test_wellposed_monotone_under_refinement(f1, n):
    a = check_wellposed(f1, n).min_abs_det_sigma
    b = check_wellposed(f1, 2 * n).min_abs_det_sigma
    assert b <= a + 1e-8


def test_spec_json_roundtrip(f1):
    d = f1.spec.to_dict()
    again = make_coefficients(d)
    x = np.random.default_rng(4).random((10, 2))
    assert np.array_equal(again.eval_b(x), f1.eval_b(x))
    assert np.array_equal(again.eval_sigma(x), f1.eval_sigma(x))


def test_grid_function_interpolation():
    grid = TorusGrid(Lattice.unit(2), 32)
    f = GridFunction.from_callable(grid, lambda x: np.cos(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1]), order=3)
    x = np.random.default_rng(5).uniform(-2, 2, (200, 2))
    exact = np.cos(2 * np.pi * x[:, 0]) * np.sin(2 * np.pi * x[:, 1])
    assert np.max(np.abs(f(x).ravel() - exact)) < 1e-3
    assert np.allclose(f(grid.centers()).ravel(), f.flat.ravel(), atol=1e-14)
