import numpy as np
import pytest

from robfplm.rho import (C0_TUKEY, C1_TUKEY, C_HUBER, RhoFunction, huber, quadratic,
                         tukey)

FAMILIES = [tukey(C0_TUKEY), tukey(C1_TUKEY), tukey(1.0), huber(C_HUBER), quadratic()]


@pytest.mark.parametrize("t,expected", [
    (0.0, 0.0),
    (C0_TUKEY, 1.0),
    (C0_TUKEY / 2, 37 / 64),
    (-C0_TUKEY / 2, 37 / 64),
    (10.0, 1.0),
])
def test_tukey_rho_values(t, expected):
    assert tukey(C0_TUKEY).rho(t) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("c,t,expected", [
    (1.0, 0.0, 0.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.5, 1.6875),
    (1.0, -0.5, -1.6875),
    (C1_TUKEY, 5.0, 0.0),
])
def test_tukey_psi_values(c, t, expected):
    assert tukey(c).psi(t) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("f,t,expected", [
    (tukey(1.0), 0.0, 6.0),
    (tukey(1.0), 1e-9, 6.0),
    (tukey(1.0), 1.0, 0.0),
    (tukey(2.0), -3.0, 0.0),
    (quadratic(), 0.0, 2.0),
    (quadratic(), -7.5, 2.0),
    (huber(1.345), 0.5, 1.0),
    (huber(1.345), 2.69, 0.5),
])
def test_weights(f, t, expected):
    assert f.weight(t) == pytest.approx(expected, rel=1e-8)


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f"{f.family}-{f.c}")
def test_psi_matches_finite_differences(f):
    t = np.random.default_rng(0).uniform(-6, 6, 1000)
    h = 1e-5
    fd = (f.rho(t + h) - f.rho(t - h)) / (2 * h)
    assert np.max(np.abs(f.psi(t) - fd)) < 1e-6


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f"{f.family}-{f.c}")
def test_rho_function_axioms(f):
    t = np.linspace(0, 10, 2001)
    r = f.rho(t)
    assert f.rho(0.0) == 0.0
    np.testing.assert_array_equal(f.rho(-t), r)
    assert np.all(np.diff(r) >= 0)
    assert np.all(r <= f.sup)
    np.testing.assert_allclose(f.weight(t[1:]), f.psi(t[1:]) / t[1:], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f"{f.family}-{f.c}")
def test_fused_evaluation(f):
    t = np.random.default_rng(1).normal(scale=3, size=500)
    r, pu = f.rho_psiu(t)
    np.testing.assert_allclose(r, f.rho(t), atol=1e-15)
    np.testing.assert_allclose(pu, f.psi(t) * t, atol=1e-13)


def test_larger_tukey_constant_is_smaller_loss():
    t = np.linspace(-8, 8, 4001)
    assert np.all(tukey(C1_TUKEY).rho(t) <= tukey(C0_TUKEY).rho(t))


def test_tukey_supremum_attained():
    f = tukey(2.0)
    assert f.bounded and f.sup == 1.0
    assert np.all(f.rho(np.array([2.0, 2.5, -100.0])) == 1.0)
    assert not huber().bounded and huber().sup == np.inf


def test_zeta_bounded():
    u = np.linspace(-20, 20, 40001)
    f = tukey(1.0)
    zeta = u * f.psi(u)
    assert np.max(np.abs(zeta)) <= 6.0
    # maximum of 6 v (1 - v)^2 is at v = 1/3
    assert np.max(zeta) == pytest.approx(6 * (1 / 3) * (2 / 3) ** 2, rel=1e-5)


def test_huber_shape():
    f = huber(1.345)
    assert f.rho(1.0) == 0.5
    assert f.rho(3.0) == pytest.approx(1.345 * 3 - 0.5 * 1.345**2)
    assert f.psi(10.0) == 1.345 and f.psi(-10.0) == -1.345


@pytest.mark.parametrize("family,c", [("cauchy", 1.0), ("tukey", 0.0), ("huber", -1.0),
                                      ("tukey", np.inf)])
def test_invalid_rho(family, c):
    with pytest.raises(ValueError):
        RhoFunction(family, c)
