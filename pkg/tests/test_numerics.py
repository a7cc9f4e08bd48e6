import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from debatejudge.errors import DomainError
from debatejudge.numerics import (
    BetaBinomParams,
    BetaParams,
    bb_log_pmf,
    bb_log_pmf_all,
    beta_cdf,
    beta_pdf,
    log_beta,
    log_gamma,
    mixture_cdf,
)
from debatejudge.mixture import BetaBinomMixture

from oracles import bb_log_pmf_mp, bb_pmf_exact, beta_cdf_mp

# reference values from mpmath at 50 digits
LGAMMA_REF = [
    (0.5, 0.57236494292470008707),
    (1.5, -0.12078223763524522235),
    (3.7, 1.4280723266653881292),
    (9.99, 12.77931521435019336),
    (10.0, 12.801827480081469611),
    (25.5, 56.389167643719946744),
    (1234.5, 7550.5509010778948957),
]

LBETA_REF = [
    (0.5, 0.5, 1.1447298858494001741),
    (2.5, 7.25, -4.9053366188393039546),
    (30, 40, -48.301749095916125196),
    (0.01, 1000, 4.5304072760606920789),
    (1000, 1000, -1388.4826016359022503),
    (1.5, 300, -8.6777045624648419468),
]

CDF_REF = [
    (0.3, 2, 3, 0.3483),
    (0.9, 0.5, 0.5, 0.79516723530086657191),
    (0.05, 30, 2, 2.7474015951156661887e-38),
    (0.7, 200, 100, 0.89115693435508984738),
    (0.5, 0.1, 0.1, 0.5),
]


@pytest.mark.parametrize("x,ref", LGAMMA_REF)
def test_log_gamma_reference(x, ref):
    assert log_gamma(x) == pytest.approx(ref, rel=1e-14, abs=1e-14)


@pytest.mark.parametrize("a,b,ref", LBETA_REF)
def test_log_beta_reference(a, b, ref):
    assert log_beta(a, b) == pytest.approx(ref, rel=1e-13, abs=1e-13)


def test_log_beta_examples():
    assert abs(log_beta(1, 1)) <= 1e-14
    assert log_beta(2, 3) == pytest.approx(math.log(1 / 12), rel=1e-14)
    assert abs(log_beta(1e3, 1e3) - float(mp.log(mp.beta(1000, 1000)))) / 1388.48 <= 1e-12


@pytest.mark.parametrize("bad", [0.0, -1.0, math.inf, math.nan])
def test_log_beta_domain(bad):
    with pytest.raises(DomainError):
        log_beta(bad, 1.0)
    with pytest.raises(DomainError):
        log_gamma(bad)


@given(
    st.floats(min_value=1e-3, max_value=1e4),
    st.floats(min_value=1e-3, max_value=1e4),
)
def test_log_beta_symmetric_bitwise(a, b):
    assert log_beta(a, b) == log_beta(b, a)


@given(
    st.floats(min_value=1e-3, max_value=1e4),
    st.floats(min_value=1e-3, max_value=1e4),
)
def test_log_beta_matches_mpmath(a, b):
    ref = float(mp.log(mp.beta(a, b)))
    # relative accuracy except where ln B passes through zero
    assert abs(log_beta(a, b) - ref) <= 1e-12 * max(1.0, abs(ref)) + 1e-13


def test_log_beta_vectorized_matches_scalar():
    a = np.array([0.5, 3.0, 40.0, 900.0])
    b = np.array([700.0, 0.2, 55.0, 2.0])
    vec = log_beta(a, b)
    assert [float(v) for v in vec] == [log_beta(x, y) for x, y in zip(a, b)]


def test_bb_pmf_sums_to_one_grid():
    worst = 0.0
    for k in range(1, 21):
        for a in (0.1, 0.37, 1.0, 2.5, 13.0, 100.0):
            for b in (0.1, 0.9, 4.0, 55.5, 100.0):
                total = math.fsum(np.exp(bb_log_pmf_all(k, a, b)))
                worst = max(worst, abs(total - 1.0))
    assert worst <= 1e-10


@given(
    st.integers(min_value=1, max_value=20),
    st.floats(min_value=0.1, max_value=100),
    st.floats(min_value=0.1, max_value=100),
)
def test_bb_pmf_sums_to_one_property(k, a, b):
    assert abs(math.fsum(np.exp(bb_log_pmf_all(k, a, b))) - 1.0) <= 1e-10


@pytest.mark.parametrize("k,a,b", [(7, 8, 2), (7, 2, 8), (10, 1, 1), (5, 3, 4), (20, 7, 13)])
def test_bb_pmf_exact_rational(k, a, b):
    for s in range(k + 1):
        exact = bb_pmf_exact(s, k, a, b)
        got = math.exp(bb_log_pmf(s, BetaBinomParams(k, BetaParams(a, b))))
        assert got == pytest.approx(float(exact), rel=1e-12)


def test_bb_pmf_examples():
    # BB(k, 1, 1) is uniform on 0..k
    assert np.allclose(np.exp(bb_log_pmf_all(7, 1.0, 1.0)), 1 / 8, atol=1e-14)
    # k = 1: Bernoulli(a / (a + b))
    assert math.exp(bb_log_pmf(1, BetaBinomParams(1, BetaParams(2.0, 3.0)))) == pytest.approx(0.4, abs=1e-14)


@given(
    st.integers(min_value=1, max_value=30),
    st.floats(min_value=0.05, max_value=500),
    st.floats(min_value=0.05, max_value=500),
    st.data(),
)
def test_bb_log_pmf_matches_mpmath(k, a, b, data):
    s = data.draw(st.integers(min_value=0, max_value=k))
    ref = float(bb_log_pmf_mp(s, k, a, b))
    assert bb_log_pmf(s, BetaBinomParams(k, BetaParams(a, b))) == pytest.approx(ref, rel=1e-11, abs=1e-11)


def test_bb_log_pmf_domain():
    p = BetaBinomParams(7, BetaParams(2, 2))
    for bad in (-1, 8, 2.5):
        with pytest.raises(DomainError):
            bb_log_pmf(bad, p)
    with pytest.raises(DomainError):
        BetaParams(0.0, 1.0)
    with pytest.raises(DomainError):
        BetaBinomParams(0, BetaParams(1, 1))


@pytest.mark.parametrize("x,a,b,ref", CDF_REF)
def test_beta_cdf_reference(x, a, b, ref):
    assert beta_cdf(x, BetaParams(a, b)) == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_beta_cdf_analytic_cases():
    psi = np.linspace(0.0, 1.0, 201)
    assert np.max(np.abs(beta_cdf(psi, BetaParams(1, 1)) - psi)) <= 1e-10
    assert np.max(np.abs(beta_cdf(psi, BetaParams(2, 1)) - psi**2)) <= 1e-10
    for a, b in ((0.5, 3.0), (7.0, 2.0), (40.0, 41.0)):
        lhs = beta_cdf(psi, BetaParams(a, b))
        rhs = 1.0 - beta_cdf(1.0 - psi, BetaParams(b, a))
        assert np.max(np.abs(lhs - rhs)) <= 1e-10


@given(
    st.floats(min_value=0.05, max_value=500),
    st.floats(min_value=0.05, max_value=500),
    st.floats(min_value=0.0, max_value=1.0),
)
def test_beta_cdf_matches_mpmath(a, b, x):
    assert beta_cdf(x, BetaParams(a, b)) == pytest.approx(float(beta_cdf_mp(x, a, b)), abs=1e-12)


@given(st.floats(min_value=0.1, max_value=100), st.floats(min_value=0.1, max_value=100))
def test_beta_cdf_monotone(a, b):
    vals = beta_cdf(np.linspace(0, 1, 301), BetaParams(a, b))
    assert vals[0] == 0.0 and vals[-1] == 1.0
    assert np.all(np.diff(vals) >= -1e-15)


def test_beta_pdf_values():
    assert beta_pdf(0.3, BetaParams(2, 1)) == pytest.approx(0.6, abs=1e-14)
    assert beta_pdf(0.0, BetaParams(1, 3)) == pytest.approx(3.0, abs=1e-13)
    assert beta_pdf(1.0, BetaParams(4, 1)) == pytest.approx(4.0, abs=1e-13)
    assert beta_pdf(0.0, BetaParams(0.5, 2)) == math.inf
    with pytest.raises(DomainError):
        beta_pdf(1.5, BetaParams(1, 1))


def test_beta_pdf_integrates_to_cdf():
    p = BetaParams(3.5, 2.25)
    xs = np.linspace(0, 0.6, 6001)
    integral = np.trapezoid(beta_pdf(xs, p), xs)
    assert integral == pytest.approx(beta_cdf(0.6, p), abs=1e-7)


def test_mixture_cdf_identity():
    mix = BetaBinomMixture(0.5, BetaParams(2, 1), BetaParams(1, 2), 7)
    psi = np.linspace(0, 1, 101)
    assert np.max(np.abs(mixture_cdf(psi, mix) - psi)) <= 1e-14
