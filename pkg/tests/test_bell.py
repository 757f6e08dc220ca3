import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from nestmlmc.bell import (b_coefficients, centered_mean_moment, complete_bell,
                           moments_from_cumulants, partial_bell)


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]
        yield [[first]] + part


def brute_partial_bell(n, k, x):
    # sum over set partitions of {1..n} into k blocks of prod x_{|block|}
    total = 0.0
    for part in set_partitions(list(range(n))):
        if len(part) == k:
            total += math.prod(x[len(b) - 1] for b in part)
    return total


def test_set_partition_counts_are_bell_numbers():
    assert [sum(1 for _ in set_partitions(list(range(n)))) for n in range(1, 8)] == \
        [1, 2, 5, 15, 52, 203, 877]


@pytest.mark.parametrize("n", range(1, 9))
def test_partial_bell_matches_partition_enumeration(n):
    rng = random.Random(n)
    x = [rng.uniform(-2, 2) for _ in range(n)]
    for k in range(1, n + 1):
        expected = brute_partial_bell(n, k, x)
        got = partial_bell(n, k, x[: n - k + 1])
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_stirling_numbers_at_unit_arguments():
    # B_{n,k}(1,...,1) = S(n,k)
    assert partial_bell(5, 2, [1] * 4) == 15
    assert partial_bell(6, 3, [1] * 4) == 90
    assert partial_bell(8, 4, [1] * 5) == 1701


def test_complete_bell_low_orders():
    x = [1.5, -0.5, 2.0, 0.25]
    x1, x2, x3, x4 = x
    assert complete_bell(1, x[:1]) == x1
    assert complete_bell(2, x[:2]) == pytest.approx(x1**2 + x2)
    assert complete_bell(3, x[:3]) == pytest.approx(x1**3 + 3 * x1 * x2 + x3)
    assert complete_bell(4, x) == pytest.approx(
        x1**4 + 6 * x1**2 * x2 + 4 * x1 * x3 + 3 * x2**2 + x4)


def test_poisson_and_gaussian_moments_exact():
    assert moments_from_cumulants([1, 1, 1, 1], 4) == [1, 2, 5, 15]
    assert moments_from_cumulants([0, 1, 0, 0, 0, 0], 6) == [0, 1, 0, 3, 0, 15]


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 8), data=st.data(),
       a=st.floats(0.1, 3.0), b=st.floats(0.1, 3.0))
def test_partial_bell_homogeneity(n, data, a, b):
    k = data.draw(st.integers(1, n))
    x = data.draw(st.lists(st.floats(-2, 2), min_size=n - k + 1, max_size=n - k + 1))
    scaled = [a * b ** (i + 1) * xi for i, xi in enumerate(x)]
    lhs = partial_bell(n, k, scaled)
    rhs = a**k * b**n * partial_bell(n, k, x)
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def test_b_coefficients_closed_forms():
    kappa = [0.0, 2.0, -1.0, 5.0, 0.5]
    t = b_coefficients(kappa, 4)
    assert t[1, 1] == pytest.approx(kappa[1] / 2)
    assert t[2, 1] == pytest.approx(kappa[2] / 3)
    assert t[2, 2] == pytest.approx((kappa[1] / 2) ** 2)
    assert t[3, 1] == pytest.approx(kappa[3] / 4)
    assert t[3, 3] == pytest.approx((kappa[1] / 2) ** 3)
    assert t.row(2) == [t[2, 1], t[2, 2]]


def test_b_coefficients_validation():
    with pytest.raises(ValueError):
        b_coefficients([0, 1, 0], 11)
    with pytest.raises(ValueError):
        b_coefficients([0, 1, 0], 3)


def rademacher_mean_moment(n, K):
    # exact E[(mean of K Rademacher)^n] by enumerating the binomial law
    return sum(math.comb(K, i) * (2 * i - K) ** n for i in range(K + 1)) / 2**K / K**n


@pytest.mark.parametrize("K", [1, 2, 3, 5, 8])
@pytest.mark.parametrize("n", range(1, 7))
def test_centered_mean_moment_rademacher(n, K):
    kappa = [0.0, 1.0, 0.0, -2.0, 0.0, 16.0]
    assert centered_mean_moment(kappa, n, 1.0 / K) == pytest.approx(
        rademacher_mean_moment(n, K), rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("K", [1, 4, 16])
def test_centered_mean_moment_matches_complete_bell(K):
    # centred exponential: kappa_j = (j-1)!; the mean of K copies has kappa_j / K**(j-1)
    kappa = [0.0] + [float(math.factorial(j - 1)) for j in range(2, 7)]
    h = 1.0 / K
    for n in range(1, 7):
        direct = complete_bell(n, [kappa[j - 1] * h ** (j - 1) for j in range(1, n + 1)])
        assert centered_mean_moment(kappa, n, h) == pytest.approx(direct, rel=1e-12, abs=1e-15)


def test_centered_mean_moment_validation():
    with pytest.raises(ValueError):
        centered_mean_moment([0.1, 1.0], 2, 0.5)
    with pytest.raises(ValueError):
        centered_mean_moment([0.0, 1.0], 2, 0.3)
    with pytest.raises(ValueError):
        partial_bell(3, 4, [1.0])
    with pytest.raises(ValueError):
        partial_bell(4, 2, [1.0])
