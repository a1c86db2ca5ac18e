import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_inf
from vhkg import nonlinear_ops as O
from vhkg import symbols as S
from vhkg.spectral_core import FrequencyGrid, NonFiniteFieldError, SpectralField, gaussian_profile, norms
from vhkg.symbols import ConstantKernel, SymbolConfig, TabulatedKernel

C = 1.0 / (2.0 * np.pi)


def _random_field(grid, seed):
    return O.random_band_limited(grid, np.random.default_rng(seed))


def test_B_gaussian_oracle(kernel):
    g = FrequencyGrid(32.0, 1025)
    out = O.apply_B(kernel, gaussian_profile(1.0, g)).values
    assert np.abs(out - np.sqrt(np.pi / 2) * np.exp(-g.k ** 2 / 8)).max() < 1e-10


def test_B_zero_cases(kernel, coarse, gauss):
    assert not np.any(O.apply_B(kernel, SpectralField.zeros(coarse)).values)
    assert not np.any(O.apply_B(ConstantKernel(0.0), gauss).values)


def test_B_rejects_nonfinite(kernel, coarse):
    bad = SpectralField(coarse, np.full(coarse.N, np.nan))
    with pytest.raises(NonFiniteFieldError):
        O.apply_B(kernel, bad)


def test_B_multilinearity(kernel, coarse):
    u, v = _random_field(coarse, 1), _random_field(coarse, 2)
    lhs = O.apply_B(kernel, u + v).values - O.apply_B(kernel, u).values - O.apply_B(kernel, v).values
    rhs = O.apply_B_bilinear(kernel, u, v).values + O.apply_B_bilinear(kernel, v, u).values
    assert rel_inf(lhs, rhs) <= 1e-12


def test_tabulated_B_matches_pointwise_sum(coarse, gauss):
    nodes = coarse.lattice(2)
    tk = TabulatedKernel.from_function(lambda k, l: (1 + 0.3 * np.cos(k - 2 * l)) * C + 0j, nodes, nodes)
    out = O.apply_B(tk, gauss).values
    ref = np.zeros(coarse.N, dtype=complex)
    for j in range(coarse.N):
        for m in range(coarse.N):
            i = j - m + coarse.M
            if 0 <= i < coarse.N:
                ref[j] += tk(coarse.k[j], coarse.k[m]) * gauss.values[i] * gauss.values[m]
    assert rel_inf(out, coarse.dk * ref) <= 1e-13


def test_B_extended_restricts_to_grid(kernel, gauss):
    ext = O.apply_B_extended(kernel, gauss)
    M = gauss.grid.M
    assert ext.lo == -2 * M
    assert np.allclose(ext.values[M:3 * M + 1], O.apply_B(kernel, gauss).values, rtol=0, atol=1e-15)


def test_commutator_of_A2_is_minus_B(cfg, kernel):
    from vhkg.normal_form import lambda_commutator
    g = FrequencyGrid(16.0, 257)
    u = gaussian_profile(0.7, g)
    com = lambda_commutator(cfg, lambda a, b: O.apply_A2(cfg, kernel, a, b), u, u).values
    b = O.apply_B(kernel, u).values
    assert np.linalg.norm(com + b) <= 1e-10 * np.linalg.norm(b)


def test_T_zero_and_oracle(cfg, kernel):
    g = FrequencyGrid(16.0, 257)
    assert not np.any(O.apply_T(cfg, kernel, SpectralField.zeros(g)).values)
    u = gaussian_profile(0.5, g)
    a, b = O.apply_T(cfg, kernel, u).values, O.apply_T_direct(cfg, kernel, u).values
    assert np.linalg.norm(a - b) <= 1e-10 * np.linalg.norm(b)


def test_T_direct_guard(cfg, kernel):
    with pytest.raises(ValueError):
        O.apply_T_direct(cfg, kernel, SpectralField.zeros(FrequencyGrid(8.0, 513)))


def test_A3_full_vs_symmetrized(cfg, kernel, gauss):
    a = O.apply_A3(cfg, kernel, gauss, gauss, gauss).values
    b = O.apply_A3_symmetrized(cfg, kernel, gauss).values
    assert rel_inf(a, b) <= 1e-13


def test_A3_pointwise_sum(cfg, kernel):
    # trilinear engine against a plain triple loop with A3_hat on a tiny grid
    g = FrequencyGrid(2.0, 9)
    rng = np.random.default_rng(4)
    u1, u2, u3 = (SpectralField(g, rng.standard_normal(g.N) + 1j * rng.standard_normal(g.N)) for _ in range(3))
    out = O.apply_A3(cfg, kernel, u1, u2, u3).values
    M, dk = g.M, g.dk
    at = lambda f, s: f.values[s + M] if abs(s) <= M else 0.0
    ref = np.zeros(g.N, dtype=complex)
    for j in range(-M, M + 1):
        for L in range(-3 * M, 3 * M + 1):
            for m in range(-M, M + 1):
                w = at(u1, j - L) * at(u2, L - m) * at(u3, m)
                if w:
                    ref[j + M] += S.A3_hat(cfg, kernel, j * dk, L * dk, m * dk) * w
    assert rel_inf(out, dk * dk * ref) <= 1e-13


def test_Q_against_direct_triple_quadrature(cfg, kernel):
    # the acceptance suite repeats this at N=65
    u = gaussian_profile(0.5, FrequencyGrid(8.0, 33))
    assert rel_inf(O.apply_Q(cfg, kernel, u).values, O.apply_Q_direct(cfg, kernel, u).values) <= 1e-6


def test_Q_tabulated_kernel_against_direct():
    cfg = SymbolConfig(0.7)
    g = FrequencyGrid(6.0, 25)
    nodes = g.lattice(3)
    tk = TabulatedKernel.from_function(
        lambda k, l: (1 + 0.2 * np.cos(k) * np.sin(0.3 * l) + 0.1j * np.cos(l)) * C, nodes, nodes)
    u = gaussian_profile(0.4, g) * (1 + 0.2j)
    assert rel_inf(O.apply_Q(cfg, tk, u).values, O.apply_Q_direct(cfg, tk, u).values) <= 1e-12
    assert rel_inf(O.apply_T(cfg, tk, u).values, O.apply_T_direct(cfg, tk, u).values) <= 1e-12


def test_Q_direct_guard(cfg, kernel):
    with pytest.raises(ValueError):
        O.apply_Q_direct(cfg, kernel, SpectralField.zeros(FrequencyGrid(8.0, 131)))


def test_Q_zero(cfg, kernel, coarse):
    assert not np.any(O.apply_Q(cfg, kernel, SpectralField.zeros(coarse)).values)


def test_homogeneity(cfg, kernel, gauss):
    for op, deg in ((lambda u: O.apply_B(kernel, u), 2),
                    (lambda u: O.apply_T(cfg, kernel, u), 3),
                    (lambda u: O.apply_Q(cfg, kernel, u), 4)):
        assert rel_inf(op(2.0 * gauss).values, 2.0 ** deg * op(gauss).values) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(0, 2 ** 16))
def test_A2_bilinear_in_each_slot(d, seed):
    cfg = SymbolConfig(d)
    g = FrequencyGrid(6.0, 49)
    k = ConstantKernel(C)
    u, v, w = (_random_field(g, seed + i) for i in range(3))
    lhs = O.apply_A2(cfg, k, u + 3.0 * v, w).values
    rhs = O.apply_A2(cfg, k, u, w).values + 3.0 * O.apply_A2(cfg, k, v, w).values
    assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(lhs).max()


def test_random_band_limited_support_and_norm(coarse):
    u = _random_field(coarse, 0)
    assert norms(u).l1 == pytest.approx(1.0)
    assert not np.any(u.values[np.abs(coarse.k) >= coarse.K / 2])


def test_estimate_report_and_validation():
    rep = O.estimate_multilinear_constant("B", 1, 100, 0)
    assert 0 < rep.empirical_constant <= C * (1 + 1e-10)
    assert json.loads(json.dumps(rep.to_dict()))["p"] == 1.0
    assert O.estimate_multilinear_constant("B", "inf", 100, 0).to_dict()["p"] == "inf"
    with pytest.raises(ValueError):
        O.estimate_multilinear_constant("B", 1, 50, 0)
    with pytest.raises(ValueError):
        O.estimate_multilinear_constant("Z", 1, 100, 0)
    with pytest.raises(ValueError):
        O.estimate_multilinear_constant("B", 3, 100, 0)


def test_estimate_deterministic_and_nested():
    a = O.estimate_multilinear_constant("A2", 2, 100, 3)
    b = O.estimate_multilinear_constant("A2", 2, 100, 3)
    c = O.estimate_multilinear_constant("A2", 2, 200, 3)
    assert a.empirical_constant == b.empirical_constant
    assert c.empirical_constant >= a.empirical_constant


def test_estimate_zero_members_skipped(monkeypatch):
    grid = FrequencyGrid(8.0, 65)
    monkeypatch.setattr(O, "random_band_limited", lambda g, rng: SpectralField.zeros(g))
    rep = O.estimate_multilinear_constant("B", 1, 100, 0, grid=grid)
    assert rep.skipped == 100 and rep.empirical_constant == 0.0


def test_Q_estimate_within_kernel_bound(cfg, kernel):
    bound = S.kernel_bounds(cfg, kernel.sup)["Q"]
    reps = [O.estimate_multilinear_constant("Q", p, 100, 1) for p in (1, "inf")]
    for r in reps:
        assert 0 < r.empirical_constant <= bound
    grid = FrequencyGrid(8.0, 65)
    for i in range(5):
        u = _random_field(grid, 1000 + i)
        q, nu = norms(O.apply_Q(cfg, kernel, u)), norms(u)
        assert q.l1 <= bound * nu.l1 ** 4
        assert q.linf <= bound * nu.l1 ** 3 * nu.linf
