import numpy as np
import pytest

from vhkg import evolution as E
from vhkg.evolution import (BlownUpError, RunConfig, Trajectory, check_linear_bound, duhamel_residual,
                            fit_decay, intersection_norm, linear_propagate, phi1, phi2, simulate,
                            step_etd, theta_template, v_transform, write_frames_csv, write_norms_csv)
from vhkg.nonlinear_ops import NonFiniteFieldError, random_band_limited
from vhkg.spectral_core import FrequencyGrid, SpectralField, gaussian_profile, norms
from vhkg.symbols import ConstantKernel, SymbolConfig, TabulatedKernel

C = 1.0 / (2.0 * np.pi)
CFG = SymbolConfig(1.0)
GRID = FrequencyGrid(8.0, 65)


def run(**kw):
    base = dict(cfg=CFG, kernel=ConstantKernel(C), grid=GRID, dt=0.01, t_end=0.5)
    return RunConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def small():
    return simulate(run(t_end=2.0, store_every=5))


# -- linear flow ------------------------------------------------------------

def test_propagate_identity_and_contraction(gauss):
    assert np.array_equal(linear_propagate(CFG, gauss, 0.0).values, gauss.values)
    prev = norms(gauss).linf
    for t in (0.1, 1.0, 10.0, 100.0):
        cur = norms(linear_propagate(CFG, gauss, t)).linf
        assert cur <= prev * (1 + 1e-15)
        prev = cur
    with pytest.raises(ValueError):
        linear_propagate(CFG, gauss, -1.0)


def test_propagate_without_dispersion_is_real_heat(gauss):
    out = linear_propagate(CFG, gauss, 0.3, dispersion_on=False).values
    assert np.allclose(out, np.exp(-0.3 * GRID.k ** 2) * gauss.values, rtol=1e-14, atol=0)


def test_heat_kernel_integral():
    g = FrequencyGrid(32.0, 4097)
    one = SpectralField(g, np.ones(g.N, dtype=complex))
    assert abs(norms(linear_propagate(CFG, one, 1.0)).l1 - np.sqrt(np.pi)) <= 1e-8


def test_phi_functions():
    assert phi1(0.0) == 1.0 and phi2(0.0) == 0.5
    z = np.array([1e-3, -5e-3 + 2e-3j, 0.5, -3.0 + 4j, -200.0])
    ref1 = np.array([complex(np.expm1(complex(x)) / x) for x in z])
    ref2 = np.array([complex((np.exp(complex(x)) - 1 - x) / x ** 2) for x in z])
    assert np.allclose(phi1(z), ref1, rtol=1e-12, atol=0)
    assert np.allclose(phi2(z)[2:], ref2[2:], rtol=1e-12, atol=0)
    # series branch stays accurate where the closed form cancels
    assert abs(phi2(1e-3) - (0.5 + 1e-3 / 6 + 1e-6 / 24 + 1e-9 / 120)) < 1e-14


# -- stepping ----------------------------------------------------------------

def test_step_with_zero_kernel_is_linear(gauss):
    out = step_etd(CFG, ConstantKernel(0.0), gauss, 0.05)
    assert np.array_equal(out.values, linear_propagate(CFG, gauss, 0.05).values)


def test_step_validation(gauss):
    with pytest.raises(ValueError):
        step_etd(CFG, ConstantKernel(C), gauss, 0.0)
    with pytest.raises(NonFiniteFieldError):
        step_etd(CFG, ConstantKernel(C), gauss.with_values(np.full(GRID.N, np.nan + 0j)), 0.1)


def test_self_convergence_second_order():
    u0 = gaussian_profile(1.0, GRID)
    finals = [simulate(run(dt=dt, t_end=1.0, eta=1.0)).frames[-1].values for dt in (0.04, 0.02, 0.01, 0.005)]
    e = [np.abs(finals[i] - finals[i + 1]).max() for i in range(3)]
    orders = np.log2(np.array(e[:-1]) / np.array(e[1:]))
    assert np.all(np.abs(orders - 2.0) <= 0.2)
    assert u0.is_finite()


def test_fft_fast_path_matches_direct():
    g = FrequencyGrid(16.0, 257)
    u = gaussian_profile(0.7, g)
    a = E._ETD2(CFG, ConstantKernel(C), g, 0.02, True)
    b = E._ETD2(CFG, TabulatedKernel.from_function(lambda k, l: C + 0 * k, g.lattice(2), g.lattice(2)),
                g, 0.02, True)
    assert np.abs(a(u).values - b(u).values).max() <= 1e-14


# -- runs --------------------------------------------------------------------

def test_zero_kernel_simulation_is_linear_flow():
    tr = simulate(run(kernel=ConstantKernel(0.0), eta=0.5, store_every=10))
    for t, f in zip(tr.times, tr.frames):
        ref = linear_propagate(CFG, tr.frames[0], t).values
        assert np.abs(f.values - ref).max() <= 1e-13 * np.abs(ref).max()


def test_zero_data_gives_zero_trajectory():
    tr = simulate(run(eta=0.0, store_every=10))
    assert not tr.blown_up
    assert not np.any(tr.norm_array)
    assert not np.any(theta_template(tr))


def test_storage_layout(small):
    assert small.completed_steps == 200 and len(small.norm_array) == 201
    assert list(small.steps[:3]) == [0, 5, 10] and small.steps[-1] == 200
    assert np.allclose(small.times, small.steps * 0.01)
    assert small.frame_at_step(10) is small.frames[2]
    with pytest.raises(KeyError):
        small.frame_at_step(11)
    assert small.norm_history[0].l1 == pytest.approx(small.norm_array[0, 0])


def test_checkpoints_store_neighbours():
    tr = simulate(run(store_every=25, checkpoints=(0.2,)))
    assert {19, 20, 21} <= set(tr.steps)
    assert set(tr.regular_indices()) == {i for i, n in enumerate(tr.steps) if n % 25 == 0}


def test_theta_template(small):
    th = theta_template(small)
    h = small.norm_array
    assert th[0] == h[0, 2] + h[0, 0]
    assert np.all(np.diff(th) >= 0)
    assert np.all(h[:, 2] <= th)


def test_blowup_without_dispersion():
    tr = simulate(run(eta=2.0, dt=0.02, t_end=50.0, dispersion_on=False, store_every=50))
    assert tr.blown_up and tr.blowup_time < 50.0
    assert tr.norm_array[-1, 0] >= 1e3 * tr.norm_array[0, 0]
    assert tr.completed_steps == round(tr.blowup_time / 0.02)
    for fn in (theta_template, lambda t: fit_decay(t, "l1_hat")):
        with pytest.raises(BlownUpError):
            fn(tr)


def test_initial_data_must_match_grid():
    with pytest.raises(ValueError):
        simulate(run(), gaussian_profile(1.0, FrequencyGrid(8.0, 33)))


# -- decay fit -----------------------------------------------------------------

def _synthetic(rate, t_end=100.0, dt=0.5):
    cfg = run(dt=dt, t_end=t_end)
    t = np.arange(cfg.n_steps + 1) * dt
    h = np.stack([(1 + t) ** rate, (1 + t) ** (rate / 2), np.ones_like(t)], axis=1)
    return Trajectory(cfg, np.array([0.0]), [SpectralField.zeros(GRID)], h, np.array([0]))


def test_fit_recovers_exact_power_law():
    rep = fit_decay(_synthetic(-0.5), "l1_hat")
    assert abs(rep.fitted_exponent + 0.5) <= 1e-10
    assert rep.r_squared == pytest.approx(1.0)
    assert rep.fit_window == (10.0, 100.0)
    assert abs(fit_decay(_synthetic(-0.5), "l2_x").fitted_exponent + 0.25) <= 1e-10
    assert abs(fit_decay(_synthetic(-0.5), "linf_hat").fitted_exponent) <= 1e-12


def test_fit_validation():
    tr = _synthetic(-0.5)
    with pytest.raises(ValueError):
        fit_decay(tr, "l1_hat", window=(99.0, 100.0))
    with pytest.raises(ValueError):
        fit_decay(tr, "energy")
    with pytest.raises(ValueError):
        fit_decay(tr, "l1_hat", window=(50.0, 200.0))


# -- linear bound ------------------------------------------------------------------

def test_linear_bound_trivial_cases(gauss):
    u = random_band_limited(GRID, np.random.default_rng(3))
    for p in (1, 2, "inf"):
        assert check_linear_bound(CFG, u, p, [0.0]) <= 1.0
    assert check_linear_bound(CFG, u, np.inf, np.logspace(-2, 4, 50)) <= 1.0
    assert check_linear_bound(CFG, SpectralField.zeros(GRID), 1, [1.0]) == 0.0
    with pytest.raises(ValueError):
        check_linear_bound(CFG, u, 1, [])
    with pytest.raises(ValueError):
        check_linear_bound(CFG, u, 3, [1.0])


def test_intersection_norm(gauss):
    n = norms(gauss)
    assert intersection_norm(gauss, 1) == n.l1 + n.linf
    assert intersection_norm(gauss, 2) == n.l2 + n.linf
    assert intersection_norm(gauss, "inf") == n.linf


# -- v transform and Duhamel ---------------------------------------------------

def test_v_transform(small):
    vs = v_transform(small)
    assert np.array_equal(vs[0].values, small.frames[0].values)
    for t, v, f in zip(small.times, vs, small.frames):
        assert norms(v).l1 == pytest.approx(norms(f).l1, rel=1e-14)
        assert v.values[GRID.M] == pytest.approx(np.exp(1j * t) * f.values[GRID.M], rel=1e-14)


def test_duhamel_forms(small):
    a = duhamel_residual(small, "original")
    b = duhamel_residual(small, "integrated_by_parts")
    assert a.times == [2.0] and b.times == [2.0]
    assert a.worst[1] <= 1e-3 and b.worst[1] <= 5e-3
    assert abs(a.worst[1] - b.worst[1]) <= 1e-3 + 5e-3
    assert duhamel_residual(small, checkpoints=[0.5, 1.0]).times == [0.5, 1.0]


def test_duhamel_zero_kernel_exact():
    tr = simulate(run(kernel=ConstantKernel(0.0), store_every=5))
    for form in ("original", "integrated_by_parts"):
        assert duhamel_residual(tr, form).worst[1] <= 1e-14


def test_duhamel_preconditions(small):
    with pytest.raises(ValueError):
        duhamel_residual(small, "spectral")
    with pytest.raises(ValueError):
        duhamel_residual(simulate(run(store_every=20)))
    with pytest.raises(ValueError):
        duhamel_residual(small, checkpoints=[0.123])
    tab = TabulatedKernel.from_function(lambda k, l: C + 0 * k, GRID.lattice(2), GRID.lattice(2))
    with pytest.raises(ValueError):
        duhamel_residual(simulate(run(kernel=tab, t_end=0.05)))
    with pytest.raises(ValueError):
        duhamel_residual(simulate(run(grid=FrequencyGrid(8.0, 131), t_end=0.05)), "integrated_by_parts")


# -- config and CSV ------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(dt=0.0), dict(dt=-0.1), dict(t_end=0.001), dict(store_every=0),
                                 dict(store_every=1.5), dict(blowup_factor=1.0), dict(eta=np.nan),
                                 dict(checkpoints=(0.5,))])
def test_runconfig_rejects(bad):
    with pytest.raises(ValueError):
        run(**bad)


def test_runconfig_dict_roundtrip():
    rc = run(store_every=3, checkpoints=(0.1,), kernel=ConstantKernel(0.2 + 0.1j))
    back = RunConfig.from_dict(rc.to_dict())
    assert back.to_dict() == rc.to_dict()
    with pytest.raises(ValueError, match="colour"):
        RunConfig.from_dict({**rc.to_dict(), "colour": 1})
    d = rc.to_dict()
    del d["dt"]
    with pytest.raises(ValueError, match="dt"):
        RunConfig.from_dict(d)


def test_csv_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        tr = simulate(run(store_every=25))
        p = write_norms_csv(tr, tmp_path / f"{name}.csv")
        fr = write_frames_csv(tr, tmp_path / f"frames_{name}")
        outs.append((p.read_bytes(), [f.read_bytes() for f in fr]))
    assert outs[0] == outs[1]
    lines = outs[0][0].decode().splitlines()
    assert lines[0] == "t,l1_hat,l2_hat,linf_hat,theta" and len(lines) == 52
    assert outs[0][1][0].decode().splitlines()[0] == "k,re,im"


def test_blown_up_csv_leaves_theta_empty(tmp_path):
    tr = simulate(run(eta=2.0, dt=0.02, t_end=50.0, dispersion_on=False, store_every=50))
    last = write_norms_csv(tr, tmp_path / "n.csv").read_text().splitlines()[-1]
    assert last.endswith(",")
