import numpy as np
import pytest

from fpflow.exceptions import ConfigurationError
from fpflow.geometry import fibonacci_sphere, sample_surface
from fpflow.integration import OperatorFactory, SolverState, bdf_coefficients
from fpflow.mcf import (
    McfConfig,
    McfState,
    asphericity,
    mcf_step,
    rescale,
    run_mcf,
    surface_area,
)


@pytest.fixture(scope="module")
def sphere():
    return fibonacci_sphere(600)


def _state(X, s=None, tau=1e-3):
    s = np.zeros(len(X)) if s is None else s
    return McfState(SolverState([X.copy()], [s.copy()], 0.0, 0, 3), tau)


def test_surface_area_sphere_and_scaling(sphere):
    E = surface_area(sphere)
    assert E == pytest.approx(4 * np.pi, rel=0.02)
    assert surface_area(3.0 * sphere) == pytest.approx(9.0 * E, rel=1e-12)


def test_surface_area_unit_patch():
    # closed unit cube surface: six unit faces
    P = sample_surface("unit_sphere", 2000).positions
    P = P / np.abs(P).max(axis=1, keepdims=True) * 0.5
    assert surface_area(P) == pytest.approx(6.0, rel=0.05)


def test_asphericity():
    # cuboctahedron: all 12 vertices equidistant from the centre
    e = np.eye(3)
    V = np.array([si * e[i] + sj * e[j] for i in range(3) for j in range(i + 1, 3)
                  for si in (1, -1) for sj in (1, -1)])
    assert asphericity(2.0 * V + np.array([1.0, 2.0, 3.0])) < 1e-12
    P = fibonacci_sphere(200) * np.array([1.0, 1.0, 1.5])
    assert asphericity(P) == pytest.approx(0.5, rel=1e-2)


def test_laplacian_of_coordinates_on_sphere(sphere):
    ops = OperatorFactory()(sphere)
    assert np.abs(ops.ML @ sphere + 2 * sphere).max() < 0.05


def test_rescale_identity_and_area(sphere):
    st = _state(sphere)
    assert rescale(st, 1.0) is st and st.lambda_cum == 1.0
    np.testing.assert_array_equal(st.positions, sphere)
    rescale(st, 2.0)
    assert surface_area(st.positions) == pytest.approx(4 * surface_area(sphere), rel=1e-12)
    np.testing.assert_allclose(st.physical_positions, sphere, rtol=1e-15)
    with pytest.raises(ConfigurationError):
        rescale(st, 0.0)


def test_rescale_history_handling(sphere):
    st = _state(sphere)
    st.solver.X.insert(0, sphere * 0.99)
    st.solver.s.insert(0, np.zeros(len(sphere)))
    rescale(st, 2.0)
    assert st.solver.depth == 1 and st.tau == 1e-3
    st2 = _state(sphere)
    st2.solver.X.insert(0, sphere * 0.99)
    st2.solver.s.insert(0, np.zeros(len(sphere)))
    rescale(st2, 2.0, keep_physical_step=True)
    assert st2.solver.depth == 2 and st2.tau == pytest.approx(4e-3)


def test_rescaled_step_is_scaled_physical_step(sphere):
    # X -> lam X with tau -> lam^2 tau leaves one step of the flow invariant
    sc = bdf_coefficients(1)
    a = mcf_step(_state(sphere, tau=1e-3), sc, 0.0)
    b = _state(sphere, tau=1e-3)
    rescale(b, 2.0, keep_physical_step=True)
    mcf_step(b, sc, 0.0)
    np.testing.assert_allclose(b.physical_positions, a.physical_positions, atol=1e-10)
    assert b.t_physical == pytest.approx(a.t_physical, rel=1e-14)


def test_zero_curvature_is_identity(sphere):
    rng = np.random.default_rng(0)
    st = _state(sphere, s=rng.normal(size=len(sphere)))
    mcf_step(st, bdf_coefficients(1), 0.0, zero_curvature=True)
    np.testing.assert_array_equal(st.positions, sphere)
    st = _state(sphere)
    mcf_step(st, bdf_coefficients(1), 100.0, zero_curvature=True)
    np.testing.assert_array_equal(st.positions, sphere)


def test_solve_methods_agree(sphere):
    s0 = np.sin(2 * sphere[:, 2])
    out = []
    for method in ("monolithic", "direct", "gauss_seidel"):
        st = _state(sphere, s=s0)
        mcf_step(st, bdf_coefficients(1), 100.0, method=method)
        out.append((st.positions, st.solver.s[0]))
    for X, s in out[1:]:
        np.testing.assert_allclose(X, out[0][0], atol=1e-8)
        np.testing.assert_allclose(s, out[0][1], atol=1e-7)
    with pytest.raises(ConfigurationError):
        mcf_step(_state(sphere), bdf_coefficients(1), 0.0, method="jacobi")


def test_sphere_shrinks_like_exact_solution(sphere):
    res = run_mcf(sphere, McfConfig(eta=0.0, max_steps=100, redistribute_every=0),
                  s0=np.zeros(len(sphere)))
    t = res.state.t_physical
    assert t == pytest.approx(0.1)
    r = np.linalg.norm(res.positions, axis=1)
    assert np.abs(r - np.sqrt(1 - 4 * t)).max() < 1e-2


def test_sphere_with_tangential_velocity(sphere):
    res = run_mcf(sphere, McfConfig(eta=100.0, max_steps=100, redistribute_every=0))
    r = np.linalg.norm(res.positions, axis=1)
    assert np.abs(r - np.sqrt(1 - 4 * res.state.t_physical)).max() < 1e-2
    # E_h sums point-dependent star areas; the first step moves the uneven
    # Fibonacci poles strongly, after which the area falls every step
    E = np.array([row["E_h"] for row in res.trajectory])
    assert np.all(np.diff(E[1:]) < 0)


def test_rescale_trigger_and_stop(sphere):
    cfg = McfConfig(eta=100.0, tau=1e-2, max_steps=200, redistribute_every=0, trigger=0.5,
                    stop_area_ratio=0.05)
    res = run_mcf(sphere, cfg)
    assert res.status == "stopped"
    assert res.rescales, "area fell below the trigger, a rescale was expected"
    assert res.final_area_ratio < 0.05
    for step, lam in res.rescales:
        assert lam > 1.0
        row = res.trajectory[step]
        # after the rescale the computational area is back at the initial area
        assert row["E_h_computational"] == pytest.approx(res.initial_area, rel=0.02)
    # the physical area keeps falling through the rescales
    E = np.array([row["E_h"] for row in res.trajectory])
    assert np.all(np.diff(E) < 0)


def test_redistribution_keeps_area(sphere):
    res = run_mcf(sphere, McfConfig(eta=100.0, max_steps=10, redistribute_every=5))
    for step in (5, 10):
        before = res.step_areas[step - 1][1]
        after = res.trajectory[step]["E_h_computational"]
        assert abs(after - before) < 0.01 * before


def test_t_max_stop(sphere):
    res = run_mcf(sphere, McfConfig(eta=0.0, max_steps=1000, redistribute_every=0, t_max=0.01))
    assert res.status == "stopped" and res.state.solver.step == 10


def test_collapse_signal(sphere):
    Y = sphere.copy()
    Y[10] = Y[11]
    res = run_mcf(Y, McfConfig(max_steps=2))
    assert res.status == "collapse"
    assert "10" in res.message or "11" in res.message


def test_callback_rows(sphere):
    rows = []
    run_mcf(sphere, McfConfig(max_steps=3, redistribute_every=0),
            callback=lambda row, state: rows.append(row))
    assert [r["step"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) == {"step", "t_physical", "E_h", "E_h_computational", "spread",
                            "lambda_cum"}


def test_config_validation():
    for bad in ({"tau": 0.0}, {"order": 4}, {"redistribute_every": -1}, {"trigger": 1.0},
                {"stop_area_ratio": 0.0}, {"eta": -1.0}):
        with pytest.raises(ConfigurationError):
            McfConfig(**bad)
