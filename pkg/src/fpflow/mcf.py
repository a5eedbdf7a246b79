"""Mean curvature flow with artificial tangential velocity.

The velocity is ``v = Lap(X)``. Eliminating ``v_k = ML X_k`` leaves a
coupled sparse system in ``(X_k, s_k)``::

    (a/tau) X_k - ML X_k + eta MG s_k       = X_hat / tau
    MG . (ML X_k) + (a/tau) s_k - eta ML s_k = s_hat / tau

solved monolithically (4N unknowns) or by a block Gauss-Seidel iteration.
The shrinking surface is periodically rescaled, ``X -> lambda X``, which
leaves the flow invariant up to the time change ``t -> lambda^2 t``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_points, check_positive
from .exceptions import (
    CollapseSignal,
    ConfigurationError,
    DegenerateGeometryError,
    NonConvergenceError,
    SolverError,
)
from .geometry import area_elements
from .integration import (
    LinearSolveConfig,
    OperatorFactory,
    SolverState,
    _combine,
    bdf_coefficients,
    extrapolate,
    solve_sparse,
)
from .redistribution import RedistributionConfig, initial_log_density, redistribute, spread_metric

COLLAPSE_DISTANCE = 1e-14


def surface_area(cloud, k=20):
    """Discrete area ``E_h``: the sum of the area elements."""
    return float(np.sum(area_elements(cloud, k=k)))


def asphericity(cloud):
    """``(max - min) / min`` of the distances to the centroid."""
    X = check_points(cloud)
    d = np.linalg.norm(X - X.mean(axis=0), axis=1)
    return float((d.max() - d.min()) / d.min())


@dataclass
class McfState:
    """Solver history on the computational scale plus rescaling bookkeeping.

    Physical positions are ``X / lambda_cum``; a computational step ``tau``
    advances physical time by ``tau / lambda_cum**2``.
    """

    solver: SolverState
    tau: float
    lambda_cum: float = 1.0
    t_physical: float = 0.0

    @property
    def positions(self):
        return self.solver.X[0]

    @property
    def physical_positions(self):
        return self.solver.X[0] / self.lambda_cum


def rescale(state, lam, keep_physical_step=False):
    """Scale all stored positions by ``lam``; ``s`` is unchanged.

    With ``keep_physical_step`` the computational step becomes
    ``lam**2 * tau`` so the stored history stays a valid BDF history and the
    physical step is unchanged. Otherwise ``tau`` is kept and the history is
    reset to the latest snapshot.
    """
    check_positive(lam, "lambda")
    if lam == 1.0:
        return state
    state.solver.X = [lam * X for X in state.solver.X]
    state.lambda_cum *= lam
    if keep_physical_step:
        state.tau *= lam * lam
    else:
        state.solver.reset_history()
    return state


def _check_collapse(neighbors):
    d = neighbors.distances[:, 0]
    if np.any(d < COLLAPSE_DISTANCE):
        i = int(np.argmin(d))
        raise CollapseSignal(f"points collapsed onto each other near point {i}")


def _blocks(ops, scheme, tau, eta, zero_curvature):
    n = ops.n_points
    a = scheme.a
    ML = sp.csr_matrix((n, n)) if zero_curvature else ops.ML
    I = sp.identity(n, format="csr")
    A0 = ((a / tau) * I - ML).tocsc()
    As = ((a / tau) * I - eta * ML).tocsc()
    couple = [(M @ ML).tocsr() for M in ops.MG]
    return ML, A0, As, couple


def mcf_system(ops, scheme, tau, eta, X_hist, s_hist, zero_curvature=False):
    """Block matrix and right-hand side of one step in increment form.

    Unknowns are ``(dX_x, dX_y, dX_z, ds)`` relative to the latest snapshot.
    """
    ML, A0, As, couple = _blocks(ops, scheme, tau, eta, zero_curvature)
    MG = ops.MG
    Z = None
    blocks = [
        [A0, Z, Z, eta * MG[0]],
        [Z, A0, Z, eta * MG[1]],
        [Z, Z, A0, eta * MG[2]],
        [couple[0], couple[1], couple[2], As],
    ]
    A = sp.bmat(blocks, format="csc")
    X0, s0 = X_hist[0], s_hist[0]
    dX = _combine(scheme.history, X_hist[: scheme.order]) / tau
    ds = _combine(scheme.history, s_hist[: scheme.order]) / tau
    gs0 = [M @ s0 for M in MG]
    LX0 = ML @ X0
    rx = [dX[:, c] + LX0[:, c] - eta * gs0[c] for c in range(3)]
    rs = ds - sum(couple[c] @ X0[:, c] for c in range(3)) + eta * (ML @ s0)
    return A, np.concatenate(rx + [rs])


class _BlockLU:
    """Exact solves with the block lower-triangular part of the MCF matrix."""

    def __init__(self, ops, scheme, tau, eta, zero_curvature):
        ML, A0, As, couple = _blocks(ops, scheme, tau, eta, zero_curvature)
        self.n = ops.n_points
        self.lu0 = spla.splu(A0)
        self.lus = spla.splu(As)
        self.couple = couple
        self.MG = ops.MG
        self.eta = eta

    def lower(self, r):
        n = self.n
        r = r.reshape(4, n)
        y = np.empty_like(r)
        for c in range(3):
            y[c] = self.lu0.solve(r[c])
        y[3] = self.lus.solve(r[3] - sum(self.couple[c] @ y[c] for c in range(3)))
        return y.ravel()


def _block_gmres(A, b, pre, config):
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    M = spla.LinearOperator(A.shape, pre.lower)
    x, _ = spla.gmres(A, b, rtol=config.tol, atol=0.0, restart=config.restart,
                      maxiter=config.maxiter, M=M)
    res = np.linalg.norm(A @ x - b) / bnorm
    if not np.isfinite(res) or res > config.tol:
        raise SolverError(f"block GMRES residual {res:.3g} above {config.tol:g}", residual=res)
    return x


def _gauss_seidel(A, b, pre, config, max_sweeps=500):
    # outer iteration: solve s given X, then X given s
    n = pre.n
    rx, rs = b[: 3 * n].reshape(3, n), b[3 * n :]
    dX = np.zeros((3, n))
    bnorm = max(np.linalg.norm(b), 1e-300)
    res = np.inf
    for _ in range(max_sweeps):
        ds = pre.lus.solve(rs - sum(pre.couple[c] @ dX[c] for c in range(3)))
        dX = np.stack([pre.lu0.solve(rx[c] - pre.eta * (pre.MG[c] @ ds)) for c in range(3)])
        x = np.concatenate([dX.ravel(), ds])
        res = np.linalg.norm(A @ x - b) / bnorm
        if res <= config.tol:
            return x
    raise SolverError(f"block Gauss-Seidel did not converge (residual {res:.3g})", residual=res)


METHODS = ("monolithic", "direct", "gauss_seidel")


def mcf_step(state, scheme, eta, solve=None, factory=None, method="monolithic",
             zero_curvature=False):
    """Advance an :class:`McfState` by one BDF step of the coupled MCF system.

    ``method`` selects how the 4N system is solved: ``"monolithic"`` (GMRES
    on the full system, preconditioned by its block lower-triangular part),
    ``"direct"`` (sparse LU of the full system) or ``"gauss_seidel"`` (outer
    iteration alternating the ``s`` and ``X`` blocks). ``zero_curvature``
    replaces ``ML`` by zero, a debug hook under which nothing moves.
    """
    solver = state.solver
    tau = state.tau
    factory = factory or OperatorFactory()
    X_bar = extrapolate(scheme, solver.X)
    ops = factory(X_bar)
    _check_collapse(ops.neighbors)
    n = ops.n_points
    if method not in METHODS:
        raise ConfigurationError(f"unknown MCF solve method {method!r}; use one of {METHODS}")
    config = solve or LinearSolveConfig()
    A, b = mcf_system(ops, scheme, tau, eta, solver.X, solver.s, zero_curvature)
    if method == "direct":
        x = solve_sparse(A, b, LinearSolveConfig(tol=config.tol, kind="direct"))
    else:
        pre = _BlockLU(ops, scheme, tau, eta, zero_curvature)
        x = (_block_gmres if method == "monolithic" else _gauss_seidel)(A, b, pre, config)
    X = solver.X[0] + x[: 3 * n].reshape(3, n).T
    s = solver.s[0] + x[3 * n :]
    solver.push(X, s, tau)
    state.t_physical += tau / state.lambda_cum**2
    return state


@dataclass(frozen=True)
class McfConfig:
    """Settings of a mean-curvature-flow run.

    ``trigger`` is the area fraction (relative to the initial area) below
    which the surface is rescaled back to its initial area.
    ``stop_area_ratio`` ends the run once the physical area falls below that
    fraction of the initial area. ``redistribute_every = 0`` disables
    redistribution.
    """

    eta: float = 100.0
    tau: float = 1e-3
    order: int = 2
    redistribute_every: int = 100
    trigger: float = 0.25
    stop_area_ratio: float = 1e-12
    t_max: float = None
    max_steps: int = 100000
    redistribution_tau: float = 1e-4
    redistribution_eps0: float = 5e-5
    redistribution_max_iter: int = 2000
    k: int = 20
    method: str = "monolithic"

    def __post_init__(self):
        check_positive(self.eta, "eta", strict=False)
        check_positive(self.tau, "tau")
        if self.order not in (1, 2, 3):
            raise ConfigurationError("order must be 1, 2 or 3")
        if int(self.redistribute_every) < 0:
            raise ConfigurationError("redistribute_every must be >= 0")
        if not 0.0 < self.trigger < 1.0:
            raise ConfigurationError("trigger must lie in (0, 1)")
        check_positive(self.stop_area_ratio, "stop_area_ratio")


@dataclass
class McfResult:
    state: McfState
    trajectory: list
    status: str
    message: str = ""
    rescales: list = field(default_factory=list)
    step_areas: list = field(default_factory=list)  # (pre, post) computational E_h
    initial_area: float = 0.0

    @property
    def positions(self):
        return self.state.physical_positions

    @property
    def final_area_ratio(self):
        return self.trajectory[-1]["E_h"] / self.initial_area


def run_mcf(cloud, config=None, s0=None, callback=None):
    """Evolve ``cloud`` by mean curvature flow until a stop condition.

    Returns an :class:`McfResult`; ``status`` is ``"stopped"`` (area or time
    limit reached), ``"collapse"`` (points merged), ``"breakdown"`` (degenerate
    geometry or failed solve) or ``"max_steps"``.
    """
    config = config or McfConfig()
    X = check_points(cloud, copy=True)
    factory = OperatorFactory(k=config.k)
    if s0 is None:
        s0 = initial_log_density(X, factory)
    state = McfState(SolverState([X], [np.asarray(s0, float).copy()], 0.0, 0, 3), config.tau)
    schemes = {q: bdf_coefficients(q) for q in (1, 2, 3)}
    A0 = surface_area(X, config.k)
    E = A0
    traj = [_row(0, state, A0, E)]
    result = McfResult(state, traj, "max_steps", initial_area=A0)
    red_cfg = None
    if config.redistribute_every and config.eta > 0:
        red_cfg = RedistributionConfig(
            eta=config.eta, tau=config.tau, tau_tilde=config.redistribution_tau,
            eps0=config.redistribution_eps0, max_iter=config.redistribution_max_iter,
            monitor_every=0,
        )
    try:
        for step in range(1, config.max_steps + 1):
            q = min(config.order, state.solver.depth)
            mcf_step(state, schemes[q], config.eta, None, factory, config.method)
            E_new = surface_area(state.positions, config.k)
            result.step_areas.append((E, E_new))
            E = E_new
            if red_cfg is not None and step % config.redistribute_every == 0:
                red = redistribute(state.positions, red_cfg, factory=factory,
                                   raise_on_failure=False)
                state.solver.X = [red.positions]
                state.solver.s = [red.s]
                E = surface_area(state.positions, config.k)
            if E < config.trigger * A0:
                lam = float(np.sqrt(A0 / E))
                rescale(state, lam)
                result.rescales.append((step, lam))
                E = surface_area(state.positions, config.k)
            row = _row(step, state, E / state.lambda_cum**2, E)
            traj.append(row)
            if callback is not None:
                callback(row, state)
            if row["E_h"] < config.stop_area_ratio * A0:
                result.status = "stopped"
                break
            if config.t_max is not None and state.t_physical >= config.t_max - 1e-12:
                result.status = "stopped"
                break
    except CollapseSignal as exc:
        result.status, result.message = "collapse", str(exc)
    except (DegenerateGeometryError, SolverError, NonConvergenceError) as exc:
        result.status, result.message = "breakdown", f"step {state.solver.step + 1}: {exc}"
    return result


def _row(step, state, E_phys, E_comp):
    return {
        "step": step,
        "t_physical": state.t_physical,
        "E_h": E_phys,
        "E_h_computational": E_comp,
        "spread": spread_metric(state.solver.s[0]),
        "lambda_cum": state.lambda_cum,
    }
