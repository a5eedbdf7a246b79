"""Semi-implicit BDF time stepping of positions and log-density.

One step of order ``q`` with leading coefficient ``a`` reads::

    (a/tau) s_k - eta ML s_k = s_hat / tau - MG . v(X_bar, t_k)
    (a/tau) X_k             = X_hat / tau + v(X_bar, t_k) - eta MG s_k

with operators assembled on the extrapolated geometry ``X_bar``. Updates are
formed as increments from the latest snapshot, which makes constant
histories exact fixed points in floating point.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._validation import check_field, check_points, check_positive
from .exceptions import ConfigurationError, SolverError, StateError
from .geometry import DEFAULT_K, NeighborTable, build_neighborhoods, compute_local_frames
from .mls import DEFAULT_MARGIN, assemble_operators

# ---------------------------------------------------------------------------
# BDF coefficients


@dataclass(frozen=True)
class BdfScheme:
    """Coefficients of a BDF-k scheme.

    ``history[j]`` multiplies ``X_{k-1-j}`` in ``X_hat``; ``extrapolation[j]``
    multiplies ``X_{k-1-j}`` in ``X_bar``.
    """

    order: int
    a: float
    history: tuple
    extrapolation: tuple


_BDF = {
    1: (Fraction(1), (Fraction(1),), (1,)),
    2: (Fraction(3, 2), (Fraction(2), Fraction(-1, 2)), (2, -1)),
    3: (
        Fraction(11, 6),
        (Fraction(3), Fraction(-3, 2), Fraction(1, 3)),
        (3, -3, 1),
    ),
}


def bdf_coefficients(order):
    """Return the :class:`BdfScheme` of order 1, 2 or 3."""
    try:
        a, hist, extra = _BDF[int(order)]
    except (KeyError, TypeError, ValueError):
        raise ConfigurationError(f"unsupported BDF order {order!r}; use 1, 2 or 3") from None
    return BdfScheme(int(order), float(a), tuple(float(w) for w in hist), tuple(float(w) for w in extra))


def _combine(weights, history):
    # sum_j w_j (H_j - H_0) + (sum_j w_j) H_0, evaluated as an increment of H_0
    H0 = history[0]
    out = np.zeros_like(H0)
    for w, H in zip(weights[1:], history[1:]):
        out += w * (H - H0)
    return out


def extrapolate(scheme, history):
    """BDF extrapolation ``X_bar`` from ``history`` (newest first)."""
    if len(history) < scheme.order:
        raise StateError(
            f"BDF{scheme.order} extrapolation needs {scheme.order} snapshots, got {len(history)}"
        )
    hist = [np.asarray(h, dtype=float) for h in history[: scheme.order]]
    return hist[0] + _combine(scheme.extrapolation, hist)


# ---------------------------------------------------------------------------
# state


@dataclass
class SolverState:
    """Newest-first history of positions and log-density plus the clock."""

    X: list
    s: list
    t: float = 0.0
    step: int = 0
    capacity: int = 3

    @classmethod
    def initial(cls, X0, s0=None, t0=0.0, capacity=3):
        X0 = check_points(X0, copy=True)
        s0 = np.zeros(X0.shape[0]) if s0 is None else check_field(s0, X0.shape[0], "s0").copy()
        return cls([X0], [s0], float(t0), 0, capacity)

    @property
    def positions(self):
        return self.X[0]

    @property
    def log_density(self):
        return self.s[0]

    @property
    def depth(self):
        return len(self.X)

    @property
    def n_points(self):
        return self.X[0].shape[0]

    def push(self, X, s, tau):
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(s))):
            raise SolverError(f"non-finite state produced at step {self.step + 1}")
        self.X.insert(0, X)
        self.s.insert(0, s)
        del self.X[self.capacity :]
        del self.s[self.capacity :]
        self.t += tau
        self.step += 1

    def reset_history(self):
        """Drop all but the latest snapshot (BDF restarts from a bootstrap)."""
        del self.X[1:]
        del self.s[1:]

    def copy(self):
        return SolverState(
            [x.copy() for x in self.X], [v.copy() for v in self.s], self.t, self.step, self.capacity
        )


# ---------------------------------------------------------------------------
# linear solves


@dataclass(frozen=True)
class LinearSolveConfig:
    """Sparse solve settings.

    ``kind`` is ``"auto"`` (direct LU up to ``direct_max`` unknowns, else
    ILU-preconditioned GMRES), ``"direct"`` or ``"gmres"``.
    """

    tol: float = 1e-10
    maxiter: int = 200
    kind: str = "auto"
    direct_max: int = 20000
    restart: int = 50

    def __post_init__(self):
        check_positive(self.tol, "tol")
        if self.kind not in ("auto", "direct", "gmres"):
            raise ConfigurationError(f"unknown solver kind {self.kind!r}")


def solve_sparse(A, b, config=None):
    """Solve ``A x = b`` and verify ``|Ax - b| / |b| <= tol``."""
    config = config or LinearSolveConfig()
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise SolverError("non-finite right-hand side")
    n = A.shape[0]
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    kind = config.kind
    if kind == "auto":
        kind = "direct" if n <= config.direct_max else "gmres"
    try:
        if kind == "direct":
            x = spla.splu(A).solve(b)
        else:
            ilu = spla.spilu(A, drop_tol=1e-5, fill_factor=10)
            M = spla.LinearOperator(A.shape, ilu.solve)
            x, _ = spla.gmres(
                A, b, rtol=config.tol, atol=0.0, restart=config.restart,
                maxiter=config.maxiter, M=M,
            )
    except RuntimeError as exc:  # singular factor
        raise SolverError(f"sparse solve failed: {exc}") from None
    res = np.linalg.norm(A @ x - b) / bnorm
    if not np.isfinite(res) or res > config.tol:
        # one step of iterative refinement before giving up
        if np.isfinite(res) and kind == "direct":
            x = x + spla.splu(A).solve(b - A @ x)
            res = np.linalg.norm(A @ x - b) / bnorm
        if not np.isfinite(res) or res > config.tol:
            raise SolverError(f"linear solve residual {res:.3g} above {config.tol:g}", residual=res)
    return x


# ---------------------------------------------------------------------------
# operators


class OperatorFactory:
    """Assemble surface operators for a geometry snapshot.

    Neighbor tables are rebuilt every ``neighbor_reuse`` calls; in between, the
    previous neighbor sets are kept and only their distances refreshed.
    """

    def __init__(self, k=DEFAULT_K, margin=DEFAULT_MARGIN, neighbor_reuse=1):
        self.k = int(k)
        self.margin = float(margin)
        self.neighbor_reuse = int(neighbor_reuse)
        if self.neighbor_reuse < 1:
            raise ConfigurationError("neighbor_reuse must be >= 1")
        self._calls = 0
        self._table = None

    def neighbors(self, X):
        if self._table is None or self._calls % self.neighbor_reuse == 0:
            self._table = build_neighborhoods(X, self.k)
        else:
            idx = self._table.indices
            d = np.linalg.norm(X[idx] - X[:, None, :], axis=-1)
            order = np.argsort(d, axis=1, kind="stable")
            idx = np.take_along_axis(idx, order, 1)
            self._table = NeighborTable(idx, np.take_along_axis(d, order, 1))
        self._calls += 1
        return self._table

    def __call__(self, X):
        X = check_points(X)
        nb = self.neighbors(X)
        frames = compute_local_frames(X, nb)
        return assemble_operators(X, nb, frames, margin=self.margin)


def _as_factory(factory):
    return OperatorFactory() if factory is None else factory


# ---------------------------------------------------------------------------
# stepping


def implicit_step(
    X_hist, s_hist, scheme, tau, eta, ops, V=None, log_p=None, solve=None
):
    """Core BDF step on given operators; returns ``(X_k, s_k)``.

    ``V`` is the velocity at ``X_bar`` (``None`` for zero) and ``log_p`` the
    target log-density at ``X_bar`` for target matching.
    """
    a = scheme.a
    X0, s0 = X_hist[0], s_hist[0]
    dX = _combine(scheme.history, X_hist[: scheme.order])
    ds = _combine(scheme.history, s_hist[: scheme.order])
    n = X0.shape[0]

    # increment form: s_k = s0 + delta
    rhs = ds / tau
    if V is not None:
        rhs = rhs - ops.divergence(V)
    if eta != 0.0:
        Ls0 = ops.ML @ s0
        rhs = rhs + eta * Ls0
        if log_p is not None:
            rhs = rhs - eta * (ops.ML @ log_p)
        A = sp.identity(n, format="csr") * (a / tau) - eta * ops.ML
        delta = solve_sparse(A, rhs, solve)
    else:
        delta = rhs * (tau / a)
    s = s0 + delta

    incr = dX.copy()
    if V is not None:
        incr += tau * V
    if eta != 0.0:
        g = s if log_p is None else s - log_p
        incr -= (tau * eta) * np.column_stack([M @ g for M in ops.MG])
    X = X0 + incr / a
    return X, s


def advance_general(state, scheme, field, tau, eta, solve=None, factory=None, log_p=None):
    """Advance ``state`` by one BDF step of ``scheme`` under velocity ``field``.

    Parameters
    ----------
    state : SolverState
        Must hold at least ``scheme.order`` snapshots.
    scheme : BdfScheme
    field : callable or None
        ``field(X, t) -> (N, 3)``; ``None`` means zero velocity.
    tau, eta : float
    solve : LinearSolveConfig, optional
    factory : callable, optional
        ``X -> SurfaceOperators``; defaults to :class:`OperatorFactory`.
    log_p : callable, optional
        ``X -> log p`` for target matching.
    """
    check_positive(tau, "tau")
    check_positive(eta, "eta", strict=False)
    if state.depth < scheme.order:
        raise StateError(f"BDF{scheme.order} needs {scheme.order} snapshots, have {state.depth}")
    factory = _as_factory(factory)
    t_k = state.t + tau
    X_bar = extrapolate(scheme, state.X)
    ops = factory(X_bar)
    V = None if field is None else np.asarray(field(X_bar, t_k), dtype=float)
    lp = None if log_p is None else np.asarray(log_p(X_bar), dtype=float)
    X, s = implicit_step(state.X, state.s, scheme, tau, eta, ops, V, lp, solve)
    state.push(X, s, tau)
    return state


def _rhs(X, s, t, field, eta, factory):
    ops = factory(X)
    if field is None:
        V = np.zeros_like(X)
        divV = 0.0
    else:
        V = np.asarray(field(X, t), dtype=float)
        divV = ops.divergence(V)
    return V - eta * ops.gradient(s), -divV + eta * (ops.ML @ s)


def rk4_bootstrap(state, factory, field, tau, eta):
    """One classical RK4 step of ``X' = v - eta grad s``, ``s' = -div v + eta Lap s``.

    Operators are re-assembled at every stage geometry. Explicit, so only
    stable while ``tau * eta * |ML|`` stays below the RK4 stability limit.
    """
    factory = _as_factory(factory)
    X0, s0, t = state.X[0], state.s[0], state.t
    k1 = _rhs(X0, s0, t, field, eta, factory)
    k2 = _rhs(X0 + 0.5 * tau * k1[0], s0 + 0.5 * tau * k1[1], t + 0.5 * tau, field, eta, factory)
    k3 = _rhs(X0 + 0.5 * tau * k2[0], s0 + 0.5 * tau * k2[1], t + 0.5 * tau, field, eta, factory)
    k4 = _rhs(X0 + tau * k3[0], s0 + tau * k3[1], t + tau, field, eta, factory)
    X = X0 + tau / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    s = s0 + tau / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    state.push(X, s, tau)
    return state


def extrapolated_euler_bootstrap(state, factory, field, tau, eta, solve=None, stages=4):
    """One step by polynomial extrapolation of linearly implicit Euler substeps.

    Stage ``n`` covers ``tau`` with ``n`` BDF1 substeps; Aitken-Neville
    extrapolation to zero substep length over ``n = 1..stages`` cancels the
    error terms up to ``tau^stages``. Each substep is the stiffly stable BDF1
    step, so the starter stays bounded where explicit RK4 does not.
    """
    factory = _as_factory(factory)
    scheme = bdf_coefficients(1)
    tab = []
    for n in range(1, stages + 1):
        sub = SolverState([state.X[0]], [state.s[0]], state.t, 0, 1)
        for _ in range(n):
            advance_general(sub, scheme, field, tau / n, eta, solve, factory)
        row = [(sub.X[0], sub.s[0])]
        for j in range(1, n):
            # error expands in powers of h = tau/n
            r = n / (n - j)
            Xa, sa = row[j - 1]
            Xb, sb = tab[-1][j - 1]
            row.append((Xa + (Xa - Xb) / (r - 1.0), sa + (sa - sb) / (r - 1.0)))
        tab.append(row)
    X, s = tab[-1][-1]
    state.push(X.copy(), s.copy(), tau)
    return state


BOOTSTRAPS = ("rk4", "extrapolated_euler")


def evolve(
    X0,
    s0=None,
    field=None,
    *,
    tau,
    T=None,
    n_steps=None,
    eta=0.0,
    order=2,
    bootstrap="rk4",
    factory=None,
    solve=None,
    callback=None,
    t0=0.0,
):
    """Run a BDF-``order`` evolution and return the final :class:`SolverState`.

    BDF2 starts with one BDF1 step. BDF3 starts with one ``bootstrap`` step
    (``"rk4"`` or ``"extrapolated_euler"``) followed by one BDF2 step.
    ``callback(state)`` is called after every step.
    """
    check_positive(tau, "tau")
    if n_steps is None:
        if T is None:
            raise ConfigurationError("give either T or n_steps")
        n_steps = int(round((T - t0) / tau))
        if abs(n_steps * tau - (T - t0)) > 1e-9 * max(1.0, abs(T)):
            raise ConfigurationError(f"T={T} is not a multiple of tau={tau}")
    if bootstrap not in BOOTSTRAPS:
        raise ConfigurationError(f"unknown bootstrap {bootstrap!r}; use one of {BOOTSTRAPS}")
    schemes = {q: bdf_coefficients(q) for q in (1, 2, 3)}
    if int(order) not in schemes:
        raise ConfigurationError(f"unsupported BDF order {order!r}")
    factory = _as_factory(factory)
    state = X0 if isinstance(X0, SolverState) else SolverState.initial(X0, s0, t0)
    for k in range(n_steps):
        if order == 3 and state.depth == 1:
            if bootstrap == "rk4":
                rk4_bootstrap(state, factory, field, tau, eta)
            else:
                extrapolated_euler_bootstrap(state, factory, field, tau, eta, solve)
        else:
            q = min(order, state.depth)
            advance_general(state, schemes[q], field, tau, eta, solve, factory)
        if callback is not None:
            callback(state)
    return state
