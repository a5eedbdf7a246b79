"""Moving-least-squares surface/function fits and sparse surface operators.

Each point ``x_i`` gets a local frame ``{x_i; e1, e2, e3}``. Its stencil (the
point itself plus its K neighbors) is expressed in local coordinates
``(alpha, beta, gamma)`` and two weighted quadratic fits are made with the
same design matrix: the surface height ``gamma(alpha, beta)`` and, for any
field, ``f(alpha, beta)``. Because the function fit is linear in the data, the
gradient and Laplace-Beltrami stencils are rows of the weighted
pseudo-inverse combined with metric coefficients of the surface fit.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._validation import check_field, check_points, check_vector_field
from .exceptions import ConfigurationError, IllConditionedFitError, ShapeError
from .geometry import (
    DEFAULT_K,
    LocalFrame,
    LocalFrames,
    build_neighborhoods,
    compute_local_frames,
)

DEFAULT_MARGIN = 0.05
COND_MAX = 1e8
_DEGREE = np.array([0, 1, 1, 2, 2, 2])


def wendland_weight(d, support):
    """Wendland weight ``(1 - d/D)^4 (4 d/D + 1)`` on ``[0, D]``."""
    d = np.asarray(d, dtype=float)
    support = float(support)
    if support <= 0:
        raise ConfigurationError(f"support must be positive, got {support}")
    if np.any(d < 0) or np.any(d > support * (1 + 1e-12)):
        raise ConfigurationError("distance outside [0, support]")
    q = np.clip(d / support, 0.0, 1.0)
    w = (1.0 - q) ** 4 * (4.0 * q + 1.0)
    return float(w) if w.ndim == 0 else w


def _wendland(q):
    return (1.0 - q) ** 4 * (4.0 * q + 1.0)


@dataclass(frozen=True)
class QuadraticFit:
    """Height ``c0 + c1 a + c2 b + c3 a^2 + c4 a b + c5 b^2`` in a local frame."""

    coefficients: np.ndarray
    condition: float


@dataclass(frozen=True)
class FunctionFit:
    coefficients: np.ndarray


@dataclass(frozen=True)
class MetricQuantities:
    g11: np.ndarray
    g12: np.ndarray
    g21: np.ndarray
    g22: np.ndarray
    g: np.ndarray
    A: np.ndarray  # (..., 5): A0..A4


@dataclass(frozen=True)
class LocalFit:
    """Weighted pseudo-inverses and surface fits for a set of stencils.

    ``pinv[n]`` maps the ``K+1`` stencil values of point ``n`` to the six
    quadratic coefficients (in unscaled local coordinates).
    """

    stencils: np.ndarray  # (N, K+1)
    local: np.ndarray  # (N, K+1, 3)
    support: np.ndarray  # (N,)
    pinv: np.ndarray  # (N, 6, K+1)
    surface: np.ndarray  # (N, 6)
    condition: np.ndarray  # (N,)


def support_radii(neighbors, margin=DEFAULT_MARGIN):
    """Per-point support ``(1 + margin) * (distance to farthest neighbor)``."""
    return (1.0 + margin) * neighbors.distances[:, -1]


def _fit_stencils(X, basis, stencils, support, cond_max=COND_MAX, index_map=None):
    centers = X[stencils[:, 0]]
    rel = X[stencils] - centers[:, None, :]
    local = np.einsum("nkj,nij->nki", rel, basis)
    dist = np.linalg.norm(rel, axis=-1)
    q = dist / support[:, None]
    if np.any(q > 1.0 + 1e-12):
        raise ConfigurationError("stencil point outside the weight support")
    sw = np.sqrt(_wendland(np.clip(q, 0.0, 1.0)))

    u = local[..., 0] / support[:, None]
    v = local[..., 1] / support[:, None]
    B = np.stack([np.ones_like(u), u, v, u * u, u * v, v * v], axis=-1)
    U, S, Vt = np.linalg.svd(sw[..., None] * B, full_matrices=False)
    with np.errstate(divide="ignore"):
        cond = S[:, 0] / S[:, -1]
    bad = ~(cond <= cond_max)
    if np.any(bad):
        n = int(np.flatnonzero(bad)[0])
        i = int(stencils[n, 0]) if index_map is None else int(index_map[n])
        raise IllConditionedFitError(
            f"ill-conditioned MLS fit at point {i} (condition {cond[n]:.3g})", index=i
        )
    pinv = np.einsum("nji,nj,nkj->nik", Vt, 1.0 / S, U) * sw[:, None, :]
    pinv /= support[:, None, None] ** _DEGREE[None, :, None]
    surface = np.einsum("nik,nk->ni", pinv, local[..., 2])
    return LocalFit(stencils, local, support, pinv, surface, cond)


def fit_local(cloud, neighbors, frames, margin=DEFAULT_MARGIN, cond_max=COND_MAX):
    X = check_points(cloud)
    return _fit_stencils(
        X, frames.basis, neighbors.stencil(), support_radii(neighbors, margin), cond_max
    )


def _single(X, frame, neighbors, i, support):
    i = int(i)
    basis = frame.basis if isinstance(frame, LocalFrame) else np.asarray(frame)
    stencil = np.concatenate([[i], neighbors.indices[i]])[None, :]
    if support is None:
        support = (1.0 + DEFAULT_MARGIN) * neighbors.distances[i, -1]
    return _fit_stencils(X, basis[None], stencil, np.array([float(support)]))


def fit_quadratic_surface(cloud, frame, neighbors, i, support=None):
    """Weighted quadratic fit of the surface height around point ``i``.

    Parameters
    ----------
    cloud : PointCloud or array_like (N, 3)
    frame : LocalFrame or (3, 3) array with rows e1, e2, e3
    neighbors : NeighborTable
    i : int
    support : float, optional
        Weight support radius ``D``; defaults to 5% beyond the farthest neighbor.
    """
    fit = _single(check_points(cloud), frame, neighbors, i, support)
    return QuadraticFit(fit.surface[0], float(fit.condition[0]))


def fit_quadratic_function(values, cloud, frame, neighbors, i, support=None):
    """Weighted quadratic fit of per-point ``values`` around point ``i``."""
    X = check_points(cloud)
    values = check_field(values, X.shape[0], "values")
    fit = _single(X, frame, neighbors, i, support)
    return FunctionFit(fit.pinv[0] @ values[fit.stencils[0]])


def metric_quantities(fit):
    """Inverse metric and Laplace-Beltrami coefficients at the frame origin.

    Accepts a :class:`QuadraticFit` or a coefficient array of shape ``(..., 6)``.
    With ``p = c1``, ``q = c2`` the first derivatives of the height and
    ``p_a = 2 c3``, ``p_b = q_a = c4``, ``q_b = 2 c5`` its second derivatives,
    the metric determinant is ``g = 1 + p^2 + q^2``.
    """
    c = np.asarray(getattr(fit, "coefficients", fit), dtype=float)
    p, q = c[..., 1], c[..., 2]
    pa, pb = 2.0 * c[..., 3], c[..., 4]
    qa, qb = c[..., 4], 2.0 * c[..., 5]

    g = 1.0 + p * p + q * q
    g_a = 2.0 * (p * pa + q * qa)
    g_b = 2.0 * (p * pb + q * qb)
    g11 = (1.0 + q * q) / g
    g12 = -p * q / g
    g22 = (1.0 + p * p) / g
    g2 = g * g
    g11_a = (2.0 * q * qa * g - (1.0 + q * q) * g_a) / g2
    g12_a = (-(pa * q + p * qa) * g + p * q * g_a) / g2
    g21_b = (-(pb * q + p * qb) * g + p * q * g_b) / g2
    g22_b = (2.0 * p * pb * g - (1.0 + p * p) * g_b) / g2
    # (sqrt g)_a / sqrt g = g_a / (2 g)
    sa = g_a / (2.0 * g)
    sb = g_b / (2.0 * g)
    A0 = sa * g11 + sb * g12 + g11_a + g21_b
    A1 = sa * g12 + sb * g22 + g12_a + g22_b
    A = np.stack([A0, A1, g11, 2.0 * g12, g22], axis=-1)
    return MetricQuantities(g11, g12, g12.copy(), g22, g, A)


@dataclass
class SurfaceOperators:
    """Sparse intrinsic gradient (ambient x/y/z rows) and Laplace-Beltrami matrices."""

    MG: tuple  # three csr_matrix
    ML: sp.csr_matrix
    neighbors: object = None
    frames: LocalFrames = None
    fit: LocalFit = None

    @property
    def n_points(self):
        return self.ML.shape[0]

    def gradient(self, f):
        return apply_gradient(self, f)

    def divergence(self, V):
        return apply_divergence(self, V)

    def laplacian(self, f):
        return apply_laplacian(self, f)


def operator_rows(fit, frames_basis):
    """Dense stencil weights: gradient ``(N, 3, K+1)`` and Laplacian ``(N, K+1)``."""
    c = fit.surface
    m = metric_quantities(c)
    e1, e2, e3 = frames_basis[:, 0], frames_basis[:, 1], frames_basis[:, 2]
    t1 = e1 + c[:, 1:2] * e3
    t2 = e2 + c[:, 2:3] * e3
    P1, P2 = fit.pinv[:, 1], fit.pinv[:, 2]
    w1 = m.g11[:, None] * P1 + m.g12[:, None] * P2
    w2 = m.g21[:, None] * P1 + m.g22[:, None] * P2
    grad = w1[:, None, :] * t1[:, :, None] + w2[:, None, :] * t2[:, :, None]
    A = m.A
    lap = (
        A[:, 0:1] * P1
        + A[:, 1:2] * P2
        + 2.0 * A[:, 2:3] * fit.pinv[:, 3]
        + A[:, 3:4] * fit.pinv[:, 4]
        + 2.0 * A[:, 4:5] * fit.pinv[:, 5]
    )
    return grad, lap


def assemble_operators(
    cloud,
    neighbors=None,
    frames=None,
    *,
    k=DEFAULT_K,
    margin=DEFAULT_MARGIN,
    cond_max=COND_MAX,
):
    """Assemble ``MG1, MG2, MG3`` and ``ML`` on the given geometry.

    Row ``i`` of every matrix only touches ``i`` and its neighbors.
    Neighbors and frames are built when not supplied.
    """
    X = check_points(cloud)
    n = X.shape[0]
    if neighbors is None:
        neighbors = build_neighborhoods(X, k)
    if frames is None:
        frames = compute_local_frames(X, neighbors)
    fit = fit_local(X, neighbors, frames, margin, cond_max)
    grad, lap = operator_rows(fit, frames.basis)
    rows = np.repeat(np.arange(n), fit.stencils.shape[1])
    cols = fit.stencils.ravel()
    shape = (n, n)
    MG = tuple(
        sp.csr_matrix((grad[:, c, :].ravel(), (rows, cols)), shape=shape) for c in range(3)
    )
    ML = sp.csr_matrix((lap.ravel(), (rows, cols)), shape=shape)
    return SurfaceOperators(MG, ML, neighbors, frames, fit)


def apply_gradient(ops, field):
    """Intrinsic gradient as ambient 3-vectors, shape ``(N, 3)``."""
    f = check_field(field, ops.n_points)
    return np.column_stack([M @ f for M in ops.MG])


def apply_divergence(ops, vfield):
    """Surface divergence ``MG1 v_x + MG2 v_y + MG3 v_z`` of a per-point vector field."""
    V = check_vector_field(vfield, ops.n_points)
    return ops.MG[0] @ V[:, 0] + ops.MG[1] @ V[:, 1] + ops.MG[2] @ V[:, 2]


def apply_laplacian(ops, field):
    """Laplace-Beltrami of a scalar field, or column-wise of an ``(N, m)`` array."""
    f = np.asarray(field, dtype=float)
    if f.shape[0] != ops.n_points or f.ndim > 2:
        raise ShapeError(f"field has shape {f.shape}, expected ({ops.n_points},)")
    return ops.ML @ f
