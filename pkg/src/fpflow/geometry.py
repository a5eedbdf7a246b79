"""Point clouds, neighborhoods, local frames, local Delaunay stars and densities.

Everything here treats a closed surface as an ``(N, 3)`` array of points with
stable indices. Per-point quantities (frames, stars, area elements) are
computed from the K nearest neighbors of each point only.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from ._validation import check_points
from .exceptions import (
    ConfigurationError,
    DegenerateGeometryError,
    DegenerateStarError,
)

DEFAULT_K = 20
# relative eigenvalue floor below which a neighborhood counts as collinear
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of surface samples; row ``i`` is point ``i`` for all time."""

    positions: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        # solvers enforce their own minimum; a cloud only needs one point
        object.__setattr__(self, "positions", check_points(self.positions, min_points=1))

    @property
    def n_points(self):
        return self.positions.shape[0]

    def __len__(self):
        return self.n_points

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.positions, dtype=dtype)


@dataclass(frozen=True)
class NeighborTable:
    """K nearest neighbors of every point, sorted by (distance, index)."""

    indices: np.ndarray  # (N, K) int
    distances: np.ndarray  # (N, K) float

    @property
    def k(self):
        return self.indices.shape[1]

    def stencil(self):
        """Neighbor lists with each point prepended to its own list, ``(N, K+1)``."""
        n = self.indices.shape[0]
        return np.hstack([np.arange(n)[:, None], self.indices])


@dataclass(frozen=True)
class LocalFrame:
    index: int
    basis: np.ndarray  # rows e1, e2, e3
    eigenvalues: np.ndarray  # descending

    @property
    def normal(self):
        return self.basis[2]


@dataclass(frozen=True)
class LocalFrames:
    """Batched PCA frames: ``basis[i]`` holds rows ``e1, e2, e3`` of point ``i``."""

    basis: np.ndarray  # (N, 3, 3)
    eigenvalues: np.ndarray  # (N, 3)

    def __len__(self):
        return self.basis.shape[0]

    def __getitem__(self, i):
        return LocalFrame(int(i), self.basis[i], self.eigenvalues[i])

    @property
    def normals(self):
        return self.basis[:, 2, :]


@dataclass(frozen=True)
class TriangleStar:
    index: int
    triangles: np.ndarray  # (m, 3) global point indices, each row contains ``index``
    areas: np.ndarray  # (m,)


def build_neighborhoods(cloud, k=DEFAULT_K):
    """Exact K nearest neighbors of every point (the point itself excluded).

    Ties in distance are broken by the lower point index, so the result is
    fully deterministic.

    Parameters
    ----------
    cloud : PointCloud or array_like of shape (N, 3)
    k : int
        Neighborhood size, ``6 <= k < N``.

    Returns
    -------
    NeighborTable
    """
    X = check_points(cloud)
    n = X.shape[0]
    k = int(k)
    if k < 6 or k >= n:
        raise ConfigurationError(f"k must satisfy 6 <= k < N={n}, got {k}")

    tree = cKDTree(X)
    pad = 4
    rows = np.arange(n)
    pending = rows
    out_idx = np.empty((n, k), dtype=np.intp)
    out_dist = np.empty((n, k))
    while pending.size:
        kq = min(n, k + 1 + pad)
        _, cand = tree.query(X[pending], k=kq)
        cand = np.atleast_2d(cand)
        # recompute distances with one formula so sorting and ties are consistent
        d = np.sqrt(((X[cand] - X[pending][:, None, :]) ** 2).sum(axis=-1))
        is_self = cand == pending[:, None]
        d_sort = np.where(is_self, -1.0, d)
        order = np.lexsort((cand, d_sort), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)[:, 1 : k + 1]
        d = np.take_along_axis(d, order, axis=1)
        kth = d[:, k]
        last = d[:, -1]
        # a tie reaching the edge of the candidate window may hide lower indices
        unresolved = (kq < n) & ((last <= kth) | ~is_self.any(axis=1))
        done = ~unresolved
        out_idx[pending[done]] = cand[done]
        out_dist[pending[done]] = d[done, 1 : k + 1]
        pending = pending[unresolved]
        pad *= 4
    return NeighborTable(out_idx, out_dist)


def _covariances(X, neighbors):
    P = X[neighbors.indices]  # (N, K, 3)
    centered = P - P.mean(axis=1, keepdims=True)
    return np.einsum("nki,nkj->nij", centered, centered)


def compute_local_frames(cloud, neighbors):
    """PCA frames for all points.

    ``e3`` is the eigenvector of the smallest eigenvalue of the neighbor
    covariance (neighbors only, centered at their barycenter). The basis is
    made right-handed by setting ``e3 = e1 x e2``.

    Raises
    ------
    DegenerateGeometryError
        If any neighborhood is (numerically) collinear or coincident.
    """
    X = check_points(cloud)
    C = _covariances(X, neighbors)
    w, v = np.linalg.eigh(C)  # ascending
    w = np.clip(w[:, ::-1], 0.0, None)
    e1 = v[:, :, 2]
    e2 = v[:, :, 1]
    e3 = np.cross(e1, e2)
    e3 /= np.linalg.norm(e3, axis=1, keepdims=True)
    bad = w[:, 1] <= _RANK_TOL * np.maximum(w[:, 0], np.finfo(float).tiny)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise DegenerateGeometryError(
            f"rank-deficient neighborhood covariance at point {i} "
            f"(eigenvalues {w[i]})",
            index=i,
        )
    basis = np.stack([e1, e2, e3], axis=1)
    return LocalFrames(basis, w)


def compute_local_frame(cloud, neighbors, i):
    """PCA frame of a single point; see :func:`compute_local_frames`."""
    X = check_points(cloud)
    i = int(i)
    if not 0 <= i < X.shape[0]:
        raise ConfigurationError(f"point index {i} out of range")
    sub = NeighborTable(neighbors.indices[i : i + 1], neighbors.distances[i : i + 1])
    try:
        frames = compute_local_frames(X, sub)
    except DegenerateGeometryError as exc:
        raise DegenerateGeometryError(
            f"rank-deficient neighborhood covariance at point {i}", index=i
        ) from exc
    return LocalFrame(i, frames.basis[0], frames.eigenvalues[0])


def _triangle_areas(A, B, C):
    return 0.5 * np.linalg.norm(np.cross(B - A, C - A), axis=-1)


def _star(X, basis, stencil, i):
    local = (X[stencil] - X[i]) @ basis[:2].T
    if local.shape[0] < 3:
        raise DegenerateStarError(f"fewer than 3 points around point {i}", index=i)
    try:
        tri = Delaunay(local)
    except QhullError as exc:
        raise DegenerateStarError(
            f"projected neighborhood of point {i} is degenerate", index=i
        ) from exc
    simplices = tri.simplices[(tri.simplices == 0).any(axis=1)]
    if simplices.shape[0] == 0:
        raise DegenerateStarError(f"empty Delaunay star at point {i}", index=i)
    triangles = stencil[simplices]
    P = X[triangles]
    areas = _triangle_areas(P[:, 0], P[:, 1], P[:, 2])
    if np.any(areas <= 0):
        raise DegenerateStarError(f"zero-area triangle in star of point {i}", index=i)
    return TriangleStar(i, triangles, areas)


def local_delaunay_star(cloud, frame, neighbors, i):
    """Delaunay triangles incident to point ``i`` in its tangent-plane projection.

    The point and its neighbors are projected onto the ``(e1, e2)`` plane of
    ``frame``, triangulated, and only triangles having ``i`` as a vertex are
    kept. Areas are measured on the original 3D positions.
    """
    X = check_points(cloud, min_points=3)
    i = int(i)
    basis = frame.basis if isinstance(frame, LocalFrame) else np.asarray(frame)
    stencil = np.concatenate([[i], neighbors.indices[i]])
    return _star(X, basis, stencil, i)


def area_element(star):
    """One third of the total area of the star's triangles."""
    if star.areas.size == 0:
        raise DegenerateStarError(f"empty star at point {star.index}", index=star.index)
    return float(star.areas.sum()) / 3.0


def area_elements(cloud, neighbors=None, frames=None, k=DEFAULT_K):
    """Area element of every point, shape ``(N,)``."""
    X = check_points(cloud)
    if neighbors is None:
        neighbors = build_neighborhoods(X, k)
    if frames is None:
        frames = compute_local_frames(X, neighbors)
    stencils = neighbors.stencil()
    out = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        out[i] = _star(X, frames.basis[i], stencils[i], i).areas.sum() / 3.0
    return out


def estimate_density(cloud, neighbors=None, frames=None, k=DEFAULT_K):
    """Unnormalized point density ``3 / sum(star areas)`` at every point.

    No normalization is applied; only differences of ``log`` density are
    meaningful downstream.
    """
    return 1.0 / area_elements(cloud, neighbors, frames, k)


# ---------------------------------------------------------------------------
# test surfaces


@dataclass(frozen=True)
class SurfaceSpec:
    """Name plus parameters of one of the built-in closed test surfaces.

    Known kinds: ``sphere`` (radius, center), ``unit_sphere``,
    ``shifted_sphere``, ``ellipsoid`` (a, c, z_center; axis of revolution z), ``torus``
    (R, r), ``dumbbell`` (t), ``mcf_benchmark``, and ``random_sphere``
    (radius, seed).
    """

    kind: str
    params: dict = field(default_factory=dict)

    def get(self, key, default):
        return self.params.get(key, default)


def _dumbbell_ab(t):
    a = 0.1 + 0.05 * np.sin(2 * np.pi * t)
    b = 1.0 + 0.2 * np.sin(4 * np.pi * t)
    return a, b


def _profile(spec):
    """Meridian ``psi -> (axial, radial)`` for surfaces of revolution, and the axis."""
    kind = spec.kind
    if kind == "dumbbell":
        a, b = _dumbbell_ab(spec.get("t", 0.0))

        def prof(psi):
            c = np.cos(psi)
            return b * c, a * np.sin(psi) * np.sqrt(1.0 + 200.0 * c * c)

        return prof, 2
    if kind == "mcf_benchmark":

        def prof(psi):
            c = np.cos(psi)
            return c, (0.6 * c * c + 0.4) * np.sin(psi)

        return prof, 0
    if kind == "ellipsoid":
        a = float(spec.get("a", 0.5))
        c = float(spec.get("c", 1.0))

        def prof(psi):
            return c * np.cos(psi), a * np.sin(psi)

        return prof, 2
    return None, None


def _revolution_sample(prof, axis, n_target):
    psi = np.linspace(0.0, np.pi, 20001)
    ax, rad = prof(psi)
    ds = np.hypot(np.diff(ax), np.diff(rad))
    arc = np.concatenate([[0.0], np.cumsum(ds)])
    mid_rad = 0.5 * (rad[1:] + rad[:-1])
    area = float(np.sum(2 * np.pi * mid_rad * ds))
    length = arc[-1]

    def build(h):
        n_rings = max(int(round(length / h)), 2)
        s_ring = np.linspace(0.0, length, n_rings + 1)[1:-1]
        psi_ring = np.interp(s_ring, arc, psi)
        rings = []
        for j, p in enumerate(psi_ring):
            a_j, r_j = prof(p)
            m = max(int(round(2 * np.pi * r_j / h)), 3)
            theta = 2 * np.pi * np.arange(m) / m + j * 2.399963229728653
            rings.append((np.full(m, p), theta))
        psis = np.concatenate([[0.0]] + [r[0] for r in rings] + [[np.pi]])
        thetas = np.concatenate([[0.0]] + [r[1] for r in rings] + [[0.0]])
        return psis, thetas

    h = np.sqrt(area / n_target)
    for _ in range(40):
        psis, thetas = build(h)
        ratio = psis.size / n_target
        if abs(ratio - 1.0) < 0.01:
            break
        h *= np.sqrt(ratio)
    a_, r_ = prof(psis)
    other = [d for d in range(3) if d != axis]
    P = np.empty((psis.size, 3))
    P[:, axis] = a_
    P[:, other[0]] = r_ * np.cos(thetas)
    P[:, other[1]] = r_ * np.sin(thetas)
    return P, psis, thetas


def fibonacci_sphere(n, radius=1.0, center=(0.0, 0.0, 0.0)):
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    P = np.column_stack([r * np.cos(phi), r * np.sin(phi), z])
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    return radius * P + np.asarray(center, dtype=float)


def torus_grid(n, R=1.0, r=0.5):
    """``n x n`` parameter grid on a torus; point ``(j, l)`` has index ``j*n + l``."""
    u = 2 * np.pi * np.arange(n) / n
    v = 2 * np.pi * np.arange(n) / n
    U, V = np.meshgrid(u, v, indexing="ij")
    U = U.ravel()
    V = V.ravel()
    rho = R + r * np.cos(V)
    return np.column_stack([rho * np.cos(U), rho * np.sin(U), r * np.sin(V)])


def nested_torus_indices(n_coarse_points, n_fine_points):
    """Indices into the fine torus grid of the points shared with the coarse grid."""
    nc = int(round(np.sqrt(n_coarse_points)))
    nf = int(round(np.sqrt(n_fine_points)))
    if nc * nc != n_coarse_points or nf * nf != n_fine_points or nf % nc:
        raise ConfigurationError(
            f"torus grids {n_coarse_points} and {n_fine_points} are not nested"
        )
    step = nf // nc
    j, l = np.meshgrid(np.arange(nc), np.arange(nc), indexing="ij")
    return (step * j * nf + step * l).ravel()


def sample_surface(spec, resolution):
    """Deterministic sample of a built-in test surface.

    ``resolution`` is the requested number of points. Fibonacci spheres and
    torus grids hit it exactly (torus needs a perfect square); surfaces of
    revolution are sampled ring by ring and land within about 1% of it.
    """
    if isinstance(spec, str):
        spec = SurfaceSpec(spec)
    resolution = int(resolution)
    if resolution < 7 or resolution > 2_000_000:
        raise ConfigurationError(f"resolution {resolution} outside [7, 2e6]")
    kind = spec.kind
    meta = {"kind": kind, **spec.params, "resolution": resolution}
    if kind in ("sphere", "unit_sphere", "shifted_sphere"):
        defaults = {
            "sphere": (1.0, (0.0, 0.0, 0.0)),
            "unit_sphere": (1.0, (0.0, 0.0, 0.0)),
            "shifted_sphere": (0.5, (0.25, 0.25, 0.25)),
        }[kind]
        radius = float(spec.get("radius", defaults[0]))
        center = tuple(spec.get("center", defaults[1]))
        return PointCloud(fibonacci_sphere(resolution, radius, center), meta)
    if kind == "random_sphere":
        seed = int(spec.get("seed", 0))
        rng = np.random.default_rng(seed)
        P = rng.normal(size=(resolution, 3))
        P /= np.linalg.norm(P, axis=1, keepdims=True)
        meta["seed"] = seed
        return PointCloud(float(spec.get("radius", 1.0)) * P, meta)
    if kind == "torus":
        n = int(round(np.sqrt(resolution)))
        if n * n != resolution:
            raise ConfigurationError("torus resolution must be a perfect square")
        return PointCloud(
            torus_grid(n, float(spec.get("R", 1.0)), float(spec.get("r", 0.5))), meta
        )
    prof, axis = _profile(spec)
    if prof is None:
        raise ConfigurationError(f"unknown surface kind {kind!r}")
    P, psis, thetas = _revolution_sample(prof, axis, resolution)
    if kind == "ellipsoid":
        P[:, 2] += float(spec.get("z_center", 0.0))
    meta["psi"] = psis
    meta["theta"] = thetas
    return PointCloud(P, meta)


def level_set(spec, points):
    """Implicit function value and gradient of a built-in surface.

    Returns ``(phi - level, grad)`` so that the surface is the zero set.
    Used to measure how far points drift off a fixed surface.
    """
    if isinstance(spec, str):
        spec = SurfaceSpec(spec)
    X = np.asarray(points, dtype=float)
    x, y, z = X.T
    kind = spec.kind
    if kind in ("sphere", "unit_sphere", "shifted_sphere", "random_sphere"):
        radius = {"shifted_sphere": 0.5}.get(kind, 1.0)
        radius = float(spec.get("radius", radius))
        center = np.asarray(
            spec.get("center", (0.25,) * 3 if kind == "shifted_sphere" else (0.0,) * 3)
        )
        d = X - center
        nrm = np.linalg.norm(d, axis=1)
        return nrm - radius, d / nrm[:, None]
    if kind == "ellipsoid":
        a = float(spec.get("a", 0.5))
        c = float(spec.get("c", 1.0))
        z = z - float(spec.get("z_center", 0.0))
        phi = (x * x + y * y) / a**2 + z * z / c**2 - 1.0
        grad = np.column_stack([2 * x / a**2, 2 * y / a**2, 2 * z / c**2])
        return phi, grad
    if kind == "torus":
        R = float(spec.get("R", 1.0))
        r = float(spec.get("r", 0.5))
        q = np.hypot(x, y)
        phi = np.hypot(q - R, z) - r
        denom = np.hypot(q - R, z)
        grad = np.column_stack(
            [(q - R) * x / (q * denom), (q - R) * y / (q * denom), z / denom]
        )
        return phi, grad
    if kind == "dumbbell":
        a, b = _dumbbell_ab(spec.get("t", 0.0))
        s = z * z / b**2
        phi = (x * x + y * y) / a**2 + 200.0 * s * (s - 0.995) - 1.0
        grad = np.column_stack(
            [2 * x / a**2, 2 * y / a**2, (400.0 * s - 199.0) * 2 * z / b**2]
        )
        return phi, grad
    raise ConfigurationError(f"no closed-form level set for {kind!r}")


def distance_to_surface(spec, points):
    """First-order distance estimate ``|phi| / |grad phi|`` to a built-in surface."""
    phi, grad = level_set(spec, points)
    return np.abs(phi) / np.linalg.norm(grad, axis=1)
