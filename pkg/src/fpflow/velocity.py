"""Closed-form prescribed velocity fields and target log-densities.

Fields are evaluated as ``field(points, t) -> (N, 3)``. The intrinsic
mean-curvature field is only a marker; :mod:`fpflow.mcf` handles it.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigurationError, SingularVelocityError, UsageError

_GRAD_FLOOR = 1e-14


def _points(X):
    X = np.asarray(getattr(X, "positions", X), dtype=float)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ConfigurationError(f"points must have shape (N, 3), got {X.shape}")
    return X


@dataclass(frozen=True)
class VelocityField:
    """Base class. Subclasses implement :meth:`__call__`."""

    name = "base"
    intrinsic = False

    def __call__(self, points, t):
        raise NotImplementedError

    def get_params(self):
        return {}


@dataclass(frozen=True)
class Zero(VelocityField):
    name = "zero"

    def __call__(self, points, t):
        return np.zeros_like(_points(points))


@dataclass(frozen=True)
class RadialLogistic(VelocityField):
    """``v = X (1 - |X|)``; a centered sphere of radius 1/2 grows logistically."""

    name = "radial_logistic"

    def __call__(self, points, t):
        X = _points(points)
        return X * (1.0 - np.linalg.norm(X, axis=1))[:, None]


def logistic_radius(t, r0=0.5):
    """Exact radius of a centered sphere under :class:`RadialLogistic`."""
    t = np.asarray(t, dtype=float)
    return 1.0 / (1.0 + (1.0 / r0 - 1.0) * np.exp(-t))


@dataclass(frozen=True)
class TrigSource(VelocityField):
    """``A (cos px sin py sin pz, sin px cos py sin pz, sin px sin py cos pz)``, p = pi."""

    amplitude: float = 500.0
    name = "trig_source"

    def __call__(self, points, t):
        X = _points(points)
        s = np.sin(np.pi * X)
        c = np.cos(np.pi * X)
        V = np.column_stack(
            [c[:, 0] * s[:, 1] * s[:, 2], s[:, 0] * c[:, 1] * s[:, 2], s[:, 0] * s[:, 1] * c[:, 2]]
        )
        return self.amplitude * V

    def get_params(self):
        return {"amplitude": self.amplitude}


def dumbbell_phi(points, t):
    """Dumbbell level-set function and its derivatives.

    ``phi = (x^2 + y^2)/a^2 + G(z^2/b^2)`` with ``G(s) = 200 s (s - 199/200)``,
    ``a(t) = 0.1 + 0.05 sin 2 pi t`` and ``b(t) = 1 + 0.2 sin 4 pi t``.

    Returns
    -------
    phi : ndarray (N,)
    phi_t : ndarray (N,)
    grad : ndarray (N, 3)
    """
    X = _points(points)
    x, y, z = X.T
    a = 0.1 + 0.05 * np.sin(2 * np.pi * t)
    b = 1.0 + 0.2 * np.sin(4 * np.pi * t)
    da = 0.1 * np.pi * np.cos(2 * np.pi * t)
    db = 0.8 * np.pi * np.cos(4 * np.pi * t)
    rr = x * x + y * y
    s = z * z / b**2
    G = 200.0 * s * (s - 0.995)
    dG = 400.0 * s - 199.0
    phi = rr / a**2 + G
    phi_t = -2.0 * rr * da / a**3 + dG * (-2.0 * z * z * db / b**3)
    grad = np.column_stack([2 * x / a**2, 2 * y / a**2, dG * 2 * z / b**2])
    return phi, phi_t, grad


@dataclass(frozen=True)
class LevelSetDriven(VelocityField):
    """Normal velocity ``v = -phi_t grad(phi) / |grad(phi)|^2`` of a moving level set.

    Only the dumbbell function is built in. ``surface`` records which initial
    surface it is paired with: ``"dumbbell"`` (the level set ``phi = 1``
    itself) or ``"unit_sphere"`` (the same field acting on a unit sphere).
    """

    surface: str = "dumbbell"
    name = "level_set"

    def __post_init__(self):
        if self.surface not in ("dumbbell", "unit_sphere"):
            raise ConfigurationError(f"unknown level-set surface {self.surface!r}")

    def __call__(self, points, t):
        _, phi_t, grad = dumbbell_phi(points, t)
        g2 = np.einsum("ij,ij->i", grad, grad)
        bad = g2 < _GRAD_FLOOR**2
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise SingularVelocityError(f"|grad phi| vanishes at point {i}", index=i)
        return -(phi_t / g2)[:, None] * grad

    def get_params(self):
        return {"surface": self.surface}


@dataclass(frozen=True)
class IntrinsicMCF(VelocityField):
    """Marker for ``v = Laplace-Beltrami(X)``; not evaluable pointwise."""

    name = "mcf"
    intrinsic = True

    def __call__(self, points, t):
        raise UsageError("the mean-curvature field is intrinsic; use fpflow.mcf")


# ---------------------------------------------------------------------------
# target distributions


@dataclass(frozen=True)
class TargetDistribution:
    """Unnormalized ``log p`` on ambient space."""

    theta: float = 0.0
    name = "uniform"

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta < 0:
            raise ConfigurationError(f"theta must be finite and >= 0, got {self.theta}")

    def log_p(self, points):
        return np.zeros(_points(points).shape[0])

    def __call__(self, points):
        return self.log_p(points)


@dataclass(frozen=True)
class Uniform(TargetDistribution):
    name = "uniform"


@dataclass(frozen=True)
class EllipsoidBand(TargetDistribution):
    """``log p = theta (sin z + 1)``."""

    name = "ellipsoid_band"

    def log_p(self, points):
        z = _points(points)[:, 2]
        return self.theta * (np.sin(z) + 1.0)


@dataclass(frozen=True)
class DumbbellBand(TargetDistribution):
    """``log p = theta (cos z + 1)``."""

    name = "dumbbell_band"

    def log_p(self, points):
        z = _points(points)[:, 2]
        return self.theta * (np.cos(z) + 1.0)


def eval_velocity(field, points, t):
    return field(points, t)


def eval_log_target(dist, points):
    return dist.log_p(points)


VELOCITY_FIELDS = {
    cls.name: cls for cls in (Zero, RadialLogistic, TrigSource, LevelSetDriven, IntrinsicMCF)
}
TARGETS = {cls.name: cls for cls in (Uniform, EllipsoidBand, DumbbellBand)}


def make_velocity(name, **params):
    """Build a registered velocity field by name."""
    try:
        cls = VELOCITY_FIELDS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown velocity field {name!r}; known: {sorted(VELOCITY_FIELDS)}"
        ) from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name!r}: {exc}") from None


def make_target(name, **params):
    """Build a registered target distribution by name."""
    try:
        cls = TARGETS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown target distribution {name!r}; known: {sorted(TARGETS)}"
        ) from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name!r}: {exc}") from None
