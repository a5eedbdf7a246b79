"""Point redistribution on a fixed surface.

The normal velocity is switched off and the log-density ``s`` is driven by
``ds/dt = eta Lap(s - log p)`` while points move with ``-eta grad(s - log p)``.
With ``log p = 0`` this equalizes the point density; otherwise it follows
the gradient flow of the KL divergence towards the target ``p``.
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import check_field, check_points, check_positive
from .exceptions import ConfigurationError, NonConvergenceError
from .geometry import area_elements, estimate_density
from .integration import OperatorFactory, SolverState, advance_general, bdf_coefficients

DEFAULT_EPS0 = 5e-5


@dataclass(frozen=True)
class RedistributionConfig:
    """Settings of a redistribution run.

    Parameters
    ----------
    eta : float
        Diffusion strength of the artificial tangential velocity.
    tau : float
        Time step of the surrounding evolution. The redistribution step
        ``tau_tilde`` defaults to ``tau**2``.
    tau_tilde : float, optional
        Redistribution step; overrides the default.
    eps0 : float
        Stop once the spread of the monitored log-density is at most this.
    max_iter : int
        Corrective iterations before :class:`NonConvergenceError`.
    stop_on : {"s", "relative"}
        ``"s"`` monitors ``max(s) - min(s)``; ``"relative"`` monitors the
        spread of ``s - log p``, which goes to zero at the matched target.
    monitor_every : int
        Evaluate the KL divergence every this many iterations (0 disables).
    """

    eta: float = 100.0
    tau: float = 1e-3
    tau_tilde: float = None
    eps0: float = DEFAULT_EPS0
    max_iter: int = 50000
    stop_on: str = "s"
    monitor_every: int = 1

    def __post_init__(self):
        check_positive(self.eta, "eta")
        check_positive(self.tau, "tau")
        if self.tau_tilde is not None:
            check_positive(self.tau_tilde, "tau_tilde")
        check_positive(self.eps0, "eps0")
        if int(self.max_iter) < 1:
            raise ConfigurationError("max_iter must be >= 1")
        if self.stop_on not in ("s", "relative"):
            raise ConfigurationError(f"stop_on must be 's' or 'relative', got {self.stop_on!r}")

    @property
    def step(self):
        return self.tau**2 if self.tau_tilde is None else self.tau_tilde


@dataclass
class RedistributionResult:
    positions: np.ndarray
    s: np.ndarray
    iterations: int
    spread: float
    converged: bool
    trace: list = field(default_factory=list)


def spread_metric(s):
    """``max(s) - min(s)``."""
    s = np.asarray(s, dtype=float)
    if s.size == 0:
        raise ConfigurationError("spread of an empty field")
    return float(s.max() - s.min())


def _normalized(logf, areas):
    m = logf.max()
    w = np.exp(logf - m)
    return logf - m - np.log(np.sum(w * areas))


def kl_divergence(s, log_p, areas):
    """Quadrature of ``KL(q || p)`` with ``q ~ exp(s)`` and ``p ~ exp(log_p)``.

    Both densities are normalized to unit mass under the weights ``areas``.
    """
    areas = np.asarray(areas, dtype=float)
    n = areas.shape[0]
    s = check_field(s, n, "s")
    log_p = check_field(log_p, n, "log_p")
    lq = _normalized(s, areas)
    lp = _normalized(log_p, areas)
    return float(np.sum(np.exp(lq) * (lq - lp) * areas))


def initial_log_density(X, factory=None):
    """``log`` of the area-element density estimate, shifted to zero mean."""
    k = factory.k if isinstance(factory, OperatorFactory) else 20
    s = np.log(estimate_density(X, k=k))
    return s - s.mean()


def redistribute(cloud, config=None, target=None, factory=None, solve=None, callback=None,
                 raise_on_failure=True):
    """Run the redistribution loop; the general entry point.

    ``target`` is a :class:`~fpflow.velocity.TargetDistribution` (or any
    object with ``log_p``); ``None`` means uniform. One BDF1 step is followed
    by BDF2 steps until the monitored spread is at most ``eps0``.
    """
    config = config or RedistributionConfig()
    X = check_points(cloud, copy=True)
    factory = factory or OperatorFactory()
    log_p = None if target is None else target.log_p
    s_hat = initial_log_density(X, factory)

    def monitored(Xc, s):
        if config.stop_on == "relative" and log_p is not None:
            return spread_metric(s - log_p(Xc))
        return spread_metric(s)

    def kl(Xc, s):
        lp = np.zeros(Xc.shape[0]) if log_p is None else log_p(Xc)
        return kl_divergence(s, lp, area_elements(Xc, k=factory.k))

    trace = []
    spread = monitored(X, s_hat)
    if spread <= config.eps0:
        return RedistributionResult(X, s_hat, 0, spread, True, trace)

    tau = config.step
    state = SolverState([X], [s_hat], 0.0, 0, 3)
    bdf1, bdf2 = bdf_coefficients(1), bdf_coefficients(2)
    it = 0
    converged = False
    while it < config.max_iter:
        prev = state.X[0]
        scheme = bdf1 if it == 0 else bdf2
        advance_general(state, scheme, None, tau, config.eta, solve, factory, log_p)
        it += 1
        Xc, s = state.X[0], state.s[0]
        spread = monitored(Xc, s)
        row = {
            "iter": it,
            "spread": spread,
            "kl": kl(Xc, s) if config.monitor_every and it % config.monitor_every == 0 else np.nan,
            "max_displacement": float(np.linalg.norm(Xc - prev, axis=1).max()),
        }
        trace.append(row)
        if callback is not None:
            callback(row, state)
        # the first BDF1 step is always followed by at least one BDF2 step
        if it > 1 and spread <= config.eps0:
            converged = True
            break
    result = RedistributionResult(state.X[0], state.s[0], it, spread, converged, trace)
    if not converged and raise_on_failure:
        raise NonConvergenceError(
            f"redistribution did not reach spread {config.eps0:g} in {it} iterations "
            f"(final spread {spread:.3g})",
            spread=spread,
            iterations=it,
        )
    return result


def redistribute_uniform(cloud, config=None, **kwargs):
    """Equalize the point density on the fixed surface through ``cloud``."""
    return redistribute(cloud, config, None, **kwargs)


def redistribute_target(cloud, dist, config=None, **kwargs):
    """Move points towards the density ``p`` of ``dist`` on the fixed surface."""
    if dist is None:
        raise ConfigurationError("a target distribution is required")
    return redistribute(cloud, config, dist, **kwargs)
