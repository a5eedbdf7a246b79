"""scikit-learn style wrappers around the solvers.

Each estimator takes an ``(N, 3)`` point cloud in ``fit`` and stores its
results in trailing-underscore attributes. ``transform`` returns the fitted
positions and is only valid for the cloud that was fitted, since every
algorithm here moves the input points rather than learning a reusable map.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points
from .exceptions import UsageError
from .geometry import DEFAULT_K, area_elements
from .integration import OperatorFactory, evolve
from .mcf import McfConfig, run_mcf
from .redistribution import RedistributionConfig, initial_log_density, redistribute
from .velocity import make_target, make_velocity


class _CloudTransformer(TransformerMixin, BaseEstimator):
    def transform(self, X):
        check_is_fitted(self, "positions_")
        X = check_points(X)
        if X.shape != self._fit_shape:
            raise UsageError("transform expects the cloud passed to fit")
        return self.positions_.copy()


class DensityEstimator(_CloudTransformer):
    """Log-density from local Delaunay area elements.

    Attributes
    ----------
    areas_ : ndarray of shape (N,)
    log_density_ : ndarray of shape (N,)
        ``log(1 / areas_)`` shifted to zero mean.
    """

    def __init__(self, k=DEFAULT_K):
        self.k = k

    def fit(self, X, y=None):
        X = check_points(X)
        self._fit_shape = X.shape
        self.areas_ = area_elements(X, k=self.k)
        self.log_density_ = initial_log_density(X, OperatorFactory(k=self.k))
        self.positions_ = X.copy()
        return self

    def transform(self, X):
        check_is_fitted(self, "log_density_")
        X = check_points(X)
        if X.shape != self._fit_shape:
            raise UsageError("transform expects the cloud passed to fit")
        return self.log_density_.copy()


class UniformRedistributor(_CloudTransformer):
    """Move points on their fixed surface towards a uniform density.

    Parameters
    ----------
    eta : float
    tau_tilde : float
        Pseudo-time step of the corrective iterations.
    eps0 : float
        Spread threshold on ``s`` that ends the run.
    max_iter : int
    k : int
        Neighbors per stencil.
    raise_on_failure : bool
        Raise :class:`~fpflow.exceptions.NonConvergenceError` when
        ``max_iter`` is hit; otherwise set ``converged_ = False``.
    """

    def __init__(self, eta=100.0, tau_tilde=1e-4, eps0=5e-5, max_iter=50000, k=DEFAULT_K,
                 raise_on_failure=True):
        self.eta = eta
        self.tau_tilde = tau_tilde
        self.eps0 = eps0
        self.max_iter = max_iter
        self.k = k
        self.raise_on_failure = raise_on_failure

    def _config(self, stop_on="s"):
        return RedistributionConfig(eta=self.eta, tau_tilde=self.tau_tilde, eps0=self.eps0,
                                    max_iter=self.max_iter, stop_on=stop_on)

    def _target(self):
        return None

    def fit(self, X, y=None):
        X = check_points(X)
        self._fit_shape = X.shape
        target = self._target()
        cfg = self._config("s" if target is None else "relative")
        res = redistribute(X, cfg, target, factory=OperatorFactory(k=self.k),
                           raise_on_failure=self.raise_on_failure)
        self.positions_ = res.positions
        self.log_density_ = res.s
        self.n_iter_ = res.iterations
        self.spread_ = res.spread
        self.converged_ = res.converged
        self.trace_ = res.trace
        return self


class TargetRedistributor(UniformRedistributor):
    """Move points towards a prescribed density ``p`` on their fixed surface.

    ``target`` names a registered distribution (``"uniform"``,
    ``"ellipsoid_band"``, ``"dumbbell_band"``). The run stops when the
    spread of ``s - log p`` reaches ``eps0``.
    """

    def __init__(self, target="ellipsoid_band", theta=2.0, eta=100.0, tau_tilde=1e-4, eps0=5e-5,
                 max_iter=50000, k=DEFAULT_K, raise_on_failure=True):
        super().__init__(eta=eta, tau_tilde=tau_tilde, eps0=eps0, max_iter=max_iter, k=k,
                         raise_on_failure=raise_on_failure)
        self.target = target
        self.theta = theta

    def _target(self):
        if self.target == "uniform":
            return make_target("uniform")
        return make_target(self.target, theta=self.theta)


class SurfaceEvolver(_CloudTransformer):
    """Evolve a cloud under a prescribed velocity with Fokker-Planck redistribution.

    ``velocity`` names a registered field and ``velocity_params`` are passed
    to its constructor. ``eta = 0`` disables the tangential correction.
    """

    def __init__(self, velocity="radial_logistic", velocity_params=None, eta=100.0, tau=1e-3,
                 T=1.0, order=2, bootstrap="rk4", k=DEFAULT_K):
        self.velocity = velocity
        self.velocity_params = velocity_params
        self.eta = eta
        self.tau = tau
        self.T = T
        self.order = order
        self.bootstrap = bootstrap
        self.k = k

    def fit(self, X, y=None, s0=None):
        X = check_points(X)
        self._fit_shape = X.shape
        field = make_velocity(self.velocity, **(self.velocity_params or {}))
        factory = OperatorFactory(k=self.k)
        if s0 is None:
            s0 = initial_log_density(X, factory)
        state = evolve(X, s0, field, tau=self.tau, T=self.T, eta=self.eta, order=self.order,
                       bootstrap=self.bootstrap, factory=factory)
        self.positions_ = state.X[0]
        self.log_density_ = state.s[0]
        self.n_steps_ = state.step
        self.time_ = state.t
        return self


class MeanCurvatureFlow(_CloudTransformer):
    """Mean curvature flow with rescaling and periodic redistribution.

    Attributes
    ----------
    positions_ : ndarray
        Final cloud in computational (rescaled) coordinates.
    physical_positions_ : ndarray
    status_ : str
        ``"stopped"``, ``"collapse"``, ``"breakdown"`` or ``"max_steps"``.
    trajectory_ : list of dict
    """

    def __init__(self, eta=100.0, tau=1e-3, order=2, redistribute_every=100,
                 stop_area_ratio=1e-12, max_steps=100000, k=DEFAULT_K):
        self.eta = eta
        self.tau = tau
        self.order = order
        self.redistribute_every = redistribute_every
        self.stop_area_ratio = stop_area_ratio
        self.max_steps = max_steps
        self.k = k

    def fit(self, X, y=None):
        X = check_points(X)
        self._fit_shape = X.shape
        cfg = McfConfig(eta=self.eta, tau=self.tau, order=self.order,
                        redistribute_every=self.redistribute_every if self.eta > 0 else 0,
                        stop_area_ratio=self.stop_area_ratio, max_steps=self.max_steps, k=self.k)
        res = run_mcf(X, cfg)
        self.positions_ = res.state.positions
        self.physical_positions_ = res.state.physical_positions
        self.status_ = res.status
        self.message_ = res.message
        self.trajectory_ = res.trajectory
        self.final_area_ratio_ = res.final_area_ratio
        self.n_rescales_ = len(res.rescales)
        return self

    def score(self, X=None, y=None):
        """Negative log10 of the final area ratio; larger means further collapse."""
        check_is_fitted(self, "final_area_ratio_")
        return float(-np.log10(max(self.final_area_ratio_, 1e-300)))
