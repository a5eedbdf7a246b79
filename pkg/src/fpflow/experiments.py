"""Scripted, deterministic studies: convergence tables, distribution quality, MCF.

Every study returns a :class:`StudyReport` whose rows go to ``report.csv``
and whose metadata (with the rows) goes to ``report.json``.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_points
from .exceptions import ConfigurationError, ShapeError
from .geometry import SurfaceSpec, area_elements, nested_torus_indices, sample_surface
from .integration import OperatorFactory, evolve
from .io import save_ply, write_json, write_rows
from .mcf import McfConfig, asphericity, run_mcf
from .redistribution import (
    RedistributionConfig,
    initial_log_density,
    redistribute,
)
from .velocity import (
    LevelSetDriven,
    RadialLogistic,
    TrigSource,
    Uniform,
    logistic_radius,
    make_target,
)


@dataclass
class RunOutput:
    """Final state of one evolution run."""

    positions: np.ndarray
    s: np.ndarray
    areas: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def area_elements(self, k=20):
        if self.areas is None:
            self.areas = area_elements(self.positions, k=k)
        return self.areas


@dataclass
class StudyReport:
    name: str
    rows: list
    metadata: dict = field(default_factory=dict)

    def write(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        columns = list(self.rows[0]) if self.rows else []
        for r in self.rows:
            for c in r:
                if c not in columns:
                    columns.append(c)
        write_rows(self.rows, d / "report.csv", columns)
        write_json({"name": self.name, "metadata": self.metadata, "rows": self.rows},
                   d / "report.json")


ConvergenceReport = StudyReport


# ---------------------------------------------------------------------------
# error metrics


def _pair(a, b):
    Xa = check_points(getattr(a, "positions", a), min_points=1)
    Xb = check_points(getattr(b, "positions", b), min_points=1)
    if Xa.shape != Xb.shape:
        raise ShapeError(f"runs have different sizes {Xa.shape} and {Xb.shape}")
    return Xa, Xb


def temporal_self_error(run_tau, run_2tau, k=20):
    """``(eps_x, eps_s)``: max-norm differences of positions and area elements."""
    Xa, Xb = _pair(run_tau, run_2tau)
    ex = float(np.linalg.norm(Xa - Xb, axis=1).max())
    Sa = run_tau.area_elements(k) if isinstance(run_tau, RunOutput) else area_elements(Xa, k=k)
    Sb = run_2tau.area_elements(k) if isinstance(run_2tau, RunOutput) else area_elements(Xb, k=k)
    return ex, float(np.abs(Sa - Sb).max())


def radius_error(cloud, T, r0=0.5):
    """``max_j | |X_j| - r(T) |`` against the logistic radius."""
    X = check_points(getattr(cloud, "positions", cloud), min_points=1)
    return float(np.abs(np.linalg.norm(X, axis=1) - logistic_radius(T, r0)).max())


def spatial_self_error(run_coarse, run_fine, index_map, k=20):
    """``(eps_x, eps_s)`` at the material points shared by nested clouds.

    ``index_map[j]`` is the fine-cloud index of coarse point ``j``.
    """
    if index_map is None:
        raise ConfigurationError("spatial self-error needs an index map between clouds")
    Xc = check_points(getattr(run_coarse, "positions", run_coarse), min_points=1)
    Xf = check_points(getattr(run_fine, "positions", run_fine), min_points=1)
    index_map = np.asarray(index_map, dtype=int)
    if index_map.shape != (Xc.shape[0],) or index_map.max() >= Xf.shape[0]:
        raise ConfigurationError("index map does not match the clouds")
    Sc = run_coarse.area_elements(k) if isinstance(run_coarse, RunOutput) else area_elements(Xc, k=k)
    Sf = run_fine.area_elements(k) if isinstance(run_fine, RunOutput) else area_elements(Xf, k=k)
    ex = float(np.linalg.norm(Xc - Xf[index_map], axis=1).max())
    return ex, float(np.abs(Sc - Sf[index_map]).max())


def observed_orders(errors, ratio=2.0):
    """``log(e_i / e_{i+1}) / log(ratio)`` for successive refinements."""
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(e[:-1] / e[1:]) / np.log(ratio)


def area_histogram(cloud, bins=30, k=20, areas=None):
    """Histogram of area elements plus mean and coefficient of variation."""
    S = area_elements(cloud, k=k) if areas is None else np.asarray(areas, dtype=float)
    counts, edges = np.histogram(S, bins=bins)
    return {
        "bin_left": edges[:-1],
        "bin_right": edges[1:],
        "count": counts,
        "mean": float(S.mean()),
        "cv": float(S.std() / S.mean()),
    }


def write_histogram(hist, path):
    rows = [
        {"bin_left": float(l), "bin_right": float(r), "count": int(c)}
        for l, r, c in zip(hist["bin_left"], hist["bin_right"], hist["count"])
    ]
    write_rows(rows, path, ["bin_left", "bin_right", "count"])


def coefficient_of_variation(values):
    v = np.asarray(values, dtype=float)
    return float(v.std() / v.mean())


# ---------------------------------------------------------------------------
# studies


def temporal_study(orders=(1, 2, 3), inv_taus=(80, 160, 320, 640), n_points=3000, eta=100.0,
                   T=1.0, k=20, bootstrap="rk4"):
    """Self-convergence in time on the logistic sphere (radius 1/2 at t=0, s0 = 0).

    The row for ``1/tau`` compares the run at ``tau`` with the run at ``2 tau``,
    so the first entry of ``inv_taus`` only serves as a reference run.
    """
    inv_taus = sorted(int(m) for m in inv_taus)
    if len(inv_taus) < 2:
        raise ConfigurationError("need at least two time steps")
    X0 = sample_surface(SurfaceSpec("sphere", {"radius": 0.5}), n_points).positions
    rows = []
    t_start = time.perf_counter()
    for q in orders:
        runs = {}
        for m in inv_taus:
            st = evolve(X0, None, RadialLogistic(), tau=1.0 / m, T=T, eta=eta, order=q,
                        bootstrap=bootstrap, factory=OperatorFactory(k=k))
            runs[m] = RunOutput(st.X[0], st.s[0])
        eps = []
        for m_prev, m in zip(inv_taus[:-1], inv_taus[1:]):
            ex, es = temporal_self_error(runs[m], runs[m_prev], k)
            els = float(np.abs(runs[m].s - runs[m_prev].s).max())
            eps.append((m, ex, es, els, radius_error(runs[m], T)))
        er_ref = radius_error(runs[inv_taus[0]], T)
        rad = [er_ref] + [e[4] for e in eps]
        ox = observed_orders([e[1] for e in eps])
        os_ = observed_orders([e[2] for e in eps])
        ols = observed_orders([e[3] for e in eps])
        orad = observed_orders(rad)
        for i, (m, ex, es, els, er) in enumerate(eps):
            rows.append({
                "scheme": f"BDF{q}", "inv_tau": m,
                "eps_x": ex, "ord_x": float(ox[i - 1]) if i else np.nan,
                "eps_s": es, "ord_s": float(os_[i - 1]) if i else np.nan,
                "eps_r": er, "ord_r": float(orad[i]),
                "eps_logdensity": els, "ord_logdensity": float(ols[i - 1]) if i else np.nan,
            })
    meta = {"n_points": int(X0.shape[0]), "eta": eta, "T": T, "k": k, "bootstrap": bootstrap,
            "inv_taus": inv_taus, "runtime_s": time.perf_counter() - t_start,
            "eps_r_reference": {"inv_tau": inv_taus[0]}}
    return StudyReport("converge-time", rows, meta)


def torus_run(n_points, eta, tau, T, R=1.0, r=0.5, amplitude=500.0, k=20, order=2):
    X0 = sample_surface(SurfaceSpec("torus", {"R": R, "r": r}), n_points).positions
    st = evolve(X0, None, TrigSource(amplitude), tau=tau, T=T, eta=eta, order=order,
                factory=OperatorFactory(k=k))
    return RunOutput(st.X[0], st.s[0])


def spatial_study(etas=(1.0, 10.0, 100.0), sizes=(256, 1024, 4096), tau=1e-4, T=2e-4, R=1.0,
                  r=0.5, amplitude=500.0, k=20):
    """Self-convergence in space on nested torus grids under the trigonometric field.

    The row for ``N`` compares the run on ``N`` points with the run on ``4N``
    points at the coarse material points. ``h`` is ``sqrt(E_h / N)``.
    """
    sizes = sorted(int(n) for n in sizes)
    rows = []
    t_start = time.perf_counter()
    for eta in etas:
        runs = {n: torus_run(n, eta, tau, T, R, r, amplitude, k) for n in sizes}
        errs = []
        for nc, nf in zip(sizes[:-1], sizes[1:]):
            idx = nested_torus_indices(nc, nf)
            ex, es = spatial_self_error(runs[nc], runs[nf], idx, k)
            els = float(np.abs(runs[nc].s - runs[nf].s[idx]).max())
            h = float(np.sqrt(runs[nc].area_elements(k).sum() / nc))
            errs.append((nc, h, ex, es, els))
        for i, (n, h, ex, es, els) in enumerate(errs):
            row = {"eta": eta, "N": n, "h": h, "eps_x": ex, "eps_s": es, "eps_logdensity": els}
            for key in ("eps_x", "eps_s", "eps_logdensity"):
                suffix = key[4:]
                if i:
                    prev = rows[-1]
                    ratio = np.log(prev[key] / row[key])
                    row[f"ordN_{suffix}"] = float(ratio / np.log(n / prev["N"]))
                    row[f"ordh_{suffix}"] = float(ratio / np.log(prev["h"] / h))
                else:
                    row[f"ordN_{suffix}"] = np.nan
                    row[f"ordh_{suffix}"] = np.nan
            rows.append(row)
    meta = {"sizes": sizes, "tau": tau, "T": T, "R": R, "r": r, "amplitude": amplitude, "k": k,
            "runtime_s": time.perf_counter() - t_start}
    return StudyReport("converge-space", rows, meta)


def distribution_study(etas=(0.0, 1.0, 10.0, 100.0), n_points=2904, tau=1e-2, T=2.0, k=20,
                       bins=30, order=2):
    """Area-element spread after evolving the shifted sphere with the logistic field."""
    X0 = sample_surface("shifted_sphere", n_points).positions
    s0 = initial_log_density(X0)
    rows, hists, clouds = [], {}, {}
    for eta in etas:
        st = evolve(X0, s0, RadialLogistic(), tau=tau, T=T, eta=eta, order=order,
                    factory=OperatorFactory(k=k))
        hist = area_histogram(st.X[0], bins, k)
        hists[eta] = hist
        clouds[eta] = st.X[0]
        rows.append({"eta": eta, "mean_area": hist["mean"], "cv_area": hist["cv"]})
    meta = {"n_points": n_points, "tau": tau, "T": T, "k": k, "order": order}
    rep = StudyReport("distribution", rows, meta)
    rep.histograms = hists
    rep.clouds = clouds
    return rep


def dumbbell_state(n_points=2000, tau=1e-3, T=0.6, eta=100.0, k=20, order=2):
    """Evolve the dumbbell level set to time ``T``; returns the final cloud."""
    X0 = sample_surface("dumbbell", n_points).positions
    st = evolve(X0, initial_log_density(X0), LevelSetDriven("dumbbell"), tau=tau, T=T, eta=eta,
                order=order, factory=OperatorFactory(k=k))
    return st.X[0]


def redistribution_study(cloud, config, target=None, k=20, z_center=0.0):
    """Redistribute ``cloud`` and record per-iteration monitors.

    Besides the trace columns this records ``mean_abs_z`` and
    ``frac_small_z`` (fraction of points with ``|z| < 0.3``) per iteration,
    with ``z`` measured from the plane ``z = z_center``.
    """
    X = check_points(cloud, copy=True)

    def monitors(it, P):
        Z = np.abs(P[:, 2] - z_center)
        return {"iter": it, "mean_abs_z": float(Z.mean()),
                "frac_small_z": float(np.mean(Z < 0.3))}

    extra = [monitors(0, X)]

    def cb(row, state):
        extra.append(monitors(row["iter"], state.X[0]))

    S0 = area_elements(X, k=k)
    res = redistribute(X, config, target, factory=OperatorFactory(k=k), callback=cb,
                       raise_on_failure=False)
    S1 = area_elements(res.positions, k=k)
    rows = []
    for tr, ex in zip([{"iter": 0}] + res.trace, extra):
        rows.append({**{"spread": np.nan, "kl": np.nan, "max_displacement": 0.0}, **tr, **ex})
    meta = {"iterations": res.iterations, "converged": res.converged, "final_spread": res.spread,
            "cv_before": coefficient_of_variation(S0), "cv_after": coefficient_of_variation(S1),
            "eta": config.eta, "tau_tilde": config.step, "eps0": config.eps0,
            "stop_on": config.stop_on, "z_center": z_center,
            "target": None if target is None else {"name": target.name, "theta": target.theta}}
    rep = StudyReport("redistribute" if target is None else "match-target", rows, meta)
    rep.result = res
    return rep


# log p = theta (sin z + 1) is symmetric about z = -pi/2 and smallest there,
# so an ellipsoid centered on that plane has its high-density regions at both poles.
ELLIPSOID_BAND_CENTER = -0.5 * np.pi

TARGET_SURFACES = {
    "ellipsoid_band": SurfaceSpec("ellipsoid", {"z_center": ELLIPSOID_BAND_CENTER}),
    "dumbbell_band": SurfaceSpec("dumbbell", {"t": 0.0}),
    "uniform": SurfaceSpec("ellipsoid", {"z_center": ELLIPSOID_BAND_CENTER}),
}


def target_study(target="ellipsoid_band", theta=2.0, n_points=1000, eta=100.0, tau_tilde=1e-4,
                 eps0=5e-5, max_iter=2000, k=20, surface=None):
    """Target matching on the surface paired with ``target``.

    The loop stops when the spread of ``s - log p`` falls below ``eps0``.
    ``mean_abs_z`` is measured from the surface's own center plane.
    """
    spec = surface if surface is not None else TARGET_SURFACES[target]
    if isinstance(spec, str):
        spec = SurfaceSpec(spec)
    X0 = sample_surface(spec, n_points).positions
    cfg = RedistributionConfig(eta=eta, tau_tilde=tau_tilde, eps0=eps0, max_iter=max_iter,
                               stop_on="relative", monitor_every=0)
    z_center = float(spec.get("z_center", 0.0)) if spec.kind == "ellipsoid" else 0.0
    rep = redistribution_study(X0, cfg, make_target(target, theta=theta), k=k,
                               z_center=z_center)
    rep.metadata.update({"surface": {"kind": spec.kind, **spec.params},
                         "n_points": int(X0.shape[0])})
    return rep


def mcf_study(eta=100.0, n_points=1500, tau=1e-3, redistribute_every=100, k=20,
              stop_area_ratio=1e-12, max_steps=5000, callback=None):
    X0 = sample_surface("mcf_benchmark", n_points).positions
    cfg = McfConfig(eta=eta, tau=tau, redistribute_every=redistribute_every if eta > 0 else 0,
                    stop_area_ratio=stop_area_ratio, max_steps=max_steps, k=k)
    res = run_mcf(X0, cfg, callback=callback)
    meta = {"status": res.status, "message": res.message, "eta": eta, "tau": tau,
            "n_points": int(X0.shape[0]), "rescales": res.rescales,
            "final_area_ratio": res.final_area_ratio,
            "final_asphericity": asphericity(res.positions)}
    rep = StudyReport("mcf", res.trajectory, meta)
    rep.result = res
    return rep


def save_final_cloud(X, directory, name="final.ply"):
    Path(directory).mkdir(parents=True, exist_ok=True)
    save_ply(X, Path(directory) / name)


__all__ = [
    "RunOutput", "StudyReport", "ConvergenceReport", "temporal_self_error", "radius_error",
    "spatial_self_error", "observed_orders", "area_histogram", "write_histogram",
    "coefficient_of_variation", "temporal_study", "spatial_study", "distribution_study",
    "dumbbell_state", "redistribution_study", "mcf_study", "torus_run", "make_target", "Uniform",
]
