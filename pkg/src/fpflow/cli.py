"""Command-line entry point.

Every subcommand reads an optional YAML or JSON config file whose keys are
the ``RunConfig`` fields below; command-line flags override file values.
The resolved config is written to ``<out>/config.yaml`` so a run can be
repeated with ``--config <out>/config.yaml``.

Exit status is 0 on success, 2 for configuration or input errors and 3 for
numerical failures (degenerate geometry, failed solves, non-convergence).

The environment variable ``FPFLOW_NUM_THREADS`` caps BLAS/OpenMP threads.
"""

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .exceptions import (
    CollapseSignal,
    ConfigurationError,
    DegenerateGeometryError,
    FpflowError,
    NonConvergenceError,
    ParseError,
    SingularVelocityError,
    SolverError,
    StateError,
    UsageError,
)
from .experiments import (
    TARGET_SURFACES,
    area_histogram,
    spatial_study,
    temporal_study,
    write_histogram,
)
from .geometry import SurfaceSpec, sample_surface
from .integration import OperatorFactory, evolve
from .io import SnapshotWriter, load_cloud, save_cloud, save_field, write_json, write_rows
from .mcf import McfConfig, asphericity, run_mcf
from .redistribution import RedistributionConfig, initial_log_density, redistribute
from .velocity import TARGETS, VELOCITY_FIELDS, make_target, make_velocity

THREADS_ENV = "FPFLOW_NUM_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SUBCOMMANDS = ("evolve", "redistribute", "match-target", "mcf", "converge-time",
               "converge-space", "gen-surface")

_NUMERIC_ERRORS = (DegenerateGeometryError, SolverError, NonConvergenceError,
                   SingularVelocityError, CollapseSignal, StateError, FloatingPointError)
_CONFIG_ERRORS = (ConfigurationError, ParseError, UsageError, OSError)


@dataclass
class RunConfig:
    """All settings a subcommand may use; unused fields are ignored.

    ``surface``/``resolution``/``surface_params`` describe a generated cloud;
    ``input`` (a ``.ply`` or ``.csv`` path) replaces it when given.
    """

    surface: str = "shifted_sphere"
    resolution: int = 2904
    surface_params: dict = field(default_factory=dict)
    input: str = None
    velocity: str = "radial_logistic"
    velocity_params: dict = field(default_factory=dict)
    eta: float = 100.0
    tau: float = 1e-2
    T: float = 2.0
    order: int = 2
    bootstrap: str = "rk4"
    k: int = 20
    margin: float = 0.05
    tau_tilde: float = 1e-4
    eps0: float = 5e-5
    max_iter: int = 50000
    target: str = "ellipsoid_band"
    theta: float = 2.0
    redistribute_every: int = 100
    stop_area_ratio: float = 1e-12
    max_steps: int = 100000
    orders: list = field(default_factory=lambda: [1, 2, 3])
    inv_taus: list = field(default_factory=lambda: [80, 160, 320, 640])
    sizes: list = field(default_factory=lambda: [256, 1024, 4096])
    etas: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    bins: int = 30
    out: str = "fpflow-out"
    output: str = None
    snapshot_stride: int = 0
    seed: int = 0
    full: bool = False

    def validate(self):
        for name in ("tau", "tau_tilde", "eps0", "T", "margin", "stop_area_ratio"):
            if not float(getattr(self, name)) > 0:
                raise ConfigurationError(f"{name}: must be > 0, got {getattr(self, name)!r}")
        if self.eta < 0:
            raise ConfigurationError(f"eta: must be >= 0, got {self.eta!r}")
        if self.theta < 0:
            raise ConfigurationError(f"theta: must be >= 0, got {self.theta!r}")
        if self.order not in (1, 2, 3):
            raise ConfigurationError(f"order: must be 1, 2 or 3, got {self.order!r}")
        if self.k < 6:
            raise ConfigurationError(f"k: need at least 6 neighbors, got {self.k!r}")
        for name in ("resolution", "max_iter", "max_steps", "bins"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1, got {getattr(self, name)!r}")
        for name in ("redistribute_every", "snapshot_stride"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name}: must be >= 0, got {getattr(self, name)!r}")
        if self.velocity not in VELOCITY_FIELDS:
            raise ConfigurationError(
                f"velocity: unknown field {self.velocity!r}; known {sorted(VELOCITY_FIELDS)}")
        if self.target not in TARGETS:
            raise ConfigurationError(
                f"target: unknown distribution {self.target!r}; known {sorted(TARGETS)}")
        if self.input is not None and not Path(self.input).is_file():
            raise ConfigurationError(f"input: no such file {self.input!r}")
        return self


# Per-subcommand defaults layered between RunConfig defaults and the config file.
_PRESETS = {
    "evolve": {},
    "redistribute": {"surface": "dumbbell", "resolution": 2000, "tau": 1e-3, "T": 0.6},
    "match-target": {"eta": 100.0, "resolution": 1000, "max_iter": 2000},
    "mcf": {"surface": "mcf_benchmark", "resolution": 1500, "tau": 1e-3},
    "converge-time": {"surface": "sphere", "surface_params": {"radius": 0.5},
                      "resolution": 3000, "T": 1.0},
    "converge-space": {"surface": "torus", "tau": 1e-4, "T": 2e-4,
                       "velocity": "trig_source"},
    "gen-surface": {"surface": "unit_sphere", "resolution": 2904},
}

_FULL_SCALE = {
    "converge-time": {"resolution": 30054, "inv_taus": [80, 160, 320, 640, 1280]},
    "converge-space": {"sizes": [256, 1024, 4096, 16384]},
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    """Convert a config value to the declared type of field ``name``."""
    if name not in _FIELDS:
        raise ConfigurationError(f"{name}: unknown config key")
    default = RunConfig()
    ref = getattr(default, name)
    kind = type(ref) if ref is not None else str
    if value is None:
        return None
    try:
        if kind is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is dict:
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError(value)
            return dict(value)
        if kind is list:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split()]
            item = int if name in ("orders", "inv_taus", "sizes") else float
            return [item(v) for v in value]
        return str(value)
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigurationError(
            f"{name}: cannot interpret {value!r} as {kind.__name__}") from None


def load_config_file(path):
    """Read a YAML or JSON mapping of ``RunConfig`` keys."""
    text = Path(path).read_text()
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"config file {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path}: top level must be a mapping")
    return data


def resolve_config(command, file_values=None, overrides=None):
    """Defaults, then subcommand preset, then file values, then flags."""
    values = dataclasses.asdict(RunConfig())
    values.update(_PRESETS.get(command, {}))
    layers = [file_values or {}, overrides or {}]
    if any(layer.get("full") for layer in layers):
        values.update(_FULL_SCALE.get(command, {}))
    for layer in layers:
        for key, val in layer.items():
            values[key] = _coerce(key, val)
    given = set().union(*layers)
    if command == "match-target" and values["input"] is None and "surface" not in given:
        spec = TARGET_SURFACES.get(values["target"])
        if spec is not None:
            values["surface"] = spec.kind
            values["surface_params"] = {**spec.params, **values["surface_params"]}
    return RunConfig(**values).validate()


def echo_config(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w") as fh:
        yaml.safe_dump(dataclasses.asdict(cfg), fh, sort_keys=True)


def _cloud(cfg):
    if cfg.input is not None:
        return load_cloud(cfg.input).positions
    params = dict(cfg.surface_params)
    if cfg.surface == "random_sphere":
        params.setdefault("seed", cfg.seed)
    return sample_surface(SurfaceSpec(cfg.surface, params), cfg.resolution).positions


def _save_state(out, X, s, name="final"):
    save_cloud(X, out / f"{name}.ply")
    save_field(s, out / f"{name}.s.csv")


# ---------------------------------------------------------------------------
# subcommands


def cmd_evolve(cfg, out):
    X0 = _cloud(cfg)
    factory = OperatorFactory(k=cfg.k, margin=cfg.margin)
    field_ = make_velocity(cfg.velocity, **cfg.velocity_params)
    s0 = initial_log_density(X0, factory)
    trace = []
    writer = SnapshotWriter(out / "snapshots", cfg.snapshot_stride) if cfg.snapshot_stride else None
    if writer is not None:
        writer.write(0, X0, s0)

    def cb(state):
        trace.append({"step": state.step, "t": state.t,
                      "spread": float(state.s[0].max() - state.s[0].min())})
        if writer is not None:
            writer(state)

    state = evolve(X0, s0, field_, tau=cfg.tau, T=cfg.T, eta=cfg.eta, order=cfg.order,
                   bootstrap=cfg.bootstrap, factory=factory, callback=cb)
    _save_state(out, state.X[0], state.s[0])
    write_rows(trace, out / "trace.csv", ["step", "t", "spread"])
    hist = area_histogram(state.X[0], cfg.bins, cfg.k)
    write_histogram(hist, out / "histogram.csv")
    write_json({"n_points": X0.shape[0], "steps": state.step, "t": state.t,
                "mean_area": hist["mean"], "cv_area": hist["cv"]}, out / "summary.json")
    return EXIT_OK


def _redistribute(cfg, out, target):
    X0 = _cloud(cfg)
    factory = OperatorFactory(k=cfg.k, margin=cfg.margin)
    if cfg.input is None and target is None and cfg.surface == "dumbbell" and cfg.T > 0:
        # default input: the dumbbell evolved by its level-set velocity
        X0 = evolve(X0, initial_log_density(X0, factory), make_velocity("level_set"),
                    tau=cfg.tau, T=cfg.T, eta=cfg.eta, order=cfg.order, factory=factory).X[0]
    rcfg = RedistributionConfig(eta=cfg.eta, tau=cfg.tau, tau_tilde=cfg.tau_tilde,
                                eps0=cfg.eps0, max_iter=cfg.max_iter,
                                stop_on="s" if target is None else "relative")
    hist0 = area_histogram(X0, cfg.bins, cfg.k)
    save_cloud(X0, out / "input.ply")
    res = redistribute(X0, rcfg, target, factory=factory, raise_on_failure=False)
    _save_state(out, res.positions, res.s)
    write_rows(res.trace, out / "trace.csv", ["iter", "spread", "kl", "max_displacement"])
    hist1 = area_histogram(res.positions, cfg.bins, cfg.k)
    write_histogram(hist0, out / "histogram_before.csv")
    write_histogram(hist1, out / "histogram_after.csv")
    write_json({"iterations": res.iterations, "converged": res.converged,
                "spread": res.spread, "cv_before": hist0["cv"], "cv_after": hist1["cv"],
                "target": None if target is None else {"name": target.name,
                                                       "theta": target.theta}},
               out / "summary.json")
    if not res.converged:
        raise NonConvergenceError(
            f"redistribution stopped after {res.iterations} iterations with spread "
            f"{res.spread:.3g} > eps0 {cfg.eps0:g}", spread=res.spread, iterations=res.iterations)
    return EXIT_OK


def cmd_redistribute(cfg, out):
    return _redistribute(cfg, out, None)


def cmd_match_target(cfg, out):
    target = make_target(cfg.target) if cfg.target == "uniform" else \
        make_target(cfg.target, theta=cfg.theta)
    return _redistribute(cfg, out, target)


def cmd_mcf(cfg, out):
    X0 = _cloud(cfg)
    mcfg = McfConfig(eta=cfg.eta, tau=cfg.tau, order=cfg.order,
                     redistribute_every=cfg.redistribute_every if cfg.eta > 0 else 0,
                     stop_area_ratio=cfg.stop_area_ratio, max_steps=cfg.max_steps, k=cfg.k,
                     redistribution_tau=cfg.tau_tilde, redistribution_eps0=cfg.eps0)
    writer = SnapshotWriter(out / "snapshots", cfg.snapshot_stride) if cfg.snapshot_stride else None

    def cb(row, state):
        if writer is not None and row["step"] % writer.stride == 0:
            writer.write(row["step"], state.positions, state.solver.s[0])

    res = run_mcf(X0, mcfg, callback=cb)
    write_rows(res.trajectory, out / "trajectory.csv")
    _save_state(out, res.state.positions, res.state.solver.s[0])
    write_json({"status": res.status, "message": res.message,
                "final_area_ratio": res.final_area_ratio,
                "asphericity": asphericity(res.state.positions),
                "rescales": res.rescales, "steps": res.trajectory[-1]["step"]},
               out / "summary.json")
    if res.status == "breakdown":
        print(f"fpflow mcf: {res.message}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_converge_time(cfg, out):
    rep = temporal_study(orders=cfg.orders, inv_taus=cfg.inv_taus, n_points=cfg.resolution,
                         eta=cfg.eta, T=cfg.T, k=cfg.k, bootstrap=cfg.bootstrap)
    rep.write(out)
    return EXIT_OK


def cmd_converge_space(cfg, out):
    amplitude = float(cfg.velocity_params.get("amplitude", 500.0))
    rep = spatial_study(etas=cfg.etas, sizes=cfg.sizes, tau=cfg.tau, T=cfg.T,
                        R=float(cfg.surface_params.get("R", 1.0)),
                        r=float(cfg.surface_params.get("r", 0.5)), amplitude=amplitude, k=cfg.k)
    rep.write(out)
    return EXIT_OK


def cmd_gen_surface(cfg, out):
    X = _cloud(cfg)
    path = Path(cfg.output) if cfg.output else out / f"{cfg.surface}.ply"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_cloud(X, path)
    print(f"wrote {X.shape[0]} points to {path}")
    return EXIT_OK


COMMANDS = {
    "evolve": cmd_evolve,
    "redistribute": cmd_redistribute,
    "match-target": cmd_match_target,
    "mcf": cmd_mcf,
    "converge-time": cmd_converge_time,
    "converge-space": cmd_converge_space,
    "gen-surface": cmd_gen_surface,
}

# flag name -> (RunConfig key, argparse kwargs)
_FLAGS = {
    "--surface": ("surface", {}),
    "--resolution": ("resolution", {"type": int}),
    "--surface-params": ("surface_params", {"help": "JSON object"}),
    "--input": ("input", {"help": "PLY or CSV point cloud"}),
    "--velocity": ("velocity", {}),
    "--velocity-params": ("velocity_params", {"help": "JSON object"}),
    "--eta": ("eta", {"type": float}),
    "--tau": ("tau", {"type": float}),
    "--T": ("T", {"type": float, "help": "final time"}),
    "--order": ("order", {"type": int}),
    "--bootstrap": ("bootstrap", {"choices": ["rk4", "extrapolated_euler"]}),
    "--k": ("k", {"type": int, "help": "neighbors per stencil"}),
    "--margin": ("margin", {"type": float}),
    "--tau-tilde": ("tau_tilde", {"type": float}),
    "--eps0": ("eps0", {"type": float}),
    "--max-iter": ("max_iter", {"type": int}),
    "--target": ("target", {}),
    "--theta": ("theta", {"type": float}),
    "--redistribute-every": ("redistribute_every", {"type": int}),
    "--stop-area-ratio": ("stop_area_ratio", {"type": float}),
    "--max-steps": ("max_steps", {"type": int}),
    "--orders": ("orders", {"help": "comma separated"}),
    "--inv-taus": ("inv_taus", {"help": "comma separated"}),
    "--sizes": ("sizes", {"help": "comma separated"}),
    "--etas": ("etas", {"help": "comma separated"}),
    "--bins": ("bins", {"type": int}),
    "--out": ("out", {"help": "output directory"}),
    "--output": ("output", {"help": "gen-surface output file"}),
    "--snapshot-stride": ("snapshot_stride", {"type": int}),
    "--seed": ("seed", {"type": int}),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fpflow", description="Point-cloud surface evolution with Fokker-Planck redistribution.")
    parser.add_argument("--version", action="version", version=f"fpflow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON file of settings")
        for flag, (dest, kw) in _FLAGS.items():
            p.add_argument(flag, dest=dest, default=None, **kw)
        p.add_argument("--full", action="store_true", default=None,
                       help="paper-scale sizes for convergence studies")
    return parser


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(command, cfg):
    """Run ``command`` with a resolved :class:`RunConfig`; returns the exit status."""
    out = Path(cfg.out)
    echo_config(cfg, out)
    t0 = time.perf_counter()
    status = COMMANDS[command](cfg, out)
    print(f"fpflow {command}: done in {time.perf_counter() - t0:.1f}s, outputs in {out}")
    return status


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config") and v is not None}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        limiter = _limit_threads()
        try:
            return run(args.command, cfg)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except _NUMERIC_ERRORS as exc:
        print(f"fpflow {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _CONFIG_ERRORS as exc:
        print(f"fpflow {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FpflowError as exc:
        print(f"fpflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
