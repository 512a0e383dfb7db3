"""Experiment harness: flat configs, protocol runners and reports.

Each experiment kind reads one flat ``key = value`` config, runs under a
single seed and returns a :class:`Report` whose every table row carries the
seed and a hash of the exact config that produced it.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import centerline as cl
from . import fileio, latent, servo
from . import jacobian as jb
from .errors import ConfigError, DivergenceDetected, Unreachable
from .rodsim import (EPS_REACH, Centerline, GraspPose, RodParams, RodPlant, WorkspaceBox,
                     generate_dataset, rasterize_mask, sample_centerline, solve_shape,
                     to_pixels)

KINDS = ("gen-dataset", "train-dae", "eval-features", "extract-centerline",
         "validate-jacobian", "servo", "stability-check")
METHOD_ORDER = ("R1", "SR1", "DFP", "BFGS")

# desk-scale defaults shared by every protocol
DEFAULTS = {
    "length": 1.0,
    "n_segments": 100,
    "n_points": 50,
    "box_lo": "0.2,0.2",
    "box_hi": "0.6,0.6",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not key.replace("_", "").replace("-", "").isalnum():
            raise ConfigError(f"line {lineno}: bad key {key!r}")
        key = key.replace("-", "_")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = value
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_hash(kind: str, config: dict, seed: int) -> str:
    blob = json.dumps({"kind": kind, "seed": seed, "config": config}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Settings:
    """Typed read access to a flat config with defaults."""

    def __init__(self, values: dict):
        self.values = dict(values)

    def _raw(self, key, default):
        if key in self.values:
            return self.values[key]
        if default is not None:
            return default
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise ConfigError(f"missing required config key {key!r}")

    def has(self, key) -> bool:
        return key in self.values

    def str(self, key, default=None) -> str:
        return str(self._raw(key, default))

    def int(self, key, default=None) -> int:
        raw = self._raw(key, default)
        try:
            return int(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from exc

    def float(self, key, default=None) -> float:
        raw = self._raw(key, default)
        try:
            return float(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from exc

    def floats(self, key, default=None) -> np.ndarray:
        raw = self._raw(key, default)
        try:
            if isinstance(raw, str):
                return np.array([float(t) for t in raw.replace(",", " ").split()])
            return np.atleast_1d(np.asarray(raw, dtype=float))
        except ValueError as exc:
            raise ConfigError(f"{key} must be a list of numbers, got {raw!r}") from exc

    def list(self, key, default=None) -> list:
        raw = self._raw(key, default)
        return [t for t in str(raw).replace(",", " ").split() if t]

    def bool(self, key, default=None) -> bool:
        raw = str(self._raw(key, default)).lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")


@dataclass
class ExperimentSpec:
    kind: str
    config: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "."
    config_path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")

    @property
    def hash(self) -> str:
        return config_hash(self.kind, self.config, self.seed)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class Table:
    name: str
    header: list
    rows: list


@dataclass
class Report:
    kind: str
    seed: int
    config_hash: str
    tables: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    def add(self, name, header, rows):
        """Add a table; seed and config hash are appended to every row."""
        rows = [list(r) + [self.seed, self.config_hash] for r in rows]
        self.tables[name] = Table(name, list(header) + ["seed", "config_hash"], rows)
        return self.tables[name]

    def __getitem__(self, name) -> Table:
        return self.tables[name]

    def column(self, table, col):
        t = self.tables[table]
        i = t.header.index(col)
        return [r[i] for r in t.rows]

    def write_csv(self, name, path):
        t = self.tables[name]
        fileio.write_csv(path, t.header, t.rows)
        self.artifacts.append(os.fspath(path))


def _plot_value(v):
    if isinstance(v, (float, np.floating)):
        return fileio.FLOAT_FMT % v
    return str(v).replace(" ", "_")


# figure-analog column selections; tables with a method column get one file per method
PLOT_COLUMNS = {
    "trace": ("step", "T3"),
    "jacobian": ("step", "T1", "T2"),
    "features": ("method", "dim", "mean_error"),
    "training": ("epoch", "train_mse", "val_mse"),
    "stability": ("step", "error_norm"),
}
_SPLIT_BY_METHOD = ("trace", "jacobian")


def _plot_files(report: Report):
    for name, t in report.tables.items():
        cols = PLOT_COLUMNS.get(name, t.header[:-2])
        idx = [t.header.index(c) for c in cols]
        if name in _SPLIT_BY_METHOD:
            m = t.header.index("method")
            groups = {}
            for row in t.rows:
                groups.setdefault(row[m], []).append(row)
            for method, rows in groups.items():
                yield f"{name}_{method}", cols, [[r[i] for i in idx] for r in rows]
        else:
            yield name, cols, [[r[i] for i in idx] for r in t.rows]


def emit_plotdata(report: Report, path) -> list:
    """Whitespace-delimited ``.dat`` files, column header comment on line 1.

    Line 2 is a comment with the seed and config hash.  Every file is
    rendered before any is written, so an empty report leaves nothing
    behind.
    """
    if not report.tables or not any(t.rows for t in report.tables.values()):
        raise ValueError("report has no rows to plot")
    rendered = {}
    for name, cols, rows in _plot_files(report):
        lines = ["# " + " ".join(cols), f"# seed {report.seed} config {report.config_hash}"]
        lines += [" ".join(_plot_value(v) for v in row) for row in rows]
        rendered[name] = "\n".join(lines) + "\n"
    written = []
    for name, text in rendered.items():
        target = os.path.join(os.fspath(path), f"{name}.dat")
        fileio.atomic_write(target, text)
        written.append(target)
    return written


# ---------------------------------------------------------------------------
# shared protocol pieces
# ---------------------------------------------------------------------------

def rod_setup(s: Settings):
    params = RodParams(length=s.float("length"), n_segments=s.int("n_segments"))
    box = WorkspaceBox(tuple(s.floats("box_lo")), tuple(s.floats("box_hi")))
    return params, box, s.int("n_points")


def circle_trajectory(center, radius: float, n_steps: int, params: RodParams | None = None) -> np.ndarray:
    """``n_steps + 1`` poses tracing a counterclockwise circle from angle 0.

    The last pose is set equal to the first so the loop closes exactly;
    ``np.diff`` of the result gives the incremental commands.
    """
    params = params or RodParams()
    center = np.asarray(center, dtype=float)
    if radius < 0 or n_steps < 1:
        raise ValueError("radius must be >= 0 and n_steps >= 1")
    reach = params.length * (1 - EPS_REACH)
    if np.linalg.norm(center - params.base) + radius > reach:
        raise Unreachable(f"circle leaves the reachable disk of radius {reach:g}")
    ang = 2 * np.pi * np.arange(n_steps + 1) / n_steps
    poses = center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    poses[-1] = poses[0]
    return poses


@dataclass
class JacobianRun:
    method: str
    T1: np.ndarray
    T2: np.ndarray
    skips: np.ndarray


@dataclass
class JacobianValidation:
    runs: dict
    reference_T1: np.ndarray  # drift of the frozen initial estimate
    features: np.ndarray
    poses: np.ndarray
    init_residual: float


def jacobian_validation(encoder, params: RodParams, box: WorkspaceBox, center, radius,
                        n_steps, methods=METHOD_ORDER, magnitude=None, N=50,
                        seed=0) -> JacobianValidation:
    """Estimate the Jacobian online along a circle and score it with T1/T2.

    All methods start from the same probed initial estimate and see the
    same feature sequence.  T2 uses the estimate held before the step's
    update; the open-loop prediction for T1 is propagated with the same
    estimate.
    """
    poses = circle_trajectory(center, radius, n_steps, params)
    plant = RodPlant(params, poses[0], N=N, box=box)
    magnitude = 0.005 * box.diameter if magnitude is None else magnitude
    probe = lambda r: encoder(plant.apply(r))
    init = jb.init_estimate(probe, poses[0], magnitude, 2, len(encoder(plant.measure())), seed=seed)
    feats = [np.asarray(encoder(plant.measure()), dtype=float)]
    for r in poses[1:]:
        feats.append(np.asarray(encoder(plant.apply(r)), dtype=float))
    S = np.array(feats)
    U = np.diff(poses, axis=0)

    runs = {}
    for method in methods:
        est = init.estimate.with_method(method)
        s_hat = S[0].copy()
        T1, T2, skips = [], [], []
        for k in range(n_steps):
            pair = jb.DiffPair(S[k + 1] - S[k], U[k])
            T2.append(jb.criterion_T2(pair, est))
            s_hat = jb.propagate(s_hat, est, U[k])
            T1.append(jb.criterion_T1(S[k + 1], s_hat))
            if np.linalg.norm(U[k]) >= jb.MIN_STEP:
                est = jb.update(est, pair)
            skips.append(est.skip_count)
        runs[est.method] = JacobianRun(est.method, np.array(T1), np.array(T2), np.array(skips))
    J0 = init.estimate.J_hat
    ref = np.linalg.norm(S[1:] - S[0] - np.cumsum(U @ J0.T, axis=0), axis=1)
    return JacobianValidation(runs, ref, S, poses, init.residual)


def servo_pair(params, box, rng, min_distance=0.05):
    """Random start/target commands inside the box, at least ``min_distance`` apart."""
    while True:
        r0 = rng.uniform(box.lo_arr, box.hi_arr)
        rt = rng.uniform(box.lo_arr, box.hi_arr)
        if np.linalg.norm(r0 - rt) >= min_distance:
            return r0, rt


@dataclass
class ServoResult:
    method: str
    trial: int
    steps: int
    converged: bool
    diverged: bool
    seconds: float
    trace: servo.ServoTrace


def servo_trials(encoder, params, box, n_trials, methods=METHOD_ORDER, cfg=None,
                 N=50, seed=0, on_result=None) -> list:
    """Closed-loop runs from random starts to random recorded target shapes.

    The target shape is recorded by moving the plant to the target command
    first, then the plant restarts at the start command (same equilibrium
    branch for both).  A diverged run counts as ``max_steps`` steps.
    """
    cfg = cfg or servo.ServoConfig()
    rng = np.random.default_rng(seed)
    out = []
    for trial in range(n_trials):
        r0, rt = servo_pair(params, box, rng)
        target = RodPlant(params, rt, N=N, box=box).measure()
        for method in methods:
            plant = RodPlant(params, r0, N=N, box=box)
            t0 = time.perf_counter()
            try:
                trace = servo.run_loop(plant, encoder, method, cfg, target, seed=seed + trial)
                diverged = False
            except DivergenceDetected as exc:
                trace, diverged = exc.trace, True
            steps = trace.steps if trace.converged else cfg.max_steps
            res = ServoResult(trace.method, trial, steps, trace.converged, diverged,
                              time.perf_counter() - t0, trace)
            out.append(res)
            if on_result is not None:
                on_result(res)
    return out


def synthetic_masks(n, params=None, box=None, rng=None, image_size=(640, 480),
                    width_px=6.0, scale=400.0, origin=(150.0, 330.0), noise=0.01, N=50):
    """Rasterized rods at random grasps, with salt noise.

    Yields ``(mask, truth_px, anchor_px)``; ``truth_px`` is the rod polyline
    in pixels and the anchor is the fixed base, standing in for the marker
    point the chain is sorted from.
    """
    params = params or RodParams()
    box = box or WorkspaceBox((0.2, 0.2), (0.6, 0.6))
    rng = rng if rng is not None else np.random.default_rng(0)
    for _ in range(n):
        r = rng.uniform(box.lo_arr, box.hi_arr)
        config = solve_shape(params, GraspPose(tuple(r)))
        truth = to_pixels(config.positions, scale, origin)
        mask = rasterize_mask(truth, image_size, width_px, scale)
        if noise > 0:
            mask = cl.add_salt_noise(mask, noise, rng)
        yield mask, truth, truth[0]


# ---------------------------------------------------------------------------
# experiment kinds
# ---------------------------------------------------------------------------

def _out(spec: ExperimentSpec, s: Settings, key, default_name):
    path = s.str(key, default_name)
    return path if os.path.isabs(path) else os.path.join(spec.out_dir, path)


def _encoder_from(s: Settings, spec: ExperimentSpec, params, box, N):
    """Encoder from ``model``; without one, PCA on a fresh small dataset."""
    if s.has("model"):
        model = fileio.load_model(s.str("model"))
    else:
        pairs = generate_dataset(params, box, s.int("pca_samples", 500), spec.seed, N=N)
        model = latent.pca_fit(np.array([c.flat for _, c in pairs]), s.int("p", 4))
    return latent.feature_fn(model), model


def _servo_config(s: Settings) -> servo.ServoConfig:
    limits = tuple(s.floats("limits")) if s.has("limits") else None
    return servo.ServoConfig(horizon=s.int("horizon", 10), alpha=s.float("alpha", 0.9),
                             rho=s.float("rho", 0.1), Q=s.float("q_scale", 0.1), limits=limits,
                             max_steps=s.int("max_steps", 200), threshold=s.float("threshold", 0.05),
                             horizon_mode=s.str("horizon_mode", "integral"))


def _methods(s: Settings):
    methods = [m.upper() for m in s.list("method", "all")]
    if methods == ["ALL"]:
        return list(METHOD_ORDER)
    bad = [m for m in methods if m not in jb.METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; expected {jb.METHODS}")
    return methods


def _run_gen_dataset(spec, s, rep):
    params, box, N = rod_setup(s)
    n = s.int("n_samples", 5000)
    t0 = time.perf_counter()
    pairs = generate_dataset(params, box, n, spec.seed, N=N)
    out = _out(spec, s, "out", "dataset.txt")
    fileio.save_dataset(out, pairs)
    rep.artifacts.append(out)
    rep.add("dataset", ["n_samples", "q", "N", "seconds"],
            [[n, pairs[0][0].q, N, time.perf_counter() - t0]])


def _run_train_dae(spec, s, rep):
    _, X = fileio.load_dataset(s.str("dataset"))
    hidden = tuple(int(h) for h in s.floats("hidden", "256,64"))
    cfg = latent.TrainConfig(learning_rate=s.float("learning_rate", 1e-3),
                             batch_size=s.int("batch_size", 500), epochs=s.int("epochs", 50),
                             seed=spec.seed, val_fraction=s.float("val_fraction", 0.1),
                             patience=s.int("patience", 5),
                             lr_final=s.float("lr_final") if s.has("lr_final") else None,
                             hidden=hidden, batchnorm=s.bool("batchnorm", "false"),
                             latent_activation=s.str("latent_activation", "sigmoid"),
                             dtype=s.str("dtype", "float64"))
    t0 = time.perf_counter()
    model = latent.train_autoencoder(X, s.int("p", 4), cfg)
    out = _out(spec, s, "out", "dae.txt")
    fileio.save_model(out, model)
    rep.artifacts.append(out)
    h = model.history
    rep.add("training", ["epoch", "train_mse", "val_mse"],
            [[i, float(a), float(b)] for i, (a, b) in enumerate(zip(h["train"], h["val"]))])
    rep.add("summary", ["p", "epochs_run", "best_val_mse", "seconds"],
            [[model.p, len(h["train"]), float(min(h["val"])), time.perf_counter() - t0]])


def _run_eval_features(spec, s, rep):
    _, X = fileio.load_dataset(s.str("dataset"))
    _, test = latent.split_indices(len(X), s.float("val_fraction", 0.1), spec.seed)
    rows = []
    for path in s.list("models"):
        model = fileio.load_model(path)
        kind = "PCA" if isinstance(model, latent.PcaModel) else "DAE"
        err = latent.reconstruction_error(model, X[test])
        rows.append([os.path.basename(path), kind, model.p, float(np.mean(err)), len(test)])
    train = np.setdiff1d(np.arange(len(X)), test)
    for k in s.floats("pca").astype(int) if s.has("pca") else ():
        model = latent.pca_fit(X[train], int(k))
        err = latent.reconstruction_error(model, X[test])
        rows.append([f"pca{k}", "PCA", model.k, float(np.mean(err)), len(test)])
    if not rows:
        raise ConfigError("eval-features needs 'models' and/or 'pca'")
    rep.add("features", ["model", "method", "dim", "mean_error", "n_test"], rows)
    rep.write_csv("features", _out(spec, s, "report", "features.csv"))


def _run_extract_centerline(spec, s, rep):
    N = s.int("neurons", s.int("n_points"))
    som = cl.SomParams(n_neurons=N, epochs=s.int("epochs", 10),
                       initial_learning_rate=s.float("learning_rate", 0.5),
                       initial_radius=s.float("radius") if s.has("radius") else None,
                       seed=spec.seed)
    truth = None
    if s.has("mask"):
        with open(s.str("mask")) as fh:
            mask = cl.parse_pgm(fh.read())
        anchor = s.floats("anchor") if s.has("anchor") else None
    else:
        params, box, _ = rod_setup(s)
        rng = np.random.default_rng(spec.seed)
        mask, truth, anchor = next(synthetic_masks(1, params, box, rng,
                                                   width_px=s.float("width_px", 6.0),
                                                   noise=s.float("noise", 0.01)))
        fileio.save_mask(_out(spec, s, "mask_out", "mask.pgm"), mask)
    if s.bool("denoise", "true"):
        mask = cl.largest_component(mask)
    cloud = cl.cloud_from_mask(mask)
    chain = cl.som_fit(cloud, som)
    if anchor is None:
        anchor = chain.positions[0]
    t0 = time.perf_counter()
    line = cl.resample_equidistant(cl.sort_chain(chain, anchor), N)
    sort_s = time.perf_counter() - t0
    out = _out(spec, s, "out", "centerline.txt")
    fileio.atomic_write(out, fileio.format_points(line.points))
    rep.artifacts.append(out)
    t0 = time.perf_counter()
    km = cl.baseline_cluster(cloud, N, spec.seed)
    km_s = time.perf_counter() - t0
    rows = [["SOM", N, cloud.M, chain.fit_seconds + sort_s, line.gap_cv(),
             cl.centerline_error(line, truth) if truth is not None else float("nan")],
            ["CL", N, cloud.M, km_s, float("nan"),
             cl.centerline_error(km, truth) if truth is not None else float("nan")]]
    rep.add("centerline", ["method", "n_points", "n_pixels", "seconds", "gap_cv", "mean_error_px"], rows)


def _run_validate_jacobian(spec, s, rep):
    params, box, N = rod_setup(s)
    if s.str("trajectory", "circle") != "circle":
        raise ConfigError("only the 'circle' trajectory is available")
    methods = _methods(s)
    encoder, _ = _encoder_from(s, spec, params, box, N)
    val = jacobian_validation(encoder, params, box, s.floats("center", "0.4,0.4"),
                              s.float("radius", 0.05), s.int("n_steps", 360),
                              methods=methods, N=N, seed=spec.seed)
    rows, summary = [], []
    for m, run in val.runs.items():
        for k in range(run.T1.size):
            rows.append([k + 1, m, float(run.T1[k]), float(run.T2[k]), int(run.skips[k])])
        summary.append([m, float(run.T1.mean()), float(run.T1.max()), float(np.median(run.T2)),
                        float(run.T2.mean()), int(run.skips[-1])])
    rep.add("jacobian", ["step", "method", "T1", "T2", "skip_count"], rows)
    rep.add("jacobian_summary", ["method", "mean_T1", "max_T1", "median_T2", "mean_T2", "skips"],
            summary)
    rep.write_csv("jacobian", _out(spec, s, "out", "jacobian.csv"))


def _run_servo(spec, s, rep):
    methods = _methods(s)
    params, box, N = rod_setup(s)
    encoder, _ = _encoder_from(s, spec, params, box, N)
    cfg = _servo_config(s)
    start = s.floats("start", "0.35,0.45")
    if s.has("target"):
        with open(s.str("target")) as fh:
            target = Centerline(np.loadtxt(fh, ndmin=2))
        if target.N != N:
            raise ConfigError(f"target has {target.N} points, n_points is {N}")
    else:
        target = RodPlant(params, s.floats("target_command", "0.45,0.35"), N=N, box=box).measure()
    rows, summary = [], []
    q = start.size
    for method in methods:
        plant = RodPlant(params, start, N=N, box=box)
        t0 = time.perf_counter()
        try:
            trace = servo.run_loop(plant, encoder, method, cfg, target, seed=spec.seed)
            diverged = False
        except DivergenceDetected as exc:
            trace, diverged = exc.trace, True
        elapsed = time.perf_counter() - t0
        for k, t3, fe, u in trace.rows():
            rows.append([k, float(t3), float(fe), *[float(v) for v in u], trace.method])
        summary.append([trace.method, trace.steps, int(trace.converged), int(diverged),
                        float(trace.T3[-1]), elapsed])
    rep.add("trace", ["step", "T3", "feature_error_norm", *[f"u_{i + 1}" for i in range(q)], "method"],
            rows)
    rep.add("steps", ["method", "steps", "converged", "diverged", "final_T3", "seconds"], summary)
    rep.write_csv("trace", _out(spec, s, "out", "trace.csv"))


def _run_stability_check(spec, s, rep):
    cfg = _servo_config(s)
    p, q = s.int("p", 4), s.int("q", 4)
    rng = np.random.default_rng(spec.seed)
    J = rng.standard_normal((p, q))
    e0 = rng.standard_normal(p)
    norms = servo.stability_check(J, cfg, e0, s.int("n_steps", 100))
    rep.add("stability", ["step", "error_norm"], [[k, float(v)] for k, v in enumerate(norms)])
    q_scale = float(np.asarray(cfg.Q).ravel()[0])
    rep.add("contraction", ["J", "Q", "scalar_factor"],
            [[1.0, q_scale, servo.scalar_contraction(1.0, q_scale, cfg)]])


_RUNNERS = {
    "gen-dataset": _run_gen_dataset,
    "train-dae": _run_train_dae,
    "eval-features": _run_eval_features,
    "extract-centerline": _run_extract_centerline,
    "validate-jacobian": _run_validate_jacobian,
    "servo": _run_servo,
    "stability-check": _run_stability_check,
}


def run(spec: ExperimentSpec) -> Report:
    """Run one experiment; artifacts land in ``spec.out_dir``."""
    os.makedirs(spec.out_dir, exist_ok=True)
    if not os.access(spec.out_dir, os.W_OK):
        raise ConfigError(f"output directory {spec.out_dir} is not writable")
    rep = Report(spec.kind, spec.seed, spec.hash)
    _RUNNERS[spec.kind](spec, Settings(spec.config), rep)
    return rep
