"""Text file formats: datasets, trained feature models, masks, CSV reports.

All writers go through :func:`atomic_write` (temp file in the target
directory, then rename) so an interrupted run never leaves a torn file.
Floats are written with 17 significant digits, which round-trips IEEE
doubles exactly.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile

import numpy as np

from .errors import ParseError
from .latent import AutoencoderModel, Dense, NormRecord, PcaModel
from .rodsim import Centerline, GraspPose

FLOAT_FMT = "%.17g"


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_row(values) -> str:
    return " ".join(FLOAT_FMT % v for v in np.asarray(values, dtype=float).ravel())


def _floats(tokens, what):
    try:
        return np.array([float(t) for t in tokens], dtype=float)
    except ValueError as exc:
        raise ParseError(f"bad number in {what}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def format_dataset(commands, centerlines) -> str:
    """Header ``q N`` then one row per sample: q commands, 2N coordinates."""
    R = np.atleast_2d(np.asarray(commands, dtype=float))
    C = np.atleast_2d(np.asarray(centerlines, dtype=float))
    if R.shape[0] != C.shape[0]:
        raise ValueError("commands and centerlines differ in length")
    buf = io.StringIO()
    buf.write(f"{R.shape[1]} {C.shape[1] // 2}\n")
    np.savetxt(buf, np.hstack([R, C]), fmt=FLOAT_FMT)
    return buf.getvalue()


def save_dataset(path, pairs) -> None:
    """Write (GraspPose, Centerline) pairs as produced by ``generate_dataset``."""
    commands = np.array([g.as_command() for g, _ in pairs])
    flats = np.array([c.flat for _, c in pairs])
    atomic_write(path, format_dataset(commands, flats))


def parse_dataset(text: str):
    """Return ``(commands (n, q), centerlines (n, 2N))``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty dataset file")
    head = lines[0].split()
    if len(head) != 2:
        raise ParseError("dataset header must be 'q N'")
    try:
        q, N = int(head[0]), int(head[1])
    except ValueError as exc:
        raise ParseError(f"bad dataset header: {exc}") from exc
    if q < 1 or N < 2:
        raise ParseError(f"dataset header out of range: q={q} N={N}")
    width = q + 2 * N
    rows = np.empty((len(lines) - 1, width))
    for i, ln in enumerate(lines[1:]):
        tok = ln.split()
        if len(tok) != width:
            raise ParseError(f"row {i + 1} has {len(tok)} values, expected {width}")
        rows[i] = _floats(tok, f"row {i + 1}")
    return rows[:, :q], rows[:, q:]


def load_dataset(path):
    with open(path) as fh:
        return parse_dataset(fh.read())


def dataset_pairs(commands, flats):
    return [(GraspPose.from_command(r), Centerline.from_flat(c)) for r, c in zip(commands, flats)]


# ---------------------------------------------------------------------------
# feature models
# ---------------------------------------------------------------------------

def format_autoencoder(model: AutoencoderModel) -> str:
    out = [f"DAEv1 {model.N} {model.p}",
           "norm " + _fmt_row(np.concatenate([model.norm.lo, model.norm.hi])),
           f"layers {len(model.encoder)} {len(model.decoder)}"]
    for layer in model.layers:
        out.append(f"layer {layer.n_in} {layer.n_out} {layer.activation}")
        for row in layer.W:
            out.append(_fmt_row(row))
        out.append(_fmt_row(layer.b))
        if layer.bn is not None:
            out.append(f"bn {layer.n_out}")
            for key in ("gamma", "beta", "mean", "var"):
                out.append(_fmt_row(layer.bn[key]))
    return "\n".join(out) + "\n"


def format_pca(model: PcaModel) -> str:
    out = [f"PCAv1 {model.N} {model.k}", _fmt_row(model.mean)]
    # one line per component, i.e. the transpose of the (2N, k) matrix
    for col in model.components.T:
        out.append(_fmt_row(col))
    return "\n".join(out) + "\n"


def save_model(path, model) -> None:
    text = format_pca(model) if isinstance(model, PcaModel) else format_autoencoder(model)
    atomic_write(path, text)


class _Lines:
    def __init__(self, text):
        self._lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        self._i = 0

    def next(self, what):
        if self._i >= len(self._lines):
            raise ParseError(f"model file truncated while reading {what}")
        tok = self._lines[self._i]
        self._i += 1
        return tok

    def peek(self):
        return self._lines[self._i] if self._i < len(self._lines) else None

    def floats(self, n, what):
        vals = _floats(self.next(what), what)
        if vals.size != n:
            raise ParseError(f"{what}: expected {n} values, got {vals.size}")
        return vals


def _parse_autoencoder(lines: _Lines, N: int, p: int) -> AutoencoderModel:
    tok = lines.next("norm")
    if tok[0] != "norm":
        raise ParseError("expected 'norm' record")
    nr = _floats(tok[1:], "norm")
    if nr.size != 4:
        raise ParseError("norm record needs 4 values")
    norm = NormRecord(nr[:2], nr[2:])
    tok = lines.next("layers")
    if tok[0] != "layers" or len(tok) != 3:
        raise ParseError("expected 'layers <n_enc> <n_dec>'")
    n_enc, n_dec = int(tok[1]), int(tok[2])
    layers = []
    for _ in range(n_enc + n_dec):
        tok = lines.next("layer header")
        if tok[0] != "layer" or len(tok) != 4:
            raise ParseError("expected 'layer <in> <out> <activation>'")
        n_in, n_out, act = int(tok[1]), int(tok[2]), tok[3]
        W = np.array([lines.floats(n_in, "weights") for _ in range(n_out)])
        b = lines.floats(n_out, "biases")
        bn = None
        nxt = lines.peek()
        if nxt is not None and nxt[0] == "bn":
            lines.next("bn")
            bn = {key: lines.floats(n_out, f"bn {key}") for key in ("gamma", "beta", "mean", "var")}
        layers.append(Dense(W, b, act, bn))
    model = AutoencoderModel(layers[:n_enc], layers[n_enc:], norm, N, p)
    w = model.widths
    if w[0] != 2 * N or w[-1] != 2 * N or w[n_enc] != p:
        raise ParseError(f"layer widths {w} inconsistent with N={N}, p={p}")
    return model


def parse_model(text: str):
    lines = _Lines(text)
    head = lines.next("header")
    if len(head) != 3 or head[0] not in ("DAEv1", "PCAv1"):
        raise ParseError(f"unknown model header {' '.join(head)!r}")
    N, k = int(head[1]), int(head[2])
    if head[0] == "DAEv1":
        return _parse_autoencoder(lines, N, k)
    mean = lines.floats(2 * N, "mean")
    comps = np.array([lines.floats(2 * N, "component") for _ in range(k)]).reshape(k, 2 * N)
    return PcaModel(mean, comps.T.copy())


def load_model(path):
    with open(path) as fh:
        return parse_model(fh.read())


# ---------------------------------------------------------------------------
# masks and reports
# ---------------------------------------------------------------------------

def save_mask(path, mask) -> None:
    from .centerline import format_pgm
    atomic_write(path, format_pgm(mask))


def format_points(points) -> str:
    """``u v`` rows, one point per line."""
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(points, dtype=float), fmt=FLOAT_FMT)
    return buf.getvalue()


def format_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([FLOAT_FMT % v if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write(path, format_csv(header, rows))
