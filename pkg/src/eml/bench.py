"""Benchmark harness: sweeps over N, L or P with one CSV/JSON row per run.

Every row carries the full configuration needed to re-run it on its own
(axis, grid point, N, L, P, sigma, lambda, seed, exp settings). Rows are
appended to the CSV as they finish, so a failure part-way through still
leaves the completed rows on disk.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import stats

from .datasets import featurize, split_indices, synthetic_qm9
from .emulate import emulate_predict
from .field import FixedPointParams
from .krr import KrrModel, cross_validate, mae, predict_plaintext, train
from .molrep import DEFAULT_N_MAX, read_properties, read_xyz, truncate_vectors
from .mpc import ExpConfig
from .protocol import cost_model, run_local

log = logging.getLogger(__name__)

AXES = ("N", "L", "P")
MODES = ("encrypted", "emulate")
ROW_FIELDS = ("axis", "value", "rep", "mode", "kind", "N", "L", "P", "queries", "mae", "mae_plain",
              "delta", "bytes", "setup_bytes", "t", "sigma", "lam", "seed", "exp")

DEFAULT_SIGMAS = tuple(float(2 ** k) for k in range(4, 12))
DEFAULT_LAMS = (1e-2, 1e-4, 1e-6, 1e-8)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    kind: str = "CM"
    unit: str = "kcal/mol"

    @property
    def L(self) -> int:
        return self.X.shape[1]


def load_dataset(kind: str = "CM", synthetic: Optional[int] = None, xyz=None, props=None,
                 n_test: int = 20, seed: int = 0, n_max: int = DEFAULT_N_MAX) -> Dataset:
    """Synthetic molecules or an xyz file (labels from ``props`` or comment lines)."""
    if xyz is not None:
        mols = read_xyz(xyz, property_from_comment=None if props else 1)
        unit = ""
        if props:
            table = read_properties(props)
            unit = table.unit
            y = np.array([table[m.name] for m in mols])
        else:
            y = np.array([m.property for m in mols])
    else:
        syn = synthetic_qm9(synthetic or 1000, seed=seed, n_max=n_max)
        mols, y, unit = syn.molecules, syn.energies, syn.unit
    X = featurize(mols, kind, n_max)
    if n_test >= len(y):
        raise ValueError(f"need more than {n_test} molecules for a {n_test}-molecule test set")
    tr, te = split_indices(len(y), n_test, seed)
    return Dataset(X[tr], y[tr], X[te], y[te], kind, unit or "kcal/mol")


@dataclass
class BenchSpec:
    """One sweep. Axes not being swept take the fixed ``N``, ``L`` and ``P``.

    ``L=None`` keeps the full representation length. ``mode="emulate"``
    replaces the encrypted run by its bit-exact plaintext emulation and the
    measured traffic by the cost model (no timing). ``link_mbps`` times
    encrypted runs over an emulated link of that rate.
    """

    axis: str
    grid: Sequence[int]
    N: int = 64
    L: Optional[int] = None
    P: int = 42
    repetitions: int = 1
    queries: int = 20
    sigma: Optional[float] = None
    lam: Optional[float] = None
    seed: int = 0
    mode: str = "encrypted"
    link_mbps: Optional[float] = None
    exp: ExpConfig = field(default_factory=ExpConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"sweep axis must be one of {AXES}, got {self.axis!r}")
        g = [int(v) for v in self.grid]
        if not g:
            raise ValueError("grid must be nonempty")
        if any(b <= a for a, b in zip(g, g[1:])):
            raise ValueError("grid must be strictly increasing")
        self.grid = g
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.link_mbps is not None and not self.link_mbps > 0:
            raise ValueError("link rate must be positive")

    def point(self, value: int) -> tuple[int, Optional[int], int]:
        N, L, P = self.N, self.L, self.P
        if self.axis == "N":
            N = value
        elif self.axis == "L":
            L = value
        else:
            P = value
        return N, L, P


@dataclass
class BenchRow:
    axis: str
    value: int
    rep: int
    mode: str
    kind: str
    N: int
    L: int
    P: int
    queries: int
    mae: float
    mae_plain: float
    delta: float
    bytes: float
    setup_bytes: int
    t: float
    sigma: float
    lam: float
    seed: int
    exp: str

    def as_dict(self) -> dict:
        return asdict(self)


def choose_hyperparameters(data: Dataset, N: int, sigmas=DEFAULT_SIGMAS, lams=DEFAULT_LAMS,
                           seed: int = 0) -> tuple[float, float]:
    """Five-fold CV on the largest training set of the sweep."""
    res = cross_validate(data.X[:N], data.y[:N], sigmas, lams, folds=5, seed=seed, center=True)
    log.info("cv picked sigma=%g lambda=%g (MAE %.4g)", res.sigma, res.lam, res.mae)
    return res.sigma, res.lam


def run_point(model: KrrModel, XQ, yq, params: FixedPointParams, cfg: ExpConfig, mode: str,
              seed: int, link_mbps: Optional[float] = None) -> tuple[np.ndarray, float, float, int]:
    """Predictions, bytes per query, seconds per query and setup bytes."""
    if mode == "emulate":
        preds = emulate_predict(model, XQ, params, cfg)
        cm = cost_model(model.N, model.L, params, cfg)
        return preds, float(cm.bytes_per_query), float("nan"), cm.setup_bytes
    rep = run_local(model, XQ, params, cfg, seed=seed, y_true=yq, link_mbps=link_mbps)
    return rep.predictions, rep.bytes_per_query, rep.time_per_query, rep.setup_bytes


def run_bench(spec: BenchSpec, data: Dataset, csv_path=None) -> Iterator[BenchRow]:
    """Yield rows in grid order; each is appended to ``csv_path`` when done."""
    largest_N = max(spec.grid) if spec.axis == "N" else spec.N
    if largest_N > len(data.y):
        raise ValueError(f"N={largest_N} exceeds the {len(data.y)} available training molecules")
    sigma, lam = spec.sigma, spec.lam
    if sigma is None or lam is None:
        cs, cl = choose_hyperparameters(data, largest_N, seed=spec.seed)
        sigma = cs if sigma is None else sigma
        lam = cl if lam is None else lam
    writer = None
    fh = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=ROW_FIELDS)
        writer.writeheader()
        fh.flush()
    try:
        XQ_full = data.Xt[:spec.queries]
        yq = data.yt[:spec.queries]
        for value in spec.grid:
            N, L, P = spec.point(value)
            L = L or data.L
            X = truncate_vectors(data.X[:N], L)
            XQ = truncate_vectors(XQ_full, L)
            model = train(X, data.y[:N], sigma, lam, unit=data.unit, center=True)
            params = FixedPointParams.from_precision(P)
            plain = predict_plaintext(model, XQ)
            for rep in range(spec.repetitions):
                seed = spec.seed + rep
                preds, nbytes, t, setup = run_point(model, XQ, yq, params, spec.exp, spec.mode, seed,
                                                   spec.link_mbps)
                row = BenchRow(spec.axis, value, rep, spec.mode, data.kind, N, L, P, len(yq),
                               mae(preds, yq), mae(plain, yq), mae(preds, plain), nbytes, setup,
                               t, float(sigma), float(lam), seed, json.dumps(spec.exp.as_dict()))
                if writer is not None:
                    writer.writerow(row.as_dict())
                    fh.flush()
                log.info("%s=%d rep %d: delta=%.3g bytes=%.0f t=%.3f", spec.axis, value, rep,
                         row.delta, row.bytes, row.t)
                yield row
    finally:
        if fh is not None:
            fh.close()


def write_json(rows: Sequence[BenchRow], path, fits: Optional[dict] = None) -> None:
    blob = {"rows": [r.as_dict() for r in rows], "fits": fits or {}}
    Path(path).write_text(json.dumps(blob, indent=2, default=float))


def read_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            conv = {}
            for k in ROW_FIELDS:
                v = rec[k]
                if k in ("axis", "mode", "kind", "exp"):
                    conv[k] = v
                elif k in ("value", "rep", "N", "L", "P", "queries", "setup_bytes", "seed"):
                    conv[k] = int(v)
                else:
                    conv[k] = float(v)
            out.append(BenchRow(**conv))
    return out


# -- fits ---------------------------------------------------------------------------------

@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float


def linear_fit(x, y) -> LinearFit:
    res = stats.linregress(np.asarray(x, float), np.asarray(y, float))
    return LinearFit(float(res.slope), float(res.intercept), float(res.rvalue ** 2))


def pearson(x, y) -> float:
    return float(stats.pearsonr(np.asarray(x, float), np.asarray(y, float))[0])


@dataclass
class QuadraticTest:
    coeffs: tuple          # (c, b, a) for c*x^2 + b*x + a
    F: float
    p_value: float


def quadratic_f_test(x, y) -> QuadraticTest:
    """Nested-model F test of ``a + b x + c x^2`` against ``a + b x``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    n = len(x)
    if n < 4:
        raise ValueError("need at least four points for a quadratic F test")
    q = np.polyfit(x, y, 2)
    lin = np.polyfit(x, y, 1)
    rss2 = float(np.sum((y - np.polyval(q, x)) ** 2))
    rss1 = float(np.sum((y - np.polyval(lin, x)) ** 2))
    df = n - 3
    if rss2 == 0.0:
        return QuadraticTest(tuple(q), math.inf, 0.0)
    F = (rss1 - rss2) / (rss2 / df)
    return QuadraticTest(tuple(float(c) for c in q), float(F), float(stats.f.sf(F, 1, df)))


def summarize(rows: Sequence[BenchRow]) -> dict:
    """Fits along the swept axis, averaged over repetitions."""
    if not rows:
        return {}
    axis = rows[0].axis
    vals = sorted({r.value for r in rows})

    def mean_of(attr):
        return [float(np.mean([getattr(r, attr) for r in rows if r.value == v])) for v in vals]

    D, t, delta = mean_of("bytes"), mean_of("t"), mean_of("delta")
    out = {"axis": axis, "grid": vals, "bytes": D, "t": t, "delta": delta}
    if len(vals) >= 2:
        out["bytes_fit"] = asdict(linear_fit(vals, D))
        if all(np.isfinite(t)):
            out["t_fit"] = asdict(linear_fit(vals, t))
            out["r_bytes_t"] = pearson(D, t) if len(vals) > 2 else float("nan")
    if axis == "P" and len(vals) >= 4 and all(np.isfinite(t)):
        out["t_quadratic"] = asdict(quadratic_f_test(vals, t))
    return out


def plot_rows(rows: Sequence[BenchRow], path) -> None:
    """Bytes, time and deviation against the swept axis (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = summarize(rows)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for ax, key, label in zip(axes, ("bytes", "t", "delta"),
                              ("bytes per query", "seconds per query", "mean |enc - plain|")):
        ax.plot(s["grid"], s[key], "o-")
        ax.set_xlabel(s["axis"])
        ax.set_ylabel(label)
        if key == "delta":
            ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

