"""Kernel ridge regression with a Gaussian kernel (plaintext side).

Training, the double-precision reference predictor, duplicate padding,
cross-validation and learning-curve fits all run in the clear on the data
holder's machine. The encrypted predictor lives in :mod:`eml.protocol`.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DimensionMismatch, ParseError, SingularKernel

log = logging.getLogger(__name__)

JITTER_RETRIES = 3


@dataclass
class KrrModel:
    """Training vectors, weights and the (public) kernel width.

    ``y_offset`` is added to every prediction (zero unless trained with
    ``center=True``). ``split_id`` fingerprints the training split.
    """

    X: np.ndarray
    alpha: np.ndarray
    sigma: float
    lam: float = 0.0
    unit: str = ""
    y_offset: float = 0.0
    split_id: str = ""
    residual: float = 0.0

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def L(self) -> int:
        return self.X.shape[1]


@dataclass
class LearningCurveFit:
    I: float
    S: float
    r2: float = float("nan")

    def predict(self, N) -> np.ndarray:
        return 10 ** (self.I - self.S * np.log10(np.asarray(N, dtype=float)))


def sq_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clipped at zero."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
    return np.maximum(d, 0.0)


def gaussian_kernel(A: np.ndarray, B: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-sq_distances(A, B) / (2 * sigma ** 2))


def split_fingerprint(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(y, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def train(X, y, sigma: float, lam: float = 0.0, unit: str = "", center: bool = False) -> KrrModel:
    """Solve ``(K + lam I) alpha = y`` by Cholesky.

    On factorization failure a positive regularizer is raised
    (``lam <- max(lam, 1e-10) * 10``) up to three times before giving up
    with :class:`SingularKernel`. ``lam == 0`` asks for exact interpolation
    and is never jittered.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 1:
        raise ValueError("need at least one training point")
    if X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} vectors but {y.shape[0]} labels")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    offset = float(y.mean()) if center else 0.0
    t = y - offset
    K = gaussian_kernel(X, X, sigma)
    n = K.shape[0]
    reg = lam
    retries = JITTER_RETRIES if lam > 0 else 0
    for attempt in range(retries + 1):
        try:
            A = K + reg * np.eye(n)
            c = cho_factor(A, lower=True, check_finite=True)
            # a numerically singular factor counts as a failure too
            if np.min(np.abs(np.diag(c[0]))) < 1e-7:
                raise LinAlgError("near-singular factor")
            alpha = cho_solve(c, t)
            res = np.linalg.norm(A @ alpha - t) / max(np.linalg.norm(t), 1e-300)
            if res > 1e-8 and attempt < retries:
                raise LinAlgError(f"residual {res:.2e}")
            if reg != lam:
                log.warning("kernel matrix needed jitter: lambda raised from %g to %g", lam, reg)
            return KrrModel(X, alpha, float(sigma), float(reg), unit, offset,
                            split_fingerprint(X, y), float(res))
        except LinAlgError:
            reg = max(reg, 1e-10) * 10
    raise SingularKernel(
        f"K + lambda*I is not positive definite (lambda={lam:g}, retries={retries}); "
        "increase lambda or remove duplicate training points")


def predict_plaintext(model: KrrModel, XQ) -> np.ndarray:
    """Double-precision reference predictions (scalar for one query vector)."""
    XQ = np.asarray(XQ, dtype=float)
    single = XQ.ndim == 1
    XQ = np.atleast_2d(XQ)
    if XQ.shape[1] != model.L:
        raise DimensionMismatch(f"query length {XQ.shape[1]} vs model length {model.L}")
    out = gaussian_kernel(XQ, model.X, model.sigma) @ model.alpha + model.y_offset
    return float(out[0]) if single else out


def pad_duplicates(model: KrrModel, count_range: Sequence[int] | int, rng=None) -> KrrModel:
    """Append duplicates of random training points without changing predictions.

    Each chosen point's weight is split evenly among itself and its copies,
    so the kernel sum is unchanged while the apparent training-set size grows.
    """
    rng = np.random.default_rng(rng)
    if isinstance(count_range, int):
        k = count_range
    else:
        lo_hi = list(count_range)
        if not lo_hi:
            raise ValueError("count_range must be nonempty")
        k = int(rng.integers(min(lo_hi), max(lo_hi) + 1))
    if k <= 0:
        return replace(model)
    picks = rng.integers(0, model.N, size=k)
    copies = np.bincount(picks, minlength=model.N)
    alpha = model.alpha / (1 + copies)
    X = np.concatenate([model.X, model.X[picks]])
    alpha = np.concatenate([alpha, alpha[picks]])
    return replace(model, X=X, alpha=alpha)


def fit_learning_curve(Ns, maes) -> LearningCurveFit:
    """Least-squares line ``log10 MAE = I - S log10 N``."""
    Ns = np.asarray(Ns, dtype=float)
    maes = np.asarray(maes, dtype=float)
    if Ns.size < 2 or Ns.size != maes.size:
        raise ValueError("need at least two (N, MAE) points")
    if np.any(Ns <= 0) or np.any(maes <= 0):
        raise ValueError("N and MAE must be positive")
    x, yv = np.log10(Ns), np.log10(maes)
    slope, intercept = np.polyfit(x, yv, 1)
    pred = intercept + slope * x
    ss_res = float(np.sum((yv - pred) ** 2))
    ss_tot = float(np.sum((yv - yv.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LearningCurveFit(float(intercept), float(-slope), r2)


def mae(pred, ref) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(ref))))


@dataclass
class CVResult:
    sigma: float
    lam: float
    mae: float
    table: list = field(default_factory=list)


def cross_validate(X, y, sigmas: Sequence[float], lams: Sequence[float], folds: int = 5,
                   seed: int = 0, center: bool = False) -> CVResult:
    """k-fold grid search over (sigma, lambda); singular grid points are skipped."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    folds = max(2, min(folds, n))
    perm = np.random.default_rng(seed).permutation(n)
    parts = np.array_split(perm, folds)
    table = []
    best = None
    for sigma, lam in itertools.product(sigmas, lams):
        errs = []
        for k in range(folds):
            test = parts[k]
            tr = np.concatenate([parts[j] for j in range(folds) if j != k])
            if len(tr) == 0 or len(test) == 0:
                continue
            try:
                m = train(X[tr], y[tr], sigma, lam, center=center)
            except SingularKernel:
                errs = None
                break
            errs.append(mae(predict_plaintext(m, X[test]), y[test]))
        score = float(np.mean(errs)) if errs else float("inf")
        table.append((float(sigma), float(lam), score))
        if best is None or score < best[2]:
            best = (float(sigma), float(lam), score)
    if best is None or not np.isfinite(best[2]):
        raise SingularKernel("every (sigma, lambda) grid point gave a singular kernel")
    return CVResult(best[0], best[1], best[2], table)


def learning_curve(X, y, Xt, yt, Ns: Sequence[int], sigma: float, lam: float,
                   center: bool = False) -> list:
    """Plaintext MAE for nested training sets ``X[:N]``."""
    rows = []
    for N in Ns:
        m = train(X[:N], y[:N], sigma, lam, center=center)
        rows.append((int(N), mae(predict_plaintext(m, Xt), yt)))
    return rows


# -- model persistence ---------------------------------------------------------------

MODEL_MAGIC = b"EMLM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sBIIdddd")


def save_model(model: KrrModel, path) -> None:
    """Layout: magic, u8 version, u32 N, u32 L, f64 sigma, lambda, y_offset,
    residual, u16-prefixed unit and split id strings, then X and alpha as f64 LE."""
    unit = model.unit.encode()
    split = model.split_id.encode()
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.N, model.L, model.sigma,
                                    model.lam, model.y_offset, model.residual))
        for s in (unit, split):
            fh.write(struct.pack("<H", len(s)) + s)
        fh.write(np.ascontiguousarray(model.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.alpha, dtype="<f8").tobytes())


def load_model(path) -> KrrModel:
    data = open(path, "rb").read()
    if len(data) < _MODEL_HEADER.size or data[:4] != MODEL_MAGIC:
        raise ParseError(f"{path} is not a model file")
    _, version, N, L, sigma, lam, offset, res = _MODEL_HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise ParseError(f"unsupported model version {version}")
    off = _MODEL_HEADER.size
    strings = []
    for _ in range(2):
        (n,) = struct.unpack_from("<H", data, off)
        strings.append(data[off + 2:off + 2 + n].decode())
        off += 2 + n
    need = off + 8 * (N * L + N)
    if len(data) != need:
        raise ParseError(f"model file holds {len(data)} bytes, expected {need}")
    X = np.frombuffer(data, dtype="<f8", count=N * L, offset=off).reshape(N, L).copy()
    alpha = np.frombuffer(data, dtype="<f8", count=N, offset=off + 8 * N * L).copy()
    return KrrModel(X, alpha, sigma, lam, strings[0], offset, strings[1], res)
