"""Fixed random-projection quantization.

A frozen random codebook plus a frozen random projection turn feature
frames into per-frame targets two ways:

  * hard: nearest codebook entry after projection (argmin of squared
    distance, ties to the smallest index)
  * soft: Gumbel-softmax over negative squared distances at temperature
    tau, which is differentiable with respect to the projected input

Neither the codebook nor the projection is ever trained. Matrices follow
the column-frame convention: frame t is column t.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _binio, autodiff, seeding
from .autodiff import Tensor
from .errors import FormatError
from .validation import check_matrix, check_positive_float, check_positive_int

LABELS_MAGIC = b"BIRQLABL"
LABELS_VERSION = 1
MODE_HARD = 0
MODE_SOFT = 1

_GUMBEL_CLAMP = 1e-12


@dataclass(frozen=True)
class Codebook:
    """N x d_c frozen code matrix. ``norms`` caches per-entry squared norms."""

    entries: np.ndarray
    seed: int

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=np.float64)
        if entries.ndim != 2 or entries.shape[0] < 2:
            raise ValueError("codebook needs an N x d_c matrix with N >= 2")
        entries = entries.copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        norms = np.sum(entries * entries, axis=1)
        norms.setflags(write=False)
        object.__setattr__(self, "norms", norms)

    @property
    def num_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def code_dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class RandomProjection:
    """d_in x d_c frozen projection matrix."""

    matrix: np.ndarray
    seed: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).copy()
        if m.ndim != 2:
            raise ValueError("projection must be a d_in x d_c matrix")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def dim_in(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim_code(self) -> int:
        return self.matrix.shape[1]


def init_codebook(seed, num_codes: int, code_dim: int) -> Codebook:
    """Seeded i.i.d. standard-normal codebook, frozen after creation."""
    if num_codes < 2:
        raise ValueError(f"num_codes must be >= 2, got {num_codes}")
    check_positive_int(code_dim, "code_dim")
    key = seed if isinstance(seed, tuple) else (seed,)
    entries = seeding.rng(key[0], seeding.ROLE_CODEBOOK, *key[1:]).standard_normal(
        (num_codes, code_dim))
    base = key[0] if isinstance(key[0], (int, np.integer)) else 0
    cb = Codebook(entries, int(base))
    if np.unique(cb.entries, axis=0).shape[0] != num_codes:
        raise ValueError("codebook entries collided; use a different seed")
    return cb


def init_projection(seed, dim_in: int, dim_code: int,
                    role: int = seeding.ROLE_PROJ_ANCHOR) -> RandomProjection:
    """Seeded i.i.d. N(0, 1/d_in) projection, frozen after creation."""
    check_positive_int(dim_in, "dim_in")
    check_positive_int(dim_code, "dim_code")
    key = seed if isinstance(seed, tuple) else (seed,)
    m = seeding.rng(key[0], role, *key[1:]).standard_normal((dim_in, dim_code))
    m = m / np.sqrt(dim_in)
    base = key[0] if isinstance(key[0], (int, np.integer)) else 0
    return RandomProjection(m, int(base))


def project(p: RandomProjection, x: np.ndarray) -> np.ndarray:
    """P^T x for column-frame input: (d_in x T) -> (d_c x T)."""
    x = check_matrix(x, "x")
    if x.shape[0] != p.dim_in:
        raise ValueError(f"input has {x.shape[0]} rows, projection expects {p.dim_in}")
    return p.matrix.T @ x


def _sq_distances(u_rows: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Squared distances (T x N) via the expanded form with cached norms."""
    u_norms = np.sum(u_rows * u_rows, axis=1, keepdims=True)
    return u_norms - 2.0 * (u_rows @ codebook.entries.T) + codebook.norms[None, :]


def _l2_rows(rows: np.ndarray) -> np.ndarray:
    n = np.sqrt(np.sum(rows * rows, axis=1, keepdims=True))
    return rows / np.maximum(n, 1e-12)


def assign_hard(u: np.ndarray, codebook: Codebook,
                l2_normalize: bool = False) -> np.ndarray:
    """Nearest-entry index per frame for u of shape (d_c x T).

    Ties break toward the smallest index. Returns int64 indices, length T.
    """
    u = check_matrix(u, "u")
    if u.shape[0] != codebook.code_dim:
        raise ValueError(f"u has {u.shape[0]} rows, codebook dim is {codebook.code_dim}")
    rows = np.ascontiguousarray(u.T, dtype=np.float64)
    cb = codebook
    if l2_normalize:
        rows = _l2_rows(rows)
        cb = Codebook(_l2_rows(codebook.entries), codebook.seed)
    return np.argmin(_sq_distances(rows, cb), axis=1).astype(np.int64)


def sample_gumbel(seed, num_frames: int, num_codes: int) -> np.ndarray:
    """Gumbel(0,1) noise matrix v = -ln(-ln(q)), q uniform on (0,1).

    q is clamped to [1e-12, 1 - 1e-12] so every value is finite.
    Deterministic given the seed key.
    """
    check_positive_int(num_frames, "num_frames")
    check_positive_int(num_codes, "num_codes")
    key = seed if isinstance(seed, tuple) else (seed,)
    q = seeding.rng(key[0], seeding.ROLE_GUMBEL, *key[1:]).random(
        (num_frames, num_codes))
    q = np.clip(q, _GUMBEL_CLAMP, 1.0 - _GUMBEL_CLAMP)
    return -np.log(-np.log(q))


def assign_soft(u: np.ndarray, codebook: Codebook, tau: float,
                gumbel: np.ndarray | None = None,
                l2_normalize: bool = False) -> np.ndarray:
    """Soft assignment rows (T x N): softmax of -(dist^2 + v) / tau.

    ``gumbel`` is a (T x N) noise matrix or None for v = 0. Softmax is
    computed after subtracting the row max.
    """
    check_positive_float(tau, "tau")
    u = check_matrix(u, "u")
    rows = np.ascontiguousarray(u.T, dtype=np.float64)
    cb = codebook
    if l2_normalize:
        rows = _l2_rows(rows)
        cb = Codebook(_l2_rows(codebook.entries), codebook.seed)
    scores = -_sq_distances(rows, cb)
    if gumbel is not None:
        gumbel = np.asarray(gumbel, dtype=np.float64)
        if gumbel.shape != scores.shape:
            raise ValueError(f"gumbel shape {gumbel.shape} does not match {scores.shape}")
        scores = scores - gumbel
    scores = scores / tau
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=1, keepdims=True)


def soft_assign_graph(u_rows: Tensor, codebook: Codebook, tau: float,
                      gumbel: np.ndarray | None = None,
                      l2_normalize: bool = False) -> Tensor:
    """Differentiable soft assignment for row-frame input (T x d_c).

    Same math as assign_soft but on graph tensors, so gradients reach
    whatever produced ``u_rows``. Codebook and noise enter as constants.
    """
    check_positive_float(tau, "tau")
    dtype = u_rows.dtype
    entries = codebook.entries
    if l2_normalize:
        entries = _l2_rows(entries)
        sq = (u_rows * u_rows).sum(axis=1, keepdims=True)
        u_rows = u_rows * (1.0 / (sq + 1e-24).sqrt())
    ct = Tensor(np.ascontiguousarray(entries.T, dtype=dtype))
    norms = Tensor(np.sum(entries * entries, axis=1).astype(dtype))
    u_norms = (u_rows * u_rows).sum(axis=1, keepdims=True)
    dist = u_norms - (u_rows @ ct) * 2.0 + norms.reshape(1, -1)
    scores = dist * (-1.0 / tau)
    if gumbel is not None:
        scores = scores + Tensor((-1.0 / tau) * np.asarray(gumbel, dtype=dtype))
    return autodiff.softmax(scores, axis=1)


def codebook_utilization(labels: np.ndarray, num_codes: int) -> float:
    """Normalized entropy of the empirical index distribution, in [0, 1].

    0 means a single code absorbed everything, 1 means perfectly uniform
    usage. Soft labels should be argmaxed before calling.
    """
    check_positive_int(num_codes, "num_codes")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValueError("labels must be a nonempty 1-D index array")
    counts = np.bincount(labels.astype(np.int64), minlength=num_codes)
    p = counts[counts > 0] / labels.size
    if num_codes < 2:
        return 1.0
    return float(-(p * np.log(p)).sum() / np.log(num_codes))


# ----------------------------------------------------------------------
# LABELS file format

def save_labels(path, labels: np.ndarray, num_codes: int) -> None:
    """Write LABELS: hard mode for 1-D index input, soft mode for T x N rows."""
    labels = np.asarray(labels)
    with open(path, "wb") as fh:
        _binio.write_magic(fh, LABELS_MAGIC, LABELS_VERSION)
        if labels.ndim == 1:
            if labels.size and labels.max() >= num_codes:
                raise ValueError("hard label index out of range")
            fh.write(np.uint64(labels.size).tobytes())
            fh.write(np.uint64(num_codes).tobytes())
            fh.write(np.uint8(MODE_HARD).tobytes())
            fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())
        elif labels.ndim == 2:
            if labels.shape[1] != num_codes:
                raise ValueError("soft label width must equal num_codes")
            fh.write(np.uint64(labels.shape[0]).tobytes())
            fh.write(np.uint64(num_codes).tobytes())
            fh.write(np.uint8(MODE_SOFT).tobytes())
            _binio.write_f32_array(fh, labels)
        else:
            raise ValueError("labels must be 1-D indices or a T x N matrix")


def load_labels(path) -> tuple[np.ndarray, int]:
    """Read LABELS; returns (indices or rows, num_codes)."""
    with open(path, "rb") as fh:
        _binio.check_magic(fh, LABELS_MAGIC, LABELS_VERSION, "LABELS")
        t = _binio.read_u64(fh, "LABELS frame count")
        n = _binio.read_u64(fh, "LABELS code count")
        mode = _binio.read_u8(fh, "LABELS mode")
        if t < 1 or n < 1:
            raise FormatError(f"invalid LABELS shape {t} x {n}")
        if mode == MODE_HARD:
            raw = _binio.read_exact(fh, 4 * t, "LABELS indices")
            labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
            if labels.size and labels.max() >= n:
                raise FormatError("hard label index out of range")
        elif mode == MODE_SOFT:
            labels = _binio.read_f32_array(fh, t * n, "LABELS rows").reshape(t, n)
        else:
            raise FormatError(f"unknown LABELS mode {mode}")
        _binio.expect_eof(fh, "LABELS")
    return labels, n


# ----------------------------------------------------------------------
# estimator wrapper

class RandomProjectionQuantizer(TransformerMixin, BaseEstimator):
    """Frozen random-projection quantizer with a scikit-learn surface.

    fit(X) fixes the projection (d_in taken from X) and the codebook from
    ``seed``; transform(X) returns hard labels for row-frame input
    (T x d_in). Nothing is learned from the data.
    """

    def __init__(self, num_codes: int = 16, code_dim: int = 16, seed: int = 0,
                 tau: float = 0.5, l2_normalize: bool = False):
        self.num_codes = num_codes
        self.code_dim = code_dim
        self.seed = seed
        self.tau = tau
        self.l2_normalize = l2_normalize

    def fit(self, X, y=None):
        X = check_matrix(X, "X")
        self.codebook_ = init_codebook(self.seed, self.num_codes, self.code_dim)
        self.projection_ = init_projection(self.seed, X.shape[1], self.code_dim,
                                           role=seeding.ROLE_PROJ_ANCHOR)
        return self

    def _check_fitted(self):
        if not hasattr(self, "codebook_"):
            raise ValueError("quantizer is not fitted; call fit first")

    def transform(self, X):
        self._check_fitted()
        X = check_matrix(X, "X")
        u = project(self.projection_, X.T)
        return assign_hard(u, self.codebook_, l2_normalize=self.l2_normalize)

    def predict(self, X):
        return self.transform(X)

    def soft_transform(self, X, gumbel: np.ndarray | None = None):
        self._check_fitted()
        X = check_matrix(X, "X")
        u = project(self.projection_, X.T)
        return assign_soft(u, self.codebook_, self.tau, gumbel=gumbel,
                           l2_normalize=self.l2_normalize)
