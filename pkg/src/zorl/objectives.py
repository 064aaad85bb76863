"""Black-box objectives, dataset ingestion and the victim classifier."""

from __future__ import annotations

import logging
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, softmax

from . import nn
from .errors import (
    DataFormatError,
    DimensionMismatchError,
    DivergenceError,
    InvalidDimensionError,
)
from .numerics import RngStream, Vector, norms

logger = logging.getLogger(__name__)

MAX_LIBSVM_DIM = 100_000


class Objective:
    """Function handle that counts every evaluation.

    ``gradient`` is for diagnostics only and never consumes queries.
    """

    def __init__(
        self,
        dim: int,
        fn: Callable[[np.ndarray], float],
        gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        name: str = "objective",
        x0: Optional[np.ndarray] = None,
    ):
        if dim < 1:
            raise InvalidDimensionError(f"objective dimension must be >= 1, got {dim}")
        self.dim = int(dim)
        self._fn = fn
        self.gradient = gradient
        self.name = name
        self.x0 = np.zeros(self.dim) if x0 is None else np.asarray(x0, dtype=np.float64)
        self.query_count = 0
        self._lock = threading.Lock()

    def __call__(self, x: np.ndarray) -> float:
        with self._lock:
            self.query_count += 1
        return float(self._fn(x))

    def evaluate_uncounted(self, x: np.ndarray) -> float:
        """Reporting-only evaluation (e.g. the loss of a final iterate)."""
        return float(self._fn(x))

    @property
    def has_gradient(self) -> bool:
        return self.gradient is not None

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"Objective(name={self.name!r}, dim={self.dim}, queries={self.query_count})"


# ---------------------------------------------------------------- least squares


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,), entries in {-1, +1}
    name: str = "dataset"

    def __post_init__(self):
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise DimensionMismatchError("dataset X must be (n, d) and y must be (n,)")
        if not np.all(np.isin(self.y, (-1.0, 1.0))):
            raise DataFormatError("labels must be exactly -1 or +1")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def least_squares_loss(w: Vector, data: Dataset) -> float:
    """Mean of ``(y_i - sigmoid(w . x_i))^2``. Labels stay in {-1, +1} on purpose."""
    w = np.asarray(w, dtype=np.float64)
    if data.n == 0:
        raise DataFormatError("empty dataset")
    if w.shape != (data.dim,):
        raise DimensionMismatchError(f"w has shape {w.shape}, data has dimension {data.dim}")
    resid = data.y - expit(data.X @ w)
    return float(np.mean(resid * resid))


def least_squares_objective(data: Dataset) -> Objective:
    if data.n == 0:
        raise DataFormatError("empty dataset")

    def grad(w):
        s = expit(data.X @ w)
        return data.X.T @ (-2.0 * (data.y - s) * s * (1.0 - s)) / data.n

    return Objective(
        data.dim, lambda w: least_squares_loss(w, data), grad, name=f"lsq:{data.name}"
    )


def _parse_label(tok: str, lineno: int) -> float:
    try:
        val = float(tok)
    except ValueError:
        raise DataFormatError(f"line {lineno}: non-numeric label {tok!r}") from None
    if not np.isfinite(val) or val != round(val):
        raise DataFormatError(f"line {lineno}: label {tok!r} is not an integer class")
    return val


def load_libsvm(path: str | Path, n_features: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """Parse a two-class LIBSVM text file (1-based ``idx:val`` features) into a dense dataset.

    Two-class label sets other than {-1, +1} (e.g. {0, 1} or {1, 2}) are mapped
    smaller -> -1, larger -> +1.
    """
    path = Path(path)
    labels: list[float] = []
    rows: list[dict[int, float]] = []
    max_idx = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            toks = line.split()
            labels.append(_parse_label(toks[0], lineno))
            row: dict[int, float] = {}
            for tok in toks[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise DataFormatError(f"line {lineno}: malformed feature {tok!r}")
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: non-numeric field {tok!r}") from None
                if idx < 1:
                    raise DataFormatError(f"line {lineno}: feature index {idx} must be >= 1")
                if idx > MAX_LIBSVM_DIM:
                    raise DataFormatError(
                        f"line {lineno}: feature index {idx} exceeds cap {MAX_LIBSVM_DIM}"
                    )
                if idx in row:
                    raise DataFormatError(f"line {lineno}: duplicate feature index {idx}")
                if not np.isfinite(val):
                    raise DataFormatError(f"line {lineno}: non-finite value at index {idx}")
                row[idx] = val
                max_idx = max(max_idx, idx)
            rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: no samples")
    d = max_idx if n_features is None else n_features
    if d < max_idx:
        raise DataFormatError(f"{path}: feature index {max_idx} exceeds n_features={d}")
    if d < 1:
        raise DataFormatError(f"{path}: no features")
    X = np.zeros((len(rows), d))
    for i, row in enumerate(rows):
        for idx, val in row.items():
            X[i, idx - 1] = val
    y = np.array(labels)
    classes = np.unique(y)
    if not set(classes) <= {-1.0, 1.0}:
        if len(classes) != 2:
            raise DataFormatError(f"{path}: labels {classes.tolist()} are not reducible to two classes")
        y = np.where(y == classes[0], -1.0, 1.0)
    return Dataset(X, y, name or path.stem)


def save_libsvm(data: Dataset, path: str | Path) -> None:
    lines = []
    for i in range(data.n):
        feats = [(j + 1, v) for j, v in enumerate(data.X[i]) if v != 0.0]
        if i == 0 and not np.any(data.X[:, -1] != 0.0):
            feats.append((data.dim, 0.0))  # pin the dimension
        label = "+1" if data.y[i] > 0 else "-1"
        lines.append(" ".join([label] + [f"{j}:{float(v)!r}" for j, v in feats]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def synthetic_heart_scale(rng: RngStream, n: int = 270, d: int = 13) -> Dataset:
    """Deterministic stand-in with heart_scale's shape: features in [-1, 1], labels +-1."""
    w = rng.normal(d)
    X = np.clip(rng.normal((n, d)) * 0.5, -1.0, 1.0)
    X = np.round(X, 6)
    y = np.where(X @ w + 0.5 * rng.normal(n) > 0, 1.0, -1.0)
    return Dataset(X, y, "heart_scale_synthetic")


# ----------------------------------------------------------------- IDX images

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledImages:
    images: np.ndarray  # (n, rows*cols) in [0, 1]
    labels: np.ndarray  # (n,) int
    shape: tuple[int, int]

    @property
    def n(self) -> int:
        return self.images.shape[0]


def _read_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if payload.size < count:
        raise DataFormatError(f"{path}: truncated payload ({payload.size} of {count} bytes)")
    return dims, payload[:count]


def load_idx_images(images_path: str | Path, labels_path: str | Path) -> LabeledImages:
    (n, rows, cols), pix = _read_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    (m,), lab = _read_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if n != m:
        raise DataFormatError(f"count mismatch: {n} images but {m} labels")
    images = pix.reshape(n, rows * cols).astype(np.float64) / 255.0
    return LabeledImages(images, lab.astype(np.int64), (rows, cols))


def save_idx_images(data: LabeledImages, images_path: str | Path, labels_path: str | Path) -> None:
    rows, cols = data.shape
    pix = np.clip(np.round(data.images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(
        struct.pack(">IIII", IDX_IMAGES_MAGIC, data.n, rows, cols) + pix.tobytes()
    )
    Path(labels_path).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, data.n) + data.labels.astype(np.uint8).tobytes()
    )


def builtin_digits() -> LabeledImages:
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = np.round(digits.data / 16.0 * 255.0) / 255.0
    return LabeledImages(images, digits.target.astype(np.int64), (8, 8))


# ------------------------------------------------------------- attack task


class VictimClassifier:
    """K-class scorer exposed only through :meth:`scores` (softmax probabilities)."""

    def __init__(self, spec: nn.NetworkSpec, params: nn.NetworkParameters):
        self.spec = spec
        self.params = params
        self.classes = spec.output_shape[0]
        self.heldout_accuracy: float | None = None

    @property
    def dim(self) -> int:
        return self.spec.input_shape[0]

    def scores(self, x: np.ndarray) -> np.ndarray:
        logits = nn.predict(self.params, self.spec, np.asarray(x, dtype=np.float64)[None, :])
        return softmax(logits[0])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(nn.predict(self.params, self.spec, X), axis=1)


@dataclass(frozen=True)
class AttackInstance:
    x0: np.ndarray
    t0: int
    c: float = 0.1
    p: float = 1

    def __post_init__(self):
        if np.any(self.x0 < 0.0) or np.any(self.x0 > 1.0):
            raise DataFormatError("attack image must lie in [0, 1]^d")
        if self.c <= 0:
            raise ValueError("regularization coefficient c must be > 0")


def attack_loss(x: Vector, victim, inst: AttackInstance) -> float:
    """Hinge margin of the true class plus ``c * ||x - x0||_p``.

    ``victim`` only needs a ``scores(x)`` method returning K >= 2 values.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != inst.x0.shape:
        raise DimensionMismatchError(f"x has shape {x.shape}, x0 has {inst.x0.shape}")
    F = np.asarray(victim.scores(x), dtype=np.float64)
    if F.size < 2:
        raise DimensionMismatchError("victim must return at least 2 scores")
    if not 0 <= inst.t0 < F.size:
        raise IndexError(f"true label {inst.t0} out of range for {F.size} classes")
    others = np.delete(F, inst.t0)
    margin = max(F[inst.t0] - others.max(), 0.0)
    diff = x - inst.x0
    if inst.p == 1:
        dist = norms(diff)[0]
    elif inst.p == 2:
        dist = norms(diff)[1]
    else:
        dist = float(np.linalg.norm(diff, ord=inst.p))
    return float(margin + inst.c * dist)


def attack_objective(victim, inst: AttackInstance) -> Objective:
    return Objective(
        inst.x0.size,
        lambda x: attack_loss(x, victim, inst),
        name=f"attack:t{inst.t0}",
        x0=inst.x0.copy(),
    )


def victim_spec(d: int, classes: int, hidden: int = 32, seed: int = 0) -> nn.NetworkSpec:
    return nn.NetworkSpec(
        (d,), (nn.Dense(d, hidden), nn.Activation("relu"), nn.Dense(hidden, classes)), seed=seed
    )


def train_victim(
    data: LabeledImages,
    epochs: int,
    rng: RngStream,
    hidden: int = 32,
    lr: float = 1e-2,
    batch_size: int = 64,
    holdout: float = 0.2,
    accuracy_floor: float = 0.8,
) -> VictimClassifier:
    """Fit a one-hidden-layer softmax classifier with Adam on cross-entropy."""
    classes = np.unique(data.labels)
    if classes.size < 2:
        raise DataFormatError("victim training needs at least 2 classes")
    K = int(data.labels.max()) + 1
    order = rng.child("split").permutation(data.n)
    n_hold = max(1, int(round(holdout * data.n)))
    hold, train = order[:n_hold], order[n_hold:]
    X, y = data.images[train], data.labels[train]
    seed = int(rng.child("init").integers(0, 2**31))
    spec = victim_spec(data.images.shape[1], K, hidden, seed)
    params = nn.init_params(spec)
    opt = nn.AdamState.zeros_like(params, spec)
    batch_rng = rng.child("batches")
    for epoch in range(epochs):
        perm = batch_rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            idx = perm[start : start + batch_size]
            logits, tape = nn.forward(params, spec, X[idx], "train")
            probs = softmax(logits, axis=1)
            loss = -np.mean(np.log(probs[np.arange(idx.size), y[idx]] + 1e-300))
            if not np.isfinite(loss):
                raise DivergenceError(f"victim training diverged at epoch {epoch}")
            upstream = probs.copy()
            upstream[np.arange(idx.size), y[idx]] -= 1.0
            grads, _ = nn.backward(tape, upstream / idx.size)
            params, opt = nn.adam_update_net(params, grads, opt, lr)
    victim = VictimClassifier(spec, params)
    acc = float(np.mean(victim.predict(data.images[hold]) == data.labels[hold]))
    victim.heldout_accuracy = acc
    logger.info("victim held-out accuracy %.4f", acc)
    if acc < accuracy_floor:
        raise DivergenceError(f"victim accuracy {acc:.3f} below floor {accuracy_floor}")
    return victim


def attack_instances(
    victim: VictimClassifier, data: LabeledImages, count: int, rng: RngStream, c: float = 0.1, p: float = 1
) -> list[AttackInstance]:
    """Randomly chosen images that the victim classifies correctly."""
    correct = np.flatnonzero(victim.predict(data.images) == data.labels)
    if correct.size < count:
        raise DataFormatError(f"only {correct.size} correctly classified images, need {count}")
    pick = correct[rng.permutation(correct.size)[:count]]
    return [AttackInstance(data.images[i].copy(), int(data.labels[i]), c, p) for i in pick]


# --------------------------------------------------------- synthetic quadratic


def quadratic_objective(A: np.ndarray, x_star: np.ndarray, name: str = "quadratic") -> Objective:
    A = np.asarray(A, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)

    def fn(x):
        r = x - x_star
        return 0.5 * r @ A @ r

    return Objective(x_star.size, fn, lambda x: A @ (x - x_star), name=name)


def synthetic_quadratic(d: int, rng: RngStream, low: float = 0.1, high: float = 10.0) -> Objective:
    """``0.5 (x - x*)^T A (x - x*)`` with a random rotation and log-uniform spectrum in [low, high]."""
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    Q, R = np.linalg.qr(rng.normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    lam = np.exp(rng.uniform(np.log(low), np.log(high), d))
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    obj = quadratic_objective(A, rng.normal(d), name=f"quadratic-d{d}")
    obj.A = A
    obj.eigenvalues = lam
    return obj


@dataclass(frozen=True)
class QuadraticFamily:
    """Random quadratics with dimension drawn uniformly from ``[d_min, d_max]``."""

    d_min: int = 2
    d_max: int = 20

    def sample(self, rng: RngStream) -> Objective:
        d = int(rng.integers(self.d_min, self.d_max + 1))
        return synthetic_quadratic(d, rng.child("instance"))
