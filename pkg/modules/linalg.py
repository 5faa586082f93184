"""
Dense numerical primitives.

Matrices and vectors are float64 numpy arrays. Every function checks its
shapes and raises DimensionMismatch naming both operands. Batched variants
treat each row of a 2-D array as one example.
"""
import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
import numpy.typing as npt

from modules.error_handler import DimensionMismatch

logger = logging.getLogger("modules.linalg")

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]
SeedLike = Union[int, np.random.SeedSequence, np.random.Generator]


def as_rng(seed: SeedLike) -> np.random.Generator:
    """Build a Generator from an int, SeedSequence or existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# ============================================================================
# LINEAR MAPS
# ============================================================================

def matvec(m: Matrix, v: Vector) -> Vector:
    """Matrix-vector product; m.cols must equal v.dim."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionMismatch("matvec", m.shape, v.shape)
    return m @ v


def apply_rows(m: Matrix, x: Matrix) -> Matrix:
    """Apply m to every row of x: returns x @ m.T, shape (rows of x, m.rows)."""
    if m.ndim != 2 or x.ndim != 2 or m.shape[1] != x.shape[1]:
        raise DimensionMismatch("apply_rows", m.shape, x.shape)
    return x @ m.T


def backprop_rows(m: Matrix, dy: Matrix) -> Matrix:
    """Gradient w.r.t. the inputs of apply_rows: dy @ m."""
    if m.ndim != 2 or dy.ndim != 2 or m.shape[0] != dy.shape[1]:
        raise DimensionMismatch("backprop_rows", m.shape, dy.shape)
    return dy @ m


def outer_sum(dy: Matrix, x: Matrix) -> Matrix:
    """Sum over rows of outer(dy_i, x_i): the weight gradient of apply_rows."""
    if dy.ndim != 2 or x.ndim != 2 or dy.shape[0] != x.shape[0]:
        raise DimensionMismatch("outer_sum", dy.shape, x.shape)
    return dy.T @ x


def concat(a: Vector, b: Vector) -> Vector:
    """[a; b] for vectors, or row-wise concatenation for batches."""
    if a.ndim != b.ndim:
        raise DimensionMismatch("concat", a.shape, b.shape)
    if a.ndim == 1:
        return np.concatenate([a, b])
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatch("concat", a.shape, b.shape)
    return np.concatenate([a, b], axis=1)


def split(v: np.ndarray, at: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse of concat along the last axis."""
    return v[..., :at], v[..., at:]


# ============================================================================
# NONLINEARITIES
# ============================================================================

def relu(v: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(v, 0.0)


def relu_derivative(pre_activation: np.ndarray) -> np.ndarray:
    """1 where the pre-activation is positive, 0 elsewhere (0 at exactly 0)."""
    return (pre_activation > 0.0).astype(np.float64)


def sigmoid(x):
    """
    Numerically stable logistic function.

    Uses the exp(-|x|) form on both branches, so |x| up to 700 and beyond
    never overflows. Accepts scalars or arrays.
    """
    arr = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    if out.ndim == 0:
        return float(out)
    return out


def bce_with_logits(logit, label):
    """
    Binary negative log-likelihood of `label` under sigmoid(logit).

    max(s, 0) - c*s + log1p(exp(-|s|)) avoids both overflow and the
    cancellation of the naive log-of-sigmoid form.
    """
    s = np.asarray(logit, dtype=np.float64)
    c = np.asarray(label, dtype=np.float64)
    out = np.maximum(s, 0.0) - c * s + np.log1p(np.exp(-np.abs(s)))
    if out.ndim == 0:
        return float(out)
    return out


# ============================================================================
# INITIALISATION AND DROPOUT
# ============================================================================

def glorot_uniform_init(rows: int, cols: int, rng_seed: SeedLike) -> Matrix:
    """Entries i.i.d. uniform on [-limit, limit], limit = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise DimensionMismatch("glorot_uniform_init", (rows,), (cols,))
    limit = np.sqrt(6.0 / (rows + cols))
    rng = as_rng(rng_seed)
    return rng.uniform(-limit, limit, size=(rows, cols))


@dataclass(frozen=True)
class DropoutMask:
    """Inverted-dropout mask: entries are 0 or 1/keep_probability."""
    dim: int
    keep_probability: float
    mask: np.ndarray

    def apply(self, activations: np.ndarray) -> np.ndarray:
        if activations.shape != self.mask.shape:
            raise DimensionMismatch("dropout", self.mask.shape, activations.shape)
        return activations * self.mask


def sample_dropout_mask(dim: int, keep_probability: float, rng: np.random.Generator,
                        rows: int = 0) -> DropoutMask:
    """
    Sample an inverted-dropout mask.

    Each unit is kept independently with probability keep_probability and
    scaled by 1/keep_probability, so masked activations keep their expected
    value. rows > 0 samples one mask row per example of a batch.
    """
    if not 0.0 < keep_probability <= 1.0:
        raise ValueError(f"keep_probability must be in (0, 1], got {keep_probability}")
    shape = (rows, dim) if rows > 0 else (dim,)
    if keep_probability == 1.0:
        return DropoutMask(dim, keep_probability, np.ones(shape))
    kept = rng.random(shape) < keep_probability
    return DropoutMask(dim, keep_probability, kept.astype(np.float64) / keep_probability)


def all_finite(*arrays: np.ndarray) -> bool:
    """True when every entry of every array is finite."""
    return all(bool(np.all(np.isfinite(a))) for a in arrays)
