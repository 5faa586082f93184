"""
CLANN Network
=============
Pair classifier with an adversarial language discriminator.

Task branch:
    h = relu(U [z_q; z_q'])
    f = relu(V [h; phi])
    c_hat = sigmoid(w . [f; phi])

Language discriminator (consumes f only):
    h_l = relu(U_l f)
    l_hat = sigmoid(w_l . h_l)

Training minimises L_c - lambda * L_l over the task parameters {U, V, w}
and L_l over the discriminator {U_l, w_l}. The minus sign is realised by
reversing the discriminator gradient where it flows back through f into V
and U. w never sees L_l.

Everything is batched: each row of z_q, z_r, phi is one example. Gradients
are sums over rows in row order; callers scale them.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np

from modules.error_handler import DimensionMismatch, SchemaMismatch, ValidationError
from modules.linalg import (
    Matrix, SeedLike, Vector, all_finite, apply_rows, backprop_rows, bce_with_logits, concat,
    glorot_uniform_init, outer_sum, relu, relu_derivative, sigmoid,
)

logger = logging.getLogger("modules.model")

PARAM_KEYS = ('U', 'V', 'w', 'U_l', 'w_l')
TASK_KEYS = ('U', 'V', 'w')
DISCRIMINATOR_KEYS = ('U_l', 'w_l')


@dataclass(frozen=True)
class Dimensions:
    """d_emb, |phi|, |h|, |f| and |h_l|."""
    d_emb: int
    n_phi: int
    n_h: int
    n_f: int
    n_hl: int

    def __post_init__(self):
        for name in ('d_emb', 'n_h', 'n_f', 'n_hl'):
            if getattr(self, name) < 1:
                raise ValidationError(f"dimension {name} must be >= 1, got {getattr(self, name)}")
        if self.n_phi < 0:
            raise ValidationError(f"dimension n_phi must be >= 0, got {self.n_phi}")

    def shapes(self) -> Dict[str, tuple]:
        return {
            'U': (self.n_h, 2 * self.d_emb),
            'V': (self.n_f, self.n_h + self.n_phi),
            'w': (self.n_f + self.n_phi,),
            'U_l': (self.n_hl, self.n_f),
            'w_l': (self.n_hl,),
        }

    def to_dict(self) -> Dict[str, int]:
        return {'d_emb': self.d_emb, 'n_phi': self.n_phi, 'n_h': self.n_h,
                'n_f': self.n_f, 'n_hl': self.n_hl}

    @classmethod
    def from_dict(cls, data: Dict[str, int]) -> "Dimensions":
        return cls(**{k: int(data[k]) for k in ('d_emb', 'n_phi', 'n_h', 'n_f', 'n_hl')})


# ============================================================================
# PARAMETERS AND GRADIENTS
# ============================================================================

def _check_shapes(dims: Dimensions, arrays: Dict[str, np.ndarray], what: str):
    for key, shape in dims.shapes().items():
        actual = arrays[key].shape
        if actual != shape:
            raise DimensionMismatch(f"{what}.{key}", shape, actual)


@dataclass(frozen=True)
class ModelParams:
    """theta = {U, V, w} plus the discriminator {U_l, w_l}."""
    dims: Dimensions
    U: Matrix
    V: Matrix
    w: Vector
    U_l: Matrix
    w_l: Vector

    def __post_init__(self):
        _check_shapes(self.dims, self.as_dict(), "params")

    @classmethod
    def initialize(cls, dims: Dimensions, seed: SeedLike) -> "ModelParams":
        """
        Glorot-uniform initialisation.

        Each block draws from its own child of the seed sequence, so the task
        weights do not depend on the discriminator's size.
        """
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        children = dict(zip(PARAM_KEYS, seq.spawn(len(PARAM_KEYS))))
        arrays = {}
        for key, shape in dims.shapes().items():
            if len(shape) == 2:
                arrays[key] = glorot_uniform_init(shape[0], shape[1], children[key])
            else:
                arrays[key] = glorot_uniform_init(1, shape[0], children[key])[0]
        return cls(dims, **arrays)

    @classmethod
    def zeros(cls, dims: Dimensions) -> "ModelParams":
        return cls(dims, **{k: np.zeros(s) for k, s in dims.shapes().items()})

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_KEYS}

    def replace(self, **arrays: np.ndarray) -> "ModelParams":
        merged = self.as_dict()
        merged.update(arrays)
        return ModelParams(self.dims, **merged)

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, **{k: v.copy() for k, v in self.as_dict().items()})

    def non_finite_block(self) -> Optional[str]:
        for key, value in self.as_dict().items():
            if not all_finite(value):
                return key
        return None

    def to_dict(self) -> Dict[str, object]:
        return {'dimensions': self.dims.to_dict(),
                'weights': {k: v.tolist() for k, v in self.as_dict().items()}}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelParams":
        dims = Dimensions.from_dict(data['dimensions'])
        weights = data['weights']
        missing = [k for k in PARAM_KEYS if k not in weights]
        if missing:
            raise SchemaMismatch("weight blocks", list(PARAM_KEYS), sorted(weights))
        return cls(dims, **{k: np.array(weights[k], dtype=np.float64) for k in PARAM_KEYS})


@dataclass(frozen=True)
class Gradients:
    """Shape-congruent with ModelParams; provenance is task, discriminator or combined."""
    U: Matrix
    V: Matrix
    w: Vector
    U_l: Matrix
    w_l: Vector
    provenance: str = 'combined'

    @classmethod
    def zeros_like(cls, params: ModelParams, provenance: str) -> "Gradients":
        return cls(**{k: np.zeros_like(v) for k, v in params.as_dict().items()}, provenance=provenance)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_KEYS}

    def scaled(self, factor: float) -> "Gradients":
        return Gradients(**{k: v * factor for k, v in self.as_dict().items()}, provenance=self.provenance)

    def check_congruent(self, params: ModelParams):
        _check_shapes(params.dims, self.as_dict(), f"gradients[{self.provenance}]")

    def non_finite_block(self) -> Optional[str]:
        for key, value in self.as_dict().items():
            if not all_finite(value):
                return key
        return None


# ============================================================================
# FORWARD
# ============================================================================

class DropoutMasks(NamedTuple):
    """Inverted-dropout masks for h and f, one row per example."""
    h: np.ndarray
    f: np.ndarray


class DiscriminatorTrace(NamedTuple):
    a_l: Matrix
    h_l: Matrix
    logit: Vector
    l_hat: Vector


@dataclass
class ForwardTrace:
    """Inputs, pre-activations, activations, masks and outputs of one batch."""
    z: Matrix
    phi: Matrix
    a_h: Matrix
    h: Matrix
    a_f: Matrix
    f: Matrix
    x_f: Matrix
    out: Matrix
    logit: Vector
    c_hat: Vector
    masks: Optional[DropoutMasks] = None
    discriminator: Optional[DiscriminatorTrace] = field(default=None)

    @property
    def f_dropped(self) -> Matrix:
        return self.f * self.masks.f if self.masks is not None else self.f

    @property
    def l_hat(self) -> Optional[Vector]:
        return None if self.discriminator is None else self.discriminator.l_hat


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[np.newaxis, :] if x.ndim == 1 else x


def forward(params: ModelParams, z_q: np.ndarray, z_r: np.ndarray, phi: np.ndarray,
            masks: Optional[DropoutMasks] = None, with_discriminator: bool = False) -> ForwardTrace:
    """
    Task-branch forward pass.

    masks=None is eval mode (deterministic, no dropout). In train mode the
    masks multiply h and f after the ReLU.

    Raises:
        DimensionMismatch: input widths disagree with the dimension record
    """
    dims = params.dims
    z_q, z_r, phi = _as_batch(z_q), _as_batch(z_r), _as_batch(phi)
    if z_q.shape != z_r.shape or z_q.shape[1] != dims.d_emb:
        raise DimensionMismatch("forward.z", (z_q.shape[0], dims.d_emb), z_r.shape if z_q.shape[1] == dims.d_emb else z_q.shape)
    if phi.shape != (z_q.shape[0], dims.n_phi):
        raise DimensionMismatch("forward.phi", (z_q.shape[0], dims.n_phi), phi.shape)
    if masks is not None and (masks.h.shape != (z_q.shape[0], dims.n_h)
                              or masks.f.shape != (z_q.shape[0], dims.n_f)):
        raise DimensionMismatch("forward.masks", (z_q.shape[0], dims.n_h, dims.n_f),
                                masks.h.shape + masks.f.shape[1:])

    z = concat(z_q, z_r)
    a_h = apply_rows(params.U, z)
    h = relu(a_h)
    h_in = h * masks.h if masks is not None else h
    x_f = concat(h_in, phi)
    a_f = apply_rows(params.V, x_f)
    f = relu(a_f)
    f_out = f * masks.f if masks is not None else f
    out = concat(f_out, phi)
    logit = out @ params.w

    trace = ForwardTrace(z, phi, a_h, h, a_f, f, x_f, out, logit, sigmoid(logit), masks)
    if with_discriminator:
        trace.discriminator = discriminator_forward(params, f_out)
    return trace


def discriminator_forward(params: ModelParams, f: np.ndarray) -> DiscriminatorTrace:
    """h_l = relu(U_l f), l_hat = sigmoid(w_l . h_l), batched over rows of f."""
    f = _as_batch(f)
    a_l = apply_rows(params.U_l, f)
    h_l = relu(a_l)
    logit = h_l @ params.w_l
    return DiscriminatorTrace(a_l, h_l, logit, sigmoid(logit))


def predict_score(params: ModelParams, z_q: np.ndarray, z_r: np.ndarray, phi: np.ndarray):
    """Eval-mode relevance probability; a float for a single example, else a vector."""
    c_hat = forward(params, z_q, z_r, phi).c_hat
    if np.ndim(z_q) == 1:
        return float(c_hat[0])
    return c_hat


def predict_language(params: ModelParams, z_q: np.ndarray, z_r: np.ndarray, phi: np.ndarray) -> Vector:
    """Eval-mode discriminator output on the (mask-free) f representation."""
    trace = forward(params, z_q, z_r, phi)
    return discriminator_forward(params, trace.f).l_hat


# ============================================================================
# LOSSES
# ============================================================================

def task_loss(logit, c):
    """-c ln c_hat - (1-c) ln(1-c_hat), evaluated from the logit."""
    return bce_with_logits(logit, c)


def discriminator_loss(logit, l):
    """Same form as task_loss on the discriminator's logit and language bit."""
    return bce_with_logits(logit, l)


def batch_losses(trace: ForwardTrace, c: Vector, l: Optional[Vector]) -> Tuple[float, float, int]:
    """(sum of L_c over labeled rows, sum of L_l over all rows, labeled row count)."""
    c = np.asarray(c, dtype=np.float64)
    labeled = np.isfinite(c)
    lc = float(np.sum(task_loss(trace.logit[labeled], c[labeled]))) if labeled.any() else 0.0
    ll = 0.0
    if l is not None and trace.discriminator is not None:
        ll = float(np.sum(discriminator_loss(trace.discriminator.logit, l)))
    return lc, ll, int(labeled.sum())


# ============================================================================
# BACKWARD
# ============================================================================

def _shared_backprop(params: ModelParams, trace: ForwardTrace, d_f_out: Matrix) -> Tuple[Matrix, Matrix]:
    """Chain a gradient on the (dropped-out) f back into V and U."""
    n_h = params.dims.n_h
    d_f = d_f_out * trace.masks.f if trace.masks is not None else d_f_out
    d_a_f = d_f * relu_derivative(trace.a_f)
    g_v = outer_sum(d_a_f, trace.x_f)
    d_h_in = backprop_rows(params.V, d_a_f)[:, :n_h]
    d_h = d_h_in * trace.masks.h if trace.masks is not None else d_h_in
    d_a_h = d_h * relu_derivative(trace.a_h)
    g_u = outer_sum(d_a_h, trace.z)
    return g_u, g_v


def task_gradients(params: ModelParams, trace: ForwardTrace, c: Vector) -> Gradients:
    """
    dL_c/d{U, V, w} summed over labeled rows.

    Rows with c = NaN (unlabeled) contribute exactly zero.
    """
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.shape[0] != trace.logit.shape[0]:
        raise DimensionMismatch("task_gradients.c", trace.logit.shape, c.shape)
    labeled = np.isfinite(c)
    d_logit = np.where(labeled, trace.c_hat - np.where(labeled, c, 0.0), 0.0)

    g_w = trace.out.T @ d_logit
    d_f_out = np.outer(d_logit, params.w)[:, :params.dims.n_f]
    g_u, g_v = _shared_backprop(params, trace, d_f_out)
    return Gradients(g_u, g_v, g_w, np.zeros_like(params.U_l), np.zeros_like(params.w_l), 'task')


def discriminator_gradients(params: ModelParams, trace: ForwardTrace, l: Vector) -> Gradients:
    """
    Ordinary (unreversed) dL_l over every parameter, summed over rows.

    The w entry is zero: the discriminator consumes f, which does not depend on w.
    """
    if trace.discriminator is None:
        raise ValidationError("discriminator_gradients needs a trace with the discriminator forward")
    l = np.asarray(l, dtype=np.float64).reshape(-1)
    disc = trace.discriminator
    if l.shape[0] != disc.logit.shape[0]:
        raise DimensionMismatch("discriminator_gradients.l", disc.logit.shape, l.shape)

    d_logit = disc.l_hat - l
    g_w_l = disc.h_l.T @ d_logit
    d_a_l = np.outer(d_logit, params.w_l) * relu_derivative(disc.a_l)
    g_u_l = outer_sum(d_a_l, trace.f_dropped)
    d_f_out = backprop_rows(params.U_l, d_a_l)
    g_u, g_v = _shared_backprop(params, trace, d_f_out)
    return Gradients(g_u, g_v, np.zeros_like(params.w), g_u_l, g_w_l, 'discriminator')


def backward(params: ModelParams, trace: ForwardTrace, c: Vector, l: Optional[Vector],
             lam: float, scale: float = 1.0, discriminator_weight: float = 1.0) -> Gradients:
    """
    Combined gradient for one batch.

    U, V:      dL_c - lam * dL_l   (reversal at the f layer and below)
    w:         dL_c
    U_l, w_l:  discriminator_weight * dL_l

    l=None skips the discriminator entirely (FNN). Everything is multiplied
    by scale.

    Raises:
        ValidationError: lam < 0
    """
    task = task_gradients(params, trace, c)
    disc = discriminator_gradients(params, trace, l) if l is not None else None
    return combine_gradients(task, disc, lam, scale, discriminator_weight)


def combine_gradients(task: Gradients, disc: Optional[Gradients], lam: float,
                      scale: float = 1.0, discriminator_weight: float = 1.0) -> Gradients:
    """Apply the reversal: shared blocks get task - lam * disc, the discriminator gets +disc."""
    if lam < 0.0:
        raise ValidationError(f"reversal weight lambda must be >= 0, got {lam}")
    if disc is None:
        combined = Gradients(task.U, task.V, task.w, task.U_l, task.w_l, 'combined')
    else:
        combined = Gradients(
            U=task.U - lam * disc.U,
            V=task.V - lam * disc.V,
            w=task.w,
            U_l=discriminator_weight * disc.U_l,
            w_l=discriminator_weight * disc.w_l,
            provenance='combined',
        )
    return combined if scale == 1.0 else combined.scaled(scale)


def add_gradients(a: Gradients, b: Gradients) -> Gradients:
    """Blockwise sum; keeps a's provenance."""
    return Gradients(**{k: av + bv for (k, av), bv in zip(a.as_dict().items(), b.as_dict().values())},
                     provenance=a.provenance)
