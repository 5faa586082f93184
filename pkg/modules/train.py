"""
Training
========
Adversarial minibatch training of the reranker.

This module provides:
- TrainConfig: validated hyper-parameters and mode (fnn, clann_unsup, clann_semisup)
- Minibatch composition from the labeled source, labeled target and
  unlabeled target pools, each cycled by its own shuffled iterator
- The training loop: combined gradient with reversal at the scheduled
  lambda, one ADAM step per minibatch, dev MAP early stopping
- Grid search over hyper-parameter cells (resumable, optionally threaded)
- Discriminator and fresh logistic-regression language probes

Random streams are split from one seed: parameter init, one cycler per
pool, and separate dropout streams for source and target rows. FNN and
CLANN with lambda fixed at 0 and a frozen discriminator therefore follow
bit-identical task-parameter trajectories.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from modules.data import PairExample, Question, QueryGroup
from modules.error_handler import EmptyPoolError, NumericAbort, ValidationError
from modules.features import FeaturizedPool
from modules.json_helpers import read_json, write_json
from modules.linalg import sample_dropout_mask
from modules.metrics import EvalResult, RankedQuery, evaluate, rank_queries
from modules.model import (
    DISCRIMINATOR_KEYS, Dimensions, DropoutMasks, Gradients, ModelParams, add_gradients,
    batch_losses, combine_gradients, discriminator_gradients, forward, predict_language,
    task_gradients,
)
from modules.optim import LambdaSchedule, adam_step, init_adam_state, lambda_at

logger = logging.getLogger("modules.train")

Mode = Literal['fnn', 'clann_unsup', 'clann_semisup']


class TrainConfig(BaseModel):
    """Hyper-parameters of one training run."""
    mode: Mode = 'clann_unsup'
    batch_size: int = Field(default=8, ge=2)
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    h_size: int = Field(default=10, ge=1)
    f_size: int = Field(default=100, ge=1)
    hl_size: Optional[int] = Field(default=None, ge=1)
    l2_strength: float = Field(default=0.01, ge=0.0)
    max_epochs: int = Field(default=200, ge=1)
    patience: int = Field(default=15, ge=1)
    seed: int = 0
    lambda_gamma: float = Field(default=10.0, gt=0.0)
    lambda_fixed: Optional[float] = Field(default=None, ge=0.0)
    discriminator_updates: bool = True
    scale_discriminator_by_lambda: bool = False
    adam_alpha: float = Field(default=0.001, gt=0.0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(default=1e-8, gt=0.0)
    eval_depth: int = Field(default=10, ge=1)
    probe_holdout: float = Field(default=0.2, ge=0.0, lt=1.0)
    labeled_target_fraction: float = Field(default=0.5, gt=0.0, lt=1.0)
    unlabeled_pairing: Literal['none', 'list', 'pool'] = 'none'

    @model_validator(mode='after')
    def _check_batch(self):
        if self.batch_size % 2:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        if self.mode == 'clann_semisup' and self.batch_size < 4:
            raise ValueError("clann_semisup needs batch_size >= 4")
        return self

    @property
    def keep_probability(self) -> float:
        return 1.0 - self.dropout

    @property
    def adversarial(self) -> bool:
        return self.mode != 'fnn'

    def dimensions(self, d_emb: int, n_phi: int) -> Dimensions:
        return Dimensions(d_emb, n_phi, self.h_size, self.f_size, self.hl_size or self.h_size)


# ============================================================================
# MINIBATCHES
# ============================================================================

def batch_composition(batch_size: int, mode: str) -> Tuple[int, int, int]:
    """(labeled source, labeled target, unlabeled target) counts per minibatch."""
    if mode == 'fnn':
        return batch_size // 2, 0, 0
    if mode == 'clann_unsup':
        return batch_size // 2, 0, batch_size // 2
    third = batch_size // 3
    return batch_size - 2 * third, third, third


class PoolCycler:
    """Shuffled passes over a pool of `size` rows; reshuffles on exhaustion."""

    def __init__(self, size: int, rng: np.random.Generator, name: str):
        if size < 1:
            raise EmptyPoolError(name)
        self.size = size
        self.name = name
        self.rng = rng
        self.passes = 0
        self._order = rng.permutation(size)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._pos == self.size:
                self._order = self.rng.permutation(self.size)
                self._pos = 0
                self.passes += 1
            n = min(k, self.size - self._pos)
            out.append(self._order[self._pos:self._pos + n])
            self._pos += n
            k -= n
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class Minibatch:
    """Row indices into the labeled source, labeled target and unlabeled target pools."""
    source: np.ndarray
    labeled_target: np.ndarray
    unlabeled: np.ndarray

    @property
    def n_labeled(self) -> int:
        return len(self.source) + len(self.labeled_target)

    @property
    def size(self) -> int:
        return self.n_labeled + len(self.unlabeled)


@dataclass(frozen=True)
class RandomStreams:
    """Independent generators spawned from one seed."""
    init: np.random.SeedSequence
    source: np.random.Generator
    labeled_target: np.random.Generator
    unlabeled: np.random.Generator
    source_dropout: np.random.Generator
    target_dropout: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RandomStreams":
        init, *rest = np.random.SeedSequence(seed).spawn(6)
        return cls(init, *(np.random.default_rng(s) for s in rest))


class MinibatchSampler:
    """
    Draws minibatches according to the mode's composition.

    An epoch is steps_per_epoch minibatches, i.e. one shuffled pass over
    the labeled source pool; target pools cycle independently.
    """

    def __init__(self, n_source: int, n_labeled_target: int, n_unlabeled: int,
                 batch_size: int, mode: str, streams: RandomStreams):
        self.composition = batch_composition(batch_size, mode)
        n_src, n_tl, n_unl = self.composition
        self.source = PoolCycler(n_source, streams.source, 'labeled_source')
        self.labeled_target = PoolCycler(n_labeled_target, streams.labeled_target, 'labeled_target') if n_tl else None
        self.unlabeled = PoolCycler(n_unlabeled, streams.unlabeled, 'unlabeled_target') if n_unl else None
        self.steps_per_epoch = max(1, n_source // n_src)

    def next(self) -> Minibatch:
        return sample_minibatch(self)


def sample_minibatch(sampler: MinibatchSampler) -> Minibatch:
    """Take the next rows from each pool the composition draws from."""
    n_src, n_tl, n_unl = sampler.composition
    empty = np.zeros(0, dtype=np.int64)
    return Minibatch(
        source=sampler.source.take(n_src),
        labeled_target=sampler.labeled_target.take(n_tl) if sampler.labeled_target else empty,
        unlabeled=sampler.unlabeled.take(n_unl) if sampler.unlabeled else empty,
    )


# ============================================================================
# UNLABELED PAIRING
# ============================================================================

def unlabeled_pairing(rng: np.random.Generator, target_groups: Sequence[QueryGroup],
                      related_pool: Sequence[Question] = (), use_pool: bool = False) -> PairExample:
    """
    Build a label-free target pair.

    The original is drawn uniformly from the unlabeled target originals; the
    retrieved question is drawn uniformly from its own list, or from the
    related pool when use_pool is set or the original has no list.

    Raises:
        EmptyPoolError: no target originals, or an empty related pool when needed
    """
    if not target_groups:
        raise EmptyPoolError('unlabeled_target')
    group = target_groups[int(rng.integers(len(target_groups)))]
    if group.pairs and not use_pool:
        chosen = group.pairs[int(rng.integers(len(group.pairs)))]
        return PairExample(group.original, chosen.retrieved, chosen.ir_rank, None, 0)
    if not related_pool:
        raise EmptyPoolError('unlabeled_related')
    j = int(rng.integers(len(related_pool)))
    rank = int(rng.integers(1, 11))
    return PairExample(group.original, related_pool[j], rank, None, 0)


def build_unlabeled_pool(rng: np.random.Generator, target_groups: Sequence[QueryGroup], n: int,
                         use_pool: bool = False) -> List[PairExample]:
    """n random pairings, keyed uniquely; duplicates of an existing key are redrawn."""
    related: List[Question] = []
    seen_ids = set()
    for group in target_groups:
        for pair in group.pairs:
            if pair.retrieved.id not in seen_ids:
                seen_ids.add(pair.retrieved.id)
                related.append(pair.retrieved)

    pairs: Dict[Tuple[str, str], PairExample] = {}
    max_unique = sum(len(g.pairs) for g in target_groups) if not use_pool \
        else len(target_groups) * len(related)
    target = min(n, max_unique)
    while len(pairs) < target:
        pair = unlabeled_pairing(rng, target_groups, related, use_pool)
        pairs.setdefault(pair.key, pair)
    return list(pairs.values())


# ============================================================================
# EARLY STOPPING AND REPORTS
# ============================================================================

class EarlyStopping:
    """Strict-improvement early stopping on a maximised metric."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValidationError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best: Optional[float] = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch's metric; True when it is a new best."""
        if self.best is None or value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    task_loss: float
    discriminator_loss: Optional[float]
    lambda_value: float
    dev_map: float
    dev_mrr: float
    dev_avg_rec: float
    probe_accuracy: Optional[float]
    improved: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'task_loss': self.task_loss,
            'discriminator_loss': self.discriminator_loss,
            'lambda': self.lambda_value,
            'dev_map': self.dev_map,
            'dev_mrr': self.dev_mrr,
            'dev_avg_rec': self.dev_avg_rec,
            'probe_accuracy': self.probe_accuracy,
            'improved': self.improved,
        }


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: Optional[EvalResult] = None
    stop_reason: str = ''
    steps: int = 0
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epochs': [e.to_dict() for e in self.epochs],
            'best_epoch': self.best_epoch,
            'best_dev': self.best_dev.to_dict() if self.best_dev else None,
            'stop_reason': self.stop_reason,
            'steps': self.steps,
            'config': self.config,
        }


# ============================================================================
# SCORING HELPERS
# ============================================================================

def score_pool(params: ModelParams, pool: FeaturizedPool) -> np.ndarray:
    """Eval-mode relevance probabilities for every row of a pool."""
    if len(pool) == 0:
        return np.zeros(0)
    return forward(params, pool.z_q, pool.z_r, pool.phi).c_hat


def ranked_queries(pool: FeaturizedPool, scores: np.ndarray, depth: int = 10) -> List[RankedQuery]:
    labels = np.where(np.isfinite(pool.labels), pool.labels, 0.0)
    return rank_queries(pool.query_ids, pool.candidate_ids, scores, labels, pool.ir_ranks, depth)


def evaluate_pool(params: ModelParams, pool: FeaturizedPool, depth: int = 10) -> EvalResult:
    if not pool.labeled:
        raise ValidationError(f"pool '{pool.name}' must be fully labeled for evaluation")
    return evaluate(ranked_queries(pool, score_pool(params, pool), depth))


def classification_accuracy(params: ModelParams, pool: FeaturizedPool) -> float:
    """Fraction of labeled rows where (c_hat >= 0.5) matches the label."""
    pool.require_non_empty()
    labeled = np.isfinite(pool.labels)
    predicted = score_pool(params, pool) >= 0.5
    return float(np.mean(predicted[labeled] == (pool.labels[labeled] == 1.0)))


class DevEvaluator:
    """Callable: params -> EvalResult on a labeled dev pool."""

    def __init__(self, pool: FeaturizedPool, depth: int = 10):
        if not pool.labeled:
            raise ValidationError("dev set must be non-empty and fully labeled")
        self.pool = pool
        self.depth = depth

    def __call__(self, params: ModelParams) -> EvalResult:
        return evaluate_pool(params, self.pool, self.depth)


def probe_discriminator(params: ModelParams, pool: FeaturizedPool) -> float:
    """
    Accuracy of the trained discriminator head on held-out rows.

    l_hat >= 0.5 predicts class 1 (source), so an all-0.5 head scores the
    source fraction.
    """
    if len(pool) == 0:
        raise EmptyPoolError(pool.name)
    predicted = predict_language(params, pool.z_q, pool.z_r, pool.phi) >= 0.5
    return float(np.mean(predicted == (pool.language_bits == 1.0)))


def f_representations(params: ModelParams, pool: FeaturizedPool) -> np.ndarray:
    """Eval-mode f layer for every row."""
    return forward(params, pool.z_q, pool.z_r, pool.phi).f


def language_probe_accuracy(params: ModelParams, pool: FeaturizedPool, holdout: float = 0.3,
                            seed: int = 0) -> float:
    """
    Held-out accuracy of a fresh logistic-regression probe predicting the
    language bit from frozen f representations.

    Raises:
        ValidationError: fewer than two languages or too few rows to split
    """
    bits = pool.language_bits.astype(int)
    if len(np.unique(bits)) < 2:
        raise ValidationError("language probe needs rows from both languages")
    features = f_representations(params, pool)
    x_train, x_test, y_train, y_test = train_test_split(
        features, bits, test_size=holdout, random_state=seed, stratify=bits,
    )
    probe = LogisticRegression(max_iter=1000)
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


# ============================================================================
# TRAINING LOOP
# ============================================================================

def _rows(pool: FeaturizedPool, idx: np.ndarray):
    return pool.z_q[idx], pool.z_r[idx], pool.phi[idx], pool.labels[idx]


def _check_pools(config: TrainConfig, source: FeaturizedPool, unlabeled: Optional[FeaturizedPool],
                 labeled_target: Optional[FeaturizedPool]):
    source.require_non_empty()
    if not source.labeled:
        raise ValidationError("labeled source pool contains unlabeled rows")
    if config.mode in ('clann_unsup', 'clann_semisup'):
        if unlabeled is None or len(unlabeled) == 0:
            raise EmptyPoolError('unlabeled_target')
    if config.mode == 'clann_semisup':
        if labeled_target is None or len(labeled_target) == 0:
            raise EmptyPoolError('labeled_target')
        if not labeled_target.labeled:
            raise ValidationError("labeled target pool contains unlabeled rows")


def train(config: TrainConfig, source: FeaturizedPool, unlabeled: Optional[FeaturizedPool],
          labeled_target: Optional[FeaturizedPool], dev: FeaturizedPool,
          evaluator: Optional[Callable[[ModelParams], EvalResult]] = None,
          probe: Optional[FeaturizedPool] = None,
          log_sink: Optional[Callable[[Dict[str, Any]], None]] = None,
          ) -> Tuple[ModelParams, TrainReport]:
    """
    Train until dev MAP stops improving for `patience` epochs or max_epochs.

    Per minibatch: L_c on labeled rows, L_l on every row (source 1, target 0),
    combined gradient with reversal at the current lambda, one ADAM step.
    Both sums are averaged over the labeled row count.

    Args:
        config: Hyper-parameters and mode
        source: Labeled source pool (language bit 1)
        unlabeled: Unlabeled target pool (required by the clann modes)
        labeled_target: Labeled target pool (required by clann_semisup)
        dev: Labeled dev pool; early stopping watches its MAP
        evaluator: Replaces the default dev evaluator
        probe: Held-out rows for the per-epoch discriminator probe
        log_sink: Receives one record per epoch

    Returns:
        (best-dev-MAP parameters, TrainReport)

    Raises:
        EmptyPoolError: a pool the mode needs is empty
        NumericAbort: non-finite loss, gradient or parameter
    """
    _check_pools(config, source, unlabeled, labeled_target)
    evaluator = evaluator or DevEvaluator(dev, config.eval_depth)

    streams = RandomStreams.from_seed(config.seed)
    dims = config.dimensions(source.z_q.shape[1], source.phi.shape[1])
    params = ModelParams.initialize(dims, streams.init)
    state = init_adam_state(params, config.adam_alpha, config.adam_beta1,
                            config.adam_beta2, config.adam_epsilon)

    sampler = MinibatchSampler(
        len(source),
        len(labeled_target) if labeled_target is not None else 0,
        len(unlabeled) if unlabeled is not None else 0,
        config.batch_size, config.mode, streams,
    )
    schedule = LambdaSchedule(config.max_epochs * sampler.steps_per_epoch, config.lambda_gamma)
    frozen = () if (config.adversarial and config.discriminator_updates) else DISCRIMINATOR_KEYS
    keep = config.keep_probability

    report = TrainReport(config=config.model_dump())
    stopper = EarlyStopping(config.patience)
    best_params = params
    step = 0

    logger.info(
        f"Training {config.mode}: dims {dims.to_dict()}, {sampler.steps_per_epoch} steps/epoch, "
        f"composition {sampler.composition}"
    )

    for epoch in range(1, config.max_epochs + 1):
        task_sum, disc_sum, task_rows, disc_rows = 0.0, 0.0, 0, 0
        lam = 0.0
        for batch_no in range(1, sampler.steps_per_epoch + 1):
            lam = config.lambda_fixed if config.lambda_fixed is not None else lambda_at(schedule, step)
            batch = sample_minibatch(sampler)
            grads, lc, ll, n_disc = _batch_gradients(
                config, params, batch, source, labeled_target, unlabeled, streams, keep, lam,
            )
            if not math.isfinite(lc):
                raise NumericAbort(epoch, batch_no, 'task_loss', f"L_c={lc}")
            if not math.isfinite(ll):
                raise NumericAbort(epoch, batch_no, 'discriminator_loss', f"L_l={ll}")
            bad = grads.non_finite_block()
            if bad:
                raise NumericAbort(epoch, batch_no, bad, "gradient")

            state, params = adam_step(state, params, grads, config.l2_strength, frozen)
            bad = params.non_finite_block()
            if bad:
                raise NumericAbort(epoch, batch_no, bad, "parameter after update")

            task_sum += lc
            task_rows += batch.n_labeled
            disc_sum += ll
            disc_rows += n_disc
            step += 1

        dev_result = evaluator(params)
        improved = stopper.update(dev_result.map, epoch)
        if improved:
            best_params = params
            report.best_dev = dev_result
            report.best_epoch = epoch

        record = EpochRecord(
            epoch=epoch,
            task_loss=task_sum / task_rows,
            discriminator_loss=disc_sum / disc_rows if disc_rows else None,
            lambda_value=lam,
            dev_map=dev_result.map,
            dev_mrr=dev_result.mrr,
            dev_avg_rec=dev_result.avg_rec,
            probe_accuracy=probe_discriminator(params, probe) if probe is not None and len(probe) else None,
            improved=improved,
        )
        report.epochs.append(record)
        if log_sink is not None:
            log_sink(record.to_dict())
        logger.debug(
            f"epoch {epoch}: L_c {record.task_loss:.4f} lambda {lam:.4f} dev MAP {dev_result.map:.4f}"
            + (" *" if improved else "")
        )

        if stopper.should_stop:
            report.stop_reason = 'patience'
            break
    else:
        report.stop_reason = 'max_epochs'

    report.steps = step
    logger.info(
        f"Training stopped ({report.stop_reason}) after {len(report.epochs)} epochs; "
        f"best dev MAP {stopper.best:.4f} at epoch {report.best_epoch}"
    )
    return best_params, report


def _batch_gradients(config: TrainConfig, params: ModelParams, batch: Minibatch,
                     source: FeaturizedPool, labeled_target: Optional[FeaturizedPool],
                     unlabeled: Optional[FeaturizedPool], streams: RandomStreams, keep: float,
                     lam: float) -> Tuple[Gradients, float, float, int]:
    """Combined gradient and summed losses of one minibatch."""
    n_h, n_f = params.dims.n_h, params.dims.n_f
    n_src = len(batch.source)

    zq, zr, phi, c = _rows(source, batch.source)
    mask_h = [sample_dropout_mask(n_h, keep, streams.source_dropout, rows=n_src).mask]
    mask_f = [sample_dropout_mask(n_f, keep, streams.source_dropout, rows=n_src).mask]
    bits = [np.ones(n_src)]
    if len(batch.labeled_target):
        n_tl = len(batch.labeled_target)
        tq, tr, tphi, tc = _rows(labeled_target, batch.labeled_target)
        zq, zr, phi, c = np.vstack([zq, tq]), np.vstack([zr, tr]), np.vstack([phi, tphi]), np.concatenate([c, tc])
        mask_h.append(sample_dropout_mask(n_h, keep, streams.target_dropout, rows=n_tl).mask)
        mask_f.append(sample_dropout_mask(n_f, keep, streams.target_dropout, rows=n_tl).mask)
        bits.append(np.zeros(n_tl))

    masks = DropoutMasks(np.vstack(mask_h), np.vstack(mask_f))
    adversarial = config.adversarial
    trace = forward(params, zq, zr, phi, masks, with_discriminator=adversarial)
    task = task_gradients(params, trace, c)
    l_labeled = np.concatenate(bits)
    lc, ll, _ = batch_losses(trace, c, l_labeled if adversarial else None)
    n_disc = batch.n_labeled if adversarial else 0

    disc = None
    if adversarial:
        disc = discriminator_gradients(params, trace, l_labeled)
        if len(batch.unlabeled):
            n_unl = len(batch.unlabeled)
            uq, ur, uphi, _ = _rows(unlabeled, batch.unlabeled)
            u_masks = DropoutMasks(
                sample_dropout_mask(n_h, keep, streams.target_dropout, rows=n_unl).mask,
                sample_dropout_mask(n_f, keep, streams.target_dropout, rows=n_unl).mask,
            )
            u_trace = forward(params, uq, ur, uphi, u_masks, with_discriminator=True)
            l_unl = np.zeros(n_unl)
            disc = add_gradients(disc, discriminator_gradients(params, u_trace, l_unl))
            _, ll_unl, _ = batch_losses(u_trace, np.full(n_unl, np.nan), l_unl)
            ll += ll_unl
            n_disc += n_unl

    disc_weight = lam if config.scale_discriminator_by_lambda else 1.0
    grads = combine_gradients(task, disc, lam if adversarial else 0.0,
                              scale=1.0 / batch.n_labeled, discriminator_weight=disc_weight)
    return grads, lc, ll, n_disc


# ============================================================================
# GRID SEARCH
# ============================================================================

GRID_FIELDS = ('batch_size', 'dropout', 'h_size', 'f_size', 'l2_strength')


@dataclass
class CellResult:
    index: int
    overrides: Dict[str, Any]
    dev_map: float
    dev_mrr: float
    best_epoch: int
    epochs_run: int
    params: Optional[ModelParams] = None
    resumed: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'index': self.index,
            'overrides': self.overrides,
            'dev_map': self.dev_map,
            'dev_mrr': self.dev_mrr,
            'best_epoch': self.best_epoch,
            'epochs_run': self.epochs_run,
            'model': self.params.to_dict() if self.params is not None else None,
        }


@dataclass
class GridResult:
    best: CellResult
    best_config: TrainConfig
    cells: List[CellResult]

    def table(self) -> List[Dict[str, Any]]:
        return [{k: v for k, v in c.to_dict().items() if k != 'model'} for c in self.cells]


def _cell_path(cell_dir: Optional[str], index: int) -> Optional[Path]:
    return Path(cell_dir) / "cells" / f"cell_{index:03d}.json" if cell_dir else None


def _load_cell(path: Path, index: int, overrides: Dict[str, Any]) -> Optional[CellResult]:
    try:
        data = read_json(str(path))
    except Exception as e:
        logger.warning(f"Ignoring unreadable grid cell {path}: {e}")
        return None
    if data.get('overrides') != overrides or data.get('model') is None:
        logger.warning(f"Grid cell {path} does not match cell {index}; retraining")
        return None
    return CellResult(index, overrides, float(data['dev_map']), float(data['dev_mrr']),
                      int(data['best_epoch']), int(data['epochs_run']),
                      ModelParams.from_dict(data['model']), resumed=True)


def grid_search(cells: Sequence[Mapping[str, Any]], base: TrainConfig, source: FeaturizedPool,
                unlabeled: Optional[FeaturizedPool], labeled_target: Optional[FeaturizedPool],
                dev: FeaturizedPool, cell_dir: Optional[str] = None, threads: int = 1) -> GridResult:
    """
    Train one model per grid cell and pick the best by dev MAP.

    Cell i trains with seed base.seed + i. Ties on MAP go to the higher MRR,
    then to the earlier cell. Finished cells are stored under
    <cell_dir>/cells/cell_NNN.json and reused on a rerun.

    Raises:
        ValidationError: empty grid or an invalid cell
    """
    if not cells:
        raise ValidationError("grid search needs at least one cell")

    configs = []
    for i, overrides in enumerate(cells):
        try:
            configs.append(TrainConfig.model_validate(
                {**base.model_dump(), **dict(overrides), 'seed': base.seed + i}
            ))
        except ValueError as e:
            raise ValidationError(f"grid cell {i} {dict(overrides)} is invalid: {e}") from e

    def run_cell(i: int) -> CellResult:
        overrides = dict(cells[i])
        path = _cell_path(cell_dir, i)
        if path is not None and path.exists():
            cached = _load_cell(path, i, overrides)
            if cached is not None:
                logger.info(f"Grid cell {i} resumed from {path}")
                return cached
        params, report = train(configs[i], source, unlabeled, labeled_target, dev)
        result = CellResult(i, overrides, report.best_dev.map, report.best_dev.mrr,
                            report.best_epoch, len(report.epochs), params)
        if path is not None:
            write_json(str(path), result.to_dict())
        logger.info(f"Grid cell {i} {overrides}: dev MAP {result.dev_map:.4f}")
        return result

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, range(len(cells))))
    else:
        results = [run_cell(i) for i in range(len(cells))]

    best = max(results, key=lambda r: (r.dev_map, r.dev_mrr, -r.index))
    logger.info(f"Grid search: best cell {best.index} of {len(results)} (dev MAP {best.dev_map:.4f})")
    return GridResult(best, configs[best.index], results)
