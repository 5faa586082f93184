"""
Reranker Service Core
Ties the feature pipeline, the trainer and the model file together.
"""
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.data import Dataset, PairExample, group_by_query, split_for_semisup
from modules.embeddings import EmbeddingTable
from modules.error_handler import SchemaMismatch, ValidationError
from modules.features import (
    FeatureConfig, FeaturizedPool, FeatureScaler, FeatureSchema, concat_pools, feature_schema,
    featurize_pool, fit_scaler_matrix,
)
from modules.json_helpers import JSONLWriter, read_json, write_json
from modules.metrics import EvalResult, RankedQuery
from modules.model import ModelParams, forward
from modules.train import (
    TrainConfig, TrainReport, build_unlabeled_pool, evaluate_pool, language_probe_accuracy,
    ranked_queries, score_pool, train,
)

logger = logging.getLogger("core")

__version__ = "1.0.0"

MODEL_FORMAT = "clann-model"
MODEL_VERSION = 1


def file_fingerprint(path: str) -> str:
    """sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Provenance record attached to every artifact of a command."""
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    seed: Optional[int] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__
    started: float = field(default_factory=time.monotonic, repr=False)

    def add_input(self, path: Optional[str]):
        if path and Path(path).is_file():
            self.inputs[str(path)] = file_fingerprint(path)

    def add_artifact(self, name: str, path: str):
        self.artifacts[name] = str(path)

    def finish(self):
        self.wall_clock_seconds = round(time.monotonic() - self.started, 3)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'command': self.command,
            'config': self.config,
            'inputs': dict(sorted(self.inputs.items())),
            'seed': self.seed,
            'artifacts': dict(sorted(self.artifacts.items())),
            'wall_clock_seconds': self.wall_clock_seconds,
            'version': self.version,
        }

    def write(self, path: str):
        self.finish()
        write_json(path, self.to_dict())


# ============================================================================
# FEATURE CONTEXT
# ============================================================================

@dataclass
class FeatureContext:
    """Embedding tables, feature settings, the schema they imply and the fitted scaler."""
    tables: List[EmbeddingTable]
    config: FeatureConfig
    schema: FeatureSchema
    scaler: Optional[FeatureScaler] = None

    @classmethod
    def build(cls, tables: Sequence[EmbeddingTable], config: FeatureConfig) -> "FeatureContext":
        if config.mode == 'text' and not tables:
            raise ValidationError("text feature mode needs at least one --embeddings table")
        return cls(list(tables), config, feature_schema(tables, config))

    def fingerprints(self) -> List[Dict[str, Any]]:
        return [t.fingerprint() for t in self.tables]

    def encode_raw(self, name: str, pairs: Sequence[PairExample]) -> FeaturizedPool:
        return featurize_pool(name, pairs, self.tables, self.config, None, self.schema)

    def encode(self, name: str, pairs: Sequence[PairExample]) -> FeaturizedPool:
        """Featurize a pool with the fitted scaler applied."""
        if self.scaler is None:
            raise ValidationError("feature scaler has not been fitted")
        return featurize_pool(name, pairs, self.tables, self.config, self.scaler, self.schema)

    def fit_scaler(self, raw_pool: FeaturizedPool) -> FeaturizedPool:
        """Fit the scaler on a raw training pool and return it scaled."""
        self.scaler = fit_scaler_matrix(raw_pool.phi, self.schema.names)
        return raw_pool.with_phi(self.scaler.transform(raw_pool.phi))


# ============================================================================
# MODEL FILE
# ============================================================================

@dataclass
class LoadedModel:
    params: ModelParams
    context: FeatureContext
    train_config: Dict[str, Any]
    source_language: str
    target_language: str
    run_manifest: Dict[str, Any]


def save_model(path: str, params: ModelParams, context: FeatureContext, train_config: TrainConfig,
               source_language: str, target_language: str,
               manifest: Optional[RunManifest] = None):
    """Write the JSON model container."""
    if context.scaler is None:
        raise ValidationError("cannot save a model without a fitted scaler")
    document = {
        'format': MODEL_FORMAT,
        'version': MODEL_VERSION,
        **params.to_dict(),
        'feature_schema': context.schema.to_dict(),
        'feature_config': context.config.model_dump(),
        'scaler': context.scaler.to_dict(),
        'embeddings': context.fingerprints(),
        'languages': {'source': source_language, 'target': target_language},
        'train_config': train_config.model_dump(),
        'run_manifest': manifest.to_dict() if manifest else None,
    }
    write_json(path, document)
    logger.info(f"Model saved to {path}")


def load_model(path: str, tables: Sequence[EmbeddingTable]) -> LoadedModel:
    """
    Load a model file and check it against the supplied embedding tables.

    Raises:
        SchemaMismatch: format/version, embedding fingerprints, feature schema
            or scaler width differ
    """
    data = read_json(path)
    if data.get('format') != MODEL_FORMAT:
        raise SchemaMismatch("model format", MODEL_FORMAT, data.get('format'))
    if data.get('version') != MODEL_VERSION:
        raise SchemaMismatch("model version", MODEL_VERSION, data.get('version'))

    supplied = [t.fingerprint() for t in tables]
    if data.get('embeddings', []) != supplied:
        raise SchemaMismatch("embedding fingerprints", data.get('embeddings'), supplied)

    feature_config = FeatureConfig.model_validate(data['feature_config'])
    stored_schema = FeatureSchema.from_dict(data['feature_schema'])
    stored_schema.check_matches(feature_schema(tables, feature_config))

    scaler = FeatureScaler.from_dict(data['scaler'])
    params = ModelParams.from_dict(data)
    if params.dims.n_phi != len(stored_schema.names) or scaler.mean.shape[0] != len(stored_schema.names):
        raise SchemaMismatch("feature width", len(stored_schema.names),
                             {'model': params.dims.n_phi, 'scaler': int(scaler.mean.shape[0])})

    context = FeatureContext(list(tables), feature_config, stored_schema, scaler)
    languages = data.get('languages') or {}
    logger.info(f"Model loaded from {path} ({stored_schema.version}, dims {params.dims.to_dict()})")
    return LoadedModel(params, context, data.get('train_config') or {},
                       languages.get('source', 'en'), languages.get('target', 'ar'),
                       data.get('run_manifest') or {})


# ============================================================================
# PIPELINE
# ============================================================================

@dataclass
class PreparedPools:
    source: FeaturizedPool
    unlabeled: Optional[FeaturizedPool]
    labeled_target: Optional[FeaturizedPool]
    dev: FeaturizedPool
    test: Optional[FeaturizedPool] = None
    test_target: Optional[FeaturizedPool] = None
    probe: Optional[FeaturizedPool] = None


@dataclass
class TrainOutcome:
    params: ModelParams
    report: TrainReport
    pools: PreparedPools
    evaluations: Dict[str, EvalResult] = field(default_factory=dict)
    language_probe: Optional[float] = None

    def summary(self) -> Dict[str, Any]:
        return {
            'report': self.report.to_dict(),
            'evaluations': {k: v.to_dict() for k, v in self.evaluations.items()},
            'language_probe_accuracy': self.language_probe,
        }


class RerankPipeline:
    """
    End-to-end training and reranking for one configuration.

    Features:
    - Semi-supervised split when the dataset has no labeled target pool
    - Optional random unlabeled pairings
    - Scaler fitted on the labeled source pool only
    - Held-out probe rows for the per-epoch discriminator accuracy
    """

    def __init__(self, train_config: TrainConfig, context: FeatureContext):
        self.config = train_config
        self.context = context

    def _split_pools(self, dataset: Dataset) -> Tuple[List[PairExample], List[PairExample],
                                                       List[PairExample], List[PairExample]]:
        cfg = self.config
        source = list(dataset.labeled_source)
        labeled_target = list(dataset.labeled_target)
        if cfg.mode == 'clann_semisup' and not labeled_target:
            source, labeled_target = split_for_semisup(
                source, cfg.labeled_target_fraction, cfg.seed, dataset.target_language, dataset.vectors,
            )

        unlabeled = list(dataset.unlabeled_target)
        if cfg.mode == 'fnn':
            unlabeled = []
        elif cfg.unlabeled_pairing != 'none' and unlabeled:
            rng = np.random.default_rng([cfg.seed, 1])
            unlabeled = build_unlabeled_pool(rng, group_by_query(unlabeled), len(unlabeled),
                                             use_pool=cfg.unlabeled_pairing == 'pool')

        held_out: List[PairExample] = []
        if cfg.adversarial and cfg.probe_holdout > 0 and len(unlabeled) >= 4:
            rng = np.random.default_rng([cfg.seed, 2])
            n_hold = max(1, int(round(len(unlabeled) * cfg.probe_holdout)))
            hold = set(int(i) for i in rng.permutation(len(unlabeled))[:n_hold])
            held_out = [p for i, p in enumerate(unlabeled) if i in hold]
            unlabeled = [p for i, p in enumerate(unlabeled) if i not in hold]
        return source, labeled_target, unlabeled, held_out

    def prepare(self, dataset: Dataset) -> PreparedPools:
        """Featurize and scale every pool the configured mode uses."""
        if not dataset.dev:
            raise ValidationError("dataset has no dev split; early stopping needs one")
        source, labeled_target, unlabeled, held_out = self._split_pools(dataset)

        ctx = self.context
        source_pool = ctx.fit_scaler(ctx.encode_raw('labeled_source', source))
        dev_pool = ctx.encode('dev', dataset.dev)

        probe = None
        if held_out:
            target_rows = ctx.encode('probe_target', held_out)
            n_dev = min(len(dev_pool), len(target_rows))
            probe = concat_pools('probe', [dev_pool.subset(range(n_dev)), target_rows])

        pools = PreparedPools(
            source=source_pool,
            unlabeled=ctx.encode('unlabeled_target', unlabeled) if unlabeled else None,
            labeled_target=ctx.encode('labeled_target', labeled_target) if labeled_target else None,
            dev=dev_pool,
            test=ctx.encode('test', dataset.test) if dataset.test else None,
            test_target=ctx.encode('test_target', dataset.test_target) if dataset.test_target else None,
            probe=probe,
        )
        logger.info(
            f"Pools ready: source {len(pools.source)}, unlabeled "
            f"{len(pools.unlabeled) if pools.unlabeled else 0}, labeled target "
            f"{len(pools.labeled_target) if pools.labeled_target else 0}, dev {len(pools.dev)}, "
            f"{len(ctx.schema.names)} features ({ctx.schema.version})"
        )
        return pools

    def fit(self, dataset: Dataset, log_path: Optional[str] = None) -> TrainOutcome:
        """Prepare pools, train, then evaluate every labeled held-out split."""
        pools = self.prepare(dataset)
        writer = JSONLWriter(log_path) if log_path else None
        try:
            params, report = train(
                self.config, pools.source, pools.unlabeled, pools.labeled_target, pools.dev,
                probe=pools.probe, log_sink=writer.write if writer else None,
            )
        finally:
            if writer:
                writer.close()

        outcome = TrainOutcome(params, report, pools)
        for name in ('dev', 'test', 'test_target'):
            pool = getattr(pools, name)
            if pool is None or not pool.labeled:
                continue
            try:
                outcome.evaluations[name] = evaluate_pool(params, pool, self.config.eval_depth)
            except ValidationError as e:
                logger.warning(f"Skipping evaluation of '{name}': {e}")

        if pools.test is not None and pools.test_target is not None:
            mixed = concat_pools('language_probe', [pools.test, pools.test_target])
            try:
                outcome.language_probe = language_probe_accuracy(params, mixed, seed=self.config.seed)
            except (ValueError, ValidationError) as e:
                logger.warning(f"Language probe skipped: {e}")
        return outcome


def rerank(params: ModelParams, context: FeatureContext, pairs: Sequence[PairExample],
           depth: int = 10, debug_trace: bool = False) -> Tuple[List[RankedQuery], FeaturizedPool]:
    """Score and rank candidate lists; debug_trace logs each candidate's forward pass."""
    pool = context.encode('rerank', pairs).require_non_empty()
    scores = score_pool(params, pool)
    if debug_trace:
        trace = forward(params, pool.z_q, pool.z_r, pool.phi)
        for i in range(len(pool)):
            logger.info(
                f"trace {pool.query_ids[i]}/{pool.candidate_ids[i]} rank {pool.ir_ranks[i]}: "
                f"h={np.round(trace.h[i], 6).tolist()} f_norm={float(np.linalg.norm(trace.f[i])):.6f} "
                f"logit={float(trace.logit[i])!r} score={float(scores[i])!r}"
            )
    return ranked_queries(pool, scores, depth), pool
