"""
Pairwise Features
=================
The phi(q, q') vector fed to the hidden layer and the output layer.

This module provides:
- MT-evaluation style similarities (n-gram statistics, smoothed sentence BLEU,
  length features, unigram precision/recall)
- Embedding cosines, one per configured table
- Surface counts (URLs, images, emails, phones, tokens, sentences, smileys,
  punctuation runs, OOV words) for both questions, plus pair ratios
- The reciprocal-rank meta feature
- A block registry that fixes the schema order, a train-fitted standardizer,
  and FeaturizedPool, the dense arrays the network consumes

Schema (text mode, in order):
  bleu.*      17 values: p1..p4, m1..m4, t1..t4, cand_len, ref_len,
              length_ratio, brevity_penalty, bleu
  unigram.*   precision, recall
  cos.<name>  one per embedding table
  orig.*      surface counts of q       (see SURFACE_NAMES)
  rel.*       surface counts of q'
  ratio.*     tokens, sentences, oov
  meta.reciprocal_rank

Vector mode (precomputed question vectors): vector_cosine, meta.reciprocal_rank.

The original question q is the hypothesis and the retrieved q' the
reference. When the two languages differ, q's translated text is used for
the MT-similarity block if present; otherwise raw tokens are compared.
"""
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from nltk.util import ngrams
from pydantic import BaseModel, Field

from modules.data import PairExample, Question
from modules.embeddings import EmbeddingTable, embed_question, oov_count, tokenize
from modules.error_handler import DimensionMismatch, EmptyPoolError, SchemaMismatch, ValidationError
from modules.linalg import Matrix, Vector

logger = logging.getLogger("modules.features")

TEXT_SCHEMA_VERSION = "clann-text-v1"
VECTOR_SCHEMA_VERSION = "clann-vector-v1"

CONSTANT_EPSILON = 1e-12


class FeatureConfig(BaseModel):
    """Feature extraction settings."""
    mode: Literal['text', 'vector'] = 'text'
    max_n: int = Field(default=4, ge=1)


# ============================================================================
# MT-EVALUATION FEATURES
# ============================================================================

class NgramStat(NamedTuple):
    clipped_matches: int
    candidate_count: int
    precision: float


def ngram_stats(candidate: Sequence[str], reference: Sequence[str],
                max_n: int = 4) -> List[NgramStat]:
    """
    Clipped n-gram matches for n = 1..max_n.

    precision = clipped / candidate_count, 0 when the candidate has no n-grams.
    """
    if max_n < 1:
        raise ValidationError(f"max_n must be >= 1, got {max_n}")
    stats = []
    for n in range(1, max_n + 1):
        cand_counts = Counter(ngrams(candidate, n))
        ref_counts = Counter(ngrams(reference, n))
        total = sum(cand_counts.values())
        clipped = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        stats.append(NgramStat(clipped, total, clipped / total if total else 0.0))
    return stats


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    """min(1, exp(1 - ref_len/cand_len)); 0 for an empty candidate."""
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / cand_len))


def sentence_bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """
    Sentence-level BLEU with add-one smoothing for n >= 2.

    p1 is unsmoothed, so a candidate without any unigram match scores 0.
    """
    if not candidate:
        return 0.0
    stats = ngram_stats(candidate, reference, max_n)
    if stats[0].clipped_matches == 0:
        return 0.0
    log_sum = math.log(stats[0].precision)
    for stat in stats[1:]:
        log_sum += math.log((stat.clipped_matches + 1) / (stat.candidate_count + 1))
    return brevity_penalty(len(candidate), len(reference)) * math.exp(log_sum / max_n)


def length_features(candidate: Sequence[str], reference: Sequence[str]) -> Tuple[float, float, float, float]:
    """(cand_len, ref_len, length_ratio, brevity_penalty); ratio 0 when ref_len is 0."""
    c, r = len(candidate), len(reference)
    return float(c), float(r), (c / r if r else 0.0), brevity_penalty(c, r)


def unigram_precision_recall(candidate: Sequence[str], reference: Sequence[str]) -> Tuple[float, float]:
    ref_counts = Counter(reference)
    matches = sum(min(n, ref_counts[tok]) for tok, n in Counter(candidate).items())
    precision = matches / len(candidate) if candidate else 0.0
    recall = matches / len(reference) if reference else 0.0
    return precision, recall


def vector_cosine(a: Vector, b: Vector) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 when either norm is zero."""
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


def cosine_feature(q: Question, q_rel: Question, table: EmbeddingTable) -> float:
    """Cosine of the averaged question vectors under one table."""
    if not q.tokens or not q_rel.tokens:
        return 0.0
    return vector_cosine(embed_question(q, table).vector, embed_question(q_rel, table).vector)


# ============================================================================
# SURFACE FEATURES
# ============================================================================

URL_RE = re.compile(r"[a-z][a-z0-9+.\-]*://\S+", re.IGNORECASE)
IMAGE_RE = re.compile(r"\.(?:jpe?g|png|gif|bmp|svg|webp)$", re.IGNORECASE)
EMAIL_RE = re.compile(r"[\w.+\-]+@[\w\-]+(?:\.[\w\-]+)+")
PHONE_RE = re.compile(r"(?<![\w])\+?\d(?:[ ().\-]?\d){6,}(?![\w])")
SENTENCE_RE = re.compile(r"[^.!?]+[.!?]*")
EXCLAMATION_RE = re.compile(r"!+")
QUESTION_RE = re.compile(r"\?+")

POSITIVE_SMILEYS = frozenset({
    ":)", ":-)", ":d", ":-d", ";)", ";-)", ":p", ":-p", "=)", "(:", ":]", "^_^", "<3",
})
NEGATIVE_SMILEYS = frozenset({
    ":(", ":-(", ":'(", "):", ":[", ":/", ":-/", "=(", ">:(",
})

SURFACE_NAMES = (
    'urls', 'images', 'emails', 'phones', 'tokens', 'sentences', 'avg_tokens',
    'type_token', 'smileys_pos', 'smileys_neg',
    'excl_single', 'excl_double', 'excl_triple',
    'quest_single', 'quest_double', 'quest_triple',
    'oov',
)
RATIO_NAMES = ('tokens', 'sentences', 'oov')


def _run_counts(pattern: re.Pattern, text: str) -> Tuple[int, int, int]:
    """Longest-match segmentation of punctuation runs into triples, doubles, singles."""
    single = double = triple = 0
    for match in pattern.finditer(text):
        length = len(match.group())
        triple += length // 3
        rest = length % 3
        if rest == 2:
            double += 1
        elif rest == 1:
            single += 1
    return single, double, triple


def count_sentences(text: str) -> int:
    """Maximal segments ending in . ! or ? (a trailing unterminated segment counts); min 1."""
    if not text.strip():
        return 0
    masked = EMAIL_RE.sub(" EMAIL ", URL_RE.sub(" URL ", text))
    count = sum(1 for seg in SENTENCE_RE.findall(masked) if re.search(r"\w", seg))
    return max(count, 1)


def surface_counts(q: Question, tables: Sequence[EmbeddingTable] = ()) -> Dict[str, float]:
    text = q.text
    urls = URL_RE.findall(text)
    no_urls = URL_RE.sub(" ", text)
    emails = EMAIL_RE.findall(no_urls)
    no_emails = EMAIL_RE.sub(" ", no_urls)

    raw_tokens = no_urls.lower().split()
    n_tokens = len(q.tokens)
    sentences = count_sentences(text)
    excl = _run_counts(EXCLAMATION_RE, no_urls)
    quest = _run_counts(QUESTION_RE, no_urls)

    return {
        'urls': float(len(urls)),
        'images': float(sum(1 for u in urls if IMAGE_RE.search(u.rstrip('.,;:!?)')))),
        'emails': float(len(emails)),
        'phones': float(len(PHONE_RE.findall(no_emails))),
        'tokens': float(n_tokens),
        'sentences': float(sentences),
        'avg_tokens': n_tokens / sentences if sentences else 0.0,
        'type_token': len(set(q.tokens)) / n_tokens if n_tokens else 0.0,
        'smileys_pos': float(sum(1 for t in raw_tokens if t in POSITIVE_SMILEYS)),
        'smileys_neg': float(sum(1 for t in raw_tokens if t in NEGATIVE_SMILEYS)),
        'excl_single': float(excl[0]),
        'excl_double': float(excl[1]),
        'excl_triple': float(excl[2]),
        'quest_single': float(quest[0]),
        'quest_double': float(quest[1]),
        'quest_triple': float(quest[2]),
        'oov': float(oov_count(list(q.tokens), list(tables))),
    }


def surface_features(q: Question, tables: Sequence[EmbeddingTable] = ()) -> List[Tuple[str, float]]:
    """Named surface counts of one question, in SURFACE_NAMES order."""
    counts = surface_counts(q, tables)
    return [(name, counts[name]) for name in SURFACE_NAMES]


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def pair_ratio_features(q: Question, q_rel: Question,
                        tables: Sequence[EmbeddingTable] = ()) -> List[Tuple[str, float]]:
    """count(q)/count(q') for tokens, sentences and OOV words; 0 on a zero denominator."""
    a, b = surface_counts(q, tables), surface_counts(q_rel, tables)
    return [(name, _ratio(a[name], b[name])) for name in RATIO_NAMES]


def reciprocal_rank_feature(ir_rank: int) -> float:
    if ir_rank < 1:
        raise ValidationError(f"ir_rank must be >= 1, got {ir_rank}")
    return 1.0 / ir_rank


# ============================================================================
# BLOCK REGISTRY
# ============================================================================

@dataclass(frozen=True)
class FeatureBlock:
    name: str
    names: Callable[[Sequence[EmbeddingTable], FeatureConfig], List[str]]
    compute: Callable[[PairExample, Sequence[EmbeddingTable], FeatureConfig], List[float]]
    modes: Tuple[str, ...]


FEATURE_BLOCKS: Dict[str, FeatureBlock] = {}


def register_block(name: str, names: Callable, modes: Tuple[str, ...] = ('text',)):
    """
    Decorator registering a feature block.

    Blocks are concatenated in registration order.

    Usage:
        @register_block('meteor', lambda tables, cfg: ['meteor.score'])
        def meteor_block(pair, tables, config):
            return [...]
    """
    def decorator(func):
        if name in FEATURE_BLOCKS:
            raise ValueError(f"feature block '{name}' registered twice")
        FEATURE_BLOCKS[name] = FeatureBlock(name, names, func, modes)
        return func
    return decorator


def hypothesis_tokens(pair: PairExample) -> List[str]:
    q, q_rel = pair.original, pair.retrieved
    if q.language != q_rel.language and q.translated_text:
        return tokenize(q.translated_text)
    return list(q.tokens)


def _bleu_names(tables, config):
    n = range(1, config.max_n + 1)
    return ([f"bleu.p{i}" for i in n] + [f"bleu.m{i}" for i in n] + [f"bleu.t{i}" for i in n]
            + ['bleu.cand_len', 'bleu.ref_len', 'bleu.length_ratio', 'bleu.brevity_penalty', 'bleu.bleu'])


@register_block('bleu', _bleu_names)
def bleu_block(pair: PairExample, tables, config: FeatureConfig) -> List[float]:
    cand, ref = hypothesis_tokens(pair), list(pair.retrieved.tokens)
    stats = ngram_stats(cand, ref, config.max_n)
    return ([s.precision for s in stats]
            + [float(s.clipped_matches) for s in stats]
            + [float(s.candidate_count) for s in stats]
            + list(length_features(cand, ref))
            + [sentence_bleu(cand, ref, config.max_n)])


@register_block('unigram', lambda tables, config: ['unigram.precision', 'unigram.recall'])
def unigram_block(pair: PairExample, tables, config) -> List[float]:
    return list(unigram_precision_recall(hypothesis_tokens(pair), list(pair.retrieved.tokens)))


@register_block('cosine', lambda tables, config: [f"cos.{t.name}" for t in tables])
def cosine_block(pair: PairExample, tables, config) -> List[float]:
    return [cosine_feature(pair.original, pair.retrieved, t) for t in tables]


@register_block('surface_orig', lambda tables, config: [f"orig.{n}" for n in SURFACE_NAMES])
def surface_orig_block(pair: PairExample, tables, config) -> List[float]:
    return [v for _, v in surface_features(pair.original, tables)]


@register_block('surface_rel', lambda tables, config: [f"rel.{n}" for n in SURFACE_NAMES])
def surface_rel_block(pair: PairExample, tables, config) -> List[float]:
    return [v for _, v in surface_features(pair.retrieved, tables)]


@register_block('ratio', lambda tables, config: [f"ratio.{n}" for n in RATIO_NAMES])
def ratio_block(pair: PairExample, tables, config) -> List[float]:
    return [v for _, v in pair_ratio_features(pair.original, pair.retrieved, tables)]


@register_block('vector_cosine', lambda tables, config: ['vector_cosine'], modes=('vector',))
def vector_cosine_block(pair: PairExample, tables, config) -> List[float]:
    a, b = pair.original.precomputed_vector, pair.retrieved.precomputed_vector
    if a is None or b is None:
        missing = pair.original.id if a is None else pair.retrieved.id
        raise ValidationError(f"question '{missing}' has no precomputed vector")
    return [vector_cosine(a, b)]


@register_block('meta', lambda tables, config: ['meta.reciprocal_rank'], modes=('text', 'vector'))
def meta_block(pair: PairExample, tables, config) -> List[float]:
    return [reciprocal_rank_feature(pair.ir_rank)]


# ============================================================================
# EXTRACTION
# ============================================================================

@dataclass(frozen=True)
class FeatureSchema:
    names: Tuple[str, ...]
    version: str

    def to_dict(self) -> Dict[str, object]:
        return {'names': list(self.names), 'version': self.version}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "FeatureSchema":
        return cls(tuple(data['names']), str(data['version']))

    def check_matches(self, other: "FeatureSchema"):
        if self.version != other.version:
            raise SchemaMismatch("feature schema version", self.version, other.version)
        if self.names != other.names:
            raise SchemaMismatch("feature names", list(self.names), list(other.names))


@dataclass(frozen=True)
class PairFeatures:
    values: Vector
    names: Tuple[str, ...]
    schema_version: str

    def __post_init__(self):
        if self.values.shape != (len(self.names),):
            raise ValidationError(
                f"feature vector has {self.values.shape} values for {len(self.names)} names"
            )


def _active_blocks(config: FeatureConfig) -> List[FeatureBlock]:
    return [b for b in FEATURE_BLOCKS.values() if config.mode in b.modes]


def feature_schema(tables: Sequence[EmbeddingTable], config: Optional[FeatureConfig] = None) -> FeatureSchema:
    """The ordered feature names for a table list and config."""
    config = config or FeatureConfig()
    names: List[str] = []
    for block in _active_blocks(config):
        names.extend(block.names(tables, config))
    if len(set(names)) != len(names):
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        raise ValidationError(f"duplicate feature names in schema: {dupes}")
    version = TEXT_SCHEMA_VERSION if config.mode == 'text' else VECTOR_SCHEMA_VERSION
    return FeatureSchema(tuple(names), version)


def extract_pair_features(pair: PairExample, tables: Sequence[EmbeddingTable],
                          config: Optional[FeatureConfig] = None,
                          schema: Optional[FeatureSchema] = None) -> PairFeatures:
    """
    Compute phi(q, q') for one pair.

    Raises:
        ValidationError: non-finite feature, missing precomputed vector
    """
    config = config or FeatureConfig()
    schema = schema or feature_schema(tables, config)
    values: List[float] = []
    for block in _active_blocks(config):
        values.extend(block.compute(pair, tables, config))
    vec = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        bad = [schema.names[i] for i in np.flatnonzero(~np.isfinite(vec))]
        raise ValidationError(f"non-finite features {bad} for pair {pair.key}")
    return PairFeatures(vec, schema.names, schema.version)


# ============================================================================
# SCALING
# ============================================================================

@dataclass(frozen=True)
class FeatureScaler:
    """
    Per-feature standardizer fitted on training pairs.

    Constant columns store mean 0 and std 1 so they pass through unchanged.
    """
    mean: Vector
    std: Vector
    names: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, object]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist(), 'names': list(self.names)}

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "FeatureScaler":
        return cls(np.array(data['mean'], dtype=np.float64),
                   np.array(data['std'], dtype=np.float64),
                   tuple(data.get('names', ())))

    def transform(self, matrix: Matrix) -> Matrix:
        if matrix.shape[-1] != self.mean.shape[0]:
            raise ValidationError(
                f"scaler fitted on {self.mean.shape[0]} features, got {matrix.shape[-1]}"
            )
        return (matrix - self.mean) / self.std


def fit_scaler_matrix(matrix: Matrix, names: Sequence[str] = ()) -> FeatureScaler:
    if matrix.ndim != 2 or matrix.shape[0] < 2:
        raise ValidationError(f"scaler needs at least 2 training pairs, got {matrix.shape[0] if matrix.ndim == 2 else 0}")
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    constant = std < CONSTANT_EPSILON
    mean = np.where(constant, 0.0, mean)
    std = np.where(constant, 1.0, std)
    if constant.any():
        logger.debug(f"{int(constant.sum())} constant feature column(s) pass through unscaled")
    return FeatureScaler(mean, std, tuple(names))


def fit_scaler(train_features: Sequence[PairFeatures]) -> FeatureScaler:
    """Fit mean/std per feature (population std)."""
    if len(train_features) < 2:
        raise ValidationError(f"scaler needs at least 2 training pairs, got {len(train_features)}")
    matrix = np.stack([f.values for f in train_features])
    return fit_scaler_matrix(matrix, train_features[0].names)


def apply_scaler(scaler: FeatureScaler, features: PairFeatures) -> PairFeatures:
    return PairFeatures(scaler.transform(features.values), features.names, features.schema_version)


# ============================================================================
# FEATURIZED POOLS
# ============================================================================

@dataclass(frozen=True)
class FeaturizedPool:
    """
    Dense arrays for one pool: one row per pair.

    labels holds NaN for unlabeled pairs.
    """
    name: str
    z_q: Matrix
    z_r: Matrix
    phi: Matrix
    labels: Vector
    language_bits: Vector
    query_ids: Tuple[str, ...]
    candidate_ids: Tuple[str, ...]
    ir_ranks: Tuple[int, ...]
    degenerate: int = 0

    def __len__(self) -> int:
        return self.phi.shape[0]

    @property
    def labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(np.isfinite(self.labels)))

    def subset(self, indices: Sequence[int]) -> "FeaturizedPool":
        idx = np.asarray(indices, dtype=np.int64)
        return FeaturizedPool(
            self.name, self.z_q[idx], self.z_r[idx], self.phi[idx], self.labels[idx],
            self.language_bits[idx],
            tuple(self.query_ids[i] for i in idx),
            tuple(self.candidate_ids[i] for i in idx),
            tuple(self.ir_ranks[i] for i in idx),
        )

    def with_phi(self, phi: Matrix) -> "FeaturizedPool":
        return FeaturizedPool(self.name, self.z_q, self.z_r, phi, self.labels, self.language_bits,
                              self.query_ids, self.candidate_ids, self.ir_ranks, self.degenerate)

    def require_non_empty(self) -> "FeaturizedPool":
        if len(self) == 0:
            raise EmptyPoolError(self.name)
        return self


def concat_pools(name: str, pools: Sequence[FeaturizedPool]) -> FeaturizedPool:
    """Stack pools row-wise; all must share embedding and feature widths."""
    pools = [p for p in pools if len(p)]
    if not pools:
        raise EmptyPoolError(name)
    widths = {(p.z_q.shape[1], p.phi.shape[1]) for p in pools}
    if len(widths) > 1:
        raise DimensionMismatch("concat_pools", sorted(widths)[0], sorted(widths)[-1])
    return FeaturizedPool(
        name=name,
        z_q=np.vstack([p.z_q for p in pools]),
        z_r=np.vstack([p.z_r for p in pools]),
        phi=np.vstack([p.phi for p in pools]),
        labels=np.concatenate([p.labels for p in pools]),
        language_bits=np.concatenate([p.language_bits for p in pools]),
        query_ids=tuple(q for p in pools for q in p.query_ids),
        candidate_ids=tuple(c for p in pools for c in p.candidate_ids),
        ir_ranks=tuple(r for p in pools for r in p.ir_ranks),
        degenerate=sum(p.degenerate for p in pools),
    )


def question_vector(q: Question, tables: Sequence[EmbeddingTable], config: FeatureConfig) -> Tuple[Vector, bool]:
    """z for one question: the precomputed vector (vector mode) or the first table's average."""
    if config.mode == 'vector':
        if q.precomputed_vector is None:
            raise ValidationError(f"question '{q.id}' has no precomputed vector")
        return q.precomputed_vector, False
    if not tables:
        raise ValidationError("text mode needs at least one embedding table")
    if not q.tokens:
        return np.zeros(tables[0].dimension), True
    emb = embed_question(q, tables[0])
    return emb.vector, emb.degenerate


def featurize_pool(name: str, pairs: Sequence[PairExample], tables: Sequence[EmbeddingTable],
                   config: Optional[FeatureConfig] = None,
                   scaler: Optional[FeatureScaler] = None,
                   schema: Optional[FeatureSchema] = None) -> FeaturizedPool:
    """
    Encode a pool: question vectors, raw or scaled phi, labels and language bits.

    Question vectors are cached per question id within the pool.
    """
    config = config or FeatureConfig()
    schema = schema or feature_schema(tables, config)
    dim = _embedding_dim(pairs, tables, config)
    n, k = len(pairs), len(schema.names)
    z_q, z_r, phi = np.zeros((n, dim)), np.zeros((n, dim)), np.zeros((n, k))
    cache: Dict[str, Tuple[Vector, bool]] = {}
    degenerate = set()

    def encode(q: Question) -> Vector:
        if q.id not in cache:
            cache[q.id] = question_vector(q, tables, config)
            if cache[q.id][1]:
                degenerate.add(q.id)
        return cache[q.id][0]

    for i, pair in enumerate(pairs):
        z_q[i] = encode(pair.original)
        z_r[i] = encode(pair.retrieved)
        phi[i] = extract_pair_features(pair, tables, config, schema).values

    if degenerate:
        logger.warning(f"pool '{name}': {len(degenerate)} question(s) fully out of vocabulary")
    if scaler is not None and n:
        phi = scaler.transform(phi)

    return FeaturizedPool(
        name=name,
        z_q=z_q,
        z_r=z_r,
        phi=phi,
        labels=np.array([np.nan if p.label is None else float(p.label) for p in pairs], dtype=np.float64),
        language_bits=np.array([float(p.language_bit) for p in pairs], dtype=np.float64),
        query_ids=tuple(p.original.id for p in pairs),
        candidate_ids=tuple(p.retrieved.id for p in pairs),
        ir_ranks=tuple(p.ir_rank for p in pairs),
        degenerate=len(degenerate),
    )


def _embedding_dim(pairs: Sequence[PairExample], tables: Sequence[EmbeddingTable],
                   config: FeatureConfig) -> int:
    if config.mode == 'text':
        if not tables:
            raise ValidationError("text mode needs at least one embedding table")
        return tables[0].dimension
    for pair in pairs:
        if pair.original.precomputed_vector is not None:
            return int(pair.original.precomputed_vector.shape[0])
    return 0
