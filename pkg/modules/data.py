"""
Dataset Ingestion and Synthetic Generation
==========================================
SemEval-compatible pair records, label binarisation, split management and a
synthetic cross-language generator for desk-scale experiments.

Record format (UTF-8 JSONL, one pair per line):
  orig_id, orig_lang, orig_text, [orig_translation],
  rel_id, [rel_lang], rel_rank, rel_text, [label]

Manifest (YAML):
  source_language: en
  target_language: ar
  vectors: vectors.txt            # optional, id -> reals (word2vec text format)
  splits:
    train: train.jsonl            # labeled source pool
    dev: dev.jsonl
    test: test.jsonl
    unlabeled: unlabeled.jsonl    # unlabeled target pool
    labeled_target: ...           # optional labeled target pool
    test_target: ...              # optional labeled target test set
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field, ValidationError as PydanticValidationError, field_validator
from scipy.special import betainc

from modules.embeddings import EmbeddingTable, load_embedding_table, tokenize
from modules.error_handler import ConfigError, RecordError, ValidationError
from modules.json_helpers import iter_jsonl, write_jsonl
from modules.linalg import Vector

logger = logging.getLogger("modules.data")

MANIFEST_NAME = "manifest.yaml"

# SemEval subtask-B convention
LABEL_MAP = {
    'perfectmatch': 1,
    'relevant': 1,
    'irrelevant': 0,
    'true': 1,
    'false': 0,
}

LABELED_POOLS = ('train', 'dev', 'test', 'labeled_target', 'test_target')
ALL_POOLS = ('train', 'dev', 'test', 'unlabeled', 'labeled_target', 'test_target')


# ============================================================================
# DOMAIN TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class Question:
    """One forum question."""
    id: str
    language: str
    text: str
    tokens: Tuple[str, ...] = ()
    translated_text: Optional[str] = None
    precomputed_vector: Optional[Vector] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.id:
            raise ValidationError("question id must be non-empty")

    @classmethod
    def from_text(cls, qid: str, language: str, text: str,
                  translated_text: Optional[str] = None) -> "Question":
        return cls(qid, language, text, tuple(tokenize(text)), translated_text)


@dataclass(frozen=True)
class PairExample:
    """(original, retrieved, IR rank, optional label, language bit)."""
    original: Question
    retrieved: Question
    ir_rank: int
    label: Optional[int] = None
    language_bit: int = 1

    def __post_init__(self):
        if self.ir_rank < 1:
            raise ValidationError(f"ir_rank must be >= 1, got {self.ir_rank}")
        if self.label not in (None, 0, 1):
            raise ValidationError(f"label must be 0, 1 or absent, got {self.label!r}")
        if self.language_bit not in (0, 1):
            raise ValidationError(f"language bit must be 0 or 1, got {self.language_bit!r}")

    @property
    def key(self) -> Tuple[str, str]:
        return (self.original.id, self.retrieved.id)


@dataclass(frozen=True)
class QueryGroup:
    """An original question with its full retrieved list, ordered by IR rank."""
    original: Question
    pairs: Tuple[PairExample, ...]


def group_by_query(pairs: Iterable[PairExample]) -> List[QueryGroup]:
    """Group pairs by original id, in order of first appearance."""
    order: List[str] = []
    groups: Dict[str, List[PairExample]] = {}
    for pair in pairs:
        qid = pair.original.id
        if qid not in groups:
            groups[qid] = []
            order.append(qid)
        groups[qid].append(pair)
    return [
        QueryGroup(groups[qid][0].original, tuple(sorted(groups[qid], key=lambda p: p.ir_rank)))
        for qid in order
    ]


@dataclass(frozen=True)
class Dataset:
    """
    All pools of one experiment.

    labeled_source is D_S, unlabeled_target is D_T, labeled_target is D_T*.
    """
    labeled_source: Tuple[PairExample, ...] = ()
    unlabeled_target: Tuple[PairExample, ...] = ()
    labeled_target: Tuple[PairExample, ...] = ()
    dev: Tuple[PairExample, ...] = ()
    test: Tuple[PairExample, ...] = ()
    test_target: Tuple[PairExample, ...] = ()
    source_language: str = "en"
    target_language: str = "ar"
    vectors: Optional[EmbeddingTable] = field(default=None, compare=False, repr=False)

    def pools(self) -> Dict[str, Tuple[PairExample, ...]]:
        return {
            'train': self.labeled_source,
            'unlabeled': self.unlabeled_target,
            'labeled_target': self.labeled_target,
            'dev': self.dev,
            'test': self.test,
            'test_target': self.test_target,
        }

    @property
    def counts(self) -> Dict[str, int]:
        """N, M and L in the sense of the training objective (pair counts)."""
        n = len(self.labeled_source)
        m = n + len(self.unlabeled_target)
        return {'N': n, 'M': m, 'L': m + len(self.labeled_target)}

    def queries(self, pool: str) -> List[QueryGroup]:
        return group_by_query(self.pools()[pool])

    def check_disjoint(self):
        """Raise RecordError when a (original id, retrieved id) key occurs in two pools."""
        seen: Dict[Tuple[str, str], str] = {}
        for name, pairs in self.pools().items():
            for pair in pairs:
                if pair.key in seen:
                    raise RecordError(
                        f"pair {pair.key} appears in both '{seen[pair.key]}' and '{name}'"
                    )
                seen[pair.key] = name

    def uses_vectors(self) -> bool:
        """True when questions carry precomputed vectors (vector feature mode)."""
        for pairs in self.pools().values():
            if pairs:
                return pairs[0].original.precomputed_vector is not None
        return False


# ============================================================================
# RECORD FORMAT
# ============================================================================

class PairRecord(BaseModel):
    """One line of a split file."""
    orig_id: str = Field(min_length=1)
    orig_lang: str = Field(min_length=1)
    orig_text: str
    orig_translation: Optional[str] = None
    rel_id: str = Field(min_length=1)
    rel_lang: Optional[str] = None
    rel_rank: int = Field(ge=1)
    rel_text: str
    label: Optional[Union[bool, int, str]] = None

    @field_validator('orig_id', 'rel_id', mode='before')
    @classmethod
    def _ids_as_strings(cls, v):
        return str(v) if isinstance(v, int) else v


def binarize_label(value: Union[bool, int, str, None], path: Optional[str] = None,
                   line: Optional[int] = None) -> Optional[int]:
    """PerfectMatch/Relevant -> 1, Irrelevant -> 0; 0/1 and booleans pass through."""
    if value is None:
        return None
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, int):
        if value in (0, 1):
            return value
        raise RecordError(f"unknown label {value!r}", path=path, line=line)
    key = value.strip().lower()
    if key not in LABEL_MAP:
        raise RecordError(f"unknown label {value!r}", path=path, line=line)
    return LABEL_MAP[key]


def label_to_string(label: Optional[int]) -> Optional[str]:
    if label is None:
        return None
    return "Relevant" if label == 1 else "Irrelevant"


def load_pairs(path: str, pool: str, source_language: str, labeled: Optional[bool],
               vectors: Optional[EmbeddingTable] = None) -> List[PairExample]:
    """
    Load one split file.

    Args:
        path: JSONL file
        pool: Pool name, used in messages
        source_language: Originals in this language get language bit 1
        labeled: True requires a label on every record, False drops any
            label present, None keeps labels where given
        vectors: Optional id -> vector table attached as precomputed vectors

    Raises:
        RecordError: schema violation, unknown label, duplicate pair id,
            duplicate rank, inconsistent original text
    """
    pairs: List[PairExample] = []
    originals: Dict[str, Question] = {}
    ranks: Dict[str, set] = {}
    keys = set()
    dropped_labels = 0

    for line_no, raw in iter_jsonl(path):
        try:
            rec = PairRecord.model_validate(raw)
        except PydanticValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(x) for x in first.get('loc', ()))
            raise RecordError(f"{where}: {first.get('msg')}", path=path, line=line_no) from e

        label = binarize_label(rec.label, path, line_no)
        if labeled and label is None:
            raise RecordError(f"record in labeled pool '{pool}' has no label", path=path, line=line_no)
        if labeled is False and label is not None:
            dropped_labels += 1
            label = None

        key = (rec.orig_id, rec.rel_id)
        if key in keys:
            raise RecordError(f"duplicate pair id {key}", path=path, line=line_no)
        keys.add(key)

        if rec.rel_rank in ranks.setdefault(rec.orig_id, set()):
            raise RecordError(
                f"duplicate rank {rec.rel_rank} for original '{rec.orig_id}'", path=path, line=line_no
            )
        ranks[rec.orig_id].add(rec.rel_rank)

        original = originals.get(rec.orig_id)
        if original is None:
            original = _make_question(rec.orig_id, rec.orig_lang, rec.orig_text,
                                      rec.orig_translation, vectors)
            originals[rec.orig_id] = original
        elif original.text != rec.orig_text or original.language != rec.orig_lang:
            raise RecordError(
                f"original '{rec.orig_id}' has inconsistent text or language", path=path, line=line_no
            )

        retrieved = _make_question(rec.rel_id, rec.rel_lang or source_language, rec.rel_text,
                                   None, vectors)
        pairs.append(PairExample(
            original=original,
            retrieved=retrieved,
            ir_rank=rec.rel_rank,
            label=label,
            language_bit=1 if original.language == source_language else 0,
        ))

    if dropped_labels:
        logger.info(f"{path}: dropped {dropped_labels} label(s) in unlabeled pool '{pool}'")
    logger.info(f"Loaded {len(pairs)} pairs ({len(originals)} originals) into pool '{pool}'")
    return pairs


def _make_question(qid: str, lang: str, text: str, translation: Optional[str],
                   vectors: Optional[EmbeddingTable]) -> Question:
    vector = vectors.get(qid) if vectors is not None else None
    if vector is not None:
        return Question(qid, lang, text, tuple(tokenize(text)), translation, np.array(vector))
    return Question.from_text(qid, lang, text, translation)


def _resolve_manifest(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.exists():
        raise ConfigError(f"manifest not found: {p}")
    return p


def load_dataset(path: str) -> Dataset:
    """
    Load every split listed in a manifest (file or directory holding manifest.yaml).

    Labels are binarised; pools are checked for pair-key disjointness.
    """
    manifest_path = _resolve_manifest(path)
    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = yaml.safe_load(f) or {}

    base = manifest_path.parent
    splits = manifest.get('splits') or {}
    unknown = set(splits) - set(ALL_POOLS)
    if unknown:
        raise ConfigError(f"{manifest_path}: unknown split name(s) {sorted(unknown)}")
    if 'train' not in splits:
        raise ConfigError(f"{manifest_path}: manifest must list a 'train' split")

    source_language = manifest.get('source_language', 'en')
    target_language = manifest.get('target_language', 'ar')

    vectors = None
    if manifest.get('vectors'):
        vectors = load_embedding_table(str(base / manifest['vectors']), name='vectors')

    loaded: Dict[str, List[PairExample]] = {}
    for name in ALL_POOLS:
        if name in splits:
            loaded[name] = load_pairs(str(base / splits[name]), name, source_language,
                                      labeled=name in LABELED_POOLS, vectors=vectors)

    dataset = Dataset(
        labeled_source=tuple(loaded.get('train', ())),
        unlabeled_target=tuple(loaded.get('unlabeled', ())),
        labeled_target=tuple(loaded.get('labeled_target', ())),
        dev=tuple(loaded.get('dev', ())),
        test=tuple(loaded.get('test', ())),
        test_target=tuple(loaded.get('test_target', ())),
        source_language=source_language,
        target_language=target_language,
        vectors=vectors,
    )
    dataset.check_disjoint()
    _check_pool_languages(dataset)
    logger.info(f"Dataset loaded from {manifest_path}: {dataset.counts}")
    return dataset


def _check_pool_languages(dataset: Dataset):
    for pool in ('unlabeled', 'labeled_target', 'test_target'):
        for pair in dataset.pools()[pool]:
            if pair.language_bit != 0:
                raise RecordError(
                    f"pool '{pool}' holds original '{pair.original.id}' in the source "
                    f"language '{dataset.source_language}'"
                )
    for pair in dataset.labeled_source:
        if pair.language_bit != 1:
            raise RecordError(
                f"pool 'train' holds original '{pair.original.id}' in language "
                f"'{pair.original.language}', expected '{dataset.source_language}'"
            )


def pair_to_record(pair: PairExample) -> Dict[str, object]:
    record = {
        'orig_id': pair.original.id,
        'orig_lang': pair.original.language,
        'orig_text': pair.original.text,
        'rel_id': pair.retrieved.id,
        'rel_lang': pair.retrieved.language,
        'rel_rank': pair.ir_rank,
        'rel_text': pair.retrieved.text,
    }
    if pair.original.translated_text is not None:
        record['orig_translation'] = pair.original.translated_text
    if pair.label is not None:
        record['label'] = label_to_string(pair.label)
    return record


def write_vectors(path: str, vectors: Dict[str, Vector]):
    """Write an id -> vector map in word2vec text format (with header)."""
    dims = {len(v) for v in vectors.values()}
    if len(dims) != 1:
        raise ValidationError(f"vectors have inconsistent dimensions {sorted(dims)}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(f"{len(vectors)} {dims.pop()}\n")
        for key, vec in vectors.items():
            f.write(key + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def write_dataset(dataset: Dataset, out_dir: str,
                  vectors: Optional[Dict[str, Vector]] = None) -> str:
    """Write every non-empty pool, the vector file and a manifest. Returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, pairs in dataset.pools().items():
        if pairs:
            filename = f"{name}.jsonl"
            write_jsonl(str(out / filename), (pair_to_record(p) for p in pairs))
            splits[name] = filename

    manifest = {
        'source_language': dataset.source_language,
        'target_language': dataset.target_language,
        'splits': splits,
    }
    if vectors is None and dataset.vectors is not None:
        vectors = dataset.vectors.vectors
    if vectors:
        write_vectors(str(out / "vectors.txt"), vectors)
        manifest['vectors'] = "vectors.txt"

    manifest_path = out / MANIFEST_NAME
    with open(manifest_path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(manifest, f, default_flow_style=False, sort_keys=True)
    logger.info(f"Dataset written to {out} ({', '.join(sorted(splits))})")
    return str(manifest_path)


# ============================================================================
# SEMI-SUPERVISED SPLIT
# ============================================================================

def target_view_key(question_id: str, language: str) -> str:
    return f"{question_id}#{language}"


def relabel_original(q: Question, target_language: str,
                     vectors: Optional[EmbeddingTable] = None) -> Question:
    """
    Produce the target-language view of a source original.

    Synthetic data: the '<id>#<lang>' vector emitted by the generator.
    Real data: the translated text becomes the question text.
    """
    key = target_view_key(q.id, target_language)
    if vectors is not None and key in vectors:
        return Question(key, target_language, q.text, q.tokens, None, np.array(vectors.get(key)))
    if q.translated_text:
        return Question.from_text(key, target_language, q.translated_text, q.text)
    raise ValidationError(f"original '{q.id}' has no target-language view (vector or translation)")


def split_for_semisup(pairs: Iterable[PairExample], fraction: float, seed: int,
                      target_language: str,
                      vectors: Optional[EmbeddingTable] = None
                      ) -> Tuple[List[PairExample], List[PairExample]]:
    """
    Split a labeled source pool at the original-question level.

    The first part stays in the source language; the second is relabeled
    into the target language and becomes D_T*.

    Raises:
        ValidationError: fraction outside (0, 1) or fewer than two originals
    """
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"split fraction must be in (0, 1), got {fraction}")
    groups = group_by_query(pairs)
    n = len(groups)
    if n < 2:
        raise ValidationError(f"need at least 2 originals to split, got {n}")

    n_first = min(max(int(round(n * fraction)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    first_idx = set(int(i) for i in perm[:n_first])

    first: List[PairExample] = []
    second: List[PairExample] = []
    for i, group in enumerate(groups):
        if i in first_idx:
            first.extend(group.pairs)
            continue
        target_q = relabel_original(group.original, target_language, vectors)
        for pair in group.pairs:
            second.append(PairExample(target_q, pair.retrieved, pair.ir_rank, pair.label, 0))

    logger.info(f"Semi-supervised split: {n_first} source + {n - n_first} target originals")
    return first, second


# ============================================================================
# SYNTHETIC GENERATOR
# ============================================================================

class SyntheticSpec(BaseModel):
    """
    Parameters of the synthetic cross-language generator.

    Source vectors are A_s t + noise; target vectors are A_t t + delta + noise
    where A_t is a (rotated, scaled) copy of A_s. Relevance is
    cos(t_orig, t_retrieved) > relevance_threshold.
    """
    latent_dim: int = 8
    output_dim: Optional[int] = None
    target_rotation: bool = True
    target_scale: float = Field(default=1.0, gt=0.0)
    target_offset: float = Field(default=0.5, ge=0.0)
    noise_scale: float = Field(default=0.1, ge=0.0)
    relevance_threshold: float = 0.2
    relatedness: float = Field(default=0.0, ge=0.0, lt=1.0)
    rank_noise: float = Field(default=0.2, ge=0.0)
    source_train_queries: int = Field(default=200, ge=0)
    dev_queries: int = Field(default=50, ge=0)
    source_test_queries: int = Field(default=50, ge=0)
    unlabeled_target_queries: int = Field(default=200, ge=0)
    labeled_target_queries: int = Field(default=0, ge=0)
    target_test_queries: int = Field(default=100, ge=0)
    k_per_query: int = Field(default=10, ge=1)
    source_language: str = "en"
    target_language: str = "ar"
    emit_target_views: bool = True
    seed: int = 0

    @field_validator('relevance_threshold')
    @classmethod
    def _threshold_open_interval(cls, v):
        if not -1.0 <= v < 1.0:
            raise ValueError("relevance_threshold must be in [-1, 1)")
        return v

    @property
    def vector_dim(self) -> int:
        return self.output_dim or self.latent_dim


def expected_relevance_rate(threshold: float, latent_dim: int) -> float:
    """
    P(cos(a, b) > threshold) for independent isotropic a, b in latent_dim dimensions.

    Closed-form spherical-cap measure via the regularized incomplete beta function.
    """
    if latent_dim < 2:
        raise ValidationError("closed-form rate needs latent_dim >= 2")
    cap = 0.5 * float(betainc((latent_dim - 1) / 2.0, 0.5, 1.0 - threshold * threshold))
    return cap if threshold >= 0.0 else 1.0 - cap


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


class _SyntheticWorld:
    """Holds the language maps and the random stream of one generation run."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        d, k = spec.vector_dim, spec.latent_dim
        self.a_source = self.rng.normal(size=(d, k)) / math.sqrt(k)
        if spec.target_rotation:
            q, r = np.linalg.qr(self.rng.normal(size=(d, d)))
            rotation = q * np.sign(np.diag(r))
            self.a_target = spec.target_scale * rotation @ self.a_source
        else:
            self.a_target = spec.target_scale * self.a_source
        offset = self.rng.normal(size=d)
        norm = np.linalg.norm(offset)
        self.delta = offset * (spec.target_offset / norm) if norm > 0 else np.zeros(d)
        self.vectors: Dict[str, Vector] = {}

    def view(self, latent: np.ndarray, language: str) -> Vector:
        noise = self.spec.noise_scale * self.rng.normal(size=self.spec.vector_dim)
        if language == self.spec.source_language:
            return self.a_source @ latent + noise
        return self.a_target @ latent + self.delta + noise

    def question(self, qid: str, language: str, latent: np.ndarray) -> Question:
        vec = self.view(latent, language)
        self.vectors[qid] = vec
        return Question(qid, language, f"synthetic {language} question {qid}", (), None, vec)

    def split(self, prefix: str, n_queries: int, orig_language: str, labeled: bool,
              emit_views: bool = False) -> List[PairExample]:
        spec = self.spec
        rho = spec.relatedness
        pairs: List[PairExample] = []
        for i in range(n_queries):
            qid = f"{prefix}{i:04d}"
            t_orig = self.rng.normal(size=spec.latent_dim)
            original = self.question(qid, orig_language, t_orig)
            if emit_views:
                key = target_view_key(qid, spec.target_language)
                self.vectors[key] = self.view(t_orig, spec.target_language)

            latents = []
            for _ in range(spec.k_per_query):
                fresh = self.rng.normal(size=spec.latent_dim)
                if rho > 0.0:
                    fresh = rho * t_orig + math.sqrt(1.0 - rho * rho) * fresh
                latents.append(fresh)

            cosines = np.array([_cosine(t_orig, t) for t in latents])
            noisy = cosines + spec.rank_noise * self.rng.normal(size=len(latents))
            order = np.argsort(-noisy, kind='stable')
            rank_of = {int(j): r + 1 for r, j in enumerate(order)}

            for j, t_rel in enumerate(latents):
                rid = f"{qid}_r{j:02d}"
                retrieved = self.question(rid, spec.source_language, t_rel)
                label = int(cosines[j] > spec.relevance_threshold) if labeled else None
                pairs.append(PairExample(
                    original, retrieved, rank_of[j], label,
                    1 if orig_language == spec.source_language else 0,
                ))
        return pairs


def generate_synthetic(spec: SyntheticSpec) -> Tuple[Dataset, EmbeddingTable]:
    """
    Draw a synthetic cross-language dataset.

    Source-language originals and every retrieved question live in the
    source space; target-language originals are mapped through the shifted
    target map. All questions carry precomputed vectors; the returned table
    maps question ids (and '<id>#<target>' views of source-train originals)
    to those vectors.

    Raises:
        ValidationError: zero latent dimension
    """
    if spec.latent_dim < 1 or spec.vector_dim < 1:
        raise ValidationError("synthetic spec needs latent_dim >= 1 and output_dim >= 1")

    world = _SyntheticWorld(spec)
    src, tgt = spec.source_language, spec.target_language
    dataset = Dataset(
        labeled_source=tuple(world.split("s", spec.source_train_queries, src, True,
                                         emit_views=spec.emit_target_views)),
        dev=tuple(world.split("d", spec.dev_queries, src, True)),
        test=tuple(world.split("t", spec.source_test_queries, src, True)),
        unlabeled_target=tuple(world.split("u", spec.unlabeled_target_queries, tgt, False)),
        labeled_target=tuple(world.split("l", spec.labeled_target_queries, tgt, True)),
        test_target=tuple(world.split("x", spec.target_test_queries, tgt, True)),
        source_language=src,
        target_language=tgt,
    )
    table = EmbeddingTable(name="vectors", dimension=spec.vector_dim, vectors=world.vectors)
    dataset = replace(dataset, vectors=table)
    logger.info(
        f"Synthetic dataset (seed {spec.seed}): {dataset.counts}, "
        f"{len(dataset.test_target)} target test pairs, vector dim {spec.vector_dim}"
    )
    return dataset, table
