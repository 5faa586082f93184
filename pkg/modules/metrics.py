"""
Ranking Evaluation
==================
MAP, MRR and AvgRec over reranked candidate lists, plus the prediction and
gold file formats used to exchange rankings with an external scorer.

Queries without any relevant candidate are skipped (and counted), as the
SemEval scorer does. Scores are kept in [0, 1]; the x100 presentation
scaling lives in the report layer.

Prediction file (TSV): query_id, candidate_id, rank, score, true|false
Gold file (TSV):       query_id, candidate_id, Relevant|PerfectMatch|Irrelevant
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from modules.error_handler import RecordError, ValidationError

logger = logging.getLogger("modules.metrics")

DEFAULT_DEPTH = 10
GOLD_RELEVANT = frozenset({'relevant', 'perfectmatch', 'true', '1'})
GOLD_IRRELEVANT = frozenset({'irrelevant', 'false', '0'})


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    score: float
    relevant: bool
    ir_rank: int = 0


@dataclass(frozen=True)
class RankedQuery:
    """Candidates of one query, sorted by score descending then IR rank ascending."""
    query_id: str
    candidates: Tuple[Candidate, ...]
    depth: int = DEFAULT_DEPTH

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError(f"evaluation depth must be >= 1, got {self.depth}")
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"query '{self.query_id}' has duplicate candidate ids")

    @classmethod
    def from_scores(cls, query_id: str, candidates: Iterable[Candidate],
                    depth: int = DEFAULT_DEPTH) -> "RankedQuery":
        ordered = sorted(candidates, key=lambda c: (-c.score, c.ir_rank, c.candidate_id))
        return cls(query_id, tuple(ordered), depth)

    @property
    def total_relevant(self) -> int:
        return sum(1 for c in self.candidates if c.relevant)

    def relevance_at_depth(self) -> List[bool]:
        return [c.relevant for c in self.candidates[:self.depth]]


@dataclass(frozen=True)
class EvalResult:
    map: float
    mrr: float
    avg_rec: float
    scored_queries: int
    skipped_queries: int

    def as_percent(self) -> Dict[str, float]:
        return {'MAP': 100.0 * self.map, 'MRR': 100.0 * self.mrr, 'AvgRec': 100.0 * self.avg_rec}

    def to_dict(self) -> Dict[str, object]:
        return {
            'map': self.map,
            'mrr': self.mrr,
            'avg_rec': self.avg_rec,
            'scored_queries': self.scored_queries,
            'skipped_queries': self.skipped_queries,
        }


# ============================================================================
# PER-QUERY METRICS
# ============================================================================

def average_precision(q: RankedQuery) -> float:
    """(1 / min(R, K)) * sum of precision@k over relevant positions k <= K."""
    r_k = min(q.total_relevant, q.depth)
    if r_k == 0:
        return 0.0
    hits = 0
    total = 0.0
    for k, rel in enumerate(q.relevance_at_depth(), start=1):
        if rel:
            hits += 1
            total += hits / k
    return total / r_k


def reciprocal_rank(q: RankedQuery) -> float:
    """1 / rank of the first relevant candidate within depth K, else 0."""
    for k, rel in enumerate(q.relevance_at_depth(), start=1):
        if rel:
            return 1.0 / k
    return 0.0


def average_recall(q: RankedQuery) -> float:
    """Mean over cutoffs k = 1..K of (#relevant in top k) / min(R, K)."""
    r_k = min(q.total_relevant, q.depth)
    if r_k == 0:
        return 0.0
    relevance = q.relevance_at_depth()
    hits = 0
    total = 0.0
    for k in range(q.depth):
        if k < len(relevance) and relevance[k]:
            hits += 1
        total += hits / r_k
    return total / q.depth


def evaluate(queries: Sequence[RankedQuery]) -> EvalResult:
    """
    Average the three metrics over queries with at least one relevant candidate.

    Raises:
        ValidationError: no query has a relevant candidate
    """
    scorable = [q for q in queries if q.total_relevant > 0]
    skipped = len(queries) - len(scorable)
    if not scorable:
        raise ValidationError(f"no scorable queries ({skipped} skipped without relevant candidates)")
    if skipped:
        logger.debug(f"Skipped {skipped} queries without relevant candidates")
    return EvalResult(
        map=float(np.mean([average_precision(q) for q in scorable])),
        mrr=float(np.mean([reciprocal_rank(q) for q in scorable])),
        avg_rec=float(np.mean([average_recall(q) for q in scorable])),
        scored_queries=len(scorable),
        skipped_queries=skipped,
    )


def rank_queries(query_ids: Sequence[str], candidate_ids: Sequence[str], scores: Sequence[float],
                 labels: Sequence[float], ir_ranks: Sequence[int],
                 depth: int = DEFAULT_DEPTH) -> List[RankedQuery]:
    """Group flat per-pair arrays into RankedQuery objects, in first-appearance order."""
    order: List[str] = []
    grouped: Dict[str, List[Candidate]] = {}
    for qid, cid, score, label, rank in zip(query_ids, candidate_ids, scores, labels, ir_ranks):
        if qid not in grouped:
            grouped[qid] = []
            order.append(qid)
        grouped[qid].append(Candidate(cid, float(score), bool(label == 1), int(rank)))
    return [RankedQuery.from_scores(qid, grouped[qid], depth) for qid in order]


# ============================================================================
# FILE FORMATS
# ============================================================================

def emit_predictions(queries: Sequence[RankedQuery], path: str):
    """
    Write one TSV line per candidate in ranked order.

    The label column is "true" when the score is >= 0.5.
    """
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, delimiter='\t', lineterminator='\n')
            for q in queries:
                for rank, c in enumerate(q.candidates, start=1):
                    writer.writerow([q.query_id, c.candidate_id, rank, repr(float(c.score)),
                                     'true' if c.score >= 0.5 else 'false'])
    except OSError as e:
        raise OSError(f"cannot write predictions to {path}: {e}") from e
    logger.info(f"Wrote predictions for {len(queries)} queries to {path}")


def load_predictions(path: str) -> Dict[str, List[Tuple[str, int, float]]]:
    """Parse a prediction file into query_id -> [(candidate_id, rank, score)] in file order."""
    out: Dict[str, List[Tuple[str, int, float]]] = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for line_no, row in enumerate(csv.reader(f, delimiter='\t'), start=1):
            if not row:
                continue
            if len(row) != 5:
                raise RecordError(f"expected 5 columns, got {len(row)}", path=path, line=line_no)
            try:
                out.setdefault(row[0], []).append((row[1], int(row[2]), float(row[3])))
            except ValueError as e:
                raise RecordError(f"bad rank or score: {e}", path=path, line=line_no) from e
    return out


def write_gold(path: str, rows: Iterable[Tuple[str, str, int]]):
    """Write (query_id, candidate_id, label) rows; labels become Relevant/Irrelevant."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, delimiter='\t', lineterminator='\n')
        for qid, cid, label in rows:
            writer.writerow([qid, cid, 'Relevant' if label == 1 else 'Irrelevant'])


def load_gold(path: str) -> Dict[Tuple[str, str], bool]:
    gold: Dict[Tuple[str, str], bool] = {}
    with open(path, 'r', encoding='utf-8', newline='') as f:
        for line_no, row in enumerate(csv.reader(f, delimiter='\t'), start=1):
            if not row:
                continue
            if len(row) < 3:
                raise RecordError(f"expected 3 columns, got {len(row)}", path=path, line=line_no)
            label = row[2].strip().lower()
            if label in GOLD_RELEVANT:
                gold[(row[0], row[1])] = True
            elif label in GOLD_IRRELEVANT:
                gold[(row[0], row[1])] = False
            else:
                raise RecordError(f"unknown gold label {row[2]!r}", path=path, line=line_no)
    return gold


def score_predictions(predictions_path: str, gold_path: str,
                      depth: int = DEFAULT_DEPTH) -> EvalResult:
    """
    Evaluate a prediction file against a gold file.

    Ties in score keep the emitted rank order.

    Raises:
        RecordError: a predicted pair is missing from the gold file, or a
            gold pair is missing from the predictions
    """
    predictions = load_predictions(predictions_path)
    gold = load_gold(gold_path)
    predicted = set()
    queries = []
    for qid, rows in predictions.items():
        candidates = []
        for cid, rank, score in rows:
            if (qid, cid) not in gold:
                raise RecordError(f"pair ({qid}, {cid}) has no gold label", path=gold_path)
            predicted.add((qid, cid))
            candidates.append(Candidate(cid, score, gold[(qid, cid)], rank))
        queries.append(RankedQuery.from_scores(qid, candidates, depth))

    missing = next((key for key in gold if key not in predicted), None)
    if missing is not None:
        raise RecordError(f"gold pair ({missing[0]}, {missing[1]}) has no prediction", path=predictions_path)
    return evaluate(queries)
