"""
Cross-language word embeddings.

Loads word2vec text-format tables and maps a question's tokens to a single
vector by averaging the vectors of its in-vocabulary tokens.

Tokenizer contract (fixed and deterministic):
  1. lowercase the text
  2. split on Unicode whitespace
  3. strip leading/trailing Unicode punctuation from each token; internal
     punctuation is kept, so URLs survive as one token
  4. drop tokens that end up empty
"""
import hashlib
import logging
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, NamedTuple, Optional

import numpy as np

from modules.error_handler import RecordError, ValidationError
from modules.linalg import Vector

if TYPE_CHECKING:
    from modules.data import Question

logger = logging.getLogger("modules.embeddings")


def _is_punctuation(ch: str) -> bool:
    return unicodedata.category(ch).startswith('P')


def tokenize(text: str) -> List[str]:
    """Lowercase, whitespace-split, strip edge punctuation, drop empties."""
    tokens = []
    for raw in text.lower().split():
        start, end = 0, len(raw)
        while start < end and _is_punctuation(raw[start]):
            start += 1
        while end > start and _is_punctuation(raw[end - 1]):
            end -= 1
        if start < end:
            tokens.append(raw[start:end])
    return tokens


@dataclass(frozen=True)
class EmbeddingTable:
    """An immutable token -> vector map of fixed dimension."""
    name: str
    dimension: int
    vectors: Dict[str, Vector] = field(repr=False)

    def __post_init__(self):
        if not self.vectors:
            raise ValidationError(f"embedding table '{self.name}' has an empty vocabulary")
        for token, vec in self.vectors.items():
            if vec.shape != (self.dimension,):
                raise ValidationError(
                    f"embedding table '{self.name}': vector for {token!r} has shape "
                    f"{vec.shape}, expected ({self.dimension},)"
                )
            vec.setflags(write=False)

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, token: str) -> Optional[Vector]:
        return self.vectors.get(token)

    def vocab_hash(self) -> str:
        """sha256 over the sorted vocabulary and the dimension."""
        digest = hashlib.sha256()
        digest.update(f"{self.dimension}\n".encode('utf-8'))
        for token in sorted(self.vectors):
            digest.update(token.encode('utf-8'))
            digest.update(b"\n")
        return digest.hexdigest()

    def fingerprint(self) -> Dict[str, object]:
        return {"name": self.name, "dimension": self.dimension, "vocab_hash": self.vocab_hash()}


class QuestionEmbedding(NamedTuple):
    vector: Vector
    degenerate: bool  # every token was out of vocabulary


def _parse_reals(fields: List[str], path: str, line_no: int) -> Vector:
    try:
        values = np.array([float(x) for x in fields], dtype=np.float64)
    except ValueError as e:
        raise RecordError(f"unparseable real: {e}", path=path, line=line_no) from e
    if not np.all(np.isfinite(values)):
        raise RecordError("non-finite value in vector", path=path, line=line_no)
    return values


def load_embedding_table(path: str, expected_dimension: Optional[int] = None,
                         name: Optional[str] = None) -> EmbeddingTable:
    """
    Load a word2vec text-format table.

    Format: optional header "<vocab_size> <dim>", then one line per token:
    the token followed by dim whitespace-separated reals. UTF-8, LF or CRLF.
    Duplicate tokens: the last occurrence wins.

    Args:
        path: File to read
        expected_dimension: When given, the table dimension must match
        name: Table name used in feature naming (default: file stem)

    Returns:
        EmbeddingTable

    Raises:
        RecordError: malformed line, header mismatch
        ValidationError: dimension differs from expected_dimension
    """
    name = name or Path(path).stem
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()

    header: Optional[tuple] = None
    dimension: Optional[int] = None
    vectors: Dict[str, Vector] = {}
    token_lines = 0
    duplicates = 0

    for line_no, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue

        if header is None and token_lines == 0 and len(fields) == 2 \
                and all(x.isdigit() for x in fields):
            header = (int(fields[0]), int(fields[1]))
            dimension = header[1]
            if dimension < 1:
                raise RecordError(f"header declares dimension {dimension}", path=path, line=line_no)
            continue

        if dimension is None:
            dimension = len(fields) - 1
            if dimension < 1:
                raise RecordError("token line has no vector values", path=path, line=line_no)

        if len(fields) != dimension + 1:
            raise RecordError(
                f"expected {dimension + 1} fields (token + {dimension} reals), got {len(fields)}",
                path=path, line=line_no,
            )

        token = fields[0]
        if token in vectors:
            duplicates += 1
        vectors[token] = _parse_reals(fields[1:], path, line_no)
        token_lines += 1

    if header is not None and header[0] != token_lines:
        raise RecordError(
            f"header declares {header[0]} tokens but file has {token_lines} token lines",
            path=path, line=1,
        )

    if not vectors:
        raise RecordError("embedding file contains no token lines", path=path)

    if expected_dimension is not None and dimension != expected_dimension:
        raise ValidationError(
            f"{path}: embedding dimension {dimension} differs from expected {expected_dimension}"
        )

    if duplicates:
        logger.debug(f"{path}: {duplicates} duplicate token line(s), last occurrence kept")
    logger.info(f"Loaded embedding table '{name}': {len(vectors)} tokens, dim {dimension}")
    return EmbeddingTable(name=name, dimension=dimension, vectors=vectors)


def embed_tokens(tokens: List[str], table: EmbeddingTable) -> QuestionEmbedding:
    """Average of in-vocabulary token vectors; zero vector + degenerate flag if none."""
    if not tokens:
        raise ValidationError("cannot embed an empty token list")
    found = [table.vectors[t] for t in tokens if t in table.vectors]
    if not found:
        return QuestionEmbedding(np.zeros(table.dimension), True)
    return QuestionEmbedding(np.mean(np.stack(found), axis=0), False)


def embed_question(q: "Question", table: EmbeddingTable) -> QuestionEmbedding:
    """
    Represent a question by the mean of its word vectors.

    Out-of-vocabulary tokens are skipped. When every token is OOV the zero
    vector is returned with degenerate=True.

    Raises:
        ValidationError: the question has no tokens
    """
    if not q.tokens:
        raise ValidationError(f"question '{q.id}' has no tokens to embed")
    return embed_tokens(q.tokens, table)


def oov_count(tokens: List[str], tables: List[EmbeddingTable]) -> int:
    """Tokens found in none of the tables (0 when no table is configured)."""
    if not tables:
        return 0
    return sum(1 for t in tokens if not any(t in table for table in tables))
