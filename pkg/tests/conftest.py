import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from modules.data import PairExample, Question, SyntheticSpec, generate_synthetic  # noqa: E402
from modules.embeddings import EmbeddingTable  # noqa: E402
from modules.features import FeaturizedPool  # noqa: E402


@pytest.fixture
def tiny_table():
    vectors = {
        'how': np.array([1.0, 0.0, 0.0]),
        'do': np.array([0.0, 1.0, 0.0]),
        'i': np.array([0.0, 0.0, 1.0]),
        'renew': np.array([1.0, 1.0, 0.0]),
        'visa': np.array([0.5, 0.5, 0.5]),
        'passport': np.array([0.2, 0.4, 0.6]),
    }
    return EmbeddingTable('tiny', 3, vectors)


@pytest.fixture
def second_table():
    vectors = {
        'visa': np.array([1.0, -1.0]),
        'renew': np.array([0.5, 0.5]),
        'cost': np.array([0.0, 2.0]),
    }
    return EmbeddingTable('second', 2, vectors)


def make_pair(orig_text, rel_text, rank=1, label=1, orig_id='q1', rel_id='r1',
              orig_lang='en', rel_lang='en', translation=None, bit=1):
    return PairExample(
        Question.from_text(orig_id, orig_lang, orig_text, translation),
        Question.from_text(rel_id, rel_lang, rel_text),
        rank, label, bit,
    )


def make_pool(n, d_emb=3, n_phi=4, seed=0, name='toy', labeled=True, bit=1.0, n_queries=None):
    """Random FeaturizedPool; labels follow the sign of the first phi column."""
    rng = np.random.default_rng(seed)
    n_queries = n_queries or max(1, n // 5)
    phi = rng.normal(size=(n, n_phi))
    labels = (phi[:, 0] > 0).astype(np.float64) if labeled else np.full(n, np.nan)
    per_query = int(np.ceil(n / n_queries))
    qids = tuple(f"{name}{i // per_query}" for i in range(n))
    return FeaturizedPool(
        name=name,
        z_q=rng.normal(size=(n, d_emb)),
        z_r=rng.normal(size=(n, d_emb)),
        phi=phi,
        labels=labels,
        language_bits=np.full(n, bit),
        query_ids=qids,
        candidate_ids=tuple(f"{name}_c{i}" for i in range(n)),
        ir_ranks=tuple(i % per_query + 1 for i in range(n)),
    )


@pytest.fixture
def small_spec():
    return SyntheticSpec(
        latent_dim=4,
        source_train_queries=12,
        dev_queries=4,
        source_test_queries=4,
        unlabeled_target_queries=12,
        target_test_queries=4,
        k_per_query=5,
        seed=3,
    )


@pytest.fixture
def small_dataset(small_spec):
    dataset, _ = generate_synthetic(small_spec)
    return dataset
