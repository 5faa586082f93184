"""
Adaptation behaviour on the reference synthetic setup.

Deselected by default; run with `pytest -m slow`.
"""
import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from core import FeatureContext, RerankPipeline
from modules.config_enhanced import get_train_config
from modules.data import SyntheticSpec, generate_synthetic
from modules.features import FeatureConfig

pytestmark = pytest.mark.slow

SEEDS = range(5)


def _run(dataset, mode, seed):
    config = get_train_config({}, 'quickstart', {'mode': mode, 'seed': seed})
    context = FeatureContext.build([], FeatureConfig(mode='vector'))
    return RerankPipeline(config, context).fit(dataset)


@pytest.fixture(scope='module')
def outcomes():
    results = []
    for seed in SEEDS:
        dataset, _ = generate_synthetic(SyntheticSpec(seed=seed))
        results.append((_run(dataset, 'fnn', seed), _run(dataset, 'clann_unsup', seed)))
    return results


def test_clann_beats_fnn_on_target_test(outcomes):
    fnn = np.array([f.evaluations['test_target'].map for f, _ in outcomes])
    clann = np.array([c.evaluations['test_target'].map for _, c in outcomes])
    assert clann.mean() > fnn.mean()
    assert int(np.sum(clann > fnn)) >= 4


def test_clann_representations_hide_the_language(outcomes):
    fnn = np.array([f.language_probe for f, _ in outcomes])
    clann = np.array([c.language_probe for _, c in outcomes])
    assert int(np.sum(clann < fnn)) >= 4
    assert clann.mean() < 0.75


def test_unshifted_pools_are_exchangeable():
    spec = SyntheticSpec(target_rotation=False, target_offset=0.0, source_train_queries=5000,
                         unlabeled_target_queries=5000, k_per_query=1, dev_queries=1, source_test_queries=0,
                         target_test_queries=0, seed=7)
    dataset, _ = generate_synthetic(spec)
    rows = [(p.original.precomputed_vector, p.language_bit)
            for p in dataset.labeled_source + dataset.unlabeled_target]
    assert len(rows) == 10_000
    x = np.stack([v for v, _ in rows])
    y = np.array([b for _, b in rows])
    x_train, x_test, y_train, y_test = train_test_split(x, y, test_size=0.5, random_state=0, stratify=y)
    accuracy = LogisticRegression(max_iter=1000).fit(x_train, y_train).score(x_test, y_test)
    assert abs(accuracy - 0.5) < 0.05
