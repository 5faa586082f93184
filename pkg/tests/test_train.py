from collections import Counter
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest

from conftest import make_pool
from modules.data import PairExample, Question, QueryGroup, group_by_query
from modules.error_handler import EmptyPoolError, NumericAbort, ValidationError
from modules.features import concat_pools
from modules.metrics import EvalResult
from modules.model import Dimensions, ModelParams
from modules.train import (
    EarlyStopping, MinibatchSampler, PoolCycler, RandomStreams, TrainConfig, batch_composition,
    build_unlabeled_pool, classification_accuracy, evaluate_pool, grid_search, language_probe_accuracy,
    probe_discriminator, sample_minibatch, train, unlabeled_pairing,
)


def _result(value):
    return EvalResult(map=value, mrr=value, avg_rec=value, scored_queries=1, skipped_queries=0)


class ScriptedEvaluator:
    """Returns a fixed MAP sequence and remembers the params it saw."""

    def __init__(self, values):
        self.values = list(values)
        self.seen = []

    def __call__(self, params):
        self.seen.append(params)
        return _result(self.values[len(self.seen) - 1])


def _increasing(n):
    return ScriptedEvaluator([i / n for i in range(1, n + 1)])


@pytest.mark.parametrize("mode,expected", [
    ('fnn', (4, 0, 0)),
    ('clann_unsup', (4, 0, 4)),
    ('clann_semisup', (4, 2, 2)),
])
def test_batch_composition(mode, expected):
    assert batch_composition(8, mode) == expected


@pytest.mark.parametrize("mode", ['fnn', 'clann_unsup', 'clann_semisup'])
def test_sampler_composition_and_coverage_over_500_batches(mode):
    sampler = MinibatchSampler(40, 30, 50, 12, mode, RandomStreams.from_seed(0))
    n_src, n_tl, n_unl = batch_composition(12, mode)
    assert sampler.steps_per_epoch == 40 // n_src
    counts = np.zeros(40, dtype=int)
    for step in range(500):
        batch = sampler.next()
        assert (len(batch.source), len(batch.labeled_target), len(batch.unlabeled)) == (n_src, n_tl, n_unl)
        if step < sampler.steps_per_epoch:
            counts[batch.source] += 1
    if 40 % n_src == 0:
        npt.assert_array_equal(counts, 1)


def _batches(seed, n=60):
    sampler = MinibatchSampler(23, 11, 31, 12, 'clann_semisup', RandomStreams.from_seed(seed))
    return [sample_minibatch(sampler) for _ in range(n)]


def test_fixed_seed_reproduces_minibatch_sequence():
    first, second = _batches(5), _batches(5)
    for a, b in zip(first, second):
        npt.assert_array_equal(a.source, b.source)
        npt.assert_array_equal(a.labeled_target, b.labeled_target)
        npt.assert_array_equal(a.unlabeled, b.unlabeled)
    other = _batches(6)
    assert any(not np.array_equal(a.source, b.source) for a, b in zip(first, other))


def test_unlabeled_pairing_draws_retrieved_uniformly():
    original = Question('t0', 'ar', 'original')
    pairs = tuple(
        PairExample(original, Question(f"t0_r{k}", 'ar', f"related {k}"), k + 1, None, 0) for k in range(10)
    )
    groups = [QueryGroup(original, pairs)]
    rng = np.random.default_rng(0)
    draws = 10_000
    counts = Counter(unlabeled_pairing(rng, groups).retrieved.id for _ in range(draws))
    assert set(counts) == {p.retrieved.id for p in pairs}
    for n in counts.values():
        assert n / draws == pytest.approx(0.1, abs=0.02)


def test_pool_cycler_reshuffles_after_each_pass():
    cycler = PoolCycler(5, np.random.default_rng(0), 'p')
    first = cycler.take(5)
    assert sorted(first) == list(range(5))
    second = cycler.take(7)
    assert sorted(second[:5]) == list(range(5))
    assert cycler.passes == 2
    with pytest.raises(EmptyPoolError):
        PoolCycler(0, np.random.default_rng(0), 'empty')


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=7)
    with pytest.raises(ValueError):
        TrainConfig(mode='clann_semisup', batch_size=2)
    assert TrainConfig(dropout=0.3).keep_probability == pytest.approx(0.7)


def test_early_stopping_strict_improvement():
    stopper = EarlyStopping(2)
    assert stopper.update(0.5, 1)
    assert not stopper.update(0.5, 2)
    assert not stopper.should_stop
    assert not stopper.update(0.4, 3)
    assert stopper.should_stop
    assert stopper.best_epoch == 1


def test_patience_trace_with_scripted_dev_metric():
    source = make_pool(16, seed=1)
    evaluator = ScriptedEvaluator([0.1, 0.2, 0.2, 0.15, 0.3, 0.3])
    config = TrainConfig(mode='fnn', batch_size=4, h_size=3, f_size=4, max_epochs=6, patience=2)
    params, report = train(config, source, None, None, source, evaluator=evaluator)
    assert len(report.epochs) == 4
    assert report.stop_reason == 'patience'
    assert report.best_epoch == 2
    assert params is evaluator.seen[1]
    assert [e.improved for e in report.epochs] == [True, True, False, False]


def test_patience_fifteen_keeps_epoch_two_model():
    source = make_pool(16, seed=1)
    evaluator = ScriptedEvaluator([0.5, 0.6] + [0.55] * 15)
    config = TrainConfig(mode='fnn', batch_size=4, h_size=3, f_size=4, max_epochs=200, patience=15)
    params, report = train(config, source, None, None, source, evaluator=evaluator)
    assert len(report.epochs) == 17
    assert report.stop_reason == 'patience'
    assert report.best_epoch == 2
    assert report.best_dev.map == 0.6
    assert params is evaluator.seen[1]


def test_max_epochs_stop_reason_and_log_sink():
    source = make_pool(16, seed=1)
    records = []
    config = TrainConfig(mode='fnn', batch_size=4, h_size=3, f_size=4, max_epochs=3, patience=5)
    _, report = train(config, source, None, None, source, evaluator=_increasing(3), log_sink=records.append)
    assert report.stop_reason == 'max_epochs'
    assert [r['epoch'] for r in records] == [1, 2, 3]
    assert records[0]['discriminator_loss'] is None
    assert report.steps == 3 * (16 // 2)


def test_fnn_overfits_forty_pairs():
    source = make_pool(40, seed=2, n_phi=3)
    phi = source.phi.copy()
    phi[:, 0] += np.where(phi[:, 0] > 0, 0.5, -0.5)
    source = replace(source, phi=phi)
    config = TrainConfig(mode='fnn', batch_size=8, dropout=0.0, l2_strength=0.0, h_size=4, f_size=8,
                         max_epochs=200, patience=200, adam_alpha=0.02)
    params, report = train(config, source, None, None, source, evaluator=_increasing(200))
    assert len(report.epochs) == 200
    assert classification_accuracy(params, source) == 1.0


def test_fnn_equals_clann_with_zero_lambda_and_frozen_discriminator():
    source = make_pool(24, seed=3)
    unlabeled = make_pool(30, seed=4, labeled=False, bit=0.0)
    dev = make_pool(20, seed=5, n_queries=4)
    common = dict(batch_size=8, dropout=0.2, h_size=5, f_size=6, max_epochs=8, patience=3, seed=11)

    fnn_params, fnn_report = train(TrainConfig(mode='fnn', **common), source, None, None, dev)
    clann_params, clann_report = train(
        TrainConfig(mode='clann_unsup', lambda_fixed=0.0, discriminator_updates=False, **common),
        source, unlabeled, None, dev,
    )
    for key in ('U', 'V', 'w'):
        npt.assert_array_equal(clann_params.as_dict()[key], fnn_params.as_dict()[key])
    assert [e.dev_map for e in clann_report.epochs] == [e.dev_map for e in fnn_report.epochs]
    assert clann_report.best_epoch == fnn_report.best_epoch


def test_adversarial_training_updates_discriminator_and_logs_lambda():
    source = make_pool(24, seed=3)
    unlabeled = make_pool(24, seed=4, labeled=False, bit=0.0)
    probe = make_pool(8, seed=6, bit=0.0)
    records = []
    config = TrainConfig(mode='clann_unsup', batch_size=8, h_size=4, f_size=5, max_epochs=3, patience=3)
    params, report = train(config, source, unlabeled, None, source, evaluator=_increasing(3),
                           probe=probe, log_sink=records.append)
    init = ModelParams.initialize(config.dimensions(3, 4), RandomStreams.from_seed(config.seed).init)
    assert not np.array_equal(params.U_l, init.U_l)
    lambdas = [r['lambda'] for r in records]
    assert lambdas == sorted(lambdas) and lambdas[0] > 0.0
    assert all(r['probe_accuracy'] is not None for r in records)
    assert all(r['discriminator_loss'] is not None for r in records)


def test_semisup_training_runs():
    source = make_pool(24, seed=3)
    labeled_target = make_pool(12, seed=7, bit=0.0)
    unlabeled = make_pool(24, seed=4, labeled=False, bit=0.0)
    config = TrainConfig(mode='clann_semisup', batch_size=6, h_size=4, f_size=5, max_epochs=2, patience=2)
    _, report = train(config, source, unlabeled, labeled_target, source, evaluator=_increasing(2))
    assert report.steps == 2 * (24 // 2)


def test_required_pools():
    source = make_pool(8)
    with pytest.raises(EmptyPoolError):
        train(TrainConfig(mode='clann_unsup', max_epochs=1), source, None, None, source)
    with pytest.raises(EmptyPoolError):
        train(TrainConfig(mode='clann_semisup', max_epochs=1), source, make_pool(8, labeled=False), None, source)


def test_non_finite_input_aborts_with_location():
    source = make_pool(8)
    source.phi[0, 0] = np.nan
    config = TrainConfig(mode='fnn', batch_size=16, max_epochs=1)
    with pytest.raises(NumericAbort) as exc:
        train(config, source, None, None, source, evaluator=_increasing(1))
    assert exc.value.epoch == 1 and exc.value.batch == 1


def test_zero_weight_discriminator_probe_scores_source_fraction():
    dims = Dimensions(3, 4, 2, 3, 2)
    params = ModelParams.initialize(dims, 0).replace(U_l=np.zeros((2, 3)), w_l=np.zeros(2))
    pool = concat_pools('probe', [make_pool(3, seed=1), make_pool(1, seed=2, bit=0.0)])
    assert probe_discriminator(params, pool) == 0.75


def test_language_probe_separates_shifted_languages():
    dims = Dimensions(3, 4, 4, 6, 2)
    params = ModelParams.initialize(dims, 0)
    src = make_pool(40, seed=1)
    tgt = make_pool(40, seed=2, bit=0.0)
    tgt = replace(tgt, z_q=tgt.z_q + 5.0, z_r=tgt.z_r + 5.0)
    accuracy = language_probe_accuracy(params, concat_pools('mix', [src, tgt]))
    assert 0.0 <= accuracy <= 1.0
    with pytest.raises(ValidationError):
        language_probe_accuracy(params, src)


def test_build_unlabeled_pool(small_dataset):
    groups = group_by_query(small_dataset.unlabeled_target)
    rng = np.random.default_rng(0)
    pairs = build_unlabeled_pool(rng, groups, 30)
    assert len(pairs) == 30
    assert len({p.key for p in pairs}) == 30
    assert all(p.label is None and p.language_bit == 0 for p in pairs)
    own = {(g.original.id, p.retrieved.id) for g in groups for p in g.pairs}
    assert {p.key for p in pairs} <= own

    cross = build_unlabeled_pool(np.random.default_rng(1), groups, 40, use_pool=True)
    assert len(cross) == 40
    assert all(1 <= p.ir_rank <= 10 for p in cross)


def test_grid_search_two_by_two_resumes(tmp_path):
    source = make_pool(16, seed=1)
    dev = make_pool(20, seed=5, n_queries=4)
    base = TrainConfig(mode='fnn', batch_size=4, f_size=4, max_epochs=2, patience=2, seed=3)
    cells = [{'dropout': d, 'h_size': h} for d in (0.2, 0.3) for h in (3, 5)]
    result = grid_search(cells, base, source, None, None, dev, cell_dir=str(tmp_path), threads=2)
    assert [c.index for c in result.cells] == [0, 1, 2, 3]
    assert len(list((tmp_path / "cells").glob("cell_*.json"))) == 4
    assert result.best_config.seed == base.seed + result.best.index
    assert result.best_config.h_size == cells[result.best.index]['h_size']
    assert result.best.dev_map == max(c.dev_map for c in result.cells)

    again = grid_search(cells, base, source, None, None, dev, cell_dir=str(tmp_path))
    assert all(c.resumed for c in again.cells)
    assert again.best.index == result.best.index
    npt.assert_array_equal(again.best.params.U, result.best.params.U)


def test_grid_best_cell_ties_break_on_mrr_then_index(monkeypatch):
    base = TrainConfig(mode='fnn', batch_size=4, f_size=4, max_epochs=2, patience=2, seed=10)
    scripted = [(0.5, 0.9), (0.6, 0.3), (0.6, 0.5), (0.6, 0.5)]

    def fake_train(config, *args, **kwargs):
        dev_map, dev_mrr = scripted[config.seed - base.seed]
        dev = EvalResult(map=dev_map, mrr=dev_mrr, avg_rec=0.0, scored_queries=1, skipped_queries=0)
        return None, SimpleNamespace(best_dev=dev, best_epoch=1, epochs=[None])

    monkeypatch.setattr('modules.train.train', fake_train)
    source = make_pool(8)
    cells = [{'h_size': h} for h in (2, 3, 4, 5)]
    result = grid_search(cells, base, source, None, None, source)
    assert result.best.index == 2
    assert result.best_config.h_size == 4
    assert result.best_config.seed == 12

    scripted[:] = [(0.4, 0.4)] * 4
    assert grid_search(cells, base, source, None, None, source).best.index == 0


def test_grid_best_checkpoint_reproduces_reported_dev_map(tmp_path):
    source = make_pool(16, seed=1)
    dev = make_pool(20, seed=5, n_queries=4)
    base = TrainConfig(mode='fnn', batch_size=4, f_size=4, max_epochs=3, patience=2, seed=8)
    cells = [{'dropout': d, 'h_size': h} for d in (0.1, 0.3) for h in (2, 4)]
    result = grid_search(cells, base, source, None, None, dev, cell_dir=str(tmp_path))
    again = grid_search(cells, base, source, None, None, dev, cell_dir=str(tmp_path))
    for best in (result.best, again.best):
        replay = evaluate_pool(best.params, dev, base.eval_depth)
        assert replay.map == best.dev_map
        assert replay.mrr == best.dev_mrr
