import math
from collections import Counter

import numpy as np
import numpy.testing as npt
import pytest

from conftest import make_pair, make_pool
from core import FeatureContext, load_model, save_model
from modules.data import Question
from modules.error_handler import DimensionMismatch, SchemaMismatch, ValidationError
from modules.features import (
    FeatureConfig, FeatureSchema, apply_scaler, brevity_penalty, concat_pools, count_sentences,
    extract_pair_features, feature_schema, featurize_pool, fit_scaler, fit_scaler_matrix, hypothesis_tokens,
    ngram_stats, reciprocal_rank_feature, register_block, sentence_bleu, surface_counts,
    unigram_precision_recall, vector_cosine,
)
from modules.model import ModelParams
from modules.train import TrainConfig


def _oracle_counts(cand, ref, n):
    grams = lambda toks: [tuple(toks[i:i + n]) for i in range(len(toks) - n + 1)]
    c, r = Counter(grams(cand)), Counter(grams(ref))
    return sum(min(v, r[g]) for g, v in c.items()), max(len(cand) - n + 1, 0)


def _oracle_bleu(cand, ref):
    if not cand:
        return 0.0
    m1, t1 = _oracle_counts(cand, ref, 1)
    if m1 == 0:
        return 0.0
    log_p = math.log(m1 / t1)
    for n in range(2, 5):
        m, t = _oracle_counts(cand, ref, n)
        log_p += math.log((m + 1) / (t + 1))
    bp = min(1.0, math.exp(1 - len(ref) / len(cand)))
    return bp * math.exp(log_p / 4)


def test_ngram_stats_and_bleu_match_brute_force():
    rng = np.random.default_rng(0)
    vocab = ['a', 'b', 'c', 'd', 'e']
    for _ in range(50):
        cand = list(rng.choice(vocab, size=rng.integers(0, 9)))
        ref = list(rng.choice(vocab, size=rng.integers(1, 9)))
        for n, stat in enumerate(ngram_stats(cand, ref), start=1):
            matches, total = _oracle_counts(cand, ref, n)
            assert stat.clipped_matches == matches
            assert stat.candidate_count == total
            assert stat.precision == (matches / total if total else 0.0)
        assert sentence_bleu(cand, ref) == pytest.approx(_oracle_bleu(cand, ref), abs=1e-12)


@pytest.mark.parametrize("length", range(1, 11))
def test_bleu_of_identical_sentences_is_one(length):
    tokens = [f"w{i}" for i in range(length)]
    assert sentence_bleu(tokens, tokens) == pytest.approx(1.0)


def test_bleu_edge_cases():
    assert sentence_bleu([], ['a']) == 0.0
    assert sentence_bleu(['x', 'y'], ['a', 'b']) == 0.0
    assert brevity_penalty(0, 3) == 0.0
    assert brevity_penalty(4, 2) == 1.0
    assert brevity_penalty(2, 4) == pytest.approx(math.exp(-1.0))


def test_unigram_precision_recall():
    assert unigram_precision_recall(['a', 'a', 'b'], ['a', 'c']) == (pytest.approx(1 / 3), 0.5)
    assert unigram_precision_recall([], ['a']) == (0.0, 0.0)


def test_vector_cosine_zero_norm_and_clamp():
    assert vector_cosine(np.zeros(3), np.ones(3)) == 0.0
    v = np.array([1e-3, 2e-3, 3e-3])
    assert vector_cosine(v, v) <= 1.0
    assert vector_cosine(v, -v) == pytest.approx(-1.0)


def test_surface_counts_example():
    q = Question.from_text('q', 'en', "Hello!!! Is this ok?? see http://x.com/a.png :)")
    counts = surface_counts(q)
    assert counts['urls'] == 1
    assert counts['images'] == 1
    assert counts['excl_triple'] == 1
    assert counts['excl_single'] == 0
    assert counts['quest_double'] == 1
    assert counts['smileys_pos'] == 1
    assert counts['sentences'] == 3


def test_surface_contacts_and_runs():
    q = Question.from_text('q', 'en', "mail a.b@example.com or call +1 555 123 4567 !!!! ? :(")
    counts = surface_counts(q)
    assert counts['emails'] == 1
    assert counts['phones'] == 1
    assert counts['excl_triple'] == 1
    assert counts['excl_single'] == 1
    assert counts['quest_single'] == 1
    assert counts['smileys_neg'] == 1


def test_count_sentences():
    assert count_sentences("") == 0
    assert count_sentences("no terminator") == 1
    assert count_sentences("One. Two? Three") == 3


def test_oov_counts_against_tables(tiny_table):
    q = Question.from_text('q', 'en', "renew visa zzz qqq")
    assert surface_counts(q, [tiny_table])['oov'] == 2
    assert surface_counts(q)['oov'] == 0


def test_reciprocal_rank_feature():
    assert reciprocal_rank_feature(4) == 0.25
    with pytest.raises(ValidationError):
        reciprocal_rank_feature(0)


def test_schema_layout(tiny_table, second_table):
    schema = feature_schema([tiny_table])
    assert len(schema.names) == 17 + 2 + 1 + 17 + 17 + 3 + 1
    assert schema.names[0] == 'bleu.p1'
    assert schema.names[16] == 'bleu.bleu'
    assert schema.names[19] == 'cos.tiny'
    assert schema.names[-1] == 'meta.reciprocal_rank'
    assert schema.version == 'clann-text-v1'

    two = feature_schema([tiny_table, second_table])
    assert two.names[19:21] == ('cos.tiny', 'cos.second')

    vector = feature_schema([], FeatureConfig(mode='vector'))
    assert vector.names == ('vector_cosine', 'meta.reciprocal_rank')
    assert vector.version == 'clann-vector-v1'


def test_schema_mismatch_lists_both():
    a = FeatureSchema(('x', 'y'), 'clann-text-v1')
    with pytest.raises(SchemaMismatch) as exc:
        a.check_matches(FeatureSchema(('x',), 'clann-text-v1'))
    assert "'y'" in str(exc.value)


def test_duplicate_block_registration_rejected():
    with pytest.raises(ValueError):
        register_block('bleu', lambda tables, config: [])(lambda pair, tables, config: [])


def test_extract_pair_features_identical_questions(tiny_table):
    pair = make_pair("how do i renew visa", "how do i renew visa", rank=2)
    schema = feature_schema([tiny_table])
    phi = dict(zip(schema.names, extract_pair_features(pair, [tiny_table]).values))
    assert phi['bleu.bleu'] == pytest.approx(1.0)
    assert phi['unigram.precision'] == 1.0
    assert phi['cos.tiny'] == pytest.approx(1.0)
    assert phi['ratio.tokens'] == 1.0
    assert phi['meta.reciprocal_rank'] == 0.5


def test_cross_language_hypothesis_uses_translation():
    pair = make_pair("كيف اجدد التأشيرة", "how renew visa", orig_lang='ar',
                     translation="how to renew the visa", bit=0)
    assert hypothesis_tokens(pair) == ['how', 'to', 'renew', 'the', 'visa']
    same = make_pair("renew visa", "how renew visa", translation="ignored")
    assert hypothesis_tokens(same) == ['renew', 'visa']


def test_vector_mode_requires_vectors():
    pair = make_pair("a", "b")
    with pytest.raises(ValidationError):
        extract_pair_features(pair, [], FeatureConfig(mode='vector'))


def test_scaler_constant_columns_pass_through():
    m = np.array([[1.0, 5.0, 0.0],
                  [3.0, 5.0, 2.0],
                  [5.0, 5.0, 4.0]])
    scaler = fit_scaler_matrix(m, ('a', 'b', 'c'))
    npt.assert_array_equal(scaler.mean, [3.0, 0.0, 2.0])
    npt.assert_allclose(scaler.std, [np.sqrt(8 / 3), 1.0, np.sqrt(8 / 3)])
    out = scaler.transform(m)
    npt.assert_array_equal(out[:, 1], m[:, 1])
    npt.assert_allclose(out[:, 0].mean(), 0.0, atol=1e-15)

    with pytest.raises(ValidationError):
        fit_scaler_matrix(m[:1])
    with pytest.raises(ValidationError):
        scaler.transform(np.zeros((2, 4)))


def test_fit_and_apply_scaler_on_pair_features(tiny_table):
    pairs = [
        make_pair("how do i renew visa", "renew visa", rel_id='r1'),
        make_pair("renew passport", "how do i renew visa passport", rel_id='r2', rank=2),
        make_pair("visa", "passport", rel_id='r3', rank=3),
    ]
    features = [extract_pair_features(p, [tiny_table]) for p in pairs]
    scaler = fit_scaler(features)
    assert scaler.names == features[0].names
    scaled = [apply_scaler(scaler, f) for f in features]
    assert scaled[0].names == features[0].names
    assert scaled[0].schema_version == features[0].schema_version
    raw = np.stack([f.values for f in features])
    stacked = np.stack([f.values for f in scaled])
    varying = raw.std(axis=0) > 1e-9
    npt.assert_allclose(stacked[:, varying].mean(axis=0), 0.0, atol=1e-12)
    npt.assert_array_equal(stacked[:, ~varying], raw[:, ~varying])

    with pytest.raises(ValidationError):
        fit_scaler(features[:1])


def test_featurize_pool_labels_bits_and_degenerate(tiny_table):
    pairs = [
        make_pair("renew visa", "how do i renew", label=1, rel_id='r1'),
        make_pair("renew visa", "zzz", label=None, rel_id='r2', rank=2),
    ]
    pool = featurize_pool('p', pairs, [tiny_table])
    assert len(pool) == 2
    assert pool.labels[0] == 1.0 and np.isnan(pool.labels[1])
    assert not pool.labeled
    npt.assert_array_equal(pool.language_bits, [1.0, 1.0])
    assert pool.degenerate == 1
    npt.assert_array_equal(pool.z_r[1], np.zeros(3))
    assert pool.ir_ranks == (1, 2)


def test_concat_pools():
    a, b = make_pool(4, seed=1, name='a'), make_pool(3, seed=2, name='b', bit=0.0)
    joined = concat_pools('ab', [a, b])
    assert len(joined) == 7
    npt.assert_array_equal(joined.language_bits, [1, 1, 1, 1, 0, 0, 0])
    assert joined.candidate_ids[4] == b.candidate_ids[0]
    with pytest.raises(DimensionMismatch):
        concat_pools('bad', [a, make_pool(3, n_phi=5)])


WORDS = ['how', 'do', 'i', 'renew', 'visa', 'passport', 'cost', 'zorp', 'blip']


def _random_pairs(rng, n):
    def text():
        words = list(rng.choice(WORDS, size=int(rng.integers(1, 9))))
        return " ".join(words) + str(rng.choice(['', '?', '!!']))

    return [make_pair(text(), text(), rank=int(rng.integers(1, 11)),
                      orig_id=f"q{i}", rel_id=f"r{i}") for i in range(n)]


def _mean_vector(tokens, table):
    found = [table.vectors[t] for t in tokens if t in table.vectors]
    return np.mean(found, axis=0) if found else np.zeros(table.dimension)


def _oracle_cosine(a, b, table):
    u, v = _mean_vector(a, table), _mean_vector(b, table)
    nu, nv = np.sqrt(u @ u), np.sqrt(v @ v)
    return 0.0 if nu == 0 or nv == 0 else float(u @ v / (nu * nv))


def _oracle_surface(q, tables):
    toks = list(q.tokens)
    oov = sum(1 for t in toks if all(t not in table.vectors for table in tables))
    return {
        'urls': 0, 'images': 0, 'emails': 0, 'phones': 0,
        'tokens': len(toks), 'sentences': 1, 'avg_tokens': len(toks),
        'type_token': len(set(toks)) / len(toks), 'smileys_pos': 0, 'smileys_neg': 0,
        'excl_single': 0, 'excl_double': int(q.text.endswith('!!')), 'excl_triple': 0,
        'quest_single': int(q.text.endswith('?')), 'quest_double': 0, 'quest_triple': 0,
        'oov': oov,
    }


def _oracle_phi(pair, tables):
    cand, ref = list(pair.original.tokens), list(pair.retrieved.tokens)
    counts = [_oracle_counts(cand, ref, n) for n in range(1, 5)]
    out = {}
    for n, (m, t) in enumerate(counts, start=1):
        out[f"bleu.p{n}"] = m / t if t else 0.0
        out[f"bleu.m{n}"] = m
        out[f"bleu.t{n}"] = t
    out['bleu.cand_len'] = len(cand)
    out['bleu.ref_len'] = len(ref)
    out['bleu.length_ratio'] = len(cand) / len(ref)
    out['bleu.brevity_penalty'] = min(1.0, math.exp(1 - len(ref) / len(cand)))
    out['bleu.bleu'] = _oracle_bleu(cand, ref)
    out['unigram.precision'] = counts[0][0] / len(cand)
    out['unigram.recall'] = counts[0][0] / len(ref)
    for table in tables:
        out[f"cos.{table.name}"] = _oracle_cosine(cand, ref, table)
    orig, rel = _oracle_surface(pair.original, tables), _oracle_surface(pair.retrieved, tables)
    out.update({f"orig.{k}": v for k, v in orig.items()})
    out.update({f"rel.{k}": v for k, v in rel.items()})
    for name in ('tokens', 'sentences', 'oov'):
        out[f"ratio.{name}"] = orig[name] / rel[name] if rel[name] else 0.0
    out['meta.reciprocal_rank'] = 1.0 / pair.ir_rank
    return out


@pytest.mark.parametrize("block", ['bleu.', 'unigram.', 'cos.', 'orig.', 'rel.', 'ratio.', 'meta.'])
def test_every_block_matches_oracle_over_random_pairs(block, tiny_table, second_table):
    tables = [tiny_table, second_table]
    names = [n for n in feature_schema(tables).names if n.startswith(block)]
    assert names
    for pair in _random_pairs(np.random.default_rng(12), 50):
        features = extract_pair_features(pair, tables)
        got = dict(zip(features.names, features.values))
        expected = _oracle_phi(pair, tables)
        npt.assert_allclose([got[n] for n in names], [expected[n] for n in names],
                            rtol=1e-12, atol=1e-12, err_msg=f"{pair.original.text!r} / {pair.retrieved.text!r}")


def test_scaler_saved_with_model_reproduces_scaled_features(tmp_path, tiny_table):
    pairs = _random_pairs(np.random.default_rng(3), 30)
    context = FeatureContext.build([tiny_table], FeatureConfig())
    context.fit_scaler(context.encode_raw('train', pairs))
    config = TrainConfig(mode='fnn', h_size=3, f_size=4)
    params = ModelParams.initialize(config.dimensions(tiny_table.dimension, len(context.schema.names)), 0)

    path = tmp_path / "model.json"
    save_model(str(path), params, context, config, 'en', 'ar')
    loaded = load_model(str(path), [tiny_table])
    assert loaded.context.scaler.names == context.scaler.names
    fresh = _random_pairs(np.random.default_rng(4), 10)
    npt.assert_array_equal(loaded.context.encode('eval', fresh).phi, context.encode('eval', fresh).phi)
