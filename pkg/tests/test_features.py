import io
from collections import Counter

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from lib.aggregate import CountAccumulator, UserCell, user_to_county
from lib.errors import DuplicateRowWarning, NegativeWeight, SchemaError
from lib.features import (
    PER_TOPIC, PER_WORD, RAW, Vocabulary, build_vocabulary, load_topic_model, reduce_vocabulary,
    topic_loadings, topic_matrix, unigram_block, vocabulary_from_counts,
)


def accumulator(counts):
    acc = CountAccumulator()
    for i, (token, n) in enumerate(sorted(counts.items())):
        acc.add_cell(f"u{i}", '99001', UserCell(Counter({token: n}), 1, (0, str(i))))
    return acc


def synthetic_topics(n_topics=10, n_tokens=50, seed=0):
    """Small dense topic table: every topic weights every token."""
    rng = np.random.default_rng(seed)
    lines = ['topic_id\ttoken\tweight']
    for t in range(n_topics):
        for w in range(n_tokens):
            lines.append(f"{t}\tw{w:02d}\t{rng.random()!r}")
    return '\n'.join(lines) + '\n'


def test_top_k():
    assert build_vocabulary(accumulator({'a': 5, 'b': 3, 'c': 1}), 2).tokens == ('a', 'b')


def test_ties_break_lexicographically():
    assert build_vocabulary(accumulator({'b': 2, 'a': 2}), 1).tokens == ('a',)


def test_small_corpus_gives_all_tokens():
    counts = {f"t{i:03d}": i + 1 for i in range(100)}
    assert len(build_vocabulary(accumulator(counts), 25000)) == 100


@given(counts=st.dictionaries(st.text(min_size=1, max_size=4), st.integers(1, 20), max_size=30),
       data=st.data())
def test_vocabulary_independent_of_order(counts, data):
    items = data.draw(st.permutations(list(counts.items())))
    assert vocabulary_from_counts(dict(items), 10) == vocabulary_from_counts(counts, 10)


def test_reduce_is_prefix():
    v = vocabulary_from_counts({f"t{i:05d}": 30000 - i for i in range(25000)}, 25000)
    reduced = reduce_vocabulary(v, 10000)
    assert reduced.tokens == v.tokens[:10000]
    assert reduce_vocabulary(v, len(v)) == v


def test_reduce_to_zero_warns():
    v = vocabulary_from_counts({'a': 1}, 5)
    with pytest.warns(UserWarning):
        assert len(reduce_vocabulary(v, 0)) == 0


def test_unigram_block_selects_reduced_vocabulary_in_order():
    acc = accumulator({'a': 5, 'b': 3, 'c': 1})
    vocab = build_vocabulary(acc)
    m = user_to_county(acc, ['c', 'b', 'a'])
    block = unigram_block(m, vocab, 2)
    assert list(block.features) == ['a', 'b']
    np.testing.assert_array_equal(block.values[:, 0], m.values[:, 2])
    np.testing.assert_array_equal(block.values[:, 1], m.values[:, 1])


def test_unigram_block_missing_token():
    acc = accumulator({'a': 5, 'b': 3})
    with pytest.raises(SchemaError):
        unigram_block(user_to_county(acc, ['a']), build_vocabulary(acc), 2)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(SchemaError):
        Vocabulary(('a', 'a'), (1, 1))


def test_vocabulary_save_load(tmp_path):
    v = vocabulary_from_counts({'a': 3, 'b': 2, 'ü': 2}, 10)
    v.save(tmp_path / 'vocab.tsv')
    back = Vocabulary.load(tmp_path / 'vocab.tsv')
    assert back == v
    assert back.content_hash == v.content_hash
    assert (tmp_path / 'vocab.tsv').read_text(encoding='utf-8').splitlines()[0] == "1\ta\t3"


def test_content_hash_tracks_order():
    assert Vocabulary(('a', 'b'), (1, 1)).content_hash != Vocabulary(('b', 'a'), (1, 1)).content_hash


def test_load_topic_model():
    tm = load_topic_model(io.StringIO("0\thello\t0.6\n0\thi\t0.4\n"))
    assert tm.topic_ids == ['0']
    assert tm.topic_weights(0) == {'hello': 0.6, 'hi': 0.4}


def test_negative_weight_rejected():
    with pytest.raises(NegativeWeight):
        load_topic_model(io.StringIO("0\thello\t-0.1\n"))


def test_duplicate_rows_last_wins():
    with pytest.warns(DuplicateRowWarning):
        tm = load_topic_model(io.StringIO("0\thello\t0.6\n0\thello\t0.2\n"))
    assert tm.topic_weights(0) == {'hello': 0.2}


@pytest.mark.parametrize("text", ["0\thello\n", "0\thello\tmuch\n", "0\thello\tnan\n"])
def test_topic_schema_errors(text):
    with pytest.raises(SchemaError):
        load_topic_model(io.StringIO(text))


def test_topics_sorted_numerically():
    tm = load_topic_model(io.StringIO("10\ta\t1\n2\ta\t1\n1\tb\t1\n"))
    assert tm.topic_ids == ['1', '2', '10']


def test_normalization_modes():
    text = "0\ta\t2\n0\tb\t2\n1\ta\t6\n"
    per_topic = load_topic_model(io.StringIO(text), PER_TOPIC)
    assert per_topic.topic_weights(0) == {'a': 0.5, 'b': 0.5}
    assert per_topic.topic_weights(1) == {'a': 1.0}
    per_word = load_topic_model(io.StringIO(text), PER_WORD)
    assert per_word.topic_weights(0) == {'a': 0.25, 'b': 1.0}
    assert per_word.topic_weights(1) == {'a': 0.75}
    assert load_topic_model(io.StringIO(text), RAW).topic_weights(1) == {'a': 6.0}
    with pytest.raises(SchemaError):
        load_topic_model(io.StringIO(text), 'softmax')


def test_loadings_hand_check():
    tm = load_topic_model(io.StringIO("0\thello\t0.6\n0\thi\t0.4\n"))
    assert topic_loadings({'hello': 0.5, 'hi': 0.5}, tm)[0] == pytest.approx(0.5, abs=1e-15)


def test_zero_vector_and_unknown_tokens():
    tm = load_topic_model(io.StringIO(synthetic_topics()))
    assert not topic_loadings({}, tm).any()
    assert not topic_loadings({'never-seen': 1.0}, tm).any()


def test_one_hot_gives_weight_column():
    tm = load_topic_model(io.StringIO(synthetic_topics()))
    loadings = topic_loadings({'w07': 1.0}, tm)
    expected = [tm.topic_weights(t)['w07'] for t in tm.topic_ids]
    np.testing.assert_array_equal(loadings, expected)


vectors = st.dictionaries(st.sampled_from([f"w{i:02d}" for i in range(50)] + ['zz']),
                          st.floats(0, 1), max_size=20)


@given(x=vectors, y=vectors, a=st.floats(0, 10), b=st.floats(0, 10))
def test_loadings_are_linear(x, y, a, b):
    tm = load_topic_model(io.StringIO(synthetic_topics()))
    combined = {k: a * x.get(k, 0.0) + b * y.get(k, 0.0) for k in set(x) | set(y)}
    expected = a * topic_loadings(x, tm) + b * topic_loadings(y, tm)
    np.testing.assert_allclose(topic_loadings(combined, tm), expected, rtol=1e-12, atol=1e-12)


def test_topic_matrix_commutes_with_user_averaging():
    rng = np.random.default_rng(5)
    tm = load_topic_model(io.StringIO(synthetic_topics()))
    words = [f"w{i:02d}" for i in range(50)] + ['oov']
    acc = CountAccumulator()
    per_user = []
    for u in range(6):
        counts = Counter({words[int(i)]: 1 + int(rng.integers(0, 4)) for i in rng.integers(0, 51, size=8)})
        acc.add_cell(f"u{u}", '99001', UserCell(counts, 1, (0, str(u))))
        total = sum(counts.values())
        per_user.append(topic_loadings({w: n / total for w, n in counts.items()}, tm))
    m = topic_matrix(user_to_county(acc, words), tm)
    np.testing.assert_allclose(m.values[0], np.mean(per_user, axis=0), rtol=1e-12, atol=1e-14)
    assert m.features[0] == 'topic:0'
    assert m.settings['topic_normalization'] == RAW
