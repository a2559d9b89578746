import io
import time

import numpy as np
import pytest

from lib.aggregate import SCHEMES, build_matrix, merge, rehome
from lib.corpus import TweetRecord, serialize_record
from lib.features import build_vocabulary
from lib.geomap import load_gazetteer, load_polygons
from lib.pipeline import IngestOptions, IngestRunner, ingest_records, merge_tree
from lib.progress_tracker import ProgressTracker
from lib.sampling import year_bounds
from lib.synthetic import generate_synthetic_corpus


def stream_and_gazetteer(n_counties, users_per_county, seed=0):
    corpus = generate_synthetic_corpus(n_counties, users_per_county, seed=seed)
    return list(corpus.records()), corpus.gazetteer()


@pytest.fixture(scope='module')
def small_stream():
    return stream_and_gazetteer(6, 50, seed=1)


def write_shards(records, assignment, n_shards, directory):
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / f"shard{i:02d}.jsonl" for i in range(n_shards)]
    handles = [open(p, 'w', encoding='utf-8') for p in paths]
    try:
        for rec, shard in zip(records, assignment):
            handles[shard].write(serialize_record(rec) + '\n')
    finally:
        for h in handles:
            h.close()
    return paths


def check_partitions(records, gazetteer, n_partitions, seed):
    options = IngestOptions(gazetteer, language_filter=False)
    single, _ = ingest_records(records, options)
    single = rehome(single)
    vocab = build_vocabulary(single)
    expected = {s: build_matrix(s, single, vocab) for s in SCHEMES}

    rng = np.random.default_rng(seed)
    for _ in range(n_partitions):
        n_shards = int(rng.integers(1, 17))
        assignment = rng.integers(0, n_shards, size=len(records))
        shards = [ingest_records((r for r, a in zip(records, assignment) if a == i), options)[0]
                  for i in range(n_shards)]
        merged = rehome(merge_tree(shards))
        assert merged == single
        for scheme, matrix in expected.items():
            got = build_matrix(scheme, merged, vocab)
            assert got.counties == matrix.counties
            np.testing.assert_allclose(got.values, matrix.values, rtol=1e-12, atol=0)


def test_sharding_invariance(small_stream):
    records, gazetteer = small_stream
    check_partitions(records, gazetteer, 20, seed=0)


@pytest.mark.slow
def test_sharding_invariance_full_stream():
    records, gazetteer = stream_and_gazetteer(25, 100, seed=2)
    assert len(records) >= 100_000
    check_partitions(records, gazetteer, 20, seed=1)


def test_merge_tree_matches_left_fold(small_stream):
    records, gazetteer = small_stream
    options = IngestOptions(gazetteer, language_filter=False)
    parts = [ingest_records(records[i::5], options)[0] for i in range(5)]
    folded = parts[0]
    for part in parts[1:]:
        folded = merge(folded, part)
    assert merge_tree(parts) == folded
    assert merge_tree(parts[:1]) == parts[0]
    with pytest.raises(ValueError):
        merge_tree([])


@pytest.mark.parametrize("workers", [1, 3])
def test_runner_over_files(small_stream, tmp_path, workers):
    records, gazetteer = small_stream
    options = IngestOptions(gazetteer, language_filter=False)
    assignment = np.arange(len(records)) % 4
    paths = write_shards(records, assignment, 4, tmp_path / 'shards')
    acc, stats = IngestRunner(options, workers=workers, operation_id='runner').run(paths)
    single, _ = ingest_records(records, options)
    assert acc == rehome(single)
    assert stats.lines == len(records)
    assert stats.accumulated == len(records)
    state = ProgressTracker('runner').read()
    assert state['status'] == 'complete'
    assert state['stage'] == 'rehome'
    assert state['counters']['accumulated'] == len(records)


def test_runner_missing_shard(small_stream, tmp_path):
    _, gazetteer = small_stream
    with pytest.raises(FileNotFoundError):
        IngestRunner(IngestOptions(gazetteer)).run([tmp_path / 'nope.jsonl'])
    with pytest.raises(ValueError):
        IngestRunner(IngestOptions(gazetteer)).run([])


def test_year_slice_counts(small_stream):
    records, gazetteer = small_stream
    options = IngestOptions(gazetteer, language_filter=False, years=(2012, 2012))
    acc, stats = ingest_records(records, options)
    lo, hi = year_bounds(2012)
    inside = sum(1 for r in records if lo <= r.created_at < hi)
    assert stats.accumulated == inside == acc.total_tweets
    assert stats.out_of_year == len(records) - inside


def test_sampling_counts(small_stream):
    records, gazetteer = small_stream
    options = IngestOptions(gazetteer, language_filter=False, sample_fraction=0.5, sample_seed=7)
    acc, stats = ingest_records(records, options)
    assert stats.accumulated + stats.sampled_out == len(records)
    assert 0.4 < stats.accumulated / len(records) < 0.6
    again, _ = ingest_records(reversed(records), options)
    assert again == acc


def test_language_filter_and_unmapped():
    g = load_polygons(io.StringIO("99001\t0\t0,0;0,1;1,1;1,0\n"),
                      load_gazetteer(io.StringIO("")))
    records = [
        TweetRecord('1', 'u1', 0, 'we had a great time at the game tonight', (0.5, 0.5)),
        TweetRecord('2', 'u1', 1, 'el perro come la comida en la casa', (0.5, 0.5)),
        TweetRecord('3', 'u2', 2, 'nowhere to be found on the map', (5.0, 5.0)),
    ]
    acc, stats = ingest_records(records, IngestOptions(g))
    assert stats.accumulated == 1
    assert stats.non_english == 1
    assert stats.unmapped == 1
    assert stats.mapped_coordinates == 2
    assert acc.user_tweet_counts() == {'u1': 1}


class KeywordClassifier:
    """English exactly when the message contains 'hello'."""

    def predict(self, tokens):
        return ('en', 1.0) if 'hello' in tokens.tokens else ('es', 1.0)


def two_squares():
    return load_polygons(io.StringIO("99001\t0\t0,0;0,1;1,1;1,0\n99002\t0\t0,1;0,2;1,2;1,1\n"),
                         load_gazetteer(io.StringIO("")))


def test_home_comes_from_earliest_message_even_if_filtered_out():
    records = [
        TweetRecord('1', 'u1', 1, 'hola amigos', (0.5, 0.5)),
        TweetRecord('2', 'u1', 2, 'hello friends', (0.5, 1.5)),
    ]
    options = IngestOptions(two_squares(), language_model=KeywordClassifier())
    acc, stats = ingest_records(records, options)
    assert stats.non_english == 1
    assert list(acc.cells) == [('u1', '99002')]
    assert acc.homes['u1'].fips == '99001'
    assert list(rehome(acc).cells) == [('u1', '99001')]


def test_home_does_not_depend_on_sample_fraction(small_stream):
    records, gazetteer = small_stream
    full, _ = ingest_records(records, IngestOptions(gazetteer, language_filter=False))
    for fraction in (0.1, 0.5):
        options = IngestOptions(gazetteer, language_filter=False, sample_fraction=fraction, sample_seed=3)
        sampled, _ = ingest_records(records, options)
        assert sampled.homes == full.homes


def test_home_evidence_survives_sharding():
    records = [
        TweetRecord('1', 'u1', 1, 'hola amigos', (0.5, 0.5)),
        TweetRecord('2', 'u1', 2, 'hello friends', (0.5, 1.5)),
        TweetRecord('3', 'u2', 3, 'hello there', (0.5, 0.5)),
    ]
    options = IngestOptions(two_squares(), language_model=KeywordClassifier())
    single = rehome(ingest_records(records, options)[0])
    shards = [ingest_records(records[i:i + 1], options)[0] for i in range(len(records))]
    assert rehome(merge_tree(shards)) == single
    assert single.county_users() == {'99001': 2}


@pytest.mark.slow
def test_ingest_throughput_floor():
    corpus = generate_synthetic_corpus(20, 20, seed=5, tokens_per_tweet=23)
    records = list(corpus.records())
    assert 120 <= sum(len(r.text) for r in records) / len(records) <= 150
    options = IngestOptions(corpus.gazetteer(), language_filter=False)
    ingest_records(records[:1000], options)
    start = time.perf_counter()
    _, stats = ingest_records(records, options)
    rate = len(records) / (time.perf_counter() - start)
    assert stats.accumulated == len(records)
    assert rate > 10000, f"{rate:.0f} records/s"
