import math

import pytest

from lib.corpus import TweetRecord
from lib.errors import SchemaError
from lib.sampling import (
    keep_fraction, slice_by_year, slice_by_year_range, subsample_stream, year_bounds,
)


def stream(n, created_at=0):
    return [TweetRecord(f"t{i}", f"u{i % 97}", created_at, 'text') for i in range(n)]


def test_full_fraction_is_identity():
    records = stream(500)
    assert list(subsample_stream(records, 1.0, seed=9)) == records


def test_kept_count_is_binomial():
    n, p = 100_000, 0.1
    kept = sum(1 for _ in subsample_stream(stream(n), p, seed=0))
    sigma = math.sqrt(n * p * (1 - p))
    assert abs(kept - n * p) <= 3 * sigma


def test_same_seed_same_subset():
    records = stream(5000)
    first = [r.tweet_id for r in subsample_stream(records, 0.3, seed=4)]
    second = [r.tweet_id for r in subsample_stream(reversed(records), 0.3, seed=4)]
    assert sorted(first) == sorted(second)


def test_same_seed_nests():
    records = stream(5000)
    small = {r.tweet_id for r in subsample_stream(records, 0.1, seed=2)}
    large = {r.tweet_id for r in subsample_stream(records, 0.5, seed=2)}
    assert small <= large


def test_two_seeds_compose():
    n, f1, f2 = 100_000, 0.5, 0.2
    kept = sum(1 for _ in subsample_stream(subsample_stream(stream(n), f1, seed=1), f2, seed=2))
    p = f1 * f2
    assert abs(kept - n * p) <= 3 * math.sqrt(n * p * (1 - p))


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_fraction_out_of_range(fraction):
    with pytest.raises(SchemaError):
        list(subsample_stream(stream(3), fraction))


def test_keep_fraction_range():
    values = [keep_fraction(f"t{i}", 0) for i in range(1000)]
    assert all(0.0 <= v < 1.0 for v in values)
    assert keep_fraction('t1', 0) != keep_fraction('t1', 1)


def test_year_boundary_is_half_open():
    start_2013, _ = year_bounds(2013)
    assert start_2013 == 1356998400
    last_2012 = TweetRecord('a', 'u', start_2013 - 1, 'x')
    first_2013 = TweetRecord('b', 'u', start_2013, 'x')
    assert [r.tweet_id for r in slice_by_year([last_2012, first_2013], 2012)] == ['a']
    assert [r.tweet_id for r in slice_by_year([last_2012, first_2013], 2013)] == ['b']


def test_year_range_covers_both_years():
    lo, _ = year_bounds(2012)
    _, hi = year_bounds(2013)
    records = [TweetRecord(str(i), 'u', t, 'x') for i, t in enumerate([lo - 1, lo, hi - 1, hi])]
    assert [r.tweet_id for r in slice_by_year_range(records, 2012, 2013)] == ['1', '2']


def test_empty_year_slice():
    assert list(slice_by_year(stream(10, created_at=0), 2012)) == []


def test_reversed_range_rejected():
    with pytest.raises(SchemaError):
        slice_by_year_range([], 2013, 2012)


def test_subsample_by_key_matches_records():
    records = stream(2000)
    tagged = [(r, i) for i, r in enumerate(records)]
    kept = [r.tweet_id for r, _ in subsample_stream(tagged, 0.3, seed=4, key=lambda item: item[0].tweet_id)]
    assert kept == [r.tweet_id for r in subsample_stream(records, 0.3, seed=4)]
