"""
Deterministic stream subsampling and calendar-year slicing.
"""

import hashlib
from datetime import datetime, timezone
from operator import attrgetter
from typing import Callable, Iterable, Iterator, Tuple, TypeVar

from lib.corpus import TweetRecord
from lib.errors import SchemaError

_HASH_SPACE = float(2 ** 64)

T = TypeVar("T")


def keep_fraction(tweet_id: str, seed: int) -> float:
    """Uniform value in [0, 1) derived from (seed, tweet_id)."""
    digest = hashlib.blake2b(f"{seed}:{tweet_id}".encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'big') / _HASH_SPACE


def subsample_stream(records: Iterable[T], fraction: float, seed: int = 0,
                     key: Callable[[T], str] = attrgetter('tweet_id')) -> Iterator[T]:
    """
    Keep each record independently iff hash(seed, tweet_id) < fraction.

    The decision depends only on the id and the seed, so it is the same on
    every shard and in any order. With one seed, smaller fractions keep a
    subset of larger ones; nest two independent samples with two seeds.
    ``key`` extracts the tweet id when the stream carries more than records.
    """
    if not 0 < fraction <= 1:
        raise SchemaError(f"subsample fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        yield from records
        return
    for rec in records:
        if keep_fraction(key(rec), seed) < fraction:
            yield rec


def year_bounds(year: int) -> Tuple[int, int]:
    """[Jan 1 of year, Jan 1 of next year) in UTC epoch seconds."""
    start = datetime(year, 1, 1, tzinfo=timezone.utc)
    end = datetime(year + 1, 1, 1, tzinfo=timezone.utc)
    return int(start.timestamp()), int(end.timestamp())


def slice_by_year(records: Iterable[TweetRecord], year: int) -> Iterator[TweetRecord]:
    """Records created within the calendar year (UTC, half-open)."""
    return slice_by_year_range(records, year, year)


def slice_by_year_range(records: Iterable[TweetRecord], first: int,
                        last: int) -> Iterator[TweetRecord]:
    """Records created from Jan 1 of ``first`` up to the end of ``last`` (UTC)."""
    if first > last:
        raise SchemaError(f"year range is reversed: {first} > {last}")
    lo, _ = year_bounds(first)
    _, hi = year_bounds(last)
    return (rec for rec in records if lo <= rec.created_at < hi)
