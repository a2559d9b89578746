#!/usr/bin/env python3
"""
Sharded ingestion: records -> county-mapped, English, sampled token counts.

Per record: parse -> year slice -> county mapping (home evidence) -> language
filter -> subsample -> accumulate. Shards run in a process pool and their
accumulators are combined with a fixed pairwise merge tree in shard order,
so the result does not depend on worker count or completion order.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from lib import config
from lib.aggregate import AccumulatorConfig, CountAccumulator, merge, rehome
from lib.corpus import IngestStats, TokenSequence, TweetRecord, read_records, tokenize
from lib.geomap import COORDINATES, Gazetteer, map_record
from lib.langid import MIN_CONFIDENCE, LanguageClassifier, is_english
from lib.progress_tracker import ProgressTracker
from lib.sampling import slice_by_year_range, subsample_stream

logger = logging.getLogger(__name__)

# Pipeline stage progress allocation (must sum to 100)
STAGE_PROGRESS = {
    'ingest': (0, 85),   # 0-85%: shards parsed and accumulated
    'merge': (85, 95),   # 85-95%: pairwise merge tree
    'rehome': (95, 100), # 95-100%: users folded into their home county
}


@dataclass
class IngestOptions:
    """Everything a worker needs to turn a shard into counts."""

    gazetteer: Gazetteer
    years: Optional[Tuple[int, int]] = None  # inclusive (first, last)
    language_filter: bool = True
    min_confidence: float = MIN_CONFIDENCE
    sample_fraction: float = 1.0
    sample_seed: int = 0
    track_presence: bool = False
    language_model: Optional[LanguageClassifier] = field(default=None, repr=False)

    def accumulator_config(self) -> AccumulatorConfig:
        return AccumulatorConfig(language_filter=self.language_filter,
                                 track_presence=self.track_presence)


class _Counted:
    """Iterator that counts the items it has yielded."""

    def __init__(self, items: Iterable):
        self._items = iter(items)
        self.n = 0

    def __iter__(self):
        return self

    def __next__(self):
        item = next(self._items)
        self.n += 1
        return item


def _message_id(item: Tuple[TweetRecord, str, TokenSequence]) -> str:
    return item[0].tweet_id


def _mapped_english(records: Iterable[TweetRecord], options: IngestOptions, stats: IngestStats,
                    acc: CountAccumulator) -> Iterator[Tuple[TweetRecord, str, TokenSequence]]:
    """County-mapped records that pass the language filter, with their tokens."""
    for rec in records:
        mapping = map_record(rec, options.gazetteer)
        if mapping is None:
            stats.unmapped += 1
            continue
        if mapping.source == COORDINATES:
            stats.mapped_coordinates += 1
        else:
            stats.mapped_profile += 1
        # Home evidence counts every mapped message, English or not, sampled or not
        acc.observe(rec, mapping)

        tokens = tokenize(rec.text)
        if options.language_filter:
            english, _ = is_english(tokens, options.language_model, options.min_confidence)
            if not english:
                stats.non_english += 1
                continue
        yield rec, mapping.fips, tokens


def ingest_records(records: Iterable[TweetRecord], options: IngestOptions,
                   stats: Optional[IngestStats] = None) -> Tuple[CountAccumulator, IngestStats]:
    """
    Accumulate one stream of parsed records.

    Returns the per-(user, county) accumulator without rehoming, so results
    from several streams can still be merged.
    """
    stats = stats if stats is not None else IngestStats()
    acc = CountAccumulator(options.accumulator_config())

    read = _Counted(records)
    in_slice = _Counted(slice_by_year_range(read, *options.years) if options.years is not None else read)
    english = _Counted(_mapped_english(in_slice, options, stats, acc))
    accumulated = 0
    for rec, fips, tokens in subsample_stream(english, options.sample_fraction, options.sample_seed,
                                              key=_message_id):
        acc.add(rec, fips, tokens)
        accumulated += 1

    stats.out_of_year += read.n - in_slice.n
    stats.sampled_out += english.n - accumulated
    stats.accumulated += accumulated
    return acc, stats


def ingest_shard(path: Union[str, Path], options: IngestOptions) -> Tuple[CountAccumulator, IngestStats]:
    """Parse and accumulate a single JSONL shard (runs inside a worker)."""
    stats = IngestStats()
    acc, stats = ingest_records(read_records(path, stats), options, stats)
    logger.debug(f"[INGEST] {Path(path).name}: {stats.accumulated}/{stats.lines} records accumulated")
    return acc, stats


def merge_tree(accumulators: Sequence[CountAccumulator]) -> CountAccumulator:
    """Merge in a fixed pairwise tree: (0,1), (2,3), ... then repeat on the results."""
    if not accumulators:
        raise ValueError("nothing to merge")
    level = list(accumulators)
    while len(level) > 1:
        nxt = [merge(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


class IngestRunner:
    """Run ingestion over file shards with progress reporting."""

    def __init__(self, options: IngestOptions, workers: Optional[int] = None,
                 operation_id: str = 'ingest', rehome_users: bool = True):
        """
        Args:
            options: Per-record processing options
            workers: Process count (default: COUNTYLEX_WORKERS)
            operation_id: Name of the progress file
            rehome_users: Fold each user into their earliest county after merging
        """
        self.options = options
        self.workers = workers or config.worker_count()
        self.operation_id = operation_id
        self.rehome_users = rehome_users
        self.progress = None
        self._last_percent = 0

    def update_progress(self, stage: str, stage_percent: int, message: str, item: str = ""):
        """Map stage-local progress onto the overall range (never decreasing)."""
        if not self.progress:
            return
        start, end = STAGE_PROGRESS.get(stage, (0, 100))
        overall = start + int((end - start) * stage_percent / 100)
        overall = max(overall, self._last_percent)
        self._last_percent = overall
        self.progress.update("processing", message, overall, 100, item, stage=stage)

    def _collect(self, shards: List[Path]) -> List[Tuple[CountAccumulator, IngestStats]]:
        results: List = [None] * len(shards)
        bar = tqdm(total=len(shards), desc="Ingesting shards", unit="shard")
        try:
            if self.workers > 1 and len(shards) > 1:
                with ProcessPoolExecutor(max_workers=min(self.workers, len(shards))) as pool:
                    futures = [pool.submit(ingest_shard, s, self.options) for s in shards]
                    for i, future in enumerate(futures):
                        results[i] = future.result()
                        bar.update(1)
                        self.update_progress('ingest', int(100 * (i + 1) / len(shards)),
                                             f"Ingested {i + 1}/{len(shards)} shards", shards[i].name)
            else:
                for i, shard in enumerate(shards):
                    results[i] = ingest_shard(shard, self.options)
                    bar.update(1)
                    self.update_progress('ingest', int(100 * (i + 1) / len(shards)),
                                         f"Ingested {i + 1}/{len(shards)} shards", shard.name)
        finally:
            bar.close()
        return results

    def run(self, shards: Sequence[Union[str, Path]]) -> Tuple[CountAccumulator, IngestStats]:
        """
        Ingest all shards and return the combined accumulator and statistics.

        Raises:
            FileNotFoundError: A shard does not exist
        """
        shards = [Path(s) for s in shards]
        missing = [str(s) for s in shards if not s.exists()]
        if missing:
            raise FileNotFoundError(f"shard(s) not found: {', '.join(missing)}")
        if not shards:
            raise ValueError("no input shards given")

        logger.info(f"[INGEST] Starting: {len(shards)} shard(s), {min(self.workers, len(shards))} worker(s)")
        self.progress = ProgressTracker(self.operation_id)
        self.progress.update("starting", "Starting ingestion...", 0, 100, stage="ingest")
        start = time.time()

        try:
            results = self._collect(shards)

            self.update_progress('merge', 0, "Merging shard accumulators...")
            acc = merge_tree([a for a, _ in results])
            stats = IngestStats()
            for _, s in results:
                stats = stats.merge(s)
            self.update_progress('merge', 100, "Merged")

            if self.rehome_users:
                acc = rehome(acc)
            self.update_progress('rehome', 100, "Users assigned to home counties")
        except Exception as e:
            logger.error(f"[INGEST] ✗ Failed: {e}")
            self.progress.error(str(e))
            raise

        elapsed = time.time() - start
        log_stats(stats)
        logger.info(f"[INGEST] ✓ Complete: {len(acc.users())} users in {len(acc.county_users())} counties "
                    f"({elapsed:.1f}s)")
        self.progress.complete(f"Ingested {stats.accumulated} records from {len(shards)} shard(s)",
                               counters=stats.as_dict())
        return acc, stats


def log_stats(stats: IngestStats):
    logger.info(f"📊 Records read:        {stats.lines:,}")
    logger.info(f"   Malformed/missing:   {stats.malformed:,} / {stats.missing_fields:,}")
    logger.info(f"   Outside year range:  {stats.out_of_year:,}")
    logger.info(f"   County mapped:       {stats.county_mapped:,} "
                f"(coordinates {stats.mapped_coordinates:,}, profile {stats.mapped_profile:,})")
    logger.info(f"   Unmapped:            {stats.unmapped:,}")
    logger.info(f"   Non-English:         {stats.non_english:,}")
    logger.info(f"   Sampled out:         {stats.sampled_out:,}")
    logger.info(f"   Accumulated:         {stats.accumulated:,}")
