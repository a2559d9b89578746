#!/usr/bin/env python3
"""
Measure single-worker ingestion throughput on a synthetic shard.

Usage:
    python scripts/benchmark_ingest.py [--counties 50] [--users-per-county 20] [--repeat 3] [--tokens-per-tweet 23]

Writes records/second/worker with and without the language filter to
<data dir>/reports/benchmark.json. The default of 23 synthetic tokens per
tweet gives records of about 140 characters of text, the length of a full
tweet.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

# Add parent directory to path to import lib modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from lib import config
from lib.corpus import IngestStats, read_records
from lib.langid import bundled_model
from lib.pipeline import IngestOptions, ingest_records
from lib.provenance import provenance
from lib.synthetic import generate_synthetic_corpus

logging.basicConfig(level=logging.INFO, format='%(levelname)s: %(message)s')
logger = logging.getLogger(__name__)

TOKENS_PER_TWEET = 23


def mean_text_length(records) -> float:
    n = total = 0
    for rec in records:
        n += 1
        total += len(rec.text)
    return total / n if n else 0.0


def time_ingest(shard: Path, options: IngestOptions, repeat: int) -> dict:
    """Best-of-N wall time for parse + map + filter + accumulate of one shard."""
    best = None
    stats = None
    for _ in range(repeat):
        stats = IngestStats()
        start = time.perf_counter()
        ingest_records(read_records(shard, stats), options, stats)
        elapsed = time.perf_counter() - start
        best = elapsed if best is None else min(best, elapsed)
    return {
        'records': stats.lines,
        'accumulated': stats.accumulated,
        'seconds': round(best, 4),
        'records_per_second_per_worker': round(stats.lines / best, 1) if best > 0 else None,
    }


def main():
    parser = argparse.ArgumentParser(description="Benchmark single-worker ingestion")
    parser.add_argument('--counties', type=int, default=50)
    parser.add_argument('--users-per-county', type=int, default=20)
    parser.add_argument('--repeat', type=int, default=3)
    parser.add_argument('--tokens-per-tweet', type=int, default=TOKENS_PER_TWEET,
                        help='Words per synthetic tweet (23 gives ~140 characters)')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--out', help='Output JSON (default: <data dir>/reports/benchmark.json)')
    args = parser.parse_args()

    config.ensure_dirs()
    corpus = generate_synthetic_corpus(args.counties, args.users_per_county, seed=args.seed,
                                       tokens_per_tweet=args.tokens_per_tweet)
    mean_chars = mean_text_length(corpus.records())
    logger.info(f"📏 Mean record text length: {mean_chars:.1f} characters")
    scratch = config.DATA_DIR / 'benchmark'
    paths = corpus.write_all(scratch)
    gazetteer = corpus.gazetteer()

    logger.info("🚀 Timing ingestion without language filter...")
    plain = time_ingest(paths['records'], IngestOptions(gazetteer, language_filter=False), args.repeat)
    logger.info(f"   {plain['records_per_second_per_worker']} records/s")

    logger.info("🚀 Timing ingestion with language filter...")
    options = IngestOptions(gazetteer, language_filter=True, language_model=bundled_model())
    filtered = time_ingest(paths['records'], options, args.repeat)
    logger.info(f"   {filtered['records_per_second_per_worker']} records/s")

    settings = {'counties': args.counties, 'users_per_county': args.users_per_county,
                'repeat': args.repeat, 'tokens_per_tweet': args.tokens_per_tweet}
    result = {
        'provenance': provenance(settings, seed=args.seed),
        'mean_text_chars': round(mean_chars, 1),
        'without_language_filter': plain,
        'with_language_filter': filtered,
    }
    out = Path(args.out) if args.out else config.REPORTS_DIR / 'benchmark.json'
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, 'w') as f:
        json.dump(result, f, indent=2)
    print(f"✓ Benchmark written to {out}")


if __name__ == '__main__':
    main()
