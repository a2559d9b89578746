#!/usr/bin/env python3
"""
countylex command line.

Usage:
    python countylex.py ingest shard1.jsonl [shard2.jsonl.gz ...] [--polygons PATH] [--years 2012-2013]
    python countylex.py aggregate --scheme {tweet|bow|user} --min-tweets 30 [--max-tweets N] --min-users 100
    python countylex.py features --matrix PREFIX --model-vocab-size 10000 [--topics PATH]
    python countylex.py predict --features {unigrams|topics|both} --outcome PATH --ridge-alpha 1000 --folds 10 --seed N
    python countylex.py experiment SPEC.yaml
    python countylex.py export-lexbank --privacy-floor 50 [--topics PATH]
    python countylex.py synth --counties 500 --users-per-county 200 --out DIR
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

# Add project root to path to import lib modules
sys.path.insert(0, str(Path(__file__).parent))

from lib import config
from lib.aggregate import (
    MIN_TWEETS, MIN_USERS, SCHEME_ALIASES, TWEET_TO_COUNTY, USER_TO_COUNTY, CountyFeatureMatrix,
    build_matrix, eligible_counties, filter_users, load_checkpoint, restrict_counties,
    save_checkpoint,
)
from lib.errors import CountyLexError, SchemaError
from lib.experiment import (
    EvalReport, ExperimentResult, load_experiment_spec, run_experiment, write_report,
)
from lib.features import (
    MODEL_VOCAB_SIZE, NORMALIZATION_MODES, RAW, VOCAB_SIZE, Vocabulary, build_vocabulary,
    load_topic_model, topic_matrix, unigram_block,
)
from lib.geomap import load_gazetteer, load_polygons
from lib.langid import MIN_CONFIDENCE
from lib.lexbank import PRIVACY_FLOOR, export_lexical_bank
from lib.model import (
    ALPHA_GRID, FOLDS, LOG10, NO_TRANSFORM, RIDGE_ALPHA, PipelineConfig, cross_validate_detailed,
    evaluate, load_outcomes,
)
from lib.pipeline import IngestOptions, IngestRunner
from lib.provenance import provenance
from lib.synthetic import generate_synthetic_corpus

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger('countylex')

DEFAULT_CHECKPOINT = 'accumulator.tsv'


def _checkpoint_path(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else config.CHECKPOINTS_DIR / DEFAULT_CHECKPOINT


def parse_years(text):
    """'2012' -> (2012, 2012); '2012-2013' -> (2012, 2013)."""
    if not text:
        return None
    first, _, last = text.partition('-')
    try:
        return int(first), int(last or first)
    except ValueError:
        raise argparse.ArgumentTypeError(f"years must look like 2012 or 2012-2013, got {text!r}")


def cmd_ingest(args):
    """Map, filter and count JSONL shards into an accumulator checkpoint."""
    g = load_gazetteer(args.gazetteer or config.BUNDLED_GAZETTEER)
    if args.polygons:
        g = load_polygons(args.polygons, g)
    options = IngestOptions(
        gazetteer=g,
        years=args.years,
        language_filter=not args.no_langid,
        min_confidence=args.min_confidence,
        sample_fraction=args.sample_fraction,
        sample_seed=args.sample_seed,
        track_presence=args.binary_per_tweet,
    )
    acc, stats = IngestRunner(options, args.workers).run(args.inputs)

    out = _checkpoint_path(args)
    save_checkpoint(acc, out)
    stats_path = out.with_suffix('.stats.json')
    with open(stats_path, 'w') as f:
        json.dump(stats.as_dict(), f, indent=2)
    print(f"✓ Checkpoint: {out}")
    print(f"✓ Statistics: {stats_path}")


def cmd_aggregate(args):
    """Build one county feature matrix from a checkpoint."""
    scheme = SCHEME_ALIASES[args.scheme]
    if args.binary_per_tweet and scheme != TWEET_TO_COUNTY:
        raise SchemaError(f"--binary-per-tweet applies to {TWEET_TO_COUNTY} only, not {scheme}")
    acc = load_checkpoint(_checkpoint_path(args))

    qualified, removed = filter_users(acc, args.min_tweets, args.max_tweets)
    counties = eligible_counties(qualified, args.min_users)
    logger.info(f"[AGGREGATE] {len(counties)} counties with >= {args.min_users} users "
                f"({removed} users filtered)")
    vocab = build_vocabulary(qualified, args.vocab_size)
    kwargs = {'binary_per_tweet': True} if args.binary_per_tweet else {}
    m = build_matrix(scheme, restrict_counties(qualified, counties), vocab, **kwargs)
    m.settings.update(min_tweets=args.min_tweets, max_tweets=args.max_tweets,
                      min_users=args.min_users, users_removed=removed,
                      vocabulary_hash=vocab.content_hash)

    prefix = Path(args.out) if args.out else config.FEATURES_DIR / scheme
    m.save(prefix)
    vocab.save(prefix.with_suffix('.vocab.tsv'))
    print(f"✓ {scheme}: {m.shape[0]} counties x {m.shape[1]} features -> {prefix}.npz")


def cmd_features(args):
    """Split a county matrix into the modeling unigram block and topic loadings."""
    prefix = Path(args.matrix)
    m = CountyFeatureMatrix.load(prefix)
    vocab = Vocabulary.load(prefix.with_suffix('.vocab.tsv'))
    unigrams = unigram_block(m, vocab, args.model_vocab_size)
    unigrams.save(f"{prefix}_unigrams")
    print(f"✓ Unigrams: {unigrams.shape[1]} features -> {prefix}_unigrams.npz")
    if args.topics:
        tm = load_topic_model(args.topics, args.normalization)
        topics = topic_matrix(m, tm)
        topics.save(f"{prefix}_topics")
        print(f"✓ Topics: {topics.shape[1]} topics -> {prefix}_topics.npz")


def cmd_predict(args):
    """Cross-validated prediction of one outcome from saved feature blocks."""
    prefix = Path(args.matrix)
    names = {'unigrams': ['unigrams'], 'topics': ['topics'], 'both': ['unigrams', 'topics']}[args.features]
    matrices = [CountyFeatureMatrix.load(f"{prefix}_{n}") for n in names]
    if any(mm.counties != matrices[0].counties for mm in matrices):
        raise CountyLexError("feature blocks cover different counties")
    m = matrices[0]

    outcome = load_outcomes(args.outcome, LOG10 if args.log10 else NO_TRANSFORM)
    idx, y = outcome.align(m.counties)
    cfg = PipelineConfig(
        ridge_alpha=args.ridge_alpha,
        alpha_grid=ALPHA_GRID if args.alpha_grid else None,
        folds=args.folds, seed=args.seed,
        leaky_preprocess=args.leaky_preprocess,
        pca_components=args.pca_components,
    )
    cv = cross_validate_detailed([mm.values[idx] for mm in matrices], y, cfg)
    r, err = evaluate(y, cv.predictions)

    snapshot = {'matrix': str(prefix), 'features': args.features, 'outcome': str(args.outcome),
                'pipeline': cfg.snapshot(), 'matrix_settings': m.settings}
    row = EvalReport(
        outcome=outcome.name, scheme=m.scheme, feature_set=args.features,
        sample_fraction=1.0, year=None,
        min_users=int(m.settings.get('min_users', 0)), max_tweets=m.settings.get('max_tweets'),
        users_removed=int(m.settings.get('users_removed', 0)),
        pearson_r=r, mse=err, n_counties=len(idx),
        n_tweets=int(m.tweet_counts[idx].sum()), n_all_tweets=int(m.tweet_counts[idx].sum()),
        n_users=int(m.user_counts[idx].sum()), protocol=cv.protocol,
        ridge_alpha=float(np.median(cv.alphas)),
        pca_components=int(np.median(cv.n_components)),
        config=snapshot,
    )
    prov = provenance(snapshot, vocabulary_hash=m.settings.get('vocabulary_hash'), seed=args.seed)
    out = Path(args.out) if args.out else config.REPORTS_DIR / f"predict_{outcome.name}_{args.features}"
    write_report(ExperimentResult([row], [], prov), out)
    print(f"✓ {outcome.name} ({m.scheme}, {args.features}): r={r:.3f} mse={err:.4f} "
          f"n={len(idx)} [{cv.protocol}]")


def cmd_experiment(args):
    """Run a full experiment grid from a spec file."""
    spec = load_experiment_spec(args.spec)
    result = run_experiment(spec, args.workers)
    out = Path(args.out) if args.out else config.REPORTS_DIR / spec.name
    tsv, _ = write_report(result, out)

    print(f"\n{'outcome':<20}{'scheme':<22}{'features':<10}{'r':>8}{'mse':>10}{'N':>6}")
    for row in result.rows:
        print(f"{row.outcome:<20}{row.scheme:<22}{row.feature_set:<10}"
              f"{row.pearson_r:>8.3f}{row.mse:>10.4f}{row.n_counties:>6}")
    print(f"\n✓ Report: {tsv}")


def cmd_export_lexbank(args):
    """Write the anonymized county bag-of-words / bag-of-topics release."""
    acc = load_checkpoint(_checkpoint_path(args))
    qualified, _ = filter_users(acc, args.min_tweets)
    counties = eligible_counties(qualified, args.min_users)
    qualified = restrict_counties(qualified, counties)
    vocab = build_vocabulary(qualified, args.vocab_size)

    topics = None
    if args.topics:
        tm = load_topic_model(args.topics, args.normalization)
        topics = topic_matrix(build_matrix(USER_TO_COUNTY, qualified, vocab), tm)

    out = Path(args.out) if args.out else config.LEXBANK_DIR / args.time_span
    settings = {'min_tweets': args.min_tweets, 'min_users': args.min_users,
                'vocab_size': args.vocab_size, 'topics': args.topics,
                'normalization': args.normalization}
    export = export_lexical_bank(qualified, vocab, topics, out, args.privacy_floor, args.time_span,
                                 provenance(settings, vocab.content_hash))
    print(f"✓ Lexical bank: {len(export.vocabulary)} tokens, {len(export.counties)} counties -> {out}")


def cmd_synth(args):
    """Generate a synthetic corpus with known county outcomes."""
    corpus = generate_synthetic_corpus(
        n_counties=args.counties, users_per_county=args.users_per_county,
        super_user_rate=args.super_user_rate, signal=args.signal, seed=args.seed,
    )
    out = Path(args.out) if args.out else config.DATA_DIR / 'synthetic'
    paths = corpus.write_all(out)
    for name, path in paths.items():
        print(f"✓ {name}: {path}")


def _add_filter_args(p):
    p.add_argument('--checkpoint', help=f'Accumulator checkpoint (default: <data dir>/checkpoints/{DEFAULT_CHECKPOINT})')
    p.add_argument('--min-tweets', type=int, default=MIN_TWEETS, help='Drop users with fewer tweets')
    p.add_argument('--min-users', type=int, default=MIN_USERS, help='Keep counties with at least this many users')
    p.add_argument('--vocab-size', type=int, default=VOCAB_SIZE, help='Vocabulary size')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="County-level lexical features and outcome prediction")
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    subparsers = parser.add_subparsers(dest='command', help='Command to run')

    p = subparsers.add_parser('ingest', help='Ingest JSONL shards into an accumulator checkpoint')
    p.add_argument('inputs', nargs='+', help='JSONL shards (optionally .gz)')
    p.add_argument('--gazetteer', help='City/county gazetteer TSV (default: bundled)')
    p.add_argument('--polygons', help='County polygon TSV for coordinate mapping')
    p.add_argument('--years', type=parse_years, help='Year or inclusive range, e.g. 2012 or 2012-2013')
    p.add_argument('--no-langid', action='store_true', help='Skip the English filter')
    p.add_argument('--min-confidence', type=float, default=MIN_CONFIDENCE)
    p.add_argument('--sample-fraction', type=float, default=1.0)
    p.add_argument('--sample-seed', type=int, default=0)
    p.add_argument('--binary-per-tweet', action='store_true', help='Also track per-tweet token presence')
    p.add_argument('--workers', type=int, help='Worker processes (default: COUNTYLEX_WORKERS)')
    p.add_argument('--checkpoint', help='Output checkpoint path')

    p = subparsers.add_parser('aggregate', help='Build a county feature matrix')
    _add_filter_args(p)
    p.add_argument('--scheme', choices=sorted(SCHEME_ALIASES), default='user')
    p.add_argument('--max-tweets', type=int, help='Drop users with more tweets')
    p.add_argument('--binary-per-tweet', action='store_true',
                   help='tweet scheme: count tweets containing a token instead of mentions')
    p.add_argument('--out', help='Output prefix (default: <data dir>/features/<scheme>)')

    p = subparsers.add_parser('features', help='Derive modeling unigram and topic blocks')
    p.add_argument('--matrix', required=True, help='Matrix prefix written by aggregate')
    p.add_argument('--model-vocab-size', type=int, default=MODEL_VOCAB_SIZE)
    p.add_argument('--topics', help='Topic weight TSV (topic_id, token, weight)')
    p.add_argument('--normalization', choices=NORMALIZATION_MODES, default=RAW)

    p = subparsers.add_parser('predict', help='Cross-validated outcome prediction')
    p.add_argument('--matrix', required=True, help='Matrix prefix used by features')
    p.add_argument('--features', choices=['unigrams', 'topics', 'both'], default='unigrams')
    p.add_argument('--outcome', required=True, help='Outcome CSV (fips,value)')
    p.add_argument('--log10', action='store_true', help='log10-transform the outcome')
    p.add_argument('--ridge-alpha', type=float, default=RIDGE_ALPHA)
    p.add_argument('--alpha-grid', action='store_true', help=f'Choose alpha from {ALPHA_GRID} by inner CV')
    p.add_argument('--folds', type=int, default=FOLDS)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--pca-components', type=int, help='Fixed PCA size (default: 95%% variance)')
    p.add_argument('--leaky-preprocess', action='store_true',
                   help='Fit selection and PCA once on all rows (comparison only)')
    p.add_argument('--out', help='Report prefix')

    p = subparsers.add_parser('experiment', help='Run an experiment grid')
    p.add_argument('spec', help='Experiment spec (YAML)')
    p.add_argument('--workers', type=int)
    p.add_argument('--out', help='Report prefix (default: <data dir>/reports/<name>)')

    p = subparsers.add_parser('export-lexbank', help='Export the county lexical bank')
    _add_filter_args(p)
    p.add_argument('--privacy-floor', type=int, default=PRIVACY_FLOOR)
    p.add_argument('--topics', help='Topic weight TSV to include topic values')
    p.add_argument('--normalization', choices=NORMALIZATION_MODES, default=RAW)
    p.add_argument('--time-span', default='all', help='Label such as all, 2012 or 2012-2013')
    p.add_argument('--out', help='Release directory')

    p = subparsers.add_parser('synth', help='Generate a synthetic corpus')
    p.add_argument('--counties', type=int, default=100)
    p.add_argument('--users-per-county', type=int, default=100)
    p.add_argument('--super-user-rate', type=float, default=0.0)
    p.add_argument('--signal', type=float, default=0.9)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', help='Output directory')

    return parser


COMMANDS = {
    'ingest': cmd_ingest,
    'aggregate': cmd_aggregate,
    'features': cmd_features,
    'predict': cmd_predict,
    'experiment': cmd_experiment,
    'export-lexbank': cmd_export_lexbank,
    'synth': cmd_synth,
}


def main(argv=None):
    """Main entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    handler = COMMANDS.get(args.command)
    if handler is None:
        parser.print_help()
        sys.exit(1)

    config.ensure_dirs()
    try:
        handler(args)
    except FileNotFoundError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)
    except CountyLexError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
