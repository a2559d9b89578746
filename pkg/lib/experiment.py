"""
Experiment grids: ingestion slices x filters x schemes x feature sets x outcomes.

A spec is a versioned YAML document. Each slice (sample fraction, year) is
ingested once; every grid cell then builds its county matrix, runs the
cross-validated prediction stack and emits one EvalReport row. Rows come
back in grid order regardless of how cells were scheduled.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml
from tqdm import tqdm

from lib import config
from lib.aggregate import (
    COUNTY_BOW, MIN_TWEETS, MIN_USERS, SCHEMES, TWEET_TO_COUNTY, CountAccumulator,
    CountyFeatureMatrix, build_matrix, eligible_counties, filter_users, rehome, restrict_counties,
)
from lib.corpus import IngestStats
from lib.errors import CountyLexError, ExperimentCellError, SchemaError
from lib.features import (
    MODEL_VOCAB_SIZE, RAW, VOCAB_SIZE, TopicModel, Vocabulary, build_vocabulary,
    load_topic_model, topic_matrix, unigram_block,
)
from lib.geomap import Gazetteer, load_gazetteer, load_polygons
from lib.model import (
    LOG10, NO_TRANSFORM, OutcomeTable, PipelineConfig, cross_validate_detailed, evaluate,
    load_outcomes,
)
from lib.pipeline import IngestOptions, IngestRunner, ingest_records
from lib.progress_tracker import ProgressTracker
from lib.provenance import header_lines, provenance
from lib.synthetic import generate_synthetic_corpus

logger = logging.getLogger(__name__)

SPEC_VERSION = 1

UNIGRAMS = 'unigrams'
TOPICS = 'topics'
BOTH = 'both'
FEATURE_SETS = (UNIGRAMS, TOPICS, BOTH)

# Study variants: count-based schemes computed without the min-tweets user
# filter, on the counties that qualify with it
TWEET_TO_COUNTY_ALL = 'tweet_to_county_all'
COUNTY_BOW_ALL = 'county_bow_all'
ALL_SCHEMES = SCHEMES + (TWEET_TO_COUNTY_ALL, COUNTY_BOW_ALL)
_BASE_SCHEME = {TWEET_TO_COUNTY_ALL: TWEET_TO_COUNTY, COUNTY_BOW_ALL: COUNTY_BOW}


@dataclass
class OutcomeSpec:
    name: str
    path: str
    transform: str = NO_TRANSFORM


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one experiment grid."""

    name: str = 'experiment'
    inputs: List[str] = field(default_factory=list)
    synthetic: Optional[Dict[str, Any]] = None
    gazetteer: Optional[str] = None
    polygons: Optional[str] = None
    outcomes: List[OutcomeSpec] = field(default_factory=list)
    schemes: List[str] = field(default_factory=lambda: list(SCHEMES))
    feature_sets: List[str] = field(default_factory=lambda: [UNIGRAMS])
    topics: Optional[str] = None
    topic_normalization: str = RAW
    vocab_size: int = VOCAB_SIZE
    model_vocab_size: int = MODEL_VOCAB_SIZE
    min_tweets: int = MIN_TWEETS
    max_tweets: List[Optional[int]] = field(default_factory=lambda: [None])
    min_users: List[int] = field(default_factory=lambda: [MIN_USERS])
    sample_fractions: List[float] = field(default_factory=lambda: [1.0])
    sample_seed: int = 0
    years: Optional[List[int]] = None
    year_range: Optional[List[int]] = None
    language_filter: bool = True
    binary_per_tweet: bool = False
    same_counties_as_full: bool = False
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    workers: Optional[int] = None
    version: int = SPEC_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.version != SPEC_VERSION:
            raise SchemaError(f"unsupported experiment spec version {self.version}")
        if not self.inputs and not self.synthetic:
            raise SchemaError("spec needs 'inputs' or 'synthetic'")
        if self.inputs and self.synthetic:
            raise SchemaError("'inputs' and 'synthetic' are mutually exclusive")
        if not self.outcomes and not self.synthetic:
            raise SchemaError("spec lists no outcomes")
        for s in self.schemes:
            if s not in ALL_SCHEMES:
                raise SchemaError(f"unknown scheme {s!r}; expected one of {ALL_SCHEMES}")
        for fs in self.feature_sets:
            if fs not in FEATURE_SETS:
                raise SchemaError(f"unknown feature set {fs!r}; expected one of {FEATURE_SETS}")
        if any(fs != UNIGRAMS for fs in self.feature_sets) and not self.topics:
            raise SchemaError("topic feature sets need a 'topics' file")
        for f in self.sample_fractions:
            if not 0 < f <= 1:
                raise SchemaError(f"sample fraction must be in (0, 1], got {f}")
        if self.year_range is not None:
            if len(self.year_range) != 2 or self.year_range[0] > self.year_range[1]:
                raise SchemaError(f"year_range must be [first, last] with first <= last, got {self.year_range}")
        if self.min_tweets < 0 or any(m < 1 for m in self.min_users):
            raise SchemaError("min_tweets must be >= 0 and min_users >= 1")
        if any(m is not None and m < self.min_tweets for m in self.max_tweets):
            raise SchemaError("max_tweets values must be >= min_tweets")
        for o in self.outcomes:
            if o.transform not in (NO_TRANSFORM, LOG10):
                raise SchemaError(f"outcome {o.name}: unknown transform {o.transform!r}")

    def snapshot(self) -> Dict[str, Any]:
        data = asdict(self)
        data['pipeline'] = self.pipeline.snapshot()
        return data


def _build(cls, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise SchemaError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise SchemaError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return data


def spec_from_dict(data: Dict[str, Any]) -> ExperimentSpec:
    """Validate a parsed document and build an ExperimentSpec."""
    data = dict(_build(ExperimentSpec, data, 'experiment spec'))
    if 'version' not in data:
        raise SchemaError("experiment spec needs a 'version' key")
    try:
        if 'pipeline' in data:
            data['pipeline'] = PipelineConfig(**_build(PipelineConfig, data['pipeline'] or {}, 'pipeline'))
        data['outcomes'] = [
            OutcomeSpec(**_build(OutcomeSpec, o, 'outcome')) for o in data.get('outcomes') or []
        ]
        for key in ('inputs', 'years', 'schemes', 'feature_sets', 'max_tweets', 'min_users', 'sample_fractions'):
            if key in data and not isinstance(data[key], list):
                data[key] = [data[key]]
        return ExperimentSpec(**data)
    except TypeError as e:
        raise SchemaError(f"experiment spec: {e}")


def load_experiment_spec(path: Union[str, Path]) -> ExperimentSpec:
    """Load a YAML (or JSON) experiment spec; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, encoding='utf-8') as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SchemaError(f"{path}: {e}")
    spec = spec_from_dict(data or {})
    base = path.parent

    def resolve(p):
        return str(p if Path(p).is_absolute() else base / p) if p else p

    spec.inputs = [resolve(p) for p in spec.inputs]
    spec.gazetteer = resolve(spec.gazetteer)
    spec.polygons = resolve(spec.polygons)
    spec.topics = resolve(spec.topics)
    for o in spec.outcomes:
        o.path = resolve(o.path)
    return spec


@dataclass
class EvalReport:
    outcome: str
    scheme: str
    feature_set: str
    sample_fraction: float
    year: Optional[int]
    min_users: int
    max_tweets: Optional[int]
    users_removed: int
    pearson_r: float
    mse: float
    n_counties: int
    n_tweets: int
    n_all_tweets: int
    n_users: int
    protocol: str
    ridge_alpha: float
    pca_components: int
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 <= self.pearson_r <= 1.0:
            raise SchemaError(f"pearson_r out of range: {self.pearson_r}")
        if self.mse < 0:
            raise SchemaError(f"mse must be >= 0: {self.mse}")


REPORT_COLUMNS = [f.name for f in fields(EvalReport) if f.name != 'config']


@dataclass
class Slice:
    fraction: float
    year: Optional[int]
    acc: CountAccumulator
    stats: IngestStats
    label: str = ''


@dataclass
class ExperimentResult:
    rows: List[EvalReport]
    slices: List[Slice]
    provenance: Dict[str, Any]


def _cell_label(s: Slice, min_users, max_tweets, scheme, feature_set, outcome) -> str:
    return (f"fraction={s.fraction:g} year={s.year or 'all'} min_users={min_users} "
            f"max_tweets={max_tweets or 'none'} scheme={scheme} features={feature_set} outcome={outcome}")


class ExperimentRunner:
    """Ingest slices, then evaluate every grid cell."""

    def __init__(self, spec: ExperimentSpec, workers: Optional[int] = None):
        self.spec = spec
        self.workers = workers or spec.workers or config.worker_count()
        self.synthetic = generate_synthetic_corpus(**spec.synthetic) if spec.synthetic else None
        self.gazetteer = self._load_gazetteer()
        self.outcomes = self._load_outcomes()
        self.topic_model: Optional[TopicModel] = (
            load_topic_model(spec.topics, spec.topic_normalization) if spec.topics else None)

    def _load_gazetteer(self) -> Gazetteer:
        if self.synthetic is not None:
            return self.synthetic.gazetteer()
        g = load_gazetteer(self.spec.gazetteer or config.BUNDLED_GAZETTEER)
        if self.spec.polygons:
            g = load_polygons(self.spec.polygons, g)
        return g

    def _load_outcomes(self) -> List[OutcomeTable]:
        tables = [load_outcomes(o.path, o.transform, o.name) for o in self.spec.outcomes]
        if self.synthetic is not None and not tables:
            tables.append(self.synthetic.outcomes)
        return tables

    def _slice_keys(self) -> List[Tuple[float, Optional[int]]]:
        years = self.spec.years or [None]
        fractions = list(self.spec.sample_fractions)
        if self.spec.same_counties_as_full and 1.0 not in fractions:
            fractions = [1.0] + fractions
        return [(f, y) for y in years for f in fractions]

    def _ingest(self, fraction: float, year: Optional[int]) -> Slice:
        spec = self.spec
        if year is not None:
            years = (year, year)
        elif spec.year_range:
            years = tuple(spec.year_range)
        else:
            years = None
        options = IngestOptions(
            gazetteer=self.gazetteer, years=years, language_filter=spec.language_filter,
            sample_fraction=fraction, sample_seed=spec.sample_seed,
            track_presence=spec.binary_per_tweet,
        )
        label = f"fraction={fraction:g} year={year or 'all'}"
        logger.info(f"[EXPERIMENT] Ingesting slice {label}")
        if self.synthetic is not None:
            acc, stats = ingest_records(self.synthetic.records(), options)
            acc = rehome(acc)
        else:
            runner = IngestRunner(options, self.workers, operation_id=f"{spec.name}_ingest")
            acc, stats = runner.run(spec.inputs)
        return Slice(fraction, year, acc, stats, label)

    def _scheme_accumulator(self, s: Slice, scheme: str, max_tweets: Optional[int]) -> Tuple[CountAccumulator, int]:
        if scheme in _BASE_SCHEME:
            return filter_users(s.acc, 0, max_tweets)
        return filter_users(s.acc, self.spec.min_tweets, max_tweets)

    def _blocks(self, m: CountyFeatureMatrix, vocab: Vocabulary, feature_set: str) -> List[np.ndarray]:
        unigrams = unigram_block(m, vocab, self.spec.model_vocab_size)
        if feature_set == UNIGRAMS:
            return [unigrams.values]
        topics = topic_matrix(m, self.topic_model)
        if feature_set == TOPICS:
            return [topics.values]
        return [unigrams.values, topics.values]

    def run(self) -> ExperimentResult:
        spec = self.spec
        progress = ProgressTracker(f"{spec.name}_experiment")
        progress.update("starting", "Ingesting slices...", 0, 100, stage="ingest")

        slices = [self._ingest(f, y) for f, y in self._slice_keys()]
        full = {s.year: s for s in slices if s.fraction == 1.0}

        # Build matrices serially (they share accumulators), then fan out CV jobs
        jobs = []
        vocab_hashes = []
        for s in slices:
            qualified, _ = filter_users(s.acc, spec.min_tweets)
            vocab = build_vocabulary(s.acc, spec.vocab_size)
            vocab_hashes.append(vocab.content_hash)
            for min_users in spec.min_users:
                basis = qualified
                if spec.same_counties_as_full and s.fraction != 1.0:
                    basis, _ = filter_users(full[s.year].acc, spec.min_tweets)
                counties = eligible_counties(basis, min_users)
                for max_tweets in spec.max_tweets:
                    for scheme in spec.schemes:
                        label = _cell_label(s, min_users, max_tweets, scheme, '*', '*')
                        try:
                            acc, removed = self._scheme_accumulator(s, scheme, max_tweets)
                            acc = restrict_counties(acc, counties)
                            kwargs = {'binary_per_tweet': True} if (
                                spec.binary_per_tweet and _BASE_SCHEME.get(scheme, scheme) == TWEET_TO_COUNTY) else {}
                            m = build_matrix(_BASE_SCHEME.get(scheme, scheme), acc, vocab, **kwargs)
                            m.scheme = scheme
                        except CountyLexError as e:
                            raise ExperimentCellError(label, e) from e
                        all_tweets = restrict_counties(s.acc, m.counties).county_tweets()
                        for feature_set in spec.feature_sets:
                            for outcome in self.outcomes:
                                jobs.append((s, min_users, max_tweets, scheme, feature_set, outcome,
                                             m, vocab, removed, all_tweets))

        logger.info(f"[EXPERIMENT] Evaluating {len(jobs)} grid cells with {self.workers} worker(s)")
        rows: List[Optional[EvalReport]] = [None] * len(jobs)
        snapshot = spec.snapshot()
        with ThreadPoolExecutor(max_workers=self.workers) as pool, \
                tqdm(total=len(jobs), desc="Grid cells", unit="cell") as bar:
            futures = [pool.submit(self._evaluate, job, snapshot) for job in jobs]
            for i, future in enumerate(futures):
                rows[i] = future.result()
                bar.update(1)
                progress.update("processing", f"Evaluated {i + 1}/{len(jobs)} cells", i + 1, len(jobs),
                                stage="evaluate", current_item=_cell_label(*jobs[i][:5], jobs[i][5].name))

        prov = provenance(snapshot, vocabulary_hash=vocab_hashes[0] if len(set(vocab_hashes)) == 1 else
                          ','.join(vocab_hashes), seed=spec.pipeline.seed, experiment=spec.name)
        logger.info(f"[EXPERIMENT] ✓ {len(rows)} report rows (config {prov['config_hash'][:12]})")
        progress.complete(f"{len(rows)} rows")
        return ExperimentResult(rows, slices, prov)

    def _evaluate(self, job, snapshot) -> EvalReport:
        s, min_users, max_tweets, scheme, feature_set, outcome, m, vocab, removed, all_tweets = job
        label = _cell_label(s, min_users, max_tweets, scheme, feature_set, outcome.name)
        try:
            idx, y = outcome.align(m.counties)
            blocks = [b[idx] for b in self._blocks(m, vocab, feature_set)]
            cv = cross_validate_detailed(blocks, y, self.spec.pipeline)
            r, err = evaluate(y, cv.predictions)
        except CountyLexError as e:
            raise ExperimentCellError(label, e) from e
        counties = [m.counties[i] for i in idx]
        logger.debug(f"[EXPERIMENT] {label}: r={r:.3f} mse={err:.4f} n={len(idx)}")
        return EvalReport(
            outcome=outcome.name, scheme=scheme, feature_set=feature_set,
            sample_fraction=s.fraction, year=s.year, min_users=min_users, max_tweets=max_tweets,
            users_removed=removed, pearson_r=r, mse=err, n_counties=len(idx),
            n_tweets=int(m.tweet_counts[idx].sum()),
            n_all_tweets=int(sum(all_tweets.get(c, 0) for c in counties)),
            n_users=int(m.user_counts[idx].sum()), protocol=cv.protocol,
            ridge_alpha=float(np.median(cv.alphas)), pca_components=int(np.median(cv.n_components)),
            config=snapshot,
        )


def run_experiment(spec: ExperimentSpec, workers: Optional[int] = None) -> ExperimentResult:
    """Run every cell of the spec's grid and return the report rows in grid order."""
    return ExperimentRunner(spec, workers).run()


def write_report(result: ExperimentResult, out_prefix: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<prefix>.tsv`` and ``<prefix>.json``, both carrying the provenance header."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    tsv_path = out_prefix.with_suffix('.tsv')
    json_path = out_prefix.with_suffix('.json')

    with open(tsv_path, 'w', encoding='utf-8') as f:
        f.write(header_lines(result.provenance))
        f.write('\t'.join(REPORT_COLUMNS) + '\n')
        for row in result.rows:
            values = asdict(row)
            f.write('\t'.join(_fmt(values[c]) for c in REPORT_COLUMNS) + '\n')

    with open(json_path, 'w', encoding='utf-8') as f:
        json.dump({
            'provenance': result.provenance,
            'ingest': [{'slice': s.label, **s.stats.as_dict()} for s in result.slices],
            'rows': [{c: asdict(r)[c] for c in REPORT_COLUMNS} for r in result.rows],
            'config': result.rows[0].config if result.rows else {},
        }, f, indent=2)
    logger.info(f"[EXPERIMENT] ✓ Report written to {tsv_path} and {json_path}")
    return tsv_path, json_path


def _fmt(value) -> str:
    if value is None:
        return 'none'
    if isinstance(value, float):
        return f"{value:.6g}" if abs(value) >= 1e-4 or value == 0 else repr(value)
    return str(value)
