"""
Synthetic county corpora with a known language -> outcome link.

Each county has a latent trait z. Its outcome is a linear function of z plus
noise, and its ordinary users tilt their word distribution toward a set of
trait words in proportion to a noisy copy of z. Super users post far more
and tilt according to a private trait unrelated to their county, so count
weighted aggregates are pulled away from the county signal while per-user
averages are not.

Everything is a pure function of the parameters and seed: records() and
accumulator() draw from the same per-user generators and agree exactly.
"""

import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from lib.aggregate import AccumulatorConfig, CountAccumulator, UserCell
from lib.corpus import TweetRecord, serialize_record
from lib.errors import SchemaError
from lib.geomap import (
    COORDINATES, PROFILE_TEXT, Gazetteer, UserCountyAssignment, load_gazetteer, load_polygons,
)
from lib.model import OutcomeTable
from lib.sampling import year_bounds

logger = logging.getLogger(__name__)

# Continental U.S. box the county grid is laid over
LAT_RANGE = (25.0, 49.0)
LON_RANGE = (-124.0, -67.0)
FIRST_YEAR, LAST_YEAR = 2012, 2013
PROFILE_EVERY = 10  # every 10th user has no coordinates, only a profile location
PROFILE_STATE = 'PA'


@dataclass(frozen=True)
class SyntheticParams:
    n_counties: int = 100
    users_per_county: int = 100
    super_user_rate: float = 0.0
    signal: float = 0.9
    seed: int = 0
    vocab_size: int = 300
    tokens_per_tweet: int = 8
    min_tweets: int = 30
    extra_tweets_mean: float = 10.0
    super_volume: int = 100
    trait_strength: float = 0.3
    user_noise: float = 1.0
    super_trait_sd: float = 2.0

    def __post_init__(self):
        for name in ('n_counties', 'users_per_county', 'vocab_size', 'tokens_per_tweet', 'super_volume'):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be positive")
        if self.n_counties > 9999 or self.users_per_county > 9999:
            raise SchemaError("at most 9999 counties and 9999 users per county")
        if not 0 <= self.super_user_rate <= 1:
            raise SchemaError("super_user_rate must be in [0, 1]")
        if not 0 <= self.signal <= 1:
            raise SchemaError("signal must be in [0, 1]")

    @property
    def median_tweets(self) -> int:
        return int(round(self.min_tweets + self.extra_tweets_mean))

    @property
    def super_tweets(self) -> int:
        return self.super_volume * self.median_tweets


class SyntheticUser(NamedTuple):
    fips: str
    county_index: int
    user_id: str
    user_index: int
    is_super: bool
    tokens: np.ndarray      # (n_tweets, tokens_per_tweet) word indices
    timestamps: np.ndarray  # (n_tweets,) epoch seconds


def synthetic_fips(i: int) -> str:
    """FIPS-shaped code outside the real state range (90000, 90001, ...)."""
    return f"{90 + i // 1000:02d}{i % 1000:03d}"


def word(i: int) -> str:
    return f"w{i:04d}"


class SyntheticCorpus:
    """A generated corpus: counties, outcomes, and lazily drawn users."""

    def __init__(self, params: SyntheticParams):
        self.params = params
        p = params
        rng = np.random.default_rng([p.seed])
        self.traits = rng.standard_normal(p.n_counties)
        noise = rng.standard_normal(p.n_counties)
        outcome = p.signal * self.traits + math.sqrt(max(0.0, 1.0 - p.signal ** 2)) * noise
        self.counties = [synthetic_fips(i) for i in range(p.n_counties)]
        self.outcomes = OutcomeTable('synthetic', dict(zip(self.counties, outcome.tolist())))

        ranks = np.arange(1, p.vocab_size + 1)
        self._base_logits = -np.log(ranks)
        idx = np.arange(p.vocab_size)
        self._direction = np.where(idx % 10 == 1, 1.0, np.where(idx % 10 == 2, -1.0, 0.0))
        self.words = [word(i) for i in range(p.vocab_size)]

        cols = math.ceil(math.sqrt(p.n_counties))
        rows = math.ceil(p.n_counties / cols)
        self._grid = (rows, cols)
        self._cell_size = ((LAT_RANGE[1] - LAT_RANGE[0]) / rows, (LON_RANGE[1] - LON_RANGE[0]) / cols)
        self._time_range = (year_bounds(FIRST_YEAR)[0], year_bounds(LAST_YEAR)[1])

    def _distribution(self, trait: float) -> np.ndarray:
        logits = self._base_logits + self.params.trait_strength * trait * self._direction
        w = np.exp(logits - logits.max())
        return w / w.sum()

    def county_box(self, i: int) -> Tuple[float, float, float, float]:
        """(min_lat, min_lon, max_lat, max_lon) of county i's grid square."""
        rows, cols = self._grid
        dlat, dlon = self._cell_size
        r, c = divmod(i, cols)
        return (LAT_RANGE[0] + r * dlat, LON_RANGE[0] + c * dlon,
                LAT_RANGE[0] + (r + 1) * dlat, LON_RANGE[0] + (c + 1) * dlon)

    def county_center(self, i: int) -> Tuple[float, float]:
        min_lat, min_lon, max_lat, max_lon = self.county_box(i)
        return (round((min_lat + max_lat) / 2, 6), round((min_lon + max_lon) / 2, 6))

    def user(self, j: int, u: int) -> SyntheticUser:
        p = self.params
        rng = np.random.default_rng([p.seed, j, u])
        is_super = bool(rng.random() < p.super_user_rate)
        if is_super:
            n_tweets = p.super_tweets
            trait = p.super_trait_sd * rng.standard_normal()
        else:
            n_tweets = p.min_tweets + int(rng.poisson(p.extra_tweets_mean))
            trait = self.traits[j] + p.user_noise * rng.standard_normal()
        probs = self._distribution(trait)
        tokens = rng.choice(p.vocab_size, size=(n_tweets, p.tokens_per_tweet), p=probs)
        timestamps = rng.integers(self._time_range[0], self._time_range[1], size=n_tweets)
        return SyntheticUser(self.counties[j], j, f"u{j:04d}{u:04d}", u, is_super, tokens, timestamps)

    def users(self, progress: bool = False) -> Iterator[SyntheticUser]:
        p = self.params
        total = p.n_counties * p.users_per_county
        with tqdm(total=total, desc="Synthetic users", unit="user", disable=not progress) as bar:
            for j in range(p.n_counties):
                for u in range(p.users_per_county):
                    yield self.user(j, u)
                    bar.update(1)

    @staticmethod
    def tweet_id(user: SyntheticUser, k: int) -> str:
        return f"{user.county_index:04d}{user.user_index:04d}{k:05d}"

    def records(self) -> Iterator[TweetRecord]:
        """The corpus as a message stream, user by user."""
        for user in self.users():
            geo = _has_coordinates(user)
            coords = self.county_center(user.county_index) if geo else None
            profile = None if geo else f"Synthville {user.county_index}, {PROFILE_STATE}"
            for k in range(len(user.timestamps)):
                text = ' '.join(self.words[t] for t in user.tokens[k])
                yield TweetRecord(self.tweet_id(user, k), user.user_id, int(user.timestamps[k]),
                                  text, coords, profile)

    def accumulator(self, config: Optional[AccumulatorConfig] = None,
                    progress: bool = False) -> CountAccumulator:
        """Counts equal to accumulating records() one message at a time."""
        acc = CountAccumulator(config or AccumulatorConfig(language_filter=False))
        vocab = self.params.vocab_size
        for user in self.users(progress=progress):
            counts = np.bincount(user.tokens.ravel(), minlength=vocab)
            nz = np.flatnonzero(counts)
            cell = UserCell(
                tokens=_counter(self.words, nz, counts),
                tweet_count=len(user.timestamps),
                first_seen=self._first_seen(user),
            )
            if acc.config.track_presence:
                ordered = np.sort(user.tokens, axis=1)
                first = np.ones_like(ordered, dtype=bool)
                first[:, 1:] = ordered[:, 1:] != ordered[:, :-1]
                present = np.bincount(ordered[first], minlength=vocab)
                cell.presence = _counter(self.words, np.flatnonzero(present), present)
            ts, tweet_id = cell.first_seen
            source = COORDINATES if _has_coordinates(user) else PROFILE_TEXT
            acc.add_cell(user.user_id, user.fips, cell,
                         home=UserCountyAssignment(user.user_id, user.fips, source, ts, tweet_id))
        return acc

    def _first_seen(self, user: SyntheticUser) -> Tuple[int, str]:
        # ids grow with k, so the first minimal timestamp also has the smallest id
        k = int(np.argmin(user.timestamps))
        return int(user.timestamps[k]), self.tweet_id(user, k)

    def super_users(self) -> Dict[str, int]:
        """Super users per county."""
        counts = {fips: 0 for fips in self.counties}
        for user in self.users():
            if user.is_super:
                counts[user.fips] += 1
        return counts

    def write_records(self, path: Union[str, Path]) -> int:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n = 0
        with open(path, 'w', encoding='utf-8') as f:
            for rec in self.records():
                f.write(serialize_record(rec) + '\n')
                n += 1
        return n

    def write_outcomes(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write('fips,value\n')
            for fips in self.counties:
                f.write(f"{fips},{self.outcomes.values[fips]!r}\n")

    def _gazetteer_text(self) -> str:
        lines = ['# city\tstate_abbrev\tfips']
        lines += [f"Synthville {i}\t{PROFILE_STATE}\t{fips}" for i, fips in enumerate(self.counties)]
        return '\n'.join(lines) + '\n'

    def _polygon_text(self) -> str:
        lines = ['# fips\tring_index\tlat,lon;...']
        for i, fips in enumerate(self.counties):
            a, b, c, d = self.county_box(i)
            ring = [(a, b), (a, d), (c, d), (c, b)]
            lines.append(f"{fips}\t0\t" + ';'.join(f"{lat!r},{lon!r}" for lat, lon in ring))
        return '\n'.join(lines) + '\n'

    def gazetteer(self) -> Gazetteer:
        """In-memory gazetteer with the grid polygons and the profile city names."""
        g = load_gazetteer(io.StringIO(self._gazetteer_text()))
        return load_polygons(io.StringIO(self._polygon_text()), g)

    def write_gazetteer(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self._gazetteer_text(), encoding='utf-8')

    def write_polygons(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self._polygon_text(), encoding='utf-8')

    def write_all(self, out_dir: Union[str, Path]) -> Dict[str, Path]:
        """Write records, outcomes, gazetteer, polygons and params; return their paths."""
        out_dir = Path(out_dir)
        paths = {
            'records': out_dir / 'records.jsonl',
            'outcomes': out_dir / 'outcomes.csv',
            'gazetteer': out_dir / 'gazetteer.tsv',
            'polygons': out_dir / 'polygons.tsv',
            'params': out_dir / 'params.json',
        }
        n = self.write_records(paths['records'])
        self.write_outcomes(paths['outcomes'])
        self.write_gazetteer(paths['gazetteer'])
        self.write_polygons(paths['polygons'])
        with open(paths['params'], 'w', encoding='utf-8') as f:
            json.dump(asdict(self.params), f, indent=2)
        logger.info(f"✓ Wrote {n} synthetic records for {len(self.counties)} counties to {out_dir}")
        return paths


def _has_coordinates(user: SyntheticUser) -> bool:
    return user.user_index % PROFILE_EVERY != PROFILE_EVERY - 1


def _counter(words: List[str], indices: np.ndarray, counts: np.ndarray) -> Counter:
    return Counter({words[i]: int(counts[i]) for i in indices})


def generate_synthetic_corpus(n_counties: int = 100, users_per_county: int = 100,
                              super_user_rate: float = 0.0, signal: float = 0.9,
                              seed: int = 0, **kwargs) -> SyntheticCorpus:
    """
    Build a deterministic synthetic corpus.

    Args:
        n_counties: Number of counties
        users_per_county: Users drawn per county
        super_user_rate: Probability that a user is a super user
        signal: Correlation between county trait and outcome (0 = no signal)
        seed: Random seed
        **kwargs: Further SyntheticParams fields

    Returns:
        SyntheticCorpus
    """
    params = SyntheticParams(n_counties, users_per_county, super_user_rate, signal, seed, **kwargs)
    return SyntheticCorpus(params)
