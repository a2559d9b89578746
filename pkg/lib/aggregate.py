"""
Streaming count accumulation and county-level feature matrices.

The accumulator holds exact token counts per (user, county) cell. It is
single-writer; sharded runs build one accumulator per shard and combine them
with merge(), which is associative and commutative. Matrices are built from a
frozen accumulator under one of three schemes:

    tweet_to_county   mentions of token i in county j / tweets in county j
    county_bow        mentions of token i in county j / tokens in county j
    user_to_county    mean over county users of the user's relative frequency
"""

import json
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union
from urllib.parse import quote, unquote

import numpy as np
from scipy import sparse

from lib.corpus import TOKENIZER_VERSION, TokenSequence, TweetRecord
from lib.errors import ConfigMismatch, EmptyCounty, EmptyCountyWarning, SchemaError
from lib.geomap import (
    ACCUMULATED, CountyMapping, UserCountyAssignment, assign_user_county, keep_earliest,
    merge_assignments,
)

logger = logging.getLogger(__name__)

MIN_TWEETS = 30
MIN_USERS = 100

TWEET_TO_COUNTY = 'tweet_to_county'
COUNTY_BOW = 'county_bow'
USER_TO_COUNTY = 'user_to_county'
SCHEMES = (TWEET_TO_COUNTY, COUNTY_BOW, USER_TO_COUNTY)
SCHEME_ALIASES = {'tweet': TWEET_TO_COUNTY, 'bow': COUNTY_BOW, 'user': USER_TO_COUNTY}

CHECKPOINT_HEADER = '#countylex-accumulator v2'
HOME_PREFIX = '#home'


@dataclass(frozen=True)
class AccumulatorConfig:
    """Settings that must agree for two accumulators to be mergeable."""

    tokenizer_version: int = TOKENIZER_VERSION
    language_filter: bool = True
    track_presence: bool = False


@dataclass
class UserCell:
    tokens: Counter = field(default_factory=Counter)
    tweet_count: int = 0
    first_seen: Optional[Tuple[int, str]] = None  # (created_at, tweet_id)
    presence: Optional[Counter] = None  # tweets containing each token

    @property
    def token_count(self) -> int:
        return sum(self.tokens.values())

    def absorb(self, other: 'UserCell'):
        self.tokens.update(other.tokens)
        self.tweet_count += other.tweet_count
        if other.first_seen is not None:
            if self.first_seen is None or other.first_seen < self.first_seen:
                self.first_seen = other.first_seen
        if other.presence is not None:
            if self.presence is None:
                self.presence = Counter()
            self.presence.update(other.presence)

    def copy(self) -> 'UserCell':
        return UserCell(
            Counter(self.tokens), self.tweet_count, self.first_seen,
            Counter(self.presence) if self.presence is not None else None,
        )


class CountAccumulator:
    """
    Exact per-(user, county) token and tweet counts, plus each user's
    earliest county-mapped evidence.

    Home evidence covers every mapped record offered through observe(),
    including records later dropped by the language filter or subsampling,
    so a user's home county does not depend on those filters.
    """

    def __init__(self, config: Optional[AccumulatorConfig] = None):
        self.config = config or AccumulatorConfig()
        self.cells: Dict[Tuple[str, str], UserCell] = {}
        self.homes: Dict[str, UserCountyAssignment] = {}

    def __len__(self):
        return len(self.cells)

    def __eq__(self, other):
        if not isinstance(other, CountAccumulator):
            return NotImplemented
        return self.config == other.config and self.cells == other.cells and self.homes == other.homes

    def __repr__(self):
        return f"CountAccumulator(cells={len(self.cells)}, users={len(self.users())})"

    def observe(self, rec: TweetRecord, mapping: Union[str, CountyMapping]):
        """Record a county-mapped message as home evidence without counting it."""
        assign_user_county(((rec, mapping),), into=self.homes)

    def add(self, rec: TweetRecord, fips: str, tokens: TokenSequence):
        self.observe(rec, fips)
        cell = self.cells.get((rec.user_id, fips))
        if cell is None:
            cell = self.cells[(rec.user_id, fips)] = UserCell(
                presence=Counter() if self.config.track_presence else None)
        cell.tokens.update(tokens.tokens)
        cell.tweet_count += 1
        seen = (rec.created_at, rec.tweet_id)
        if cell.first_seen is None or seen < cell.first_seen:
            cell.first_seen = seen
        if cell.presence is not None:
            cell.presence.update(set(tokens.tokens))

    def add_cell(self, user_id: str, fips: str, cell: UserCell,
                 home: Optional[UserCountyAssignment] = None):
        """
        Fold pre-counted data into the (user, county) cell.

        The cell's first_seen becomes home evidence; ``home`` adds earlier
        evidence that was not counted.
        """
        if cell.tweet_count < 1:
            raise SchemaError(f"cell ({user_id}, {fips}) must hold at least one tweet")
        if self.config.track_presence and cell.presence is None:
            raise ConfigMismatch("accumulator tracks per-tweet presence but cell has none")
        cell = cell.copy()
        if not self.config.track_presence:
            cell.presence = None
        existing = self.cells.get((user_id, fips))
        if existing is None:
            self.cells[(user_id, fips)] = cell
        else:
            existing.absorb(cell)
        # explicit evidence first so it keeps its source on equal keys
        if home is not None:
            keep_earliest(self.homes, home)
        if cell.first_seen is not None:
            ts, tweet_id = cell.first_seen
            keep_earliest(self.homes, UserCountyAssignment(user_id, fips, ACCUMULATED, ts, tweet_id))

    def copy(self) -> 'CountAccumulator':
        out = CountAccumulator(self.config)
        out.cells = {key: cell.copy() for key, cell in self.cells.items()}
        out.homes = dict(self.homes)
        return out

    def subset(self, cells: Dict[Tuple[str, str], UserCell]) -> 'CountAccumulator':
        """Accumulator over some of these cells, sharing them, with the same home evidence."""
        out = CountAccumulator(self.config)
        out.cells = cells
        out.homes = dict(self.homes)
        return out

    def sorted_keys(self) -> List[Tuple[str, str]]:
        """Cell keys ordered by (fips, user_id)."""
        return sorted(self.cells, key=lambda k: (k[1], k[0]))

    def users(self) -> Set[str]:
        return {user for user, _ in self.cells}

    def county_members(self) -> Dict[str, Set[str]]:
        members: Dict[str, Set[str]] = {}
        for user, fips in self.cells:
            members.setdefault(fips, set()).add(user)
        return members

    def county_users(self) -> Dict[str, int]:
        return {fips: len(users) for fips, users in self.county_members().items()}

    def county_tweets(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for (_, fips), cell in self.cells.items():
            totals[fips] += cell.tweet_count
        return dict(totals)

    def county_tokens(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for (_, fips), cell in self.cells.items():
            totals[fips] += cell.token_count
        return dict(totals)

    def user_tweet_counts(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for (user, _), cell in self.cells.items():
            totals[user] += cell.tweet_count
        return dict(totals)

    @property
    def total_tweets(self) -> int:
        return sum(cell.tweet_count for cell in self.cells.values())


def accumulate(acc: CountAccumulator, rec: TweetRecord, fips: str,
               tokens: TokenSequence) -> CountAccumulator:
    """Add one mapped, language-filtered record to the accumulator."""
    acc.add(rec, fips, tokens)
    return acc


def merge(a: CountAccumulator, b: CountAccumulator) -> CountAccumulator:
    """
    Pointwise sum of two accumulators (inputs are left untouched).

    Raises:
        ConfigMismatch: Accumulators built with different tokenizer or filter settings
    """
    if a.config != b.config:
        raise ConfigMismatch(f"cannot merge accumulators: {a.config} != {b.config}")
    out = a.copy()
    for (user, fips), cell in b.cells.items():
        out.add_cell(user, fips, cell)
    out.homes = merge_assignments(out.homes, b.homes)
    return out


def rehome(acc: CountAccumulator) -> CountAccumulator:
    """
    Fold every user's cells into their home county from assign_user_county:
    the county of their earliest mapped message, whether or not that message
    was counted.

    Applying it after merging shards gives the same result as a single pass.
    Users without home evidence keep their cells where they are.
    """
    out = CountAccumulator(acc.config)
    out.homes = dict(acc.homes)
    moved = 0
    for (user, fips), cell in acc.cells.items():
        home = acc.homes.get(user)
        target = home.fips if home is not None else fips
        moved += target != fips
        out.add_cell(user, target, cell)
    if moved:
        logger.debug(f"Rehomed {moved} cells to their users' earliest county")
    return out


def filter_users(acc: CountAccumulator, min_tweets: int = MIN_TWEETS,
                 max_tweets: Optional[int] = None) -> Tuple[CountAccumulator, int]:
    """
    Drop light and (optionally) super users by total tweet count.

    Args:
        acc: Source accumulator (not modified)
        min_tweets: Users with fewer tweets are removed
        max_tweets: Users with more tweets are removed (None disables the cap)

    Returns:
        (filtered accumulator, number of users removed)
    """
    totals = acc.user_tweet_counts()
    keep = {
        user for user, n in totals.items()
        if n >= min_tweets and (max_tweets is None or n <= max_tweets)
    }
    out = acc.subset({key: cell for key, cell in acc.cells.items() if key[0] in keep})
    return out, len(totals) - len(keep)


def eligible_counties(acc: CountAccumulator, min_users: int = MIN_USERS) -> Set[str]:
    """Counties with at least ``min_users`` member users."""
    return {fips for fips, n in acc.county_users().items() if n >= min_users}


def restrict_counties(acc: CountAccumulator, counties: Iterable[str]) -> CountAccumulator:
    keep = set(counties)
    return acc.subset({key: cell for key, cell in acc.cells.items() if key[1] in keep})


def corpus_counts(acc: CountAccumulator) -> Counter:
    """Total count of every token across the accumulator."""
    totals: Counter = Counter()
    for cell in acc.cells.values():
        totals.update(cell.tokens)
    return totals


@dataclass
class CountyFeatureMatrix:
    """Dense county × feature matrix with the counts it was built from."""

    counties: List[str]
    features: List[str]
    values: np.ndarray
    scheme: str
    user_counts: np.ndarray = None
    tweet_counts: np.ndarray = None
    settings: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = len(self.counties)
        if self.values.shape != (n, len(self.features)):
            raise SchemaError(
                f"values shape {self.values.shape} does not match "
                f"{n} counties x {len(self.features)} features")
        if self.user_counts is None:
            self.user_counts = np.zeros(n, dtype=np.int64)
        if self.tweet_counts is None:
            self.tweet_counts = np.zeros(n, dtype=np.int64)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def row(self, fips: str) -> Dict[str, float]:
        i = self.counties.index(fips)
        return {f: v for f, v in zip(self.features, self.values[i]) if v != 0}

    def value(self, fips: str, feature: str) -> float:
        return float(self.values[self.counties.index(fips), self.features.index(feature)])

    def restrict(self, counties: Iterable[str]) -> 'CountyFeatureMatrix':
        """Rows for the given counties that are present, in this matrix's order."""
        keep = set(counties)
        idx = [i for i, c in enumerate(self.counties) if c in keep]
        return CountyFeatureMatrix(
            [self.counties[i] for i in idx], list(self.features), self.values[idx],
            self.scheme, self.user_counts[idx], self.tweet_counts[idx], dict(self.settings),
        )

    def select_columns(self, columns: Sequence[int]) -> 'CountyFeatureMatrix':
        columns = list(columns)
        return CountyFeatureMatrix(
            list(self.counties), [self.features[j] for j in columns], self.values[:, columns],
            self.scheme, self.user_counts.copy(), self.tweet_counts.copy(), dict(self.settings),
        )

    def save(self, path: Union[str, Path]):
        """Write values to ``<path>.npz`` and labels/settings to ``<path>.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path.with_suffix('.npz'), values=self.values,
                            user_counts=self.user_counts, tweet_counts=self.tweet_counts)
        meta = {'scheme': self.scheme, 'counties': self.counties,
                'features': self.features, 'settings': self.settings}
        with open(path.with_suffix('.json'), 'w', encoding='utf-8') as f:
            json.dump(meta, f, ensure_ascii=False, indent=1)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'CountyFeatureMatrix':
        path = Path(path)
        with open(path.with_suffix('.json'), encoding='utf-8') as f:
            meta = json.load(f)
        with np.load(path.with_suffix('.npz')) as data:
            return cls(meta['counties'], meta['features'], data['values'], meta['scheme'],
                       data['user_counts'], data['tweet_counts'], meta.get('settings', {}))


def _vocab_tokens(vocab) -> List[str]:
    return list(getattr(vocab, 'tokens', vocab))


class _CellTable:
    """Sparse views of a frozen accumulator in (fips, user_id) order."""

    def __init__(self, acc: CountAccumulator, vocab: Sequence[str], presence: bool = False):
        self.keys = acc.sorted_keys()
        self.cells = [acc.cells[k] for k in self.keys]
        self.counties = sorted({fips for _, fips in self.keys})
        self.county_index = {c: i for i, c in enumerate(self.counties)}
        index = {t: j for j, t in enumerate(vocab)}

        rows, cols, data = [], [], []
        for i, cell in enumerate(self.cells):
            source = cell.presence if presence else cell.tokens
            for token in sorted(source):
                j = index.get(token)
                if j is not None:
                    rows.append(i)
                    cols.append(j)
                    data.append(source[token])
        self.counts = sparse.csr_matrix(
            (np.asarray(data, dtype=float), (rows, cols)), shape=(len(self.cells), len(index)))

        self.cell_county = np.array([self.county_index[f] for _, f in self.keys], dtype=np.int64)
        self.cell_tweets = np.array([c.tweet_count for c in self.cells], dtype=np.int64)
        self.cell_tokens = np.array([c.token_count for c in self.cells], dtype=np.int64)
        n = len(self.cells)
        self.indicator = sparse.csr_matrix(
            (np.ones(n), (self.cell_county, np.arange(n))), shape=(len(self.counties), n))

    def per_county(self, values: np.ndarray) -> np.ndarray:
        return np.bincount(self.cell_county, weights=values, minlength=len(self.counties))

    def county_user_counts(self) -> np.ndarray:
        return np.bincount(self.cell_county, minlength=len(self.counties)).astype(np.int64)


def _drop_empty(table: _CellTable, numerators: np.ndarray, denominators: np.ndarray,
                scheme: str, vocab: List[str], settings: Dict,
                user_counts: np.ndarray) -> CountyFeatureMatrix:
    keep = denominators > 0
    dropped = [c for c, k in zip(table.counties, keep) if not k]
    if dropped:
        msg = f"{scheme}: dropped {len(dropped)} empty counties ({', '.join(dropped[:5])}{'...' if len(dropped) > 5 else ''})"
        warnings.warn(msg, EmptyCountyWarning, stacklevel=3)
        logger.warning(f"⚠️  {msg}")
    if not keep.any():
        raise EmptyCounty(f"{scheme}: no county has a non-zero denominator")
    values = numerators[keep] / denominators[keep, None]
    tweets = table.per_county(table.cell_tweets.astype(float)).astype(np.int64)
    return CountyFeatureMatrix(
        [c for c, k in zip(table.counties, keep) if k], vocab, values, scheme,
        user_counts[keep], tweets[keep], settings,
    )


def tweet_to_county(acc: CountAccumulator, vocab, binary_per_tweet: bool = False) -> CountyFeatureMatrix:
    """
    Token mentions per tweet for every county.

    Args:
        acc: Frozen accumulator
        vocab: Vocabulary or ordered token list
        binary_per_tweet: Count tweets containing the token instead of mentions

    Raises:
        ConfigMismatch: binary_per_tweet without presence tracking
        EmptyCounty: No county has any tweets
    """
    if binary_per_tweet and not acc.config.track_presence:
        raise ConfigMismatch("binary_per_tweet requires an accumulator built with track_presence")
    vocab = _vocab_tokens(vocab)
    table = _CellTable(acc, vocab, presence=binary_per_tweet)
    numerators = (table.indicator @ table.counts).toarray()
    denominators = table.per_county(table.cell_tweets.astype(float))
    settings = {'binary_per_tweet': binary_per_tweet}
    return _drop_empty(table, numerators, denominators, TWEET_TO_COUNTY, vocab, settings,
                       table.county_user_counts())


def county_bow(acc: CountAccumulator, vocab) -> CountyFeatureMatrix:
    """Relative frequency of each token among all tokens of the county."""
    vocab = _vocab_tokens(vocab)
    table = _CellTable(acc, vocab)
    numerators = (table.indicator @ table.counts).toarray()
    denominators = table.per_county(table.cell_tokens.astype(float))
    return _drop_empty(table, numerators, denominators, COUNTY_BOW, vocab, {},
                       table.county_user_counts())


def user_to_county(acc: CountAccumulator, vocab) -> CountyFeatureMatrix:
    """
    Average of per-user relative frequencies over each county's users.

    A user's relative frequencies are normalized over all of that user's
    tokens, then restricted to the vocabulary. Users without tokens are not
    counted.

    Raises:
        ConfigMismatch: A user has cells in several counties (rehome first)
    """
    vocab = _vocab_tokens(vocab)
    table = _CellTable(acc, vocab)

    users = sorted({user for user, _ in table.keys})
    if len(users) != len(table.keys):
        spread = sorted(u for u, n in Counter(u for u, _ in table.keys).items() if n > 1)
        raise ConfigMismatch(f"{len(spread)} users have cells in several counties "
                             f"(e.g. {spread[0]!r}); rehome the accumulator first")
    user_index = {u: i for i, u in enumerate(users)}
    cell_user = np.array([user_index[u] for u, _ in table.keys], dtype=np.int64)
    n_cells = len(table.keys)
    to_user = sparse.csr_matrix((np.ones(n_cells), (cell_user, np.arange(n_cells))),
                                shape=(len(users), n_cells))
    user_counts = (to_user @ table.counts).tocsr()
    user_tokens = np.bincount(cell_user, weights=table.cell_tokens.astype(float),
                              minlength=len(users))

    with np.errstate(divide='ignore'):
        inv = np.where(user_tokens > 0, 1.0 / user_tokens, 0.0)
    relative = sparse.diags(inv) @ user_counts

    # county x user membership, users with no tokens excluded
    has_tokens = (user_tokens > 0)[cell_user]
    members = sparse.csr_matrix(
        (np.ones(int(has_tokens.sum())), (table.cell_county[has_tokens], cell_user[has_tokens])),
        shape=(len(table.counties), len(users)))
    n_users = np.asarray(members.sum(axis=1)).ravel()

    numerators = (members @ relative).toarray()
    return _drop_empty(table, numerators, n_users, USER_TO_COUNTY, vocab, {},
                       n_users.astype(np.int64))


SCHEME_BUILDERS = {
    TWEET_TO_COUNTY: tweet_to_county,
    COUNTY_BOW: county_bow,
    USER_TO_COUNTY: user_to_county,
}


def build_matrix(scheme: str, acc: CountAccumulator, vocab, **kwargs) -> CountyFeatureMatrix:
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in SCHEME_BUILDERS:
        raise SchemaError(f"unknown aggregation scheme {scheme!r}; expected one of {SCHEMES}")
    if kwargs and scheme != TWEET_TO_COUNTY:
        raise SchemaError(f"{scheme} takes no options, got {sorted(kwargs)}")
    return SCHEME_BUILDERS[scheme](acc, vocab, **kwargs)


# Checkpoints

def _escape(text: str) -> str:
    return quote(text, safe='')


def _format_counts(counts: Mapping[str, int]) -> str:
    return ','.join(f"{_escape(t)}:{counts[t]}" for t in sorted(counts))


def _parse_counts(text: str, where: str) -> Counter:
    counts: Counter = Counter()
    if not text:
        return counts
    for item in text.split(','):
        token, sep, n = item.rpartition(':')
        if not sep:
            raise SchemaError(f"{where}: bad token count {item!r}")
        try:
            value = int(n)
        except ValueError:
            raise SchemaError(f"{where}: bad count in {item!r}")
        if value < 0:
            raise SchemaError(f"{where}: negative count in {item!r}")
        counts[unquote(token)] = value
    return counts


def save_checkpoint(acc: CountAccumulator, path: Union[str, Path]):
    """
    Write the accumulator as sorted TSV.

    Format (after a versioned header and a config line):
        #home \\t user_id \\t fips \\t source \\t ts \\t tweet_id      one per user
        user_id \\t fips \\t tweet_count \\t token:count,... \\t first_ts \\t first_id [\\t token:tweets,...]
    Tokens and ids are percent-escaped.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(CHECKPOINT_HEADER + '\n')
        f.write('#config ' + json.dumps(asdict(acc.config), sort_keys=True) + '\n')
        for user in sorted(acc.homes):
            home = acc.homes[user]
            f.write('\t'.join([HOME_PREFIX, _escape(user), home.fips, home.assigned_from,
                               str(home.evidence_timestamp), _escape(home.evidence_tweet_id)]) + '\n')
        for user, fips in sorted(acc.cells):
            cell = acc.cells[(user, fips)]
            ts, tid = cell.first_seen if cell.first_seen is not None else (0, '')
            cols = [_escape(user), fips, str(cell.tweet_count), _format_counts(cell.tokens),
                    str(ts), _escape(tid)]
            if cell.presence is not None:
                cols.append(_format_counts(cell.presence))
            f.write('\t'.join(cols) + '\n')
    logger.info(f"✓ Saved checkpoint with {len(acc.cells)} cells and {len(acc.homes)} home counties to {path}")


def _parse_home(cols: List[str], where: str) -> UserCountyAssignment:
    if len(cols) != 6:
        raise SchemaError(f"{where}: expected 6 columns in a home line, got {len(cols)}")
    try:
        ts = int(cols[4])
    except ValueError:
        raise SchemaError(f"{where}: non-integer home timestamp")
    return UserCountyAssignment(unquote(cols[1]), cols[2], cols[3], ts, unquote(cols[5]))


def load_checkpoint(path: Union[str, Path]) -> CountAccumulator:
    """Inverse of save_checkpoint."""
    path = Path(path)
    with open(path, encoding='utf-8') as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise SchemaError(f"{path}: not a countylex accumulator checkpoint")
    if len(lines) < 2 or not lines[1].startswith('#config '):
        raise SchemaError(f"{path}: missing config line")
    try:
        config = AccumulatorConfig(**json.loads(lines[1][len('#config '):]))
    except (json.JSONDecodeError, TypeError) as e:
        raise SchemaError(f"{path}: bad config line: {e}")

    acc = CountAccumulator(config)
    for line_no, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        cols = line.split('\t')
        where = f"{path}:{line_no}"
        if cols[0] == HOME_PREFIX:
            keep_earliest(acc.homes, _parse_home(cols, where))
            continue
        if len(cols) not in (6, 7):
            raise SchemaError(f"{where}: expected 6 or 7 columns, got {len(cols)}")
        try:
            tweet_count, ts = int(cols[2]), int(cols[4])
        except ValueError:
            raise SchemaError(f"{where}: non-integer tweet count or timestamp")
        presence = _parse_counts(cols[6], where) if len(cols) == 7 else None
        cell = UserCell(_parse_counts(cols[3], where), tweet_count, (ts, unquote(cols[5])), presence)
        acc.add_cell(unquote(cols[0]), cols[1], cell)
    return acc
