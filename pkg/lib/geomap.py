"""
County mapping: coordinates via point-in-polygon, profile text via a
precision-first rule cascade, and home-county assignment per user.

Gazetteer TSV:  city \\t state_abbrev \\t fips   (rows whose city ends in
" county" are county entries)
Polygon TSV:    fips \\t ring_index \\t lat,lon;lat,lon;...
"""

import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, NamedTuple, Optional, TextIO, Tuple, Union

import numpy as np

from lib.corpus import TweetRecord
from lib.errors import DuplicateConflict, SchemaError

logger = logging.getLogger(__name__)

COORDINATES = 'coordinates'
PROFILE_TEXT = 'profile_text'
ACCUMULATED = 'accumulated'  # recovered from counted cells; original source not kept

MAPPING_CACHE_SIZE = 1 << 18

_FIPS_RE = re.compile(r'^\d{5}$')
_WS_RE = re.compile(r'\s+')
_TRAILING_PUNCT = string.punctuation + '…'

# name, abbreviation, state FIPS prefix
US_STATES = (
    ('alabama', 'AL', '01'), ('alaska', 'AK', '02'), ('arizona', 'AZ', '04'),
    ('arkansas', 'AR', '05'), ('california', 'CA', '06'), ('colorado', 'CO', '08'),
    ('connecticut', 'CT', '09'), ('delaware', 'DE', '10'),
    ('district of columbia', 'DC', '11'), ('florida', 'FL', '12'),
    ('georgia', 'GA', '13'), ('hawaii', 'HI', '15'), ('idaho', 'ID', '16'),
    ('illinois', 'IL', '17'), ('indiana', 'IN', '18'), ('iowa', 'IA', '19'),
    ('kansas', 'KS', '20'), ('kentucky', 'KY', '21'), ('louisiana', 'LA', '22'),
    ('maine', 'ME', '23'), ('maryland', 'MD', '24'), ('massachusetts', 'MA', '25'),
    ('michigan', 'MI', '26'), ('minnesota', 'MN', '27'), ('mississippi', 'MS', '28'),
    ('missouri', 'MO', '29'), ('montana', 'MT', '30'), ('nebraska', 'NE', '31'),
    ('nevada', 'NV', '32'), ('new hampshire', 'NH', '33'), ('new jersey', 'NJ', '34'),
    ('new mexico', 'NM', '35'), ('new york', 'NY', '36'),
    ('north carolina', 'NC', '37'), ('north dakota', 'ND', '38'), ('ohio', 'OH', '39'),
    ('oklahoma', 'OK', '40'), ('oregon', 'OR', '41'), ('pennsylvania', 'PA', '42'),
    ('rhode island', 'RI', '44'), ('south carolina', 'SC', '45'),
    ('south dakota', 'SD', '46'), ('tennessee', 'TN', '47'), ('texas', 'TX', '48'),
    ('utah', 'UT', '49'), ('vermont', 'VT', '50'), ('virginia', 'VA', '51'),
    ('washington', 'WA', '53'), ('west virginia', 'WV', '54'),
    ('wisconsin', 'WI', '55'), ('wyoming', 'WY', '56'),
)
STATE_NAMES = {name: abbrev for name, abbrev, _ in US_STATES}
STATE_PREFIXES = {abbrev: prefix for _, abbrev, prefix in US_STATES}


class CountyMapping(NamedTuple):
    fips: str
    source: str  # COORDINATES or PROFILE_TEXT


@dataclass(frozen=True)
class UserCountyAssignment:
    user_id: str
    fips: str
    assigned_from: str = field(compare=False)
    evidence_timestamp: int = 0
    evidence_tweet_id: str = ''

    def key(self) -> Tuple[int, str, str]:
        return (self.evidence_timestamp, self.evidence_tweet_id, self.fips)


@dataclass
class CountyShape:
    """All rings of one county, stacked as edge arrays for vectorized tests."""

    fips: str
    rings: List[np.ndarray] = field(default_factory=list)  # each (n+1, 2) closed, (lat, lon)
    bbox: Tuple[float, float, float, float] = (90.0, 180.0, -90.0, -180.0)
    _edges: Optional[Tuple[np.ndarray, ...]] = field(default=None, init=False, repr=False, compare=False)

    def add_ring(self, ring: np.ndarray):
        self.rings.append(ring)
        self._edges = None
        min_lat, min_lon, max_lat, max_lon = self.bbox
        self.bbox = (
            min(min_lat, float(ring[:, 0].min())), min(min_lon, float(ring[:, 1].min())),
            max(max_lat, float(ring[:, 0].max())), max(max_lon, float(ring[:, 1].max())),
        )

    def edges(self) -> Tuple[np.ndarray, ...]:
        """(y1, x1, y2, x2, lon_lo, lon_hi, lat_lo, lat_hi), built once per ring set."""
        if self._edges is None:
            starts = np.vstack([r[:-1] for r in self.rings])
            ends = np.vstack([r[1:] for r in self.rings])
            y1, x1 = starts[:, 0].copy(), starts[:, 1].copy()
            y2, x2 = ends[:, 0].copy(), ends[:, 1].copy()
            self._edges = (y1, x1, y2, x2, np.minimum(x1, x2), np.maximum(x1, x2),
                           np.minimum(y1, y2), np.maximum(y1, y2))
        return self._edges

    def contains(self, lat: float, lon: float) -> bool:
        """Even-odd containment; points on any edge count as contained."""
        min_lat, min_lon, max_lat, max_lon = self.bbox
        if not (min_lat <= lat <= max_lat and min_lon <= lon <= max_lon):
            return False
        y1, x1, y2, x2, lon_lo, lon_hi, lat_lo, lat_hi = self.edges()

        # Boundary: collinear with an edge and within its extent
        cross = (x2 - x1) * (lat - y1) - (y2 - y1) * (lon - x1)
        within = (lon_lo <= lon) & (lon <= lon_hi) & (lat_lo <= lat) & (lat <= lat_hi)
        if np.any(within & (np.abs(cross) <= 1e-12)):
            return True

        straddles = (y1 > lat) != (y2 > lat)
        with np.errstate(divide='ignore', invalid='ignore'):
            x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
        hits = straddles & (lon < x_cross)
        return bool(np.count_nonzero(hits) % 2)


@dataclass
class Gazetteer:
    city_entries: Dict[Tuple[str, str], str] = field(default_factory=dict)
    county_entries: Dict[Tuple[str, str], str] = field(default_factory=dict)
    state_entries: Dict[str, str] = field(default_factory=dict)
    county_polygons: Dict[str, CountyShape] = field(default_factory=dict)
    _bbox_cache: Optional[tuple] = field(default=None, init=False, repr=False, compare=False)
    _mapping_cache: Dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _cache_state: Optional[tuple] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.state_entries:
            for name, abbrev, prefix in US_STATES:
                self.state_entries[name] = prefix
                self.state_entries[abbrev.lower()] = prefix

    def polygon_candidates(self, lat: float, lon: float) -> List[str]:
        """FIPS codes, in sorted order, whose bounding box contains the point."""
        if self._bbox_cache is None or self._bbox_cache[0] != len(self.county_polygons):
            codes = sorted(self.county_polygons)
            boxes = np.array([self.county_polygons[c].bbox for c in codes]).reshape(-1, 4)
            self._bbox_cache = (len(codes), codes, boxes)
        _, codes, boxes = self._bbox_cache
        hit = ((boxes[:, 0] <= lat) & (lat <= boxes[:, 2]) &
               (boxes[:, 1] <= lon) & (lon <= boxes[:, 3]))
        return [codes[i] for i in np.flatnonzero(hit)]

    def cached(self, key, compute: Callable[[], Optional[str]]) -> Optional[str]:
        """
        Memoized mapping result. The cache is dropped when an entry table
        changes size or when it fills up.
        """
        state = (len(self.city_entries), len(self.county_entries), len(self.county_polygons))
        if state != self._cache_state or len(self._mapping_cache) >= MAPPING_CACHE_SIZE:
            self._mapping_cache.clear()
            self._cache_state = state
        try:
            return self._mapping_cache[key]
        except KeyError:
            value = self._mapping_cache[key] = compute()
            return value

    def lookup_city(self, city: str, state: str) -> Optional[str]:
        return self.city_entries.get((normalize_location(city), state.upper()))

    def __len__(self):
        return len(self.city_entries) + len(self.county_entries)


def normalize_location(text: str) -> str:
    """Lowercase, trim, collapse whitespace, strip trailing punctuation."""
    text = _WS_RE.sub(' ', text.lower()).strip()
    return text.rstrip(_TRAILING_PUNCT).strip()


def _read_lines(source: Union[str, Path, TextIO]) -> Iterable[Tuple[int, str]]:
    if isinstance(source, (str, Path)):
        with open(source, encoding='utf-8') as f:
            yield from enumerate(f.read().splitlines(), start=1)
    else:
        yield from enumerate(source.read().splitlines(), start=1)


def load_gazetteer(source: Union[str, Path, TextIO]) -> Gazetteer:
    """
    Load city and county name entries.

    Args:
        source: Path or text handle of `city \\t state_abbrev \\t fips` rows

    Returns:
        Gazetteer (empty input gives an empty, valid gazetteer)

    Raises:
        SchemaError: Wrong column count, unknown state, or FIPS not 5 digits
        DuplicateConflict: Same (name, state) mapped to two FIPS codes
    """
    g = Gazetteer()
    outside_state = 0
    for line_no, line in _read_lines(source):
        if not line.strip() or line.startswith('#'):
            continue
        parts = line.split('\t')
        if len(parts) != 3:
            raise SchemaError(f"gazetteer line {line_no}: expected 3 tab-separated columns, got {len(parts)}")
        name, state, fips = normalize_location(parts[0]), parts[1].strip().upper(), parts[2].strip()
        if name == 'city' and state == 'STATE_ABBREV':
            continue  # header
        if not name:
            raise SchemaError(f"gazetteer line {line_no}: empty city name")
        if state not in STATE_PREFIXES:
            raise SchemaError(f"gazetteer line {line_no}: unknown state abbreviation {state!r}")
        if not _FIPS_RE.match(fips):
            raise SchemaError(f"gazetteer line {line_no}: FIPS must be 5 digits, got {fips!r}")
        if fips[:2] != STATE_PREFIXES[state]:
            outside_state += 1
            logger.debug(f"gazetteer line {line_no}: FIPS {fips} outside state {state}")

        table = g.county_entries if name.endswith(' county') else g.city_entries
        key = (name, state)
        existing = table.get(key)
        if existing is not None and existing != fips:
            raise DuplicateConflict(f"{name}, {state} maps to both {existing} and {fips}")
        table[key] = fips

    if outside_state:
        logger.warning(f"⚠️  {outside_state} gazetteer entries have a FIPS outside their state prefix")
    logger.info(f"Loaded gazetteer: {len(g.city_entries)} cities, {len(g.county_entries)} counties")
    return g


def _parse_ring(text: str, line_no: int) -> np.ndarray:
    points = []
    for pair in text.strip().split(';'):
        if not pair.strip():
            continue
        try:
            lat_s, lon_s = pair.split(',')
            lat, lon = float(lat_s), float(lon_s)
        except ValueError:
            raise SchemaError(f"polygon line {line_no}: bad vertex {pair!r}")
        if not (-90 <= lat <= 90 and -180 <= lon <= 180):
            raise SchemaError(f"polygon line {line_no}: vertex out of range {pair!r}")
        points.append((lat, lon))
    if len(set(points)) < 3:
        raise SchemaError(f"polygon line {line_no}: ring needs at least 3 distinct vertices")
    if points[0] != points[-1]:
        points.append(points[0])
    return np.array(points, dtype=float)


def load_polygons(source: Union[str, Path, TextIO], g: Optional[Gazetteer] = None) -> Gazetteer:
    """
    Load county polygons into a gazetteer (a new one if none given).

    Unclosed rings are closed; several rings per FIPS are combined under the
    even-odd rule, so holes can be expressed as inner rings.
    """
    g = g if g is not None else Gazetteer()
    n_rings = 0
    for line_no, line in _read_lines(source):
        if not line.strip() or line.startswith('#'):
            continue
        parts = line.split('\t')
        if len(parts) != 3:
            raise SchemaError(f"polygon line {line_no}: expected 3 tab-separated columns, got {len(parts)}")
        fips = parts[0].strip()
        if not _FIPS_RE.match(fips):
            raise SchemaError(f"polygon line {line_no}: FIPS must be 5 digits, got {fips!r}")
        ring = _parse_ring(parts[2], line_no)
        g.county_polygons.setdefault(fips, CountyShape(fips)).add_ring(ring)
        n_rings += 1
    g._bbox_cache = None
    g._mapping_cache.clear()
    logger.info(f"Loaded {n_rings} rings for {len(g.county_polygons)} county polygons")
    return g


def map_coordinates(lat: float, lon: float, g: Gazetteer) -> Optional[str]:
    """
    FIPS of the polygon containing the point, or None.

    Points on a shared boundary belong to the lexicographically smallest FIPS.
    """
    return g.cached((COORDINATES, lat, lon), lambda: _containing_county(lat, lon, g))


def _containing_county(lat: float, lon: float, g: Gazetteer) -> Optional[str]:
    for fips in g.polygon_candidates(lat, lon):
        if g.county_polygons[fips].contains(lat, lon):
            return fips
    return None


def map_profile_location(text: Optional[str], g: Gazetteer) -> Optional[str]:
    """
    Map a free-text profile location with a first-match rule cascade.

      1. "City, ST"          known (city, state) pair
      2. "City, StateName"   full state name
      3. "Name County, ST"   county entry

    Anything without a recognizable state after a comma never maps.
    """
    if not text:
        return None
    return g.cached((PROFILE_TEXT, text), lambda: _match_profile(text, g))


def _match_profile(text: str, g: Gazetteer) -> Optional[str]:
    normalized = normalize_location(text)
    if ',' not in normalized:
        return None
    place, _, state_part = normalized.rpartition(',')
    place = place.strip().rstrip(_TRAILING_PUNCT).strip()
    state_part = state_part.strip()
    if not place or not state_part:
        return None

    abbrev = state_part.upper()
    if abbrev in STATE_PREFIXES:
        fips = g.city_entries.get((place, abbrev))
        if fips:
            return fips
    elif state_part in STATE_NAMES:
        return g.city_entries.get((place, STATE_NAMES[state_part]))
    else:
        return None

    if place.endswith(' county'):
        return g.county_entries.get((place, abbrev))
    return None


def map_record(rec: TweetRecord, g: Gazetteer) -> Optional[CountyMapping]:
    """Coordinates first, then the author's profile location."""
    if rec.coordinates is not None:
        fips = map_coordinates(rec.coordinates[0], rec.coordinates[1], g)
        if fips:
            return CountyMapping(fips, COORDINATES)
    fips = map_profile_location(rec.profile_location, g)
    if fips:
        return CountyMapping(fips, PROFILE_TEXT)
    return None


def keep_earliest(assignments: Dict[str, UserCountyAssignment], candidate: UserCountyAssignment):
    """Store ``candidate`` unless its user already has earlier evidence."""
    current = assignments.get(candidate.user_id)
    if current is None or candidate.key() < current.key():
        assignments[candidate.user_id] = candidate


def assign_user_county(
        mapped: Iterable[Tuple[TweetRecord, Union[str, CountyMapping]]],
        into: Optional[Dict[str, UserCountyAssignment]] = None,
) -> Dict[str, UserCountyAssignment]:
    """
    One home county per user: the county of their earliest mapped tweet.

    Ties on created_at are broken by the smaller tweet_id, so the result does
    not depend on stream order.

    Args:
        mapped: (record, FIPS or CountyMapping) pairs
        into: Assignments to update in place (default: a new dict)
    """
    assignments = into if into is not None else {}
    for rec, mapping in mapped:
        current = assignments.get(rec.user_id)
        if current is not None and (current.evidence_timestamp, current.evidence_tweet_id) < \
                (rec.created_at, rec.tweet_id):
            continue
        if isinstance(mapping, CountyMapping):
            fips, source = mapping
        else:
            fips = mapping
            source = COORDINATES if rec.coordinates is not None else PROFILE_TEXT
        keep_earliest(assignments,
                      UserCountyAssignment(rec.user_id, fips, source, rec.created_at, rec.tweet_id))
    return assignments


def merge_assignments(a: Mapping[str, UserCountyAssignment],
                      b: Mapping[str, UserCountyAssignment]) -> Dict[str, UserCountyAssignment]:
    """Combine per-shard assignments (associative and commutative)."""
    merged = dict(a)
    for assignment in b.values():
        keep_earliest(merged, assignment)
    return merged
