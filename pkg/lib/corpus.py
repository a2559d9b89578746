"""
Record parsing and tokenization for message streams.

Input is JSONL, one message per line:
    {"id": str, "user_id": str, "created_at": int, "text": str,
     "lat": float?, "lon": float?, "profile_location": str?}
Unknown keys are ignored.
"""

import gzip
import io
import json
import logging
import math
import unicodedata
from dataclasses import dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple, Union

from lib.errors import MalformedRecord, MissingRequiredField

logger = logging.getLogger(__name__)

# Bumped whenever tokenize() output changes; stored in accumulator configs
TOKENIZER_VERSION = 2

WORD = 'word'
MENTION = 'mention'
URL = 'url'
HASHTAG = 'hashtag'
NUMERIC = 'numeric'
OTHER = 'other'
TOKEN_CLASSES = (WORD, MENTION, URL, HASHTAG, NUMERIC, OTHER)

_URL_PREFIXES = ('http://', 'https://', 'www.')
_TOKEN_CACHE_SIZE = 1 << 18


@dataclass(frozen=True)
class TweetRecord:
    """One message with its author and optional location evidence."""

    tweet_id: str
    user_id: str
    created_at: int
    text: str
    coordinates: Optional[Tuple[float, float]] = None  # (lat, lon)
    profile_location: Optional[str] = None


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tuple[str, ...]
    token_classes: Tuple[str, ...]

    def __len__(self):
        return len(self.tokens)

    def words(self) -> List[str]:
        """Tokens of class word, in order."""
        return [t for t, c in zip(self.tokens, self.token_classes) if c == WORD]


@dataclass
class IngestStats:
    """Mergeable counters for one ingestion pass."""

    lines: int = 0
    malformed: int = 0
    missing_fields: int = 0
    out_of_year: int = 0
    mapped_coordinates: int = 0
    mapped_profile: int = 0
    unmapped: int = 0
    non_english: int = 0
    sampled_out: int = 0
    accumulated: int = 0

    @property
    def county_mapped(self) -> int:
        return self.mapped_coordinates + self.mapped_profile

    def merge(self, other: 'IngestStats') -> 'IngestStats':
        return IngestStats(**{
            f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)
        })

    def as_dict(self) -> dict:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data['county_mapped'] = self.county_mapped
        return data


def _require(obj: dict, key: str):
    value = obj.get(key)
    if value is None or value == '':
        raise MissingRequiredField(f"record is missing required field {key!r}")
    return value


def parse_record(line: str) -> TweetRecord:
    """
    Parse one JSONL line into a TweetRecord.

    Args:
        line: Serialized record

    Returns:
        TweetRecord with absent optional fields set to None

    Raises:
        MalformedRecord: Unparseable JSON, wrong types or out-of-range coordinates
        MissingRequiredField: No id, user_id or text
    """
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, TypeError) as e:
        raise MalformedRecord(f"unparseable line: {e}")
    if not isinstance(obj, dict):
        raise MalformedRecord("record is not a JSON object")

    tweet_id = _require(obj, 'id')
    user_id = _require(obj, 'user_id')
    text = obj.get('text')
    if text is None:
        raise MissingRequiredField("record is missing required field 'text'")
    if not isinstance(text, str):
        raise MalformedRecord("text must be a string")

    created_at = obj.get('created_at', 0)
    if isinstance(created_at, bool) or not isinstance(created_at, (int, float)):
        raise MalformedRecord(f"created_at must be epoch seconds, got {created_at!r}")
    if isinstance(created_at, float):
        if not math.isfinite(created_at) or not created_at.is_integer():
            raise MalformedRecord(f"created_at must be whole epoch seconds, got {created_at!r}")
        created_at = int(created_at)

    lat, lon = obj.get('lat'), obj.get('lon')
    coordinates = None
    if lat is not None or lon is not None:
        if lat is None or lon is None:
            raise MalformedRecord("lat and lon must be given together")
        try:
            lat, lon = float(lat), float(lon)
        except (TypeError, ValueError):
            raise MalformedRecord(f"non-numeric coordinates: {lat!r}, {lon!r}")
        if not (-90.0 <= lat <= 90.0):
            raise MalformedRecord(f"latitude out of range: {lat}")
        if not (-180.0 <= lon <= 180.0):
            raise MalformedRecord(f"longitude out of range: {lon}")
        coordinates = (lat, lon)

    profile_location = obj.get('profile_location')
    if profile_location is not None and not isinstance(profile_location, str):
        raise MalformedRecord("profile_location must be a string")

    return TweetRecord(
        tweet_id=str(tweet_id),
        user_id=str(user_id),
        created_at=created_at,
        text=text,
        coordinates=coordinates,
        profile_location=profile_location,
    )


def serialize_record(rec: TweetRecord) -> str:
    """Serialize a record to one JSONL line (inverse of parse_record)."""
    obj = {
        'id': rec.tweet_id,
        'user_id': rec.user_id,
        'created_at': rec.created_at,
        'text': rec.text,
    }
    if rec.coordinates is not None:
        obj['lat'], obj['lon'] = rec.coordinates
    if rec.profile_location is not None:
        obj['profile_location'] = rec.profile_location
    return json.dumps(obj, ensure_ascii=False)


def _open_text(path: Path):
    if path.suffix == '.gz':
        return io.TextIOWrapper(gzip.open(path, 'rb'), encoding='utf-8')
    return open(path, 'r', encoding='utf-8')


def read_records(source: Union[str, Path, Iterable[str]],
                 stats: Optional[IngestStats] = None) -> Iterator[TweetRecord]:
    """
    Stream records from a JSONL file (optionally gzipped) or an iterable of lines.

    Malformed lines are skipped and counted in ``stats``; they are never fatal.
    """
    stats = stats if stats is not None else IngestStats()
    if isinstance(source, (str, Path)):
        handle = _open_text(Path(source))
        close = True
    else:
        handle = source
        close = False
    try:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            stats.lines += 1
            try:
                yield parse_record(line)
            except MissingRequiredField as e:
                stats.missing_fields += 1
                logger.debug(f"line {line_no}: {e}")
            except MalformedRecord as e:
                stats.malformed += 1
                logger.debug(f"line {line_no}: {e}")
    finally:
        if close:
            handle.close()


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith('P')


def _strip_punct(token: str) -> str:
    if token[:1].isalnum() and token[-1:].isalnum():
        return token
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    return token[start:end]


def _is_numeric(token: str) -> bool:
    digits = token.replace(',', '').replace('.', '', 1)
    return digits.isdigit()


def is_url(token: str) -> bool:
    """http://, https:// or www. prefix, in any letter case."""
    return token[:8].lower().startswith(_URL_PREFIXES)


def _prefixed(raw: str) -> str:
    # "@bob:" -> "@bob", "#wow!" -> "#wow"; a bare "@" stays as is
    rest = _strip_punct(raw[1:])
    return (raw[0] + rest).lower() if rest else raw


@lru_cache(maxsize=_TOKEN_CACHE_SIZE)
def _classify_raw(raw: str) -> Tuple[str, str]:
    if raw.startswith('@'):
        return _prefixed(raw), MENTION
    if is_url(raw):
        return raw, URL
    if raw.startswith('#'):
        return _prefixed(raw), HASHTAG
    stripped = _strip_punct(raw)
    if not stripped:
        return raw, OTHER
    if is_url(stripped):
        return stripped, URL
    if _is_numeric(stripped):
        return stripped, NUMERIC
    return stripped.lower(), WORD


def classify_token(token: str) -> str:
    """Class of a token as tokenize() would assign it."""
    return _classify_raw(token)[1]


def tokenize(text: str) -> TokenSequence:
    """
    Split message text into classified tokens.

    Whitespace split, then prefix classes (@mention, http(s)/www url,
    #hashtag); remaining tokens have leading/trailing punctuation stripped and
    are lowercased. Tokens that are pure punctuation are kept as class other.
    """
    pairs = list(map(_classify_raw, text.split()))
    if not pairs:
        return TokenSequence((), ())
    tokens, classes = zip(*pairs)
    return TokenSequence(tokens, classes)
