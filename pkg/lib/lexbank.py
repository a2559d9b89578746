"""
County lexical bank export.

A release directory holds:
    vocabulary.tsv   rank \\t token \\t corpus count   (released tokens only)
    words.tsv        fips \\t token \\t count
    counties.tsv     fips \\t tokens \\t tweets \\t users
    topics.tsv       fips \\t topic \\t value          (when topics are given)
Each data file starts with a versioned header and a JSON metadata line.
Mentions, URLs, hashtags and tokens rarer than the privacy floor are never
released.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from lib.aggregate import COUNTY_BOW, CountAccumulator, CountyFeatureMatrix, corpus_counts
from lib.corpus import HASHTAG, MENTION, URL, classify_token
from lib.errors import SchemaError
from lib.features import Vocabulary

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER = f'#countylex-lexbank v{FORMAT_VERSION}'
PRIVACY_FLOOR = 50
EXCLUDED_CLASSES = frozenset({MENTION, URL, HASHTAG})


@dataclass
class LexicalBankExport:
    directory: Path
    vocabulary: Vocabulary
    counties: List[str]
    time_span: str
    privacy_floor: int
    words: Dict[str, Dict[str, int]] = field(default_factory=dict)
    county_totals: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)  # tokens, tweets, users
    topics: Optional[CountyFeatureMatrix] = None
    meta: Dict = field(default_factory=dict)

    def county_bow(self) -> CountyFeatureMatrix:
        """Rebuild county relative frequencies over the released vocabulary."""
        features = list(self.vocabulary.tokens)
        index = {t: j for j, t in enumerate(features)}
        counties = [c for c in sorted(self.county_totals) if self.county_totals[c][0] > 0]
        numerators = np.zeros((len(counties), len(features)))
        for i, fips in enumerate(counties):
            for token, count in self.words.get(fips, {}).items():
                numerators[i, index[token]] = count
        denominators = np.array([self.county_totals[c][0] for c in counties], dtype=float)
        values = numerators / denominators[:, None] if counties else numerators
        return CountyFeatureMatrix(
            counties, features, values, COUNTY_BOW,
            np.array([self.county_totals[c][2] for c in counties], dtype=np.int64),
            np.array([self.county_totals[c][1] for c in counties], dtype=np.int64),
            {'source': 'lexical_bank', 'time_span': self.time_span},
        )


def releasable_tokens(vocab: Vocabulary, corpus: Dict[str, int],
                      privacy_floor: int = PRIVACY_FLOOR) -> Vocabulary:
    """Vocabulary entries that may be released, in vocabulary order."""
    kept = [
        (token, corpus.get(token, 0)) for token in vocab.tokens
        if classify_token(token) not in EXCLUDED_CLASSES and corpus.get(token, 0) >= privacy_floor
    ]
    return Vocabulary(tuple(t for t, _ in kept), tuple(n for _, n in kept))


def _write_table(path: Path, meta: Dict, rows):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(HEADER + '\n')
        f.write('#meta ' + json.dumps(meta, sort_keys=True) + '\n')
        for row in rows:
            f.write('\t'.join(str(c) for c in row) + '\n')


def _read_table(path: Path) -> Tuple[Dict, List[List[str]]]:
    with open(path, encoding='utf-8') as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != HEADER:
        raise SchemaError(f"{path}: not a v{FORMAT_VERSION} lexical bank file")
    if len(lines) < 2 or not lines[1].startswith('#meta '):
        raise SchemaError(f"{path}: missing metadata line")
    meta = json.loads(lines[1][len('#meta '):])
    return meta, [line.split('\t') for line in lines[2:] if line]


def export_lexical_bank(acc: CountAccumulator, vocab: Vocabulary,
                        topics: Optional[CountyFeatureMatrix],
                        out_dir: Union[str, Path],
                        privacy_floor: int = PRIVACY_FLOOR,
                        time_span: str = 'all',
                        provenance: Optional[Dict] = None) -> LexicalBankExport:
    """
    Write a county bag-of-words (and bag-of-topics) release.

    Args:
        acc: Frozen accumulator (already user-filtered as desired)
        vocab: Candidate vocabulary
        topics: County topic matrix to release alongside, or None
        out_dir: Release directory (created if missing)
        privacy_floor: Minimum corpus count for a token to be released
        time_span: Label such as 'all', '2012' or '2012-2013'
        provenance: Extra settings recorded in every file header

    Returns:
        LexicalBankExport describing what was written
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = corpus_counts(acc)
    released = releasable_tokens(vocab, corpus, privacy_floor)
    dropped = len(vocab) - len(released)
    allowed = set(released.tokens)

    words: Dict[str, Dict[str, int]] = {}
    for (_, fips), cell in acc.cells.items():
        bucket = words.setdefault(fips, {})
        for token, count in cell.tokens.items():
            if token in allowed:
                bucket[token] = bucket.get(token, 0) + count
    tokens, tweets, users = acc.county_tokens(), acc.county_tweets(), acc.county_users()
    counties = sorted(tokens)
    totals = {c: (tokens[c], tweets[c], users[c]) for c in counties}

    meta = {
        'format_version': FORMAT_VERSION,
        'time_span': time_span,
        'privacy_floor': privacy_floor,
        'excluded_classes': sorted(EXCLUDED_CLASSES),
        'vocabulary_hash': released.content_hash,
        'vocabulary_size': len(released),
        'topic_scheme': topics.scheme if topics is not None else None,
        'provenance': provenance or {},
    }
    released.save(out_dir / 'vocabulary.tsv')
    _write_table(out_dir / 'words.tsv', meta, (
        (fips, token, words[fips][token])
        for fips in counties for token in sorted(words.get(fips, {}))
    ))
    _write_table(out_dir / 'counties.tsv', meta, ((c, *totals[c]) for c in counties))
    if topics is not None:
        _write_table(out_dir / 'topics.tsv', meta, (
            (fips, feature, repr(float(v)))
            for i, fips in enumerate(topics.counties)
            for feature, v in zip(topics.features, topics.values[i])
        ))

    logger.info(f"[LEXBANK] ✓ Released {len(released)} tokens for {len(counties)} counties "
                f"({dropped} withheld, floor={privacy_floor}, span={time_span}) to {out_dir}")
    return LexicalBankExport(out_dir, released, counties, time_span, privacy_floor,
                             words, totals, topics, meta)


def load_lexical_bank(directory: Union[str, Path]) -> LexicalBankExport:
    """Read a release written by export_lexical_bank."""
    directory = Path(directory)
    vocab = Vocabulary.load(directory / 'vocabulary.tsv')
    meta, word_rows = _read_table(directory / 'words.tsv')
    _, county_rows = _read_table(directory / 'counties.tsv')

    words: Dict[str, Dict[str, int]] = {}
    for row in word_rows:
        if len(row) != 3:
            raise SchemaError(f"words.tsv: expected 3 columns, got {len(row)}")
        words.setdefault(row[0], {})[row[1]] = int(row[2])
    totals = {}
    for row in county_rows:
        if len(row) != 4:
            raise SchemaError(f"counties.tsv: expected 4 columns, got {len(row)}")
        totals[row[0]] = (int(row[1]), int(row[2]), int(row[3]))

    topics = None
    topic_path = directory / 'topics.tsv'
    if topic_path.exists():
        _, topic_rows = _read_table(topic_path)
        counties = sorted({r[0] for r in topic_rows})
        features = list(dict.fromkeys(r[1] for r in topic_rows))
        ci = {c: i for i, c in enumerate(counties)}
        fi = {f: j for j, f in enumerate(features)}
        values = np.zeros((len(counties), len(features)))
        for fips, feature, value in topic_rows:
            values[ci[fips], fi[feature]] = float(value)
        topics = CountyFeatureMatrix(counties, features, values, meta.get('topic_scheme') or COUNTY_BOW,
                                     settings={'source': 'lexical_bank'})

    return LexicalBankExport(directory, vocab, sorted(totals), meta.get('time_span', 'all'),
                             int(meta.get('privacy_floor', PRIVACY_FLOOR)), words, totals, topics, meta)
