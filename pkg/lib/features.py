"""
Vocabulary selection and topic projection.

Topic model TSV:   topic_id \\t token \\t weight     (optional header row)
Vocabulary dump:   rank \\t token \\t count
"""

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy import sparse

from lib.aggregate import CountAccumulator, CountyFeatureMatrix, corpus_counts
from lib.errors import DuplicateRowWarning, NegativeWeight, SchemaError

logger = logging.getLogger(__name__)

VOCAB_SIZE = 25000
MODEL_VOCAB_SIZE = 10000

RAW = 'raw'
PER_TOPIC = 'topic'
PER_WORD = 'word'
NORMALIZATION_MODES = (RAW, PER_TOPIC, PER_WORD)


@dataclass(frozen=True)
class Vocabulary:
    """Tokens ordered by descending corpus count, ties lexicographic."""

    tokens: Tuple[str, ...]
    counts: Tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.counts):
            raise SchemaError("vocabulary tokens and counts differ in length")
        if len(set(self.tokens)) != len(self.tokens):
            raise SchemaError("vocabulary tokens must be unique")

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def size(self) -> int:
        return len(self.tokens)

    @cached_property
    def index(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        for token in self.tokens:
            h.update(token.encode('utf-8'))
            h.update(b'\n')
        return h.hexdigest()

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            for rank, (token, count) in enumerate(zip(self.tokens, self.counts), start=1):
                f.write(f"{rank}\t{token}\t{count}\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Vocabulary':
        tokens, counts = [], []
        with open(path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip('\n')
                if not line:
                    continue
                parts = line.split('\t')
                if len(parts) != 3:
                    raise SchemaError(f"{path}:{line_no}: expected 'rank<TAB>token<TAB>count'")
                try:
                    rank, count = int(parts[0]), int(parts[2])
                except ValueError:
                    raise SchemaError(f"{path}:{line_no}: non-integer rank or count")
                if rank != len(tokens) + 1:
                    raise SchemaError(f"{path}:{line_no}: ranks must be consecutive from 1")
                tokens.append(parts[1])
                counts.append(count)
        return cls(tuple(tokens), tuple(counts))


def vocabulary_from_counts(counts: Mapping[str, int], size: int = VOCAB_SIZE) -> Vocabulary:
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max(size, 0)]
    return Vocabulary(tuple(t for t, _ in ranked), tuple(int(n) for _, n in ranked))


def build_vocabulary(acc: CountAccumulator, size: int = VOCAB_SIZE) -> Vocabulary:
    """
    Most frequent tokens of the accumulator.

    Args:
        acc: Frozen accumulator
        size: Maximum vocabulary size (fewer tokens than this gives all of them)

    Returns:
        Vocabulary ordered by count descending, ties broken lexicographically
    """
    vocab = vocabulary_from_counts(corpus_counts(acc), size)
    logger.info(f"Built vocabulary of {len(vocab)} tokens (requested {size})")
    return vocab


def reduce_vocabulary(v: Vocabulary, size: int = MODEL_VOCAB_SIZE) -> Vocabulary:
    """Prefix of the ordered vocabulary."""
    if size <= 0:
        warnings.warn("vocabulary reduced to zero tokens", UserWarning, stacklevel=2)
        logger.warning("⚠️  Vocabulary reduced to zero tokens")
        return Vocabulary((), ())
    return Vocabulary(v.tokens[:size], v.counts[:size])


def unigram_block(m: CountyFeatureMatrix, vocab: Vocabulary,
                  size: int = MODEL_VOCAB_SIZE) -> CountyFeatureMatrix:
    """
    Columns of ``m`` for the reduced vocabulary, in vocabulary order.

    Raises:
        SchemaError: A reduced-vocabulary token is not a column of ``m``
    """
    reduced = reduce_vocabulary(vocab, size)
    columns = {token: j for j, token in enumerate(m.features)}
    missing = [t for t in reduced if t not in columns]
    if missing:
        raise SchemaError(f"{len(missing)} vocabulary tokens are not matrix features (e.g. {missing[0]!r})")
    return m.select_columns([columns[t] for t in reduced])


@dataclass
class TopicModel:
    """Non-negative topic-token weights stored as a sparse (topics × tokens) matrix."""

    topic_ids: List[str]
    tokens: List[str]
    weights: sparse.csr_matrix
    normalization: str = RAW
    _token_index: Dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = sparse.csr_matrix(self.weights, dtype=float)
        if self.weights.shape != (len(self.topic_ids), len(self.tokens)):
            raise SchemaError("topic weight matrix does not match topic and token labels")
        if self.weights.nnz and self.weights.data.min() < 0:
            raise NegativeWeight("topic weights must be non-negative")
        self._token_index = {t: j for j, t in enumerate(self.tokens)}

    @property
    def n_topics(self) -> int:
        return len(self.topic_ids)

    def topic_weights(self, topic_id) -> Dict[str, float]:
        i = self.topic_ids.index(str(topic_id))
        row = self.weights.getrow(i)
        return {self.tokens[j]: float(w) for j, w in zip(row.indices, row.data)}

    def weight_matrix(self, features: Sequence[str]) -> sparse.csr_matrix:
        """(len(features) × topics) weights aligned to an arbitrary token order."""
        rows, cols = [], []
        for i, token in enumerate(features):
            j = self._token_index.get(token)
            if j is not None:
                rows.append(i)
                cols.append(j)
        select = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                   shape=(len(features), len(self.tokens)))
        return (select @ self.weights.T).tocsr()


def _read_lines(source) -> List[str]:
    if isinstance(source, (str, Path)):
        with open(source, encoding='utf-8') as f:
            return f.read().splitlines()
    return source.read().splitlines()


def load_topic_model(source: Union[str, Path, TextIO], normalization: str = RAW) -> TopicModel:
    """
    Load a topic-token weight table.

    Args:
        source: Path or text handle with `topic_id \\t token \\t weight` rows
        normalization: 'raw' keeps weights; 'topic' rescales each topic to sum 1;
                       'word' rescales each token's weights across topics to sum 1

    Raises:
        SchemaError: Wrong column count, non-numeric weight, unknown mode
        NegativeWeight: Any weight below zero
    """
    if normalization not in NORMALIZATION_MODES:
        raise SchemaError(f"unknown normalization {normalization!r}; expected one of {NORMALIZATION_MODES}")

    entries: Dict[Tuple[str, str], float] = {}
    duplicates = 0
    for line_no, line in enumerate(_read_lines(source), start=1):
        if not line.strip() or line.startswith('#'):
            continue
        parts = line.split('\t')
        if len(parts) != 3:
            raise SchemaError(f"topic line {line_no}: expected 3 tab-separated columns, got {len(parts)}")
        topic, token, weight_s = parts[0].strip(), parts[1], parts[2].strip()
        if line_no == 1 and weight_s == 'weight':
            continue
        try:
            weight = float(weight_s)
        except ValueError:
            raise SchemaError(f"topic line {line_no}: non-numeric weight {weight_s!r}")
        if not np.isfinite(weight):
            raise SchemaError(f"topic line {line_no}: weight must be finite")
        if weight < 0:
            raise NegativeWeight(f"topic line {line_no}: negative weight {weight} for {token!r}")
        if (topic, token) in entries:
            duplicates += 1
        entries[(topic, token)] = weight

    if duplicates:
        msg = f"{duplicates} duplicate (topic, token) rows; last value kept"
        warnings.warn(msg, DuplicateRowWarning, stacklevel=2)
        logger.warning(f"⚠️  {msg}")

    topic_ids = sorted({t for t, _ in entries}, key=_topic_sort_key)
    tokens = sorted({w for _, w in entries})
    t_index = {t: i for i, t in enumerate(topic_ids)}
    w_index = {w: j for j, w in enumerate(tokens)}
    rows = [t_index[t] for t, _ in entries]
    cols = [w_index[w] for _, w in entries]
    weights = sparse.csr_matrix((np.fromiter(entries.values(), dtype=float, count=len(entries)),
                                 (rows, cols)), shape=(len(topic_ids), len(tokens)))

    if normalization == PER_TOPIC:
        weights = _scale_rows(weights)
    elif normalization == PER_WORD:
        weights = _scale_rows(weights.T.tocsr()).T.tocsr()

    model = TopicModel(topic_ids, tokens, weights, normalization)
    logger.info(f"Loaded topic model: {model.n_topics} topics over {len(tokens)} tokens ({normalization})")
    return model


def _topic_sort_key(topic_id: str):
    return (0, int(topic_id), '') if topic_id.isdigit() else (1, 0, topic_id)


def _scale_rows(m: sparse.csr_matrix) -> sparse.csr_matrix:
    totals = np.asarray(m.sum(axis=1)).ravel()
    with np.errstate(divide='ignore'):
        inv = np.where(totals > 0, 1.0 / totals, 0.0)
    return (sparse.diags(inv) @ m).tocsr()


def topic_loadings(unigram_vector: Mapping[str, float], tm: TopicModel) -> np.ndarray:
    """
    Topic values of one relative-frequency vector.

    loading(t) = sum over tokens of weight_t(token) * unigram_vector(token);
    tokens unknown to the model contribute nothing.
    """
    x = np.zeros(len(tm.tokens))
    for token, value in unigram_vector.items():
        j = tm._token_index.get(token)
        if j is not None:
            x[j] += value
    return tm.weights @ x


def topic_matrix(m: CountyFeatureMatrix, tm: TopicModel) -> CountyFeatureMatrix:
    """Row-wise topic_loadings of a county unigram matrix."""
    w = tm.weight_matrix(m.features)
    values = m.values @ w.toarray()
    settings = dict(m.settings, topic_normalization=tm.normalization)
    return CountyFeatureMatrix(
        list(m.counties), [f"topic:{t}" for t in tm.topic_ids], values,
        m.scheme, m.user_counts.copy(), m.tweet_counts.copy(), settings,
    )
