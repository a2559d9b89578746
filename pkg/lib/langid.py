"""
Language identification for the English filter.

A pluggable classifier interface with a character-trigram naive Bayes
baseline trained on the bundled multilingual sentences in
data/langid_corpus.tsv. Model weights are immutable after training and safe
to share across workers; each copy keeps its own bounded per-word trigram
cache.
"""

import logging
import math
from collections import Counter
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from lib import config
from lib.corpus import TokenSequence, tokenize
from lib.errors import SchemaError

logger = logging.getLogger(__name__)

ENGLISH = 'en'
MIN_CONFIDENCE = 0.5
SMOOTHING = 0.5
WORD_CACHE_SIZE = 1 << 16


class LanguageClassifier(Protocol):
    """Anything that can label a token sequence with a language."""

    def predict(self, tokens: TokenSequence) -> Tuple[Optional[str], float]:
        """Return (language code, posterior confidence); (None, 0.0) without evidence."""
        ...


def char_trigrams(words: Sequence[str]) -> List[str]:
    """Character trigrams of each word padded with one space on both sides."""
    grams = []
    for word in words:
        padded = f" {word} "
        grams.extend(padded[i:i + 3] for i in range(len(padded) - 2))
    return grams


class TrigramLanguageModel:
    """Multinomial naive Bayes over character trigrams with add-k smoothing."""

    def __init__(self, languages: Sequence[str], index: Dict[str, int],
                 log_probs: np.ndarray, unseen_log_probs: np.ndarray):
        self.languages = tuple(languages)
        self._index = dict(index)
        # (n_trigrams, n_languages); read-only so the model can be shared
        self._log_probs = log_probs
        self._log_probs.setflags(write=False)
        self._unseen = unseen_log_probs
        self._unseen.setflags(write=False)
        self._word_cache: Dict[str, Tuple[Tuple[int, ...], int]] = {}

    @classmethod
    def train(cls, samples: Iterable[Tuple[str, str]],
              smoothing: float = SMOOTHING) -> 'TrigramLanguageModel':
        """
        Train from (language, sentence) pairs.

        Args:
            samples: Labelled sentences; sentences are tokenized the same way
                     messages are, so only word tokens contribute
            smoothing: Additive smoothing constant

        Returns:
            Trained model
        """
        counts: Dict[str, Counter] = {}
        for lang, sentence in samples:
            grams = char_trigrams(tokenize(sentence).words())
            counts.setdefault(lang, Counter()).update(grams)
        if not counts:
            raise SchemaError("language model needs at least one labelled sentence")

        languages = sorted(counts)
        vocab = sorted(set().union(*counts.values()))
        index = {g: i for i, g in enumerate(vocab)}
        table = np.zeros((len(vocab), len(languages)))
        for j, lang in enumerate(languages):
            for gram, n in counts[lang].items():
                table[index[gram], j] = n
        totals = table.sum(axis=0)
        denom = totals + smoothing * (len(vocab) + 1)
        log_probs = np.log((table + smoothing) / denom)
        unseen = np.log(smoothing / denom)
        logger.debug(f"Trained trigram model: {len(languages)} languages, {len(vocab)} trigrams")
        return cls(languages, index, log_probs, unseen)

    @classmethod
    def from_file(cls, path: Path) -> 'TrigramLanguageModel':
        """Train from a `lang \\t sentence` TSV file ('#' lines are comments)."""
        samples = []
        with open(path, encoding='utf-8') as f:
            for line_no, line in enumerate(f, start=1):
                line = line.rstrip('\n')
                if not line.strip() or line.startswith('#'):
                    continue
                parts = line.split('\t')
                if len(parts) != 2 or not parts[0]:
                    raise SchemaError(f"{path}:{line_no}: expected 'lang<TAB>sentence'")
                samples.append((parts[0].strip(), parts[1]))
        return cls.train(samples)

    def _word_grams(self, word: str) -> Tuple[Tuple[int, ...], int]:
        """(indices of known trigrams, number of unknown trigrams) for one word."""
        hit = self._word_cache.get(word)
        if hit is None:
            if len(self._word_cache) >= WORD_CACHE_SIZE:
                self._word_cache.clear()
            grams = char_trigrams((word,))
            seen = tuple(self._index[g] for g in grams if g in self._index)
            hit = self._word_cache[word] = (seen, len(grams) - len(seen))
        return hit

    def log_likelihoods(self, tokens: TokenSequence) -> Optional[np.ndarray]:
        seen: List[int] = []
        n_unseen = 0
        for word in tokens.words():
            indices, unseen = self._word_grams(word)
            seen.extend(indices)
            n_unseen += unseen
        if not seen and not n_unseen:
            return None
        scores = self._unseen * n_unseen
        if seen:
            scores = scores + self._log_probs[seen].sum(axis=0)
        return scores

    def probabilities(self, tokens: TokenSequence) -> Dict[str, float]:
        """Posterior over languages with a uniform prior; empty dict without evidence."""
        scores = self.log_likelihoods(tokens)
        if scores is None:
            return {}
        shifted = np.exp(scores - scores.max())
        posterior = shifted / shifted.sum()
        return dict(zip(self.languages, posterior.tolist()))

    def predict(self, tokens: TokenSequence) -> Tuple[Optional[str], float]:
        probs = self.probabilities(tokens)
        if not probs:
            return None, 0.0
        lang = max(probs, key=lambda k: (probs[k], k))
        return lang, probs[lang]


@lru_cache(maxsize=None)
def bundled_model() -> TrigramLanguageModel:
    """The baseline model trained on the bundled corpus (loaded once per process)."""
    return TrigramLanguageModel.from_file(config.LANGID_CORPUS)


def is_english(tokens: TokenSequence,
               model: Optional[LanguageClassifier] = None,
               min_confidence: float = MIN_CONFIDENCE) -> Tuple[bool, float]:
    """
    English filter.

    Args:
        tokens: Tokenized message
        model: Classifier to use (default: bundled trigram model)
        min_confidence: Records with P(English) below this are rejected

    Returns:
        (is_english, confidence that the text is English)
    """
    model = model or bundled_model()
    if isinstance(model, TrigramLanguageModel):
        probs = model.probabilities(tokens)
        confidence = probs.get(ENGLISH, 0.0)
    else:
        lang, conf = model.predict(tokens)
        confidence = conf if lang == ENGLISH else 0.0
    if math.isnan(confidence):
        confidence = 0.0
    return confidence >= min_confidence and confidence > 0.0, confidence
