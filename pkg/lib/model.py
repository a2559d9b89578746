"""
Outcome loading and the county prediction stack.

Per training fold: low-variance removal -> outcome-correlation filter ->
per-block z-scoring -> PCA -> ridge regression. Out-of-fold predictions are
scored with Pearson r and MSE.
"""

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from scipy import linalg, stats

from lib.errors import (
    AllColumnsDropped, ConstantVector, DuplicateConflict, NonFinite, NonPositiveUnderLog,
    RankDeficientWarning, SchemaError, TooFewRows,
)

logger = logging.getLogger(__name__)

NO_TRANSFORM = 'none'
LOG10 = 'log10'
TRANSFORMS = (NO_TRANSFORM, LOG10)

RIDGE_ALPHA = 1000.0
ALPHA_GRID = (1.0, 10.0, 100.0, 1000.0, 10000.0)
FOLDS = 10
INNER_FOLDS = 5
PCA_VARIANCE = 0.95

HONEST = 'per_fold'
LEAKY = 'leaky_preprocess'

Blocks = Union[np.ndarray, Sequence[np.ndarray]]


@dataclass
class OutcomeTable:
    name: str
    values: Dict[str, float]
    transform: str = NO_TRANSFORM

    def __len__(self):
        return len(self.values)

    def align(self, counties: Sequence[str]) -> Tuple[List[int], np.ndarray]:
        """Row indices of ``counties`` that have an outcome, and those outcomes."""
        idx = [i for i, c in enumerate(counties) if c in self.values]
        return idx, np.array([self.values[counties[i]] for i in idx], dtype=float)


def load_outcomes(source: Union[str, Path, TextIO], transform: str = NO_TRANSFORM,
                  name: Optional[str] = None) -> OutcomeTable:
    """
    Load a `fips,value` CSV (with header) into an OutcomeTable.

    Args:
        source: Path or text handle
        transform: 'none' or 'log10'
        name: Outcome name (default: file stem, else the header's value column)

    Raises:
        SchemaError: Missing header, bad FIPS, non-numeric or non-finite value
        DuplicateConflict: Same FIPS listed twice with different values
        NonPositiveUnderLog: Value <= 0 with log10 requested
    """
    if transform not in TRANSFORMS:
        raise SchemaError(f"unknown outcome transform {transform!r}; expected one of {TRANSFORMS}")
    if isinstance(source, (str, Path)):
        with open(source, encoding='utf-8', newline='') as f:
            rows = list(csv.reader(f))
        default_name = Path(source).stem
    else:
        rows = list(csv.reader(source))
        default_name = None

    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise SchemaError("outcome file is empty")
    header = [cell.strip() for cell in rows[0]]
    if len(header) != 2 or header[0].lower() != 'fips':
        raise SchemaError(f"outcome header must be 'fips,<value>', got {','.join(header)!r}")

    values: Dict[str, float] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise SchemaError(f"outcome line {line_no}: expected 2 columns, got {len(row)}")
        fips, raw = row[0].strip(), row[1].strip()
        if not (len(fips) == 5 and fips.isdigit()):
            raise SchemaError(f"outcome line {line_no}: FIPS must be 5 digits, got {fips!r}")
        try:
            value = float(raw)
        except ValueError:
            raise SchemaError(f"outcome line {line_no}: non-numeric value {raw!r}")
        if not math.isfinite(value):
            raise SchemaError(f"outcome line {line_no}: value must be finite")
        if transform == LOG10:
            if value <= 0:
                raise NonPositiveUnderLog(f"outcome line {line_no}: log10 of non-positive value {value} ({fips})")
            value = math.log10(value)
        if fips in values and values[fips] != value:
            raise DuplicateConflict(f"outcome line {line_no}: {fips} listed with two values")
        values[fips] = value

    table = OutcomeTable(name or default_name or header[1], values, transform)
    logger.info(f"Loaded outcome '{table.name}' for {len(values)} counties (transform={transform})")
    return table


@dataclass
class PipelineConfig:
    variance_floor: float = 0.0
    correlation_alpha: float = 0.05
    pca_components: Optional[int] = None  # None: smallest k reaching pca_variance
    pca_variance: float = PCA_VARIANCE
    ridge_alpha: float = RIDGE_ALPHA
    alpha_grid: Optional[Tuple[float, ...]] = None
    folds: int = FOLDS
    inner_folds: int = INNER_FOLDS
    seed: int = 0
    leaky_preprocess: bool = False

    def __post_init__(self):
        if self.folds < 2:
            raise SchemaError(f"folds must be >= 2, got {self.folds}")
        if not self.ridge_alpha > 0:
            raise SchemaError(f"ridge_alpha must be > 0, got {self.ridge_alpha}")
        if self.pca_components is not None and self.pca_components < 1:
            raise SchemaError(f"pca_components must be >= 1, got {self.pca_components}")
        if not 0 < self.correlation_alpha <= 1:
            raise SchemaError(f"correlation_alpha must be in (0, 1], got {self.correlation_alpha}")
        if not 0 < self.pca_variance <= 1:
            raise SchemaError(f"pca_variance must be in (0, 1], got {self.pca_variance}")
        if self.variance_floor < 0:
            raise SchemaError("variance_floor must be >= 0")
        if self.alpha_grid is not None:
            self.alpha_grid = tuple(float(a) for a in self.alpha_grid)
            if not self.alpha_grid or min(self.alpha_grid) <= 0:
                raise SchemaError("alpha_grid must list positive values")

    @property
    def protocol(self) -> str:
        return LEAKY if self.leaky_preprocess else HONEST

    def snapshot(self) -> Dict:
        data = asdict(self)
        data['alpha_grid'] = list(self.alpha_grid) if self.alpha_grid else None
        return data


def _check_finite(name: str, a: np.ndarray):
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} contains NaN or infinite values")


def remove_low_variance(X: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """
    Mask of columns whose sample variance exceeds ``floor``.

    Raises:
        AllColumnsDropped: No column survives
    """
    X = np.asarray(X, dtype=float)
    _check_finite('X', X)
    if X.shape[0] < 2:
        variances = np.zeros(X.shape[1])
    else:
        variances = X.var(axis=0, ddof=1)
    mask = variances > floor
    if not mask.any():
        raise AllColumnsDropped(f"all {X.shape[1]} columns have variance <= {floor}")
    return mask


def column_correlations(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson r of every column with y; constant columns get 0."""
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    denom = np.sqrt((Xc ** 2).sum(axis=0) * (yc ** 2).sum())
    with np.errstate(divide='ignore', invalid='ignore'):
        r = np.where(denom > 0, (Xc.T @ yc) / denom, 0.0)
    return np.clip(r, -1.0, 1.0)


def correlation_filter(X: np.ndarray, y: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    """
    Mask of columns significantly correlated with y.

    Two-sided t-test of r with n-2 degrees of freedom. When nothing passes,
    the column with the largest |r| is kept.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise SchemaError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    r = column_correlations(X, y)
    n = X.shape[0]
    mask = np.zeros(X.shape[1], dtype=bool)
    if n > 2:
        df = n - 2
        with np.errstate(divide='ignore'):
            t = np.abs(r) * np.sqrt(df / np.maximum(1.0 - r ** 2, 0.0))
        p = 2.0 * stats.t.sf(t, df)
        mask = p < alpha
    if not mask.any() and X.shape[1]:
        mask[int(np.argmax(np.abs(r)))] = True
    return mask


@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray  # (k, n_features)
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X: np.ndarray, k: Optional[int] = None, variance: float = PCA_VARIANCE) -> PCABasis:
    """
    Principal axes of mean-centered X.

    A thin SVD via scipy.linalg rather than sklearn.decomposition.PCA, which
    is not a dependency: the variance-ratio cutoff, the rank truncation with
    its warning, and the sign rule below are all needed explicitly so that
    refits on the same rows give identical components.

    Args:
        X: Training matrix (rows are counties)
        k: Number of components; None picks the smallest k whose cumulative
           explained variance reaches ``variance``
        variance: Target explained-variance ratio when k is None

    Returns:
        PCABasis; each component's largest-magnitude element is positive.
        k is truncated (with RankDeficientWarning) to min(rows - 1, rank).
    """
    X = np.asarray(X, dtype=float)
    _check_finite('X', X)
    n, d = X.shape
    mean = X.mean(axis=0)
    _, s, vt = linalg.svd(X - mean, full_matrices=False)

    tol = s[0] * max(n, d) * np.finfo(float).eps if s.size else 0.0
    rank = int(np.count_nonzero(s > tol))
    limit = max(1, min(n - 1, rank))

    ev = s ** 2 / max(n - 1, 1)
    total = ev.sum()
    ratio = ev / total if total > 0 else np.zeros_like(ev)
    if k is None:
        k = int(np.searchsorted(np.cumsum(ratio), variance - 1e-12) + 1)
        k = min(k, limit)
    elif k > limit:
        msg = f"requested {k} components but data supports {limit} (rows={n}, rank={rank})"
        warnings.warn(msg, RankDeficientWarning, stacklevel=2)
        logger.warning(f"⚠️  {msg}")
        k = limit
    k = min(k, vt.shape[0])

    components = vt[:k].copy()
    flip = components[np.arange(k), np.argmax(np.abs(components), axis=1)] < 0
    components[flip] *= -1
    return PCABasis(mean, components, ev[:k], ratio[:k])


def pca_apply(X: np.ndarray, basis: PCABasis) -> np.ndarray:
    return (np.asarray(X, dtype=float) - basis.mean) @ basis.components.T


def pca_reconstruct(Z: np.ndarray, basis: PCABasis) -> np.ndarray:
    return np.asarray(Z, dtype=float) @ basis.components + basis.mean


@dataclass
class RidgeModel:
    """Ridge on standardized columns; ``weights`` are on the standardized scale."""

    weights: np.ndarray
    intercept: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    alpha: float

    @property
    def coef(self) -> np.ndarray:
        """Weights on the original column scale."""
        return self.weights / self.x_scale

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=float) - self.x_mean) / self.x_scale
        return Z @ self.weights + self.intercept


def _standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
    scale = np.where(scale > 0, scale, 1.0)
    return mean, scale


def ridge_fit(X: np.ndarray, y: np.ndarray, alpha: float = RIDGE_ALPHA) -> RidgeModel:
    """
    Ridge regression with an unpenalized intercept.

    Columns are standardized (sample std); the intercept is mean(y). The
    system (Z'Z + alpha I) w = Z'y is solved through the SVD of Z.

    Raises:
        NonFinite: X or y contains NaN/inf
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    _check_finite('X', X)
    _check_finite('y', y)
    if X.shape[0] != y.shape[0]:
        raise SchemaError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")

    mean, scale = _standardize(X)
    Z = (X - mean) / scale
    intercept = float(y.mean())
    u, s, vt = linalg.svd(Z, full_matrices=False)
    shrink = s / (s ** 2 + alpha)
    weights = vt.T @ (shrink * (u.T @ (y - intercept)))
    return RidgeModel(weights, intercept, mean, scale, float(alpha))


def fold_assignments(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold id per row: shuffle indices with the seed, then split contiguously."""
    if n < folds:
        raise TooFewRows(f"{n} rows cannot be split into {folds} folds")
    order = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    for f, idx in enumerate(np.array_split(order, folds)):
        assignment[idx] = f
    return assignment


def _as_blocks(X: Blocks) -> List[np.ndarray]:
    if isinstance(X, np.ndarray):
        blocks = [X]
    else:
        blocks = [np.asarray(b, dtype=float) for b in X]
    blocks = [b[:, None] if b.ndim == 1 else np.asarray(b, dtype=float) for b in blocks]
    if not blocks:
        raise SchemaError("no feature blocks given")
    n = blocks[0].shape[0]
    if any(b.shape[0] != n for b in blocks):
        raise SchemaError("feature blocks differ in row count")
    return blocks


@dataclass
class BlockTransform:
    """Column selection and z-scoring for one feature block."""

    columns: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X[:, self.columns] - self.mean) / self.scale


def fit_block(X: np.ndarray, y: np.ndarray, cfg: PipelineConfig) -> BlockTransform:
    keep = remove_low_variance(X, cfg.variance_floor)
    columns = np.flatnonzero(keep)
    corr = correlation_filter(X[:, columns], y, cfg.correlation_alpha)
    columns = columns[corr]
    mean, scale = _standardize(X[:, columns])
    return BlockTransform(columns, mean, scale)


@dataclass
class Preprocessor:
    blocks: List[BlockTransform]
    pca: PCABasis

    def transform(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        joined = np.hstack([bt.apply(b) for bt, b in zip(self.blocks, blocks)])
        return pca_apply(joined, self.pca)


def fit_preprocessor(blocks: Sequence[np.ndarray], y: np.ndarray, cfg: PipelineConfig) -> Preprocessor:
    transforms = [fit_block(b, y, cfg) for b in blocks]
    joined = np.hstack([bt.apply(b) for bt, b in zip(transforms, blocks)])
    basis = pca_fit(joined, cfg.pca_components, cfg.pca_variance)
    return Preprocessor(transforms, basis)


def select_alpha(Z: np.ndarray, y: np.ndarray, grid: Sequence[float],
                 folds: int = INNER_FOLDS, seed: int = 0) -> float:
    """Alpha with the lowest inner-CV MSE (ties go to the smaller alpha)."""
    folds = min(folds, len(y))
    if folds < 2:
        return float(sorted(grid)[0])
    assignment = fold_assignments(len(y), folds, seed)
    best = None
    for alpha in sorted(grid):
        pred = np.empty_like(y)
        for f in range(folds):
            test = assignment == f
            pred[test] = ridge_fit(Z[~test], y[~test], alpha).predict(Z[test])
        err = mse(y, pred)
        if best is None or err < best[0]:
            best = (err, alpha)
    return float(best[1])


@dataclass
class PredictionPipeline:
    preprocessor: Preprocessor
    ridge: RidgeModel

    def predict(self, X: Blocks) -> np.ndarray:
        return self.ridge.predict(self.preprocessor.transform(_as_blocks(X)))


def fit_prediction_pipeline(X: Blocks, y: np.ndarray, cfg: PipelineConfig) -> PredictionPipeline:
    """Fit the full selection + PCA + ridge stack on one training set."""
    blocks = _as_blocks(X)
    y = np.asarray(y, dtype=float)
    pre = fit_preprocessor(blocks, y, cfg)
    Z = pre.transform(blocks)
    alpha = cfg.ridge_alpha
    if cfg.alpha_grid:
        alpha = select_alpha(Z, y, cfg.alpha_grid, cfg.inner_folds, cfg.seed)
    return PredictionPipeline(pre, ridge_fit(Z, y, alpha))


@dataclass
class CVResult:
    predictions: np.ndarray
    folds: np.ndarray
    alphas: List[float] = field(default_factory=list)
    n_components: List[int] = field(default_factory=list)
    protocol: str = HONEST


def cross_validate_detailed(X: Blocks, y: np.ndarray, cfg: PipelineConfig) -> CVResult:
    """
    Out-of-fold predictions with per-fold diagnostics.

    Raises:
        TooFewRows: Fewer rows than folds
    """
    blocks = _as_blocks(X)
    y = np.asarray(y, dtype=float)
    n = blocks[0].shape[0]
    if y.shape[0] != n:
        raise SchemaError(f"X has {n} rows but y has {y.shape[0]}")
    _check_finite('y', y)
    for b in blocks:
        _check_finite('X', b)
    assignment = fold_assignments(n, cfg.folds, cfg.seed)
    result = CVResult(np.empty(n), assignment, protocol=cfg.protocol)

    shared = fit_preprocessor(blocks, y, cfg) if cfg.leaky_preprocess else None
    Z_all = shared.transform(blocks) if shared else None

    for f in range(cfg.folds):
        test = assignment == f
        train = ~test
        if shared is not None:
            alpha = cfg.ridge_alpha
            if cfg.alpha_grid:
                alpha = select_alpha(Z_all[train], y[train], cfg.alpha_grid, cfg.inner_folds, cfg.seed)
            ridge = ridge_fit(Z_all[train], y[train], alpha)
            result.predictions[test] = ridge.predict(Z_all[test])
            result.n_components.append(shared.pca.n_components)
        else:
            fitted = fit_prediction_pipeline([b[train] for b in blocks], y[train], cfg)
            ridge = fitted.ridge
            result.predictions[test] = fitted.predict([b[test] for b in blocks])
            result.n_components.append(fitted.preprocessor.pca.n_components)
        result.alphas.append(ridge.alpha)
        logger.debug(f"fold {f}: train={int(train.sum())} test={int(test.sum())} "
                     f"k={result.n_components[-1]} alpha={ridge.alpha:g}")
    return result


def cross_validate(X: Blocks, y: np.ndarray, cfg: PipelineConfig) -> np.ndarray:
    """Out-of-fold predictions in original row order."""
    return cross_validate_detailed(X, y, cfg).predictions


def _pair(y, y_hat) -> Tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise SchemaError(f"vectors must be 1-D and equal length, got {y.shape} and {y_hat.shape}")
    if y.shape[0] < 2:
        raise TooFewRows("need at least 2 values")
    return y, y_hat


def pearson_r(y, y_hat) -> float:
    """
    Sample Pearson correlation.

    Raises:
        ConstantVector: Either vector has zero variance
    """
    y, y_hat = _pair(y, y_hat)
    yc = y - y.mean()
    pc = y_hat - y_hat.mean()
    denom = math.sqrt(float(yc @ yc) * float(pc @ pc))
    if denom == 0:
        raise ConstantVector("Pearson r is undefined for a constant vector")
    return float(np.clip((yc @ pc) / denom, -1.0, 1.0))


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def evaluate(y, y_hat) -> Tuple[float, float]:
    """(pearson_r, mse) of predictions against observed outcomes."""
    return pearson_r(y, y_hat), mse(y, y_hat)
