import logging
import math
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.spatial.distance import cdist, pdist
from sklearn.model_selection import KFold, ShuffleSplit
from statsmodels.stats.multitest import multipletests

from src.exceptions import DegenerateError, DimensionError, InvalidInputError
from src.schemas import (
    DeltaNetwork,
    Edge,
    KruskalDecomposition,
    MMDConfig,
    PredictionConfig,
    SymmetricMatrix,
    TraitKind,
    TraitTable,
)
from src.services.tensor_core import as_array

logger = logging.getLogger(__name__)

SVariant = Literal["squared", "unsquared"]

ASSOCIATION_TOL = 1e-12
PERMUTATION_BATCH = 1_000


def _matrix(U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2:
        raise DimensionError(f"expected a subjects x factors matrix, got shape {U.shape}")
    return U


def _trait_vector(U: np.ndarray, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (U.shape[0],):
        raise DimensionError(f"trait of shape {y.shape} for {U.shape[0]} subjects")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("trait has missing values among the included subjects")
    return y


def cca_direction(U: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Direction in factor space most correlated with a continuous trait.

    Factors and trait are mean-centered first; the maximizer of ``w^T U^T y`` over unit vectors is then
    ``U^T y / ||U^T y||``.

    :param U: np.ndarray: ``N x K`` latent factors
    :param y: np.ndarray: Trait values of the same ``N`` subjects, no missing entries
    :return: np.ndarray: Unit vector of length ``K``
    :raises DegenerateError: If ``U^T y`` is numerically zero
    """
    U = _matrix(U)
    y = _trait_vector(U, y)
    Uc, yc = U - U.mean(axis=0), y - y.mean()
    r = Uc.T @ yc
    norm = np.linalg.norm(r)
    if norm <= ASSOCIATION_TOL * max(np.linalg.norm(Uc) * np.linalg.norm(yc), np.finfo(float).tiny):
        raise DegenerateError("no linear association between the factors and the trait")
    return r / norm


def lda_direction(U: np.ndarray, labels: np.ndarray, shrinkage: float = 1e-6) -> np.ndarray:
    """
    Fisher discriminant direction ``S_w^-1 (mu_1 - mu_0)`` for a binary trait.

    The group with the larger label value is group 1. The pooled within-class covariance is regularized by
    adding ``shrinkage * trace(S_w) / K`` to its diagonal; the direction is oriented so that group 1 projects
    above group 0.

    :param U: np.ndarray: ``N x K`` latent factors
    :param labels: np.ndarray: Binary trait values, no missing entries
    :param shrinkage: float: Relative ridge added to the within-class covariance
    :return: np.ndarray: Unit vector of length ``K``
    :raises InvalidInputError: If the labels are not binary or a group has fewer than 2 subjects
    :raises DegenerateError: If the group means coincide or the covariance is singular
    """
    U = _matrix(U)
    labels = _trait_vector(U, labels)
    values = np.unique(labels)
    if values.size != 2:
        raise InvalidInputError(f"LDA needs exactly two groups, got {values.size}")
    groups = [U[labels == value] for value in values]
    if min(len(g) for g in groups) < 2:
        raise InvalidInputError("each group needs at least 2 subjects")
    means = [g.mean(axis=0) for g in groups]
    diff = means[1] - means[0]
    if np.linalg.norm(diff) <= ASSOCIATION_TOL * max(np.linalg.norm(means[0]), np.linalg.norm(means[1]), 1.0):
        raise DegenerateError("group means coincide: the discriminant direction is undefined")
    scatter = sum((g - m).T @ (g - m) for g, m in zip(groups, means))
    s_w = scatter / (U.shape[0] - 2)
    s_w = s_w + shrinkage * np.trace(s_w) / s_w.shape[0] * np.eye(s_w.shape[0])
    try:
        w = scipy.linalg.solve(s_w, diff, assume_a="pos")
    except (np.linalg.LinAlgError, ValueError) as e:
        raise DegenerateError(f"within-class covariance is singular: {e}") from e
    w = w / np.linalg.norm(w)
    return -w if w @ diff < 0 else w


def trait_direction(U: np.ndarray, y: np.ndarray, kind: TraitKind,
                    shrinkage: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """
    LDA for binary traits, CCA otherwise (ordinal traits are treated as continuous).

    Subjects with a missing trait value are left out.

    :return: tuple: ``(w, included)`` with ``included`` the row positions used
    """
    U = _matrix(U)
    y = np.asarray(y, dtype=np.float64)
    included = np.flatnonzero(~np.isnan(y))
    if kind == "binary":
        return lda_direction(U[included], y[included], shrinkage), included
    return cca_direction(U[included], y[included]), included


def delta_network(decomp: KruskalDecomposition, w: np.ndarray, scale_id: str, y: np.ndarray,
                  s_variant: SVariant = "squared") -> DeltaNetwork:
    """
    Back-project a factor-space direction onto the edges of one scale.

    ``Delta = s * sum_h d_h w_h v_h v_h^T`` over the first ``len(w)`` components, with
    ``s = w^T U^T y / (||U w||^2 ||y||^2)`` computed from centered factors and trait (``unsquared`` drops both
    squares). Subjects with a missing trait value are left out of ``s``.

    Flipping ``w`` with ``y`` fixed leaves ``Delta`` unchanged; flipping ``y`` (and so the fitted ``w``)
    flips its sign.

    :param decomp: KruskalDecomposition: Fitted decomposition
    :param w: np.ndarray: Unit direction over the leading factors
    :param scale_id: str: Scale to back-project onto
    :param y: np.ndarray: Trait values of every subject of ``decomp``
    :param s_variant: SVariant: ``squared`` or ``unsquared`` scaling
    :return: DeltaNetwork: The change network, not thresholded
    :raises DegenerateError: If ``||U w||`` or ``||y||`` is zero after centering
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or not 1 <= w.size <= decomp.K:
        raise DimensionError(f"direction of shape {w.shape} for {decomp.K} components")
    if abs(np.linalg.norm(w) - 1.0) > 1e-8:
        raise InvalidInputError("direction must have unit norm")
    modes = decomp.scale(scale_id)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (decomp.U.shape[0],):
        raise DimensionError(f"trait of shape {y.shape} for {decomp.U.shape[0]} subjects")
    included = ~np.isnan(y)
    U = decomp.U[included, :w.size]
    Uc, yc = U - U.mean(axis=0), y[included] - y[included].mean()
    projected, trait_norm = np.linalg.norm(Uc @ w), np.linalg.norm(yc)
    if projected == 0 or trait_norm == 0:
        raise DegenerateError("projected scores or trait are constant: s is undefined")
    power = 2 if s_variant == "squared" else 1
    s = float(w @ Uc.T @ yc / (projected ** power * trait_norm ** power))
    V = modes.V[:, :w.size]
    matrix = s * (V * (modes.d[:w.size] * w)) @ V.T
    return DeltaNetwork(scale_id=scale_id, matrix=SymmetricMatrix(values=(matrix + matrix.T) / 2), s=s)


def threshold_top(m: SymmetricMatrix | np.ndarray, count: int) -> list[Edge]:
    """
    The ``count`` strictly-upper-triangular entries of largest absolute value.

    Edges are sorted by ``|value|`` descending, ties by ``(node_a, node_b)`` ascending; nodes are 0-based.

    :param m: SymmetricMatrix | np.ndarray: The matrix
    :param count: int: Number of edges, ``0 <= count <= P (P - 1) / 2``
    :return: list[Edge]: The retained edges
    :raises InvalidInputError: If ``count`` is out of range
    """
    m = as_array(m)
    a, b = np.triu_indices(m.shape[0], k=1)
    if not 0 <= count <= a.size:
        raise InvalidInputError(f"count must lie in [0, {a.size}], got {count}")
    values = m[a, b]
    order = np.lexsort((b, a, -np.abs(values)))[:count]
    return [Edge(node_a=int(a[i]), node_b=int(b[i]), value=float(values[i])) for i in order]


def thresholded(delta: DeltaNetwork, count: int) -> DeltaNetwork:
    edges = threshold_top(delta.matrix, count)
    return delta.model_copy(update={"edges": edges, "retained": len(edges)})


def variance_explained(U_hat: np.ndarray, U_true: np.ndarray) -> float:
    """
    ``||P U_true||_F / ||U_true||_F`` with ``P`` the orthogonal projector onto the columns of ``U_hat``.

    :param U_hat: np.ndarray: Estimated factors, full column rank
    :param U_true: np.ndarray: Reference factors with the same number of rows
    :return: float: Value in ``[0, 1]``
    :raises DegenerateError: If ``U_hat`` is rank deficient or ``U_true`` is zero
    """
    U_hat, U_true = _matrix(U_hat), _matrix(U_true)
    if U_hat.shape[0] != U_true.shape[0]:
        raise DimensionError(f"row counts differ: {U_hat.shape[0]} and {U_true.shape[0]}")
    Q, R = scipy.linalg.qr(U_hat, mode="economic")
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag.min() <= 1e-10 * max(diag.max(), np.finfo(float).tiny):
        raise DegenerateError("estimated factors are rank deficient")
    total = np.linalg.norm(U_true)
    if total == 0:
        raise DegenerateError("reference factors are zero")
    return float(min(1.0, np.linalg.norm(Q.T @ U_true) / total))


def quartile_groups(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Upper- and lower-quartile subjects of a trait.

    With ``n`` non-missing values and ``k = ceil(n / 4)``, the high group is every subject at or above the
    ``k``-th largest value and the low group every subject at or below the ``k``-th smallest, so boundary
    ties are all included. Missing values are ignored.

    :param y: np.ndarray: Trait values, NaN for missing
    :return: tuple[np.ndarray, np.ndarray]: Positions in ``y`` of the high and low groups
    :raises InvalidInputError: If fewer than 8 values are present
    :raises DegenerateError: If the trait is constant or the groups overlap
    """
    y = np.asarray(y, dtype=np.float64)
    present = np.flatnonzero(~np.isnan(y))
    if present.size < 8:
        raise InvalidInputError(f"quartile groups need at least 8 values, got {present.size}")
    values = y[present]
    if np.ptp(values) == 0:
        raise DegenerateError("trait is constant")
    k = math.ceil(present.size / 4)
    ordered = np.sort(values)
    high = present[values >= ordered[-k]]
    low = present[values <= ordered[k - 1]]
    if np.intersect1d(high, low).size:
        raise DegenerateError("quartile groups overlap because of tied values")
    return high, low


def _mmd_statistics(kernel: np.ndarray, labels: np.ndarray, n: int, m: int) -> np.ndarray:
    # labels: batch x (n + m) indicator of the first group
    off = kernel - np.diag(np.diag(kernel))
    rest = 1.0 - labels
    sxx = np.sum((labels @ off) * labels, axis=1)
    syy = np.sum((rest @ off) * rest, axis=1)
    sxy = np.sum((labels @ kernel) * rest, axis=1)
    return sxx / (n * (n - 1)) + syy / (m * (m - 1)) - 2 * sxy / (n * m)


def mmd_test(A: np.ndarray, B: np.ndarray, permutations: int = 10_000,
             seed: int | Sequence[int] = 0) -> tuple[float, float]:
    """
    Kernel two-sample test of whether two groups of factor rows share a distribution.

    The statistic is the unbiased squared MMD with a Gaussian kernel ``exp(-d^2 / (2 b^2))`` whose bandwidth
    ``b`` is the median pairwise distance of the pooled sample. The p-value comes from random relabelings
    of the pooled sample: ``(1 + #{permuted >= observed}) / (1 + permutations)``.

    :param A: np.ndarray: Rows of the first group
    :param B: np.ndarray: Rows of the second group
    :param permutations: int: Number of relabelings
    :param seed: int | Sequence[int]: Seed of the relabeling stream
    :return: tuple[float, float]: ``(statistic, p_value)``
    :raises InvalidInputError: If a group has fewer than 2 rows
    :raises DegenerateError: If every pooled point is identical
    """
    A, B = _matrix(A), _matrix(B)
    n, m = A.shape[0], B.shape[0]
    if n < 2 or m < 2:
        raise InvalidInputError(f"each group needs at least 2 rows, got {n} and {m}")
    if A.shape[1] != B.shape[1]:
        raise DimensionError(f"groups have {A.shape[1]} and {B.shape[1]} columns")
    if permutations < 1:
        raise InvalidInputError("at least one permutation is required")
    pooled = np.vstack([A, B])
    bandwidth = float(np.median(pdist(pooled)))
    if bandwidth <= 0:
        raise DegenerateError("degenerate bandwidth: the pooled points coincide")
    kernel = np.exp(-cdist(pooled, pooled, "sqeuclidean") / (2 * bandwidth ** 2))

    observed_labels = np.zeros((1, n + m))
    observed_labels[0, :n] = 1.0
    statistic = float(_mmd_statistics(kernel, observed_labels, n, m)[0])

    rng = np.random.default_rng(seed)
    exceed = 0
    tolerance = 1e-12 * max(abs(statistic), 1.0)
    for start in range(0, permutations, PERMUTATION_BATCH):
        batch = min(PERMUTATION_BATCH, permutations - start)
        labels = np.zeros((batch, n + m))
        for row in range(batch):
            labels[row, rng.permutation(n + m)[:n]] = 1.0
        exceed += int(np.sum(_mmd_statistics(kernel, labels, n, m) >= statistic - tolerance))
    p_value = (1 + exceed) / (1 + permutations)
    logger.debug("mmd %.6g (bandwidth %.4g), p = %.4g over %d permutations", statistic, bandwidth, p_value,
                 permutations)
    return statistic, p_value


def fdr_adjust(pvalues: Sequence[float] | np.ndarray, q: float = 0.05) -> tuple[np.ndarray, Optional[float]]:
    """
    Benjamini-Hochberg step-up procedure at level ``q``.

    :param pvalues: Sequence[float]: p-values in ``[0, 1]``
    :param q: float: Target false discovery rate
    :return: tuple: Rejection flags and the largest rejected p-value (None when nothing is rejected)
    :raises InvalidInputError: If a p-value is outside ``[0, 1]``
    """
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0, dtype=bool), None
    if not np.all((p >= 0) & (p <= 1)):
        raise InvalidInputError("p-values must lie in [0, 1]")
    reject = multipletests(p, alpha=q, method="fdr_bh")[0]
    threshold = float(p[reject].max()) if reject.any() else None
    return reject, threshold


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma[sigma == 0] = 1.0
    return (X - mu) / sigma, mu, sigma


def ridge_predict(U_train: np.ndarray, y_train: np.ndarray, U_test: np.ndarray, lam: float,
                  y_test: Optional[np.ndarray] = None,
                  standardize: bool = False) -> tuple[np.ndarray, Optional[float]]:
    """
    Closed-form ridge regression with an unpenalized intercept.

    Features and response are centered on the training rows (features optionally scaled to unit variance);
    the coefficients solve ``(X^T X + lam I) beta = X^T y``.

    :param U_train: np.ndarray: Training features
    :param y_train: np.ndarray: Training response
    :param U_test: np.ndarray: Test features
    :param lam: float: Penalty, ``lam >= 0``
    :param y_test: np.ndarray | None: Test response, to compute the MSE
    :param standardize: bool: Scale features by their training standard deviation
    :return: tuple: Test predictions and their MSE (None without ``y_test``)
    :raises DegenerateError: If ``lam == 0`` and the training features are collinear
    """
    X, X_test = _matrix(U_train), _matrix(U_test)
    y = np.asarray(y_train, dtype=np.float64)
    if lam < 0:
        raise InvalidInputError(f"lambda must be nonnegative, got {lam}")
    if X.shape[0] < 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"need at least 2 training rows matching the response, got {X.shape} and {y.shape}")
    if X_test.shape[1] != X.shape[1]:
        raise DimensionError(f"test features have {X_test.shape[1]} columns, training {X.shape[1]}")
    if standardize:
        Xc, mu, sigma = _standardize(X)
    else:
        mu, sigma = X.mean(axis=0), np.ones(X.shape[1])
        Xc = X - mu
    y_mean = y.mean()
    if lam == 0 and np.linalg.matrix_rank(Xc) < Xc.shape[1]:
        raise DegenerateError("singular system: collinear features without a penalty")
    gram = Xc.T @ Xc + lam * np.eye(Xc.shape[1])
    try:
        beta = scipy.linalg.solve(gram, Xc.T @ (y - y_mean), assume_a="sym")
    except np.linalg.LinAlgError as e:
        raise DegenerateError(f"singular ridge system: {e}") from e
    predictions = y_mean + ((X_test - mu) / sigma) @ beta
    mse = None
    if y_test is not None:
        mse = float(np.mean((np.asarray(y_test, dtype=np.float64) - predictions) ** 2))
    return predictions, mse


def select_lambda(U: np.ndarray, y: np.ndarray, grid: Sequence[float], folds: int = 5, seed: int = 0) -> float:
    """
    Penalty with the lowest mean K-fold validation MSE (the smallest such value on ties).

    :param U: np.ndarray: Training features
    :param y: np.ndarray: Training response
    :param grid: Sequence[float]: Candidate penalties
    :param folds: int: Number of folds, reduced to the row count when larger
    :param seed: int: Fold shuffling seed
    :return: float: The selected penalty
    """
    U, y = _matrix(U), np.asarray(y, dtype=np.float64)
    splitter = KFold(n_splits=min(folds, U.shape[0] // 2), shuffle=True, random_state=seed)
    candidates = sorted(grid)
    scores = np.zeros(len(candidates))
    for train, test in splitter.split(U):
        for c, lam in enumerate(candidates):
            scores[c] += ridge_predict(U[train], y[train], U[test], lam, y_test=y[test])[1]
    return float(candidates[int(np.argmin(scores))])


def mmd_trait_study(factor_sets: Mapping[str, np.ndarray], traits: TraitTable, config: MMDConfig) -> pd.DataFrame:
    """
    Quartile-group MMD test of every trait for several factor sets, with BH control per set.

    The high and low quartile groups of each trait are compared on the first ``config.k`` factors of every
    set; every set sees the same relabeling stream for a given trait. Traits without valid groups are
    skipped and listed in ``attrs["notes"]``.

    :param factor_sets: Mapping[str, np.ndarray]: Factor matrices by name, rows in ``traits.subjects`` order
    :param traits: TraitTable: The traits
    :param config: MMDConfig: Test settings
    :return: pd.DataFrame: ``trait``, then ``p_<name>`` and ``reject_<name>`` for every set
    """
    for name, U in factor_sets.items():
        if _matrix(U).shape[0] != len(traits.subjects):
            raise DimensionError(f"factor set {name!r} has {np.shape(U)[0]} rows for {len(traits.subjects)} subjects")
    rows, notes = [], []
    for t, trait in enumerate(traits.names):
        try:
            high, low = quartile_groups(traits.trait(trait))
        except (InvalidInputError, DegenerateError) as e:
            notes.append(f"skipped trait {trait}: {e}")
            logger.warning(notes[-1])
            continue
        row = {"trait": trait}
        for name, U in factor_sets.items():
            U = np.asarray(U, dtype=np.float64)[:, :config.k]
            row[f"p_{name}"] = mmd_test(U[high], U[low], config.permutations, [config.seed, t])[1]
        rows.append(row)
        logger.info("trait %s: %s", trait, ", ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "trait"))

    table = pd.DataFrame(rows, columns=["trait"] + [f"p_{name}" for name in factor_sets])
    for name in factor_sets:
        table[f"reject_{name}"] = fdr_adjust(table[f"p_{name}"].to_numpy(), config.q)[0]
    table.attrs["notes"] = notes
    return table


def prediction_study(models: Mapping[str, np.ndarray], traits: TraitTable, config: PredictionConfig) -> pd.DataFrame:
    """
    Repeated train/test ridge prediction of every trait from several factor matrices.

    Each trait uses its subjects with a value; every model sees the same seeded random splits. Ridge models
    use the first ``config.n_factors`` factors (all of them when fewer are available) with ``config.lam``,
    or a penalty chosen by cross-validation on each training split when ``config.lam`` is None. The first
    model is the reference: ``relative_change_<name> = (mse_ref - mse_name) / mse_name`` of the median test
    MSEs, so negative values mean the reference predicts better.

    :param models: Mapping[str, np.ndarray]: Factor matrices by name, rows in ``traits.subjects`` order
    :param traits: TraitTable: The traits
    :param config: PredictionConfig: Study settings
    :return: pd.DataFrame: One row per evaluable trait; skipped traits are listed in ``attrs["notes"]``
    """
    if not models:
        raise InvalidInputError("at least one model is required")
    names = list(models)
    matrices = {}
    for name, U in models.items():
        U = _matrix(U)
        if U.shape[0] != len(traits.subjects):
            raise DimensionError(f"model {name!r} has {U.shape[0]} rows for {len(traits.subjects)} subjects")
        matrices[name] = U[:, :min(config.n_factors, U.shape[1])]

    rows, notes = [], []
    for trait in traits.names:
        y = traits.trait(trait)
        included = np.flatnonzero(~np.isnan(y))
        if included.size < config.min_subjects:
            notes.append(f"skipped trait {trait}: {included.size} subjects with a value, "
                         f"{config.min_subjects} required")
            logger.warning(notes[-1])
            continue
        splitter = ShuffleSplit(n_splits=config.splits, train_size=config.train_frac, random_state=config.seed)
        splits = list(splitter.split(included))
        y_in = y[included]
        row = {"trait": trait}
        for name in names:
            U = matrices[name][included]
            mses = []
            for train, test in splits:
                lam = config.lam
                if lam is None:
                    lam = select_lambda(U[train], y_in[train], config.grid, config.cv_folds, config.seed)
                mses.append(ridge_predict(U[train], y_in[train], U[test], lam, y_test=y_in[test])[1])
            row[f"median_mse_{name}"] = float(np.median(mses))
        reference = row[f"median_mse_{names[0]}"]
        for name in names[1:]:
            base = row[f"median_mse_{name}"]
            row[f"relative_change_{name}"] = (reference - base) / base if base > 0 else float("nan")
        rows.append(row)
        logger.info("trait %s evaluated over %d splits", trait, len(splits))

    columns = ["trait"] + [f"median_mse_{n}" for n in names] + [f"relative_change_{n}" for n in names[1:]]
    table = pd.DataFrame(rows, columns=columns)
    table.attrs["notes"] = notes
    return table
