import logging
from typing import Optional, Sequence

import numpy as np

from src.exceptions import DegenerateError, DimensionError, InvalidInputError
from src.schemas import (
    AvailabilityMask,
    EigMethod,
    FitConfig,
    Imputation,
    KruskalDecomposition,
    SymmetricMatrix,
    TensorStack,
)
from src.services.decomposition import check_bounds, span_eigenvector, fit_stacks, multiscale_pca, update_v
from src.services.tensor_core import as_array, canonical_sign, contract_pair, normalize_stack

logger = logging.getLogger(__name__)


def subject_sets(mask: AvailabilityMask) -> tuple[list[frozenset[int]], list[frozenset[int]]]:
    """
    Per-subject scale sets ``S(l) = {w : Gamma[l, w] = 1}`` and comparable-subject sets
    ``G(l) = {z : S(l) is a subset of S(z)}``. Indices are 0-based.

    :param mask: AvailabilityMask: The availability mask
    :return: tuple: ``(S, G)``, one frozenset per subject in each
    """
    gamma = mask.gamma
    S = [frozenset(np.flatnonzero(row).tolist()) for row in gamma]
    G = [frozenset(np.flatnonzero(np.all(gamma >= row, axis=1)).tolist()) for row in gamma]
    return S, G


def _local_positions(mask: AvailabilityMask) -> list[np.ndarray]:
    positions = []
    for j in range(mask.gamma.shape[1]):
        local = np.full(mask.gamma.shape[0], -1)
        local[mask.available(j)] = np.arange(mask.gamma[:, j].sum())
        positions.append(local)
    return positions


def _check_stacks(stacks: Sequence[np.ndarray], mask: AvailabilityMask) -> None:
    if len(stacks) != mask.gamma.shape[1]:
        raise DimensionError(f"{len(stacks)} stacks for a mask with {mask.gamma.shape[1]} scales")
    for j, x in enumerate(stacks):
        if x.shape[2] != mask.gamma[:, j].sum():
            raise DimensionError(f"stack {j} holds {x.shape[2]} subjects but the mask marks "
                                 f"{mask.gamma[:, j].sum()} as available")


def update_u_missing(scales: Sequence[TensorStack | np.ndarray], vs: Sequence[np.ndarray],
                     projectors: Sequence[np.ndarray], mask: AvailabilityMask,
                     u_current: Optional[np.ndarray] = None, method: EigMethod = "lapack") -> np.ndarray:
    """
    Subject-factor update when some subjects lack some scales.

    Subjects sharing a scale set ``S`` are solved together: the eigenproblem is built over the comparable
    subjects ``G`` using only the scales in ``S``, and the members read their entries off its top eigenvector.
    Group eigenvectors are unit over different subject sets, so each one is rescaled by the least-squares
    factor (sign included) that matches it to a reference on ``G``: the current iterate, or the eigenvector of
    the largest group when there is no iterate yet. The assembled column is then renormalized.

    :param scales: Sequence: Per scale, the stack of its available subjects in mask order
    :param vs: Sequence[np.ndarray]: Current network mode of every scale
    :param projectors: Sequence[np.ndarray]: Current projector of every scale
    :param mask: AvailabilityMask: The availability mask
    :param u_current: np.ndarray | None: Current subject factor, the alignment reference
    :param method: EigMethod: Eigen solver
    :return: np.ndarray: Unit vector of length ``N``
    """
    stacks = [as_array(x) for x in scales]
    _check_stacks(stacks, mask)
    S, G = subject_sets(mask)
    positions = _local_positions(mask)
    projected = [p @ v for v, p in zip(vs, projectors)]

    patterns: dict[frozenset[int], list[int]] = {}
    for subject, scale_set in enumerate(S):
        patterns.setdefault(scale_set, []).append(subject)
    order = sorted(patterns, key=lambda s: (-len(G[patterns[s][0]]), sorted(s)))

    n = mask.gamma.shape[0]
    u = np.zeros(n)
    reference = None if u_current is None else np.asarray(u_current, dtype=np.float64)
    for scale_set in order:
        members = patterns[scale_set]
        group = np.array(sorted(G[members[0]]))
        g = np.column_stack([contract_pair(stacks[j][:, :, positions[j][group]], projected[j])
                             for j in sorted(scale_set)])
        e = span_eigenvector(g, method)
        if reference is None:
            reference = np.zeros(n)
            reference[group] = e
        else:
            scale = float(e @ reference[group])
            # no overlap with the reference: keep the unit eigenvector
            if scale != 0.0:
                e = scale * e
        u[members] = e[np.searchsorted(group, members)]
    norm = np.linalg.norm(u)
    if norm == 0:
        raise DegenerateError("assembled subject factor is zero")
    return canonical_sign(u / norm)


def update_v_missing(x: TensorStack | np.ndarray, u: np.ndarray, projection: np.ndarray,
                     mask: AvailabilityMask, j: int, method: EigMethod = "lapack") -> np.ndarray:
    """
    Network-mode update of scale ``j`` from its available subjects only.

    :param x: TensorStack | np.ndarray: Stack of the subjects available at scale ``j``
    :param u: np.ndarray: Subject factor over all ``N`` subjects
    :param projection: np.ndarray: Projector of scale ``j``
    :param mask: AvailabilityMask: The availability mask
    :param j: int: Scale index, 0-based
    :param method: EigMethod: Eigen solver
    :return: np.ndarray: Unit vector
    :raises InvalidInputError: If no subject is available at scale ``j``
    """
    available = mask.available(j)
    if available.size == 0:
        raise InvalidInputError(f"no subjects available at scale {j}")
    x = as_array(x)
    if x.shape[2] != available.size:
        raise DimensionError(f"stack holds {x.shape[2]} subjects, mask marks {available.size} at scale {j}")
    return update_v(x, np.asarray(u)[available], projection, method)


def fit_missing(data: Sequence[TensorStack], mask: AvailabilityMask, config: FitConfig) -> KruskalDecomposition:
    """
    Multi-scale decomposition with subjects missing at some scales.

    Runs the deflation algorithm with :func:`update_u_missing` and available-subject network-mode updates;
    deflation of each scale touches only its available subjects. With a complete mask this is exactly
    :func:`~src.services.decomposition.multiscale_pca`.

    :param data: Sequence[TensorStack]: Per scale, the stack of its available subjects in mask order
    :param mask: AvailabilityMask: The availability mask
    :param config: FitConfig: Fit settings
    :return: KruskalDecomposition: Decomposition with one row of ``U`` per mask subject
    """
    _check_stacks([x.values for x in data], mask)
    if mask.is_complete:
        return multiscale_pca(data, config)
    check_bounds(config, [x.P for x in data], mask.gamma.shape[0])
    stacks = [normalize_stack(x, config.normalization) for x in data]
    subject_index = [mask.available(j) for j in range(len(stacks))]

    def u_step(xs, vs, ps, u):
        return update_u_missing(xs, vs, ps, mask, u, config.eig_method)

    logger.info("fitting %d scales with %d missing slices", len(stacks), int((mask.gamma == 0).sum()))
    return fit_stacks(stacks, config, list(mask.subjects), subject_index, u_step)


def _resolve(labels: list[str], key: int | str, kind: str) -> int:
    if isinstance(key, str):
        if key not in labels:
            raise InvalidInputError(f"unknown {kind} {key!r}")
        return labels.index(key)
    if not 0 <= key < len(labels):
        raise InvalidInputError(f"{kind} index {key} out of range")
    return key


def impute(decomp: KruskalDecomposition, mask: AvailabilityMask, scale: int | str, subject: int | str) -> Imputation:
    """
    Reconstruct one subject's slice at one scale: ``sum_h d_h u_ih v_h v_h^T``.

    Imputing an observed slice is allowed; the result is flagged as ``observed`` with a note.

    :param decomp: KruskalDecomposition: Decomposition fitted with :func:`fit_missing`
    :param mask: AvailabilityMask: The mask it was fitted with
    :param scale: int | str: Scale index or id
    :param subject: int | str: Subject index or id
    :return: Imputation: The symmetric matrix and its status
    """
    j = _resolve(mask.scale_ids, scale, "scale")
    i = _resolve(mask.subjects, subject, "subject")
    modes = decomp.scales[j]
    matrix = np.einsum("h,ah,bh->ab", modes.d * decomp.U[i], modes.V, modes.V)
    observed = bool(mask.gamma[i, j])
    note = None
    if observed:
        note = f"subject {mask.subjects[i]} is observed at scale {mask.scale_ids[j]}; returned its reconstruction"
        logger.warning(note)
    return Imputation(matrix=SymmetricMatrix(values=matrix), observed=observed, note=note)


def complete_stack(decomp: KruskalDecomposition, mask: AvailabilityMask, x: TensorStack, scale: int | str) -> TensorStack:
    """
    Full-subject stack for one scale: observed slices kept, missing ones imputed.

    :param decomp: KruskalDecomposition: Decomposition fitted with :func:`fit_missing`
    :param mask: AvailabilityMask: The mask it was fitted with
    :param x: TensorStack: Observed stack of the scale
    :param scale: int | str: Scale index or id
    :return: TensorStack: ``P x P x N`` stack over all mask subjects
    """
    j = _resolve(mask.scale_ids, scale, "scale")
    values = np.zeros((x.P, x.P, mask.gamma.shape[0]))
    values[:, :, mask.available(j)] = x.values
    for i in np.flatnonzero(mask.gamma[:, j] == 0):
        values[:, :, i] = impute(decomp, mask, j, int(i)).matrix.values
    return TensorStack(scale_id=x.scale_id, values=values, subjects=mask.subjects)
