import logging
import math
from typing import Sequence

import numpy as np
import pandas as pd

from src.exceptions import DegenerateError, InvalidInputError, MGPCAError
from src.schemas import (
    ScaleModes,
    SimulationConfig,
    StudyConfig,
    SymmetricMatrix,
    SyntheticDataset,
    TensorStack,
)
from src.services.analysis import variance_explained
from src.services.decomposition import multiscale_pca, single_scale_pca
from src.services.tensor_core import as_array

logger = logging.getLogger(__name__)


def orthonormalize(columns: np.ndarray) -> np.ndarray:
    """
    Modified Gram-Schmidt on the columns of a matrix, in column order.

    :param columns: np.ndarray: ``P x R`` matrix
    :return: np.ndarray: ``P x R`` matrix with orthonormal columns spanning the same nested subspaces
    :raises DegenerateError: If the columns are linearly dependent
    """
    Q = np.array(columns, dtype=np.float64, copy=True)
    for k in range(Q.shape[1]):
        for i in range(k):
            Q[:, k] -= (Q[:, i] @ Q[:, k]) * Q[:, i]
        norm = np.linalg.norm(Q[:, k])
        if norm <= 1e-12 * max(np.linalg.norm(columns[:, k]), np.finfo(float).tiny):
            raise DegenerateError(f"column {k} is linearly dependent on the previous ones")
        Q[:, k] /= norm
    return Q


def _network_modes(rng: np.random.Generator, P: int, rank: int, structure: str, sparsity: float) -> np.ndarray:
    V = rng.gamma(1.0, 1.0, size=(P, rank))
    if structure == "sparse":
        drop = int(round(sparsity * P))
        smallest = np.argsort(V, axis=0, kind="stable")[:drop]
        np.put_along_axis(V, smallest, 0.0, axis=0)
    return orthonormalize(V)


def _scale(values: np.ndarray, mode: str) -> float:
    if mode == "none":
        return 1.0
    if not np.any(values):
        raise DegenerateError("cannot normalize an all-zero stack")
    return 1.0 / (np.linalg.norm(values) if mode == "frobenius" else np.max(np.abs(values)))


def _mirror(upper: np.ndarray) -> np.ndarray:
    return np.triu(upper) + np.triu(upper, 1).T


def _add_noise(values: np.ndarray, config: SimulationConfig, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    P, _, N = values.shape
    noisy = values.copy()
    if config.noise == "normal":
        sds = []
        for i in range(N):
            sd = config.normal_sd_fraction * float(np.ptp(values[:, :, i]))
            noisy[:, :, i] += _mirror(rng.normal(0.0, sd, size=(P, P)))
            sds.append(sd)
        return noisy, {"sd": sds}
    if config.noise == "rademacher":
        a, b = np.triu_indices(P, k=1)
        flips = int(round(config.flip_fraction * a.size))
        for i in range(N):
            chosen = rng.choice(a.size, size=flips, replace=False)
            rows, cols = a[chosen], b[chosen]
            if config.flip_mode == "sign":
                noisy[rows, cols, i] *= -1.0
            else:
                noisy[rows, cols, i] = 1.0 - noisy[rows, cols, i]
            noisy[cols, rows, i] = noisy[rows, cols, i]
        return noisy, {"flips_per_subject": flips, "flip_mode": config.flip_mode}
    return noisy, {}


def generate(config: SimulationConfig) -> SyntheticDataset:
    """
    Simulate a population of graphs at several scales from a planted multi-scale model.

    Subject factors are drawn ``N(0, 1)`` and network modes ``Gamma(1, 1)``; for the sparse structure the
    smallest ``sparsity`` fraction of each mode's entries is zeroed. Modes are then orthonormalized by
    modified Gram-Schmidt. Every scale is ``sum_h v_h o v_h o u_h``, normalized as configured, and the
    configured noise is added per subject. The planted weights ``d`` carry the normalization, so the modes and
    ``U`` reproduce the clean stacks.

    :param config: SimulationConfig: Simulation settings
    :return: SyntheticDataset: Noisy stacks, clean stacks and the planted model
    """
    rng = np.random.default_rng(config.seed)
    U = rng.standard_normal((config.N, config.true_rank))
    subjects = [str(i + 1) for i in range(config.N)]
    stacks, clean, modes, noise = [], [], [], {"kind": config.noise, "scales": {}}
    for j, P in enumerate(config.scales):
        scale_id = f"scale_{j + 1}"
        V = _network_modes(rng, P, config.true_rank, config.structure, config.sparsity)
        values = np.einsum("ah,bh,ih->abi", V, V, U)
        c = _scale(values, config.normalization)
        values = c * values
        noisy, meta = _add_noise(values, config, rng)
        clean.append(TensorStack(scale_id=scale_id, values=values, subjects=subjects))
        stacks.append(TensorStack(scale_id=scale_id, values=noisy, subjects=subjects))
        modes.append(ScaleModes(scale_id=scale_id, d=np.full(config.true_rank, c), V=V))
        noise["scales"][scale_id] = meta
    logger.info("simulated %d scales of %d subjects (%s structure, %s noise)", len(stacks), config.N,
                config.structure, config.noise)
    return SyntheticDataset(stacks=stacks, clean=clean, U=U, modes=modes, noise=noise)


def coarsen(fine: SymmetricMatrix | np.ndarray, partition: Sequence[int] | np.ndarray) -> SymmetricMatrix:
    """
    Aggregate a fine-scale matrix onto groups of nodes: ``coarse[a, b]`` sums ``fine[x, y]`` over node pairs
    mapped to ``(a, b)``. Self-connections of the coarse matrix are set to 0.

    :param fine: SymmetricMatrix | np.ndarray: ``P x P`` matrix
    :param partition: Sequence[int]: Group of every fine node, groups labeled ``0..G-1`` without gaps
    :return: SymmetricMatrix: ``G x G`` matrix
    :raises InvalidInputError: If the partition does not cover every node
    """
    fine = as_array(fine)
    membership = _membership(partition, fine.shape[0])
    coarse = membership.T @ fine @ membership
    np.fill_diagonal(coarse, 0.0)
    return SymmetricMatrix(values=coarse)


def _membership(partition: Sequence[int] | np.ndarray, nodes: int) -> np.ndarray:
    labels = np.asarray(partition)
    if labels.shape != (nodes,) or not np.issubdtype(labels.dtype, np.integer) or (labels < 0).any():
        raise InvalidInputError(f"partition must assign a nonnegative integer group to each of {nodes} nodes")
    groups = int(labels.max()) + 1 if labels.size else 0
    if np.unique(labels).size != groups:
        raise InvalidInputError("partition groups must be labeled 0..G-1 without gaps")
    membership = np.zeros((nodes, groups))
    membership[np.arange(nodes), labels] = 1.0
    return membership


def coarsen_stack(x: TensorStack, partition: Sequence[int] | np.ndarray, scale_id: str) -> TensorStack:
    membership = _membership(partition, x.P)
    half = np.tensordot(membership, x.values, axes=([0], [0]))
    values = np.moveaxis(np.tensordot(half, membership, axes=([1], [0])), 2, 1)
    idx = np.arange(values.shape[0])
    values[idx, idx, :] = 0.0
    return TensorStack(scale_id=scale_id, values=values, subjects=x.subjects)


def parcellation_partition(regions: int, left: int, right: int, to_left: int, to_right: int) -> np.ndarray:
    """
    Map the nodes of a ``(left, right)`` parcellation onto a coarser ``(to_left, to_right)`` one.

    A ``(left, right)`` parcellation splits each of ``regions`` base regions of the left hemisphere into
    ``left`` equal subregions and each of the right hemisphere into ``right``. Nodes are ordered left
    hemisphere first, region by region, subregions contiguous.

    :return: np.ndarray: Coarse node of every fine node
    :raises InvalidInputError: If a coarse split count does not divide the fine one
    """
    if min(regions, left, right, to_left, to_right) < 1:
        raise InvalidInputError("region and split counts must be positive")
    if left % to_left or right % to_right:
        raise InvalidInputError(f"({to_left}, {to_right}) is not a coarsening of ({left}, {right})")
    left_nodes = np.arange(regions * left)
    right_nodes = np.arange(regions * right)
    to_left_groups = (left_nodes // left) * to_left + (left_nodes % left) // (left // to_left)
    to_right_groups = (right_nodes // right) * to_right + (right_nodes % right) // (right // to_right)
    return np.concatenate([to_left_groups, regions * to_left + to_right_groups])


def generate_parcellated(config: SimulationConfig, parcellations: Sequence[tuple[int, int]],
                         regions: int = 34) -> SyntheticDataset:
    """
    Simulate one population observed through several nested parcellations.

    The planted model is drawn on the finest common refinement of ``parcellations`` and every requested
    parcellation is obtained by :func:`coarsen`, then normalized and noised as in :func:`generate`. The scale
    sizes of ``config`` are ignored. Planted modes are reported only for parcellations equal to the
    refinement; the others carry an empty mode list entry.

    :param config: SimulationConfig: Simulation settings
    :param parcellations: Sequence[tuple[int, int]]: ``(left, right)`` split counts per scale
    :param regions: int: Base regions per hemisphere
    :return: SyntheticDataset: Stacks labeled ``L<left>R<right>``
    """
    if not parcellations:
        raise InvalidInputError("at least one parcellation is required")
    fine_left = math.lcm(*(left for left, _ in parcellations))
    fine_right = math.lcm(*(right for _, right in parcellations))
    P = regions * (fine_left + fine_right)
    coarsest = min(regions * (left + right) for left, right in parcellations)
    if config.true_rank > coarsest:
        raise InvalidInputError(f"true_rank {config.true_rank} exceeds the coarsest parcellation ({coarsest} nodes)")

    rng = np.random.default_rng(config.seed)
    U = rng.standard_normal((config.N, config.true_rank))
    V = _network_modes(rng, P, config.true_rank, config.structure, config.sparsity)
    subjects = [str(i + 1) for i in range(config.N)]
    fine = TensorStack(scale_id="fine", values=np.einsum("ah,bh,ih->abi", V, V, U), subjects=subjects)

    stacks, clean, modes, noise = [], [], [], {"kind": config.noise, "scales": {}}
    for left, right in parcellations:
        scale_id = f"L{left}R{right}"
        partition = parcellation_partition(regions, fine_left, fine_right, left, right)
        values = coarsen_stack(fine, partition, scale_id).values
        c = _scale(values, config.normalization)
        values = c * values
        noisy, meta = _add_noise(values, config, rng)
        clean.append(TensorStack(scale_id=scale_id, values=values, subjects=subjects))
        stacks.append(TensorStack(scale_id=scale_id, values=noisy, subjects=subjects))
        if (left, right) == (fine_left, fine_right):
            modes.append(ScaleModes(scale_id=scale_id, d=np.full(config.true_rank, c), V=V))
        noise["scales"][scale_id] = meta
    logger.info("simulated %d parcellations from a %d-node refinement", len(stacks), P)
    return SyntheticDataset(stacks=stacks, clean=clean, U=U, modes=modes, noise=noise)


def _cell_seed(base: int, cell: int, repetition: int) -> int:
    return int(np.random.SeedSequence([base, cell, repetition]).generate_state(1)[0])


def _ve_curve(fit, U_true: np.ndarray, max_k: int) -> list[float]:
    return [variance_explained(fit.U[:, :k], U_true) if k <= fit.K else float("nan") for k in range(1, max_k + 1)]


def run_recovery_study(config: StudyConfig) -> pd.DataFrame:
    """
    Variance-explained comparison of the multi-scale fit against every single-scale fit.

    For each structure and noise cell, ``config.repetitions`` seeded datasets are simulated; the multi-scale
    model and one single-scale model per scale are fitted once with ``K = config.max_k`` and scored on their
    leading ``k`` factors for every ``k``. The greedy fit makes the leading ``k`` columns those of a rank
    ``k`` fit. A fit that fails leaves missing values and a note in ``attrs["notes"]``.

    :param config: StudyConfig: Study grid
    :return: pd.DataFrame: ``structure, noise, K, method, mean_ve, sd_ve``
    """
    fit_config = config.fit.model_copy(update={"K": config.max_k})
    records, notes = [], []
    cells = [(s, n) for s in config.structures for n in config.noises]
    for c, (structure, noise) in enumerate(cells):
        curves: dict[str, list[list[float]]] = {}
        for rep in range(config.repetitions):
            sim = config.simulation.model_copy(update={"structure": structure, "noise": noise,
                                                       "seed": _cell_seed(config.simulation.seed, c, rep)})
            data = generate(sim)
            fits = {"multi": lambda: multiscale_pca(data.stacks, fit_config)}
            for x in data.stacks:
                fits[f"single_{x.scale_id}"] = lambda x=x: single_scale_pca(x, fit_config)
            for method, fit in fits.items():
                try:
                    curve = _ve_curve(fit(), data.U, config.max_k)
                except MGPCAError as e:
                    notes.append(f"{structure}/{noise} repetition {rep + 1} {method}: {e}")
                    logger.warning(notes[-1])
                    curve = [float("nan")] * config.max_k
                curves.setdefault(method, []).append(curve)
        for method, reps in curves.items():
            table = np.array(reps)
            present = np.sum(~np.isnan(table), axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                means = np.where(present > 0, np.nansum(table, axis=0) / np.maximum(present, 1), np.nan)
                sds = np.array([np.std(col[~np.isnan(col)], ddof=1) if n > 1 else np.nan
                                for col, n in zip(table.T, present)])
            for k in range(config.max_k):
                records.append({"structure": structure, "noise": noise, "K": k + 1, "method": method,
                                "mean_ve": float(means[k]), "sd_ve": float(sds[k])})
        logger.info("cell %s/%s done (%d repetitions)", structure, noise, config.repetitions)
    frame = pd.DataFrame(records, columns=["structure", "noise", "K", "method", "mean_ve", "sd_ve"])
    frame.attrs["notes"] = notes
    return frame
