import logging
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic import ValidationError

from src.exceptions import DegenerateError, DimensionError
from src.schemas import (
    AvailabilityMask,
    ComponentFit,
    EigMethod,
    FitConfig,
    KruskalDecomposition,
    ScaleModes,
    TensorStack,
)
from src.services.tensor_core import (
    as_array,
    canonical_sign,
    check_projector,
    contract_pair,
    eig_max,
    frobenius_norm,
    mode_n_multiply_matrix,
    mode_n_multiply_vector,
    normalize_stack,
    projector,
)

logger = logging.getLogger(__name__)

# (stacks, modes, projectors, current u or None) -> new unit u of length N
UStep = Callable[[list[np.ndarray], list[np.ndarray], list[np.ndarray], Optional[np.ndarray]], np.ndarray]

TRUNCATION_TOL = 1e-10


def _restrict(u: np.ndarray, index: Optional[np.ndarray]) -> np.ndarray:
    return u if index is None else u[index]


def hosvd_init(x: TensorStack | np.ndarray, projection: np.ndarray, method: EigMethod = "lapack") -> np.ndarray:
    """
    Warm start for a network mode: the dominant left singular vector of the projected mode-1 unfolding.

    It is computed as the top eigenvector of ``sum_i (P X_i P)^2``.

    :param x: TensorStack | np.ndarray: The stack
    :param projection: np.ndarray: Orthogonal projector onto the admissible subspace
    :param method: EigMethod: Eigen solver
    :return: np.ndarray: Unit vector
    :raises InvalidInputError: If ``projection`` is not an orthogonal projector
    :raises DegenerateError: If the projected data is zero
    """
    x = as_array(x)
    p = check_projector(projection, x.shape[0])
    projected = np.tensordot(np.tensordot(p, x, axes=([1], [0])), p, axes=([1], [0]))
    gram = np.tensordot(projected, projected, axes=([1, 2], [1, 2]))
    if not np.any(gram):
        raise DegenerateError("zero tensor: nothing to initialize from")
    return eig_max(gram, method)[1]


def span_eigenvector(g: np.ndarray, method: EigMethod) -> np.ndarray:
    # top eigenvector of g g^T, solved in the column span of g
    small = g.T @ g
    if not np.any(small):
        raise DegenerateError("degenerate projected data: every scale contracts to zero")
    _, a = eig_max(small, method)
    u = g @ a
    return canonical_sign(u / np.linalg.norm(u))


def update_u(scales: Sequence[tuple[TensorStack | np.ndarray, np.ndarray, np.ndarray]],
             method: EigMethod = "lapack") -> np.ndarray:
    """
    Closed-form subject-factor update given every scale's network mode.

    With ``g_j = X_j x_1 P_j v_j x_2 P_j v_j`` this is the top eigenvector of ``sum_j g_j g_j^T``. The matrix
    has rank at most ``R`` so the eigenproblem is solved in the span of the ``g_j``.

    :param scales: Sequence[tuple]: ``(stack, v, projector)`` for every scale
    :param method: EigMethod: Eigen solver
    :return: np.ndarray: Unit vector of length ``N``
    :raises DimensionError: If the scales disagree on ``N``
    """
    gs = [contract_pair(x, p @ v) for x, v, p in scales]
    if len({g.shape[0] for g in gs}) != 1:
        raise DimensionError(f"scales disagree on the subject count: {[g.shape[0] for g in gs]}")
    return span_eigenvector(np.column_stack(gs), method)


def update_v(x: TensorStack | np.ndarray, u: np.ndarray, projection: np.ndarray,
             method: EigMethod = "lapack") -> np.ndarray:
    """
    Closed-form network-mode update: the top eigenvector of ``P (X x_3 u) P``.

    The result always lies in the range of ``P``; when the top eigenvalue is not positive the eigenproblem is
    solved inside that range directly.

    :param x: TensorStack | np.ndarray: The stack
    :param u: np.ndarray: Unit subject factor of length ``N``
    :param projection: np.ndarray: Orthogonal projector of size ``P``
    :param method: EigMethod: Eigen solver
    :return: np.ndarray: Unit vector of length ``P``
    :raises DimensionError: On a size mismatch
    :raises DegenerateError: If the projected matrix is zero
    """
    x = as_array(x)
    if projection.shape != (x.shape[0], x.shape[0]):
        raise DimensionError(f"projector of shape {projection.shape} does not fit {x.shape[0]} nodes")
    contracted = mode_n_multiply_vector(x, u, 3)
    m = projection @ contracted @ projection
    if np.linalg.norm(m) <= 1e-12 * np.linalg.norm(contracted):
        raise DegenerateError("degenerate projected matrix")
    value, v = eig_max(m, method)
    if value <= 1e-12 * np.linalg.norm(m):
        basis = scipy.linalg.orth(projection)
        _, a = eig_max(basis.T @ m @ basis, method)
        v = canonical_sign(basis @ a)
    return v


def _terms(stacks, vs, projectors, u, subject_index) -> list[float]:
    return [float(contract_pair(x, p @ v) @ _restrict(u, idx)) ** 2
            for x, v, p, idx in zip(stacks, vs, projectors, subject_index)]


def _orient(u, stacks, vs, projectors, subject_index) -> np.ndarray:
    signed = sum(float(contract_pair(x, p @ v) @ _restrict(u, idx))
                 for x, v, p, idx in zip(stacks, vs, projectors, subject_index))
    return -u if signed < 0 else u


def _initial_modes(stacks, projectors, config: FitConfig, component: int, restart: int) -> list[np.ndarray]:
    if restart == 0 and config.init == "hosvd":
        return [hosvd_init(x, p, config.eig_method) for x, p in zip(stacks, projectors)]
    rng = np.random.default_rng([config.seed, component, restart])
    modes = []
    for p in projectors:
        v = p @ rng.standard_normal(p.shape[0])
        modes.append(v / np.linalg.norm(v))
    return modes


def _run_restart(stacks, projectors, vs, config: FitConfig, subject_index, u_step: UStep) -> ComponentFit:
    u = None
    trace: list[float] = []
    converged = False
    for _ in range(config.max_iters):
        u = _orient(u_step(stacks, vs, projectors, u), stacks, vs, projectors, subject_index)
        terms = _terms(stacks, vs, projectors, u, subject_index)
        for j, (x, p, idx) in enumerate(zip(stacks, projectors, subject_index)):
            try:
                candidate = update_v(x, _restrict(u, idx), p, config.eig_method)
            except DegenerateError:
                continue
            term = float(contract_pair(x, p @ candidate) @ _restrict(u, idx)) ** 2
            # a mode update is kept only if it does not lower this scale's criterion
            if term >= terms[j]:
                vs[j], terms[j] = candidate, term
        objective = float(sum(terms))
        if trace and abs(objective - trace[-1]) <= config.tol * max(abs(trace[-1]), np.finfo(float).tiny):
            trace.append(objective)
            converged = True
            break
        trace.append(objective)
    return ComponentFit(u=u, vs=vs, terms=terms, objective=trace[-1], trace=trace, converged=converged)


def fit_component(residuals: Sequence[TensorStack | np.ndarray], projectors: Sequence[np.ndarray],
                  config: FitConfig, component: int = 0,
                  subject_index: Optional[Sequence[Optional[np.ndarray]]] = None,
                  u_step: Optional[UStep] = None) -> ComponentFit:
    """
    Fit one rank-one multi-scale component by blockwise coordinate ascent.

    Alternates the subject-factor update with the per-scale network-mode updates until the objective
    ``sum_j (X_j x_1 P_j v_j x_2 P_j v_j x_3 u)^2`` changes by a relative amount below ``config.tol`` or
    ``config.max_iters`` sweeps are done. The first of ``config.restarts`` runs starts from HOSVD modes (when
    ``config.init == "hosvd"``), the others from seeded random unit vectors; the run with the highest final
    objective wins.

    :param residuals: Sequence: Residual stacks, one per scale
    :param projectors: Sequence[np.ndarray]: Current projector of every scale
    :param config: FitConfig: Fit settings
    :param component: int: Component index, used to derive the restart seeds
    :param subject_index: Sequence | None: Per scale, the full-subject positions of the stack's slices
    :param u_step: UStep | None: Subject-factor update, :func:`update_u` by default
    :return: ComponentFit: Best run; ``converged`` is False when the iteration cap was hit
    """
    stacks = [as_array(x) for x in residuals]
    subject_index = list(subject_index) if subject_index is not None else [None] * len(stacks)
    if u_step is None:
        if len({x.shape[2] for x in stacks}) != 1:
            raise DimensionError("residual stacks disagree on the subject count")

        def u_step(xs, vs, ps, _):
            return update_u(list(zip(xs, vs, ps)), config.eig_method)

    best: Optional[ComponentFit] = None
    for restart in range(config.restarts):
        vs = _initial_modes(stacks, projectors, config, component, restart)
        fit = _run_restart(stacks, projectors, vs, config, subject_index, u_step)
        logger.debug("component %d restart %d: objective %.10g after %d sweeps", component + 1, restart + 1,
                     fit.objective, len(fit.trace))
        if best is None or fit.objective > best.objective:
            best = fit
    if not best.converged:
        logger.warning("component %d did not converge within %d sweeps", component + 1, config.max_iters)
    return best


def check_bounds(config: FitConfig, nodes: Sequence[int], subjects: int) -> None:
    if config.K > min(nodes) or config.K > subjects:
        raise DimensionError(f"K = {config.K} exceeds min(P_j) = {min(nodes)} or N = {subjects}")


def fit_stacks(stacks: list[TensorStack], config: FitConfig, subjects: list[str],
               subject_index: list[Optional[np.ndarray]], u_step: Optional[UStep]) -> KruskalDecomposition:
    """
    Greedy deflation loop shared by the complete-data and missing-data fits.

    :param stacks: list[TensorStack]: Prepared stacks, one per scale
    :param config: FitConfig: Fit settings
    :param subjects: list[str]: Ids of all ``N`` subjects, the rows of ``U``
    :param subject_index: list: Per scale, positions of the stack's slices among all subjects (None = all)
    :param u_step: UStep | None: Subject-factor update, :func:`update_u` when None
    :return: KruskalDecomposition: The fitted decomposition
    :raises DegenerateError: If the fitted factors break the orthonormality invariants
    """
    residuals = [x.values.copy() for x in stacks]
    norms = [frobenius_norm(x) for x in residuals]
    bases = [np.zeros((x.P, 0)) for x in stacks]
    weights: list[list[float]] = [[] for _ in stacks]
    columns, traces, converged, status = [], [], [], []

    for h in range(config.K):
        if any(frobenius_norm(r) <= TRUNCATION_TOL * max(n, np.finfo(float).tiny) for r, n in zip(residuals, norms)):
            status.append(f"truncated at {h} components: residual is numerically zero")
            logger.warning(status[-1])
            break
        projectors = [projector(V, V.shape[0]) for V in bases]
        try:
            fit = fit_component(residuals, projectors, config, component=h, subject_index=subject_index,
                                u_step=u_step)
        except DegenerateError as e:
            status.append(f"truncated at {h} components: {e}")
            logger.warning(status[-1])
            break
        u = canonical_sign(fit.u)
        for j, (v, idx) in enumerate(zip(fit.vs, subject_index)):
            u_j = _restrict(u, idx)
            d = float(contract_pair(residuals[j], v) @ u_j)
            residuals[j] -= d * np.einsum("a,b,i->abi", v, v, u_j)
            bases[j] = np.column_stack([bases[j], v])
            weights[j].append(d)
        columns.append(u)
        traces.append(fit.trace)
        converged.append(fit.converged)
        if not fit.converged:
            status.append(f"component {h + 1} hit the iteration cap")
        logger.info("component %d/%d: objective %.6g after %d sweeps", h + 1, config.K, fit.objective,
                    len(fit.trace))

    U = np.column_stack(columns) if columns else np.zeros((len(subjects), 0))
    scales = [ScaleModes(scale_id=x.scale_id, d=np.array(w), V=V) for x, w, V in zip(stacks, weights, bases)]
    try:
        return KruskalDecomposition(scales=scales, U=U, subjects=subjects, objective_trace=traces,
                                    converged=converged, status=status)
    except ValidationError as e:
        raise DegenerateError(f"fitted factors violate the decomposition invariants: {e}") from e


def multiscale_pca(data: Sequence[TensorStack], config: FitConfig) -> KruskalDecomposition:
    """
    Joint rank-``K`` decomposition of several stacks sharing one subject-factor matrix.

    For every component the stacks' residuals are fitted by :func:`fit_component`, each scale's projector is
    shrunk by the new mode, its weight ``d`` is the contraction of the residual with ``v, v, u`` and the
    rank-one term is deflated. If a residual becomes numerically zero before ``K`` components the fit is
    truncated and the reason is recorded in ``status``.

    :param data: Sequence[TensorStack]: One stack per scale, all with the same subjects
    :param config: FitConfig: Fit settings
    :return: KruskalDecomposition: The fitted decomposition
    :raises DimensionError: If the stacks disagree on ``N`` or ``K`` is too large
    """
    if not data:
        raise DimensionError("at least one stack is required")
    if len({x.N for x in data}) != 1:
        raise DimensionError(f"stacks disagree on the subject count: {[x.N for x in data]}")
    check_bounds(config, [x.P for x in data], data[0].N)
    stacks = [normalize_stack(x, config.normalization) for x in data]
    return fit_stacks(stacks, config, list(data[0].subjects), [None] * len(stacks), None)


def single_scale_pca(x: TensorStack, config: FitConfig) -> KruskalDecomposition:
    """
    Single-scale tensor power method: :func:`multiscale_pca` on one stack.

    :param x: TensorStack: The stack
    :param config: FitConfig: Fit settings
    :return: KruskalDecomposition: Decomposition with one scale
    """
    return multiscale_pca([x], config)


def cpve(decomp: KruskalDecomposition, data: Sequence[TensorStack], k: int,
         mask: Optional[AvailabilityMask] = None) -> float:
    """
    Multi-scale cumulative proportion of variance explained by the first ``k`` components.

    For every scale the stack is projected on the span of the first ``k`` network modes in both node modes and
    on the span of the first ``k`` subject factors in the subject mode; the result is the smallest ratio of
    projected to total Frobenius norm. ``k = 0`` would give 0 and is not accepted.

    :param decomp: KruskalDecomposition: Fitted decomposition
    :param data: Sequence[TensorStack]: The stacks it was fitted on, in the same order
    :param k: int: Number of leading components, ``1 <= k <= K``
    :param mask: AvailabilityMask | None: Availability of each subject when stacks hold subsets of subjects
    :return: float: Value in ``[0, 1]``
    :raises DimensionError: If ``k`` is out of range or the data does not match
    """
    if not 1 <= k <= decomp.K:
        raise DimensionError(f"k must lie in [1, {decomp.K}], got {k}")
    if len(data) != len(decomp.scales):
        raise DimensionError(f"{len(data)} stacks for {len(decomp.scales)} fitted scales")
    ratios = []
    for j, (x, modes) in enumerate(zip(data, decomp.scales)):
        U_k = decomp.U[:, :k] if mask is None else decomp.U[mask.available(j), :k]
        if U_k.shape[0] != x.N or modes.V.shape[0] != x.P:
            raise DimensionError(f"stack {x.scale_id} does not match the fitted dimensions")
        V_k = modes.V[:, :k]
        p_v = V_k @ V_k.T
        p_u = U_k @ np.linalg.pinv(U_k)
        projected = mode_n_multiply_matrix(mode_n_multiply_matrix(mode_n_multiply_matrix(x, p_v, 1), p_v, 2), p_u, 3)
        total = frobenius_norm(x)
        ratios.append(frobenius_norm(projected) / total if total > 0 else 1.0)
    return float(min(ratios))


def reconstruct(decomp: KruskalDecomposition, scale_id: str, k: int) -> TensorStack:
    """
    Rebuild a scale from its first ``k`` rank-one terms ``sum_h d_h v_h o v_h o u_h``.

    :param decomp: KruskalDecomposition: Fitted decomposition
    :param scale_id: str: Scale to rebuild
    :param k: int: Number of components, ``0 <= k <= K``
    :return: TensorStack: ``P x P x N`` reconstruction over all subjects
    :raises InvalidInputError: If the scale is unknown
    :raises DimensionError: If ``k`` is out of range
    """
    modes = decomp.scale(scale_id)
    if not 0 <= k <= decomp.K:
        raise DimensionError(f"k must lie in [0, {decomp.K}], got {k}")
    values = np.einsum("h,ah,bh,ih->abi", modes.d[:k], modes.V[:, :k], modes.V[:, :k], decomp.U[:, :k])
    return TensorStack(scale_id=scale_id, values=values, subjects=decomp.subjects)
