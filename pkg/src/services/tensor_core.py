import logging
from typing import Union

import numpy as np
import scipy.linalg

from src.exceptions import DegenerateError, DimensionError, InvalidInputError
from src.schemas import EigMethod, Normalization, SymmetricMatrix, TensorStack

logger = logging.getLogger(__name__)

TensorLike = Union[TensorStack, np.ndarray]
MatrixLike = Union[SymmetricMatrix, np.ndarray]

POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


def as_array(x: TensorLike | MatrixLike) -> np.ndarray:
    return x.values if isinstance(x, (TensorStack, SymmetricMatrix)) else np.asarray(x, dtype=np.float64)


def inner_product(a: TensorLike, b: TensorLike) -> float:
    """
    Inner product of two tensors: the sum over all entries of their elementwise product.

    :param a: TensorLike: First tensor
    :param b: TensorLike: Second tensor with identical dimensions
    :return: float: The inner product
    :raises DimensionError: If the shapes differ
    """
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise DimensionError(f"cannot take the inner product of shapes {a.shape} and {b.shape}")
    return float(np.vdot(a, b))


def frobenius_norm(x: TensorLike) -> float:
    """
    Frobenius norm induced by :func:`inner_product`.

    :param x: TensorLike: The tensor
    :return: float: ``sqrt(<x, x>)``
    """
    return float(np.sqrt(inner_product(x, x)))


def _check_mode(x: np.ndarray, n: int) -> None:
    if n not in (1, 2, 3) or x.ndim != 3:
        raise DimensionError(f"mode must be 1, 2 or 3 on a 3-mode tensor, got mode {n} on {x.ndim} modes")


def mode_n_multiply_vector(x: TensorLike, v: np.ndarray, n: int) -> np.ndarray:
    """
    Contract mode ``n`` of a 3-mode tensor with a vector.

    The contracted mode disappears, so a ``P x P x N`` stack contracted on mode 3 gives the symmetric
    ``P x P`` matrix ``sum_i v_i X_i`` and contracted on mode 1 gives a ``P x N`` matrix.

    :param x: TensorLike: The tensor
    :param v: np.ndarray: Vector whose length equals the size of mode ``n``
    :param n: int: Mode index, 1-based
    :return: np.ndarray: The contracted matrix
    :raises DimensionError: On a length mismatch or an invalid mode
    """
    x, v = as_array(x), np.asarray(v, dtype=np.float64)
    _check_mode(x, n)
    if v.shape != (x.shape[n - 1],):
        raise DimensionError(f"vector of length {v.shape} cannot contract mode {n} of size {x.shape[n - 1]}")
    return np.tensordot(x, v, axes=([n - 1], [0]))


def mode_n_multiply_matrix(x: TensorLike, m: np.ndarray, n: int) -> np.ndarray:
    """
    Multiply mode ``n`` of a 3-mode tensor by a ``J x I_n`` matrix, replacing that mode by ``J``.

    :param x: TensorLike: The tensor
    :param m: np.ndarray: Matrix whose column count equals the size of mode ``n``
    :param n: int: Mode index, 1-based
    :return: np.ndarray: The product tensor
    :raises DimensionError: On a size mismatch or an invalid mode
    """
    x, m = as_array(x), np.asarray(m, dtype=np.float64)
    _check_mode(x, n)
    if m.ndim != 2 or m.shape[1] != x.shape[n - 1]:
        raise DimensionError(f"matrix of shape {m.shape} cannot multiply mode {n} of size {x.shape[n - 1]}")
    return np.moveaxis(np.tensordot(m, x, axes=([1], [n - 1])), 0, n - 1)


def contract_pair(x: TensorLike, v: np.ndarray) -> np.ndarray:
    """Length-``N`` vector ``X x_1 v x_2 v``."""
    x, v = as_array(x), np.asarray(v, dtype=np.float64)
    if v.shape != (x.shape[0],):
        raise DimensionError(f"vector of length {v.shape} cannot contract modes of size {x.shape[0]}")
    return np.einsum("abi,a,b->i", x, v, v)


def rank_one_tensor(v: np.ndarray, u: np.ndarray, d: float, scale_id: str = "rank-one") -> TensorStack:
    """
    Build ``d * v o v o u``; every slice is symmetric by construction.

    :param v: np.ndarray: Network mode of length ``P``
    :param u: np.ndarray: Subject factor of length ``N``
    :param d: float: Weight
    :param scale_id: str: Label of the returned stack
    :return: TensorStack: The rank-one stack
    """
    v, u = np.asarray(v, dtype=np.float64), np.asarray(u, dtype=np.float64)
    return TensorStack(scale_id=scale_id, values=d * np.einsum("a,b,i->abi", v, v, u))


def normalize_stack(x: TensorStack, mode: Normalization) -> TensorStack:
    """
    Rescale a stack: ``frobenius`` divides by the stack norm, ``slice`` divides every slice by its own norm,
    ``max`` divides by the largest absolute entry and ``none`` returns the stack unchanged.

    :param x: TensorStack: The stack
    :param mode: Normalization: The normalization rule
    :return: TensorStack: The rescaled stack
    :raises DegenerateError: If the stack is entirely zero
    """
    if mode == "none":
        return x
    values = x.values
    if not np.any(values):
        raise DegenerateError(f"cannot normalize the all-zero stack {x.scale_id}")
    if mode == "frobenius":
        values = values / frobenius_norm(values)
    elif mode == "max":
        values = values / np.max(np.abs(values))
    else:
        norms = np.sqrt(np.einsum("abi,abi->i", values, values))
        values = values / np.where(norms > 0, norms, 1.0)
    return TensorStack(scale_id=x.scale_id, values=values, subjects=x.subjects)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its entry of largest absolute value (lowest index on ties) is nonnegative."""
    v = np.asarray(v, dtype=np.float64)
    if not v.size:
        return v
    magnitude = np.abs(v)
    k = int(np.flatnonzero(magnitude >= magnitude.max() * (1 - 1e-12))[0])
    return -v if v[k] < 0 else v


def projector(V: np.ndarray | None, dim: int) -> np.ndarray:
    """Orthogonal projector ``I - V V^T`` onto the complement of the orthonormal columns of ``V``."""
    if V is None or V.size == 0:
        return np.eye(dim)
    return np.eye(dim) - V @ V.T


def check_projector(p: np.ndarray, dim: int | None = None, atol: float = 1e-8) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or (dim is not None and p.shape[0] != dim):
        raise DimensionError(f"projector of shape {p.shape} does not match dimension {dim}")
    if not np.allclose(p, p.T, atol=atol) or not np.allclose(p @ p, p, atol=atol):
        raise InvalidInputError("matrix is not an orthogonal projector")
    return p


def _top_eigenspace_vector(w: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    top = w[-1]
    multiplicity = int(np.sum(w >= top - 1e-10 * max(1.0, abs(top))))
    if multiplicity == 1:
        return vecs[:, -1]
    # Degenerate top eigenvalue: take the projection of the standard basis vector with the
    # largest overlap (lowest index on ties) onto the eigenspace.
    basis = vecs[:, -multiplicity:]
    overlap = np.linalg.norm(basis, axis=1)
    k = int(np.flatnonzero(overlap >= overlap.max() - 1e-12)[0])
    vector = basis @ basis[k]
    return vector / np.linalg.norm(vector)


def power_iteration(m: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> tuple[float, np.ndarray]:
    """
    Shifted power iteration for the algebraically largest eigenpair of a symmetric matrix.

    The shift is the Gershgorin bound so the iterated matrix is positive semidefinite. The start vector is
    its column of largest norm, which makes the result deterministic.

    :param m: np.ndarray: Symmetric matrix
    :param tol: float: Stop once successive unit iterates differ by less than this (chord length)
    :param max_iter: int: Iteration cap
    :return: tuple[float, np.ndarray]: Eigenvalue and unit eigenvector
    """
    n = m.shape[0]
    shift = float(np.max(np.sum(np.abs(m), axis=1)))
    a = m + shift * np.eye(n)
    norms = np.linalg.norm(a, axis=0)
    if norms.max() == 0:
        return 0.0, np.eye(n)[0]
    x = a[:, int(np.flatnonzero(norms >= norms.max() - 1e-12 * norms.max())[0])]
    x = x / np.linalg.norm(x)
    for iteration in range(max_iter):
        y = a @ x
        y /= np.linalg.norm(y)
        step = np.linalg.norm(y - x)
        x = y
        if step < tol:
            break
    else:
        logger.warning("power iteration stopped at the %d iteration cap (last step %.3e)", max_iter, step)
    return float(x @ m @ x), x


def eig_max(m: MatrixLike, method: EigMethod = "lapack") -> tuple[float, np.ndarray]:
    """
    Eigenpair of a symmetric matrix with the algebraically largest eigenvalue.

    The eigenvector has unit norm and its entry of largest absolute value is nonnegative (lowest index on
    ties). When the top eigenvalue is repeated, the returned vector is the normalized projection onto the
    eigenspace of the standard basis vector with the largest overlap, so the identity matrix gives ``e_1``.

    :param m: MatrixLike: Symmetric matrix
    :param method: EigMethod: ``"lapack"`` for a dense symmetric solver, ``"power"`` for shifted power iteration
    :return: tuple[float, np.ndarray]: Eigenvalue and eigenvector
    :raises InvalidInputError: If the matrix is not finite
    """
    m = as_array(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("matrix contains non-finite values")
    m = (m + m.T) / 2
    if method == "power":
        value, vector = power_iteration(m)
    else:
        w, vecs = scipy.linalg.eigh(m, check_finite=False)
        value, vector = float(w[-1]), _top_eigenspace_vector(w, vecs)
    return value, canonical_sign(vector)
