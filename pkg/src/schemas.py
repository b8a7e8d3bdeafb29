from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import InvalidInputError

Normalization = Literal["none", "frobenius", "slice", "max"]
EigMethod = Literal["lapack", "power"]
TraitKind = Literal["continuous", "ordinal", "binary"]

MAGIC = "MGPCA1"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.flags.writeable = False
    return array


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class SymmetricMatrix(ArrayModel):
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def check_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("matrix contains non-finite values")
        scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
        if np.max(np.abs(values - values.T), initial=0.0) > 1e-8 * scale:
            raise ValueError("matrix is not symmetric")
        return _frozen((values + values.T) / 2)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class TensorStack(ArrayModel):
    """
    One scale of data: ``N`` symmetric ``P x P`` adjacency slices stored as a ``P x P x N`` array.

    Slices that are symmetric up to rounding are symmetrized on construction; anything else is rejected.
    """
    scale_id: str
    values: np.ndarray
    subjects: list[str] = Field(default_factory=list)

    @field_validator("values", mode="before")
    @classmethod
    def check_values(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != values.shape[1]:
            raise ValueError(f"expected a P x P x N array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("tensor contains non-finite values")
        swapped = values.transpose(1, 0, 2)
        scale = max(1.0, float(np.max(np.abs(values), initial=0.0)))
        if np.max(np.abs(values - swapped), initial=0.0) > 1e-8 * scale:
            raise ValueError("tensor slices are not symmetric")
        return _frozen((values + swapped) / 2)

    @model_validator(mode="before")
    @classmethod
    def default_subjects(cls, data):
        if isinstance(data, dict) and not data.get("subjects"):
            shape = np.shape(data.get("values"))
            data = {**data, "subjects": [str(i + 1) for i in range(shape[-1] if shape else 0)]}
        return data

    @model_validator(mode="after")
    def check_subjects(self):
        if len(self.subjects) != self.N:
            raise ValueError(f"{len(self.subjects)} subject ids for {self.N} slices")
        if len(set(self.subjects)) != len(self.subjects):
            raise ValueError("subject ids are not unique")
        return self

    @property
    def P(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[2]


class ScaleModes(ArrayModel):
    scale_id: str
    d: np.ndarray
    V: np.ndarray

    @field_validator("d", "V", mode="before")
    @classmethod
    def as_array(cls, values):
        return _frozen(values)


class KruskalDecomposition(ArrayModel):
    """
    Fitted multi-scale decomposition ``{d^(j), V^(j), U}``.

    Columns of every ``V`` are orthonormal within their scale and columns of ``U`` have unit norm.
    """
    scales: list[ScaleModes]
    U: np.ndarray
    subjects: list[str] = Field(default_factory=list)
    objective_trace: list[list[float]] = Field(default_factory=list)
    converged: list[bool] = Field(default_factory=list)
    status: list[str] = Field(default_factory=list)

    @field_validator("U", mode="before")
    @classmethod
    def as_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"U must be an N x K matrix, got shape {values.shape}")
        return _frozen(values)

    @model_validator(mode="before")
    @classmethod
    def default_subjects(cls, data):
        if isinstance(data, dict) and not data.get("subjects"):
            data = {**data, "subjects": [str(i + 1) for i in range(len(data.get("U", [])))]}
        return data

    @model_validator(mode="after")
    def check_invariants(self):
        k = self.U.shape[1]
        if len(self.subjects) != self.U.shape[0]:
            raise ValueError("subject ids do not match the rows of U")
        if k and np.max(np.abs(np.linalg.norm(self.U, axis=0) - 1.0)) > 1e-8:
            raise ValueError("columns of U must have unit norm")
        for scale in self.scales:
            if scale.V.shape[1] != k or scale.d.shape != (k,):
                raise ValueError(f"scale {scale.scale_id} does not carry {k} components")
            if k and np.max(np.abs(scale.V.T @ scale.V - np.eye(k))) > 1e-6:
                raise ValueError(f"network modes of scale {scale.scale_id} are not orthonormal")
        return self

    @property
    def K(self) -> int:
        return self.U.shape[1]

    @property
    def scale_ids(self) -> list[str]:
        return [scale.scale_id for scale in self.scales]

    def scale(self, scale_id: str) -> ScaleModes:
        for scale in self.scales:
            if scale.scale_id == scale_id:
                return scale
        raise InvalidInputError(f"unknown scale {scale_id!r}; fitted scales are {self.scale_ids}")


class FitConfig(BaseModel):
    K: int = Field(ge=1)
    restarts: int = Field(default=5, ge=1)
    max_iters: int = Field(default=200, ge=1)
    tol: float = Field(default=1e-8, gt=0)
    seed: int = 0
    init: Literal["hosvd", "random"] = "hosvd"
    normalization: Normalization = "none"
    eig_method: EigMethod = "lapack"


class ComponentFit(ArrayModel):
    u: np.ndarray
    vs: list[np.ndarray]
    terms: list[float]
    objective: float
    trace: list[float]
    converged: bool


class AvailabilityMask(ArrayModel):
    """Binary subject x scale matrix ``Gamma``; ``gamma[i, j] == 1`` when subject ``i`` was observed at scale ``j``."""
    gamma: np.ndarray
    subjects: list[str] = Field(default_factory=list)
    scale_ids: list[str] = Field(default_factory=list)

    @field_validator("gamma", mode="before")
    @classmethod
    def check_gamma(cls, gamma):
        gamma = np.asarray(gamma)
        if gamma.ndim != 2:
            raise ValueError("mask must be a subject x scale matrix")
        if not np.isin(gamma, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        gamma = gamma.astype(np.int8)
        if (gamma.sum(axis=1) == 0).any():
            raise ValueError(f"subjects {np.flatnonzero(gamma.sum(axis=1) == 0).tolist()} have no available scale")
        if (gamma.sum(axis=0) == 0).any():
            raise ValueError(f"scales {np.flatnonzero(gamma.sum(axis=0) == 0).tolist()} have no available subject")
        gamma.flags.writeable = False
        return gamma

    @model_validator(mode="before")
    @classmethod
    def default_labels(cls, data):
        if isinstance(data, dict):
            n, r = np.shape(data.get("gamma"))
            data = {**data, "subjects": data.get("subjects") or [str(i + 1) for i in range(n)],
                    "scale_ids": data.get("scale_ids") or [str(j + 1) for j in range(r)]}
        return data

    @model_validator(mode="after")
    def check_labels(self):
        n, r = self.gamma.shape
        if len(self.subjects) != n or len(self.scale_ids) != r:
            raise ValueError("mask labels do not match its shape")
        return self

    @property
    def is_complete(self) -> bool:
        return bool(self.gamma.all())

    def available(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.gamma[:, j])


class Imputation(ArrayModel):
    matrix: SymmetricMatrix
    observed: bool
    note: Optional[str] = None


class TraitTable(ArrayModel):
    subjects: list[str]
    values: dict[str, np.ndarray]
    kinds: dict[str, TraitKind] = Field(default_factory=dict)
    categories: dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="before")
    @classmethod
    def check_traits(cls, data):
        if not isinstance(data, dict):
            return data
        subjects = list(data.get("subjects", []))
        kinds = dict(data.get("kinds") or {})
        values = {}
        for name, column in dict(data.get("values", {})).items():
            column = np.array(column, dtype=np.float64, copy=True)
            if column.shape != (len(subjects),):
                raise ValueError(f"trait {name!r} has {column.shape} values for {len(subjects)} subjects")
            present = column[~np.isnan(column)]
            if present.size < 2:
                raise ValueError(f"trait {name!r} has fewer than 2 non-missing values")
            kind = kinds.setdefault(name, "continuous")
            if kind == "binary" and np.unique(present).size != 2:
                raise ValueError(f"binary trait {name!r} must take exactly two distinct values")
            column.flags.writeable = False
            values[name] = column
        return {**data, "values": values, "kinds": kinds}

    @property
    def names(self) -> list[str]:
        return list(self.values)

    def trait(self, name: str) -> np.ndarray:
        if name not in self.values:
            raise InvalidInputError(f"unknown trait {name!r}")
        return self.values[name]


class Edge(BaseModel):
    node_a: int
    node_b: int
    value: float


class DeltaNetwork(ArrayModel):
    scale_id: str
    matrix: SymmetricMatrix
    s: float
    retained: int = 0
    edges: list[Edge] = Field(default_factory=list)


class SimulationConfig(BaseModel):
    scales: list[int] = Field(default_factory=lambda: [25, 50, 75], min_length=1)
    N: int = Field(default=100, ge=1)
    true_rank: int = Field(default=10, ge=1)
    structure: Literal["random", "sparse"] = "random"
    sparsity: float = Field(default=0.75, ge=0, le=1)
    noise: Literal["none", "normal", "rademacher"] = "none"
    normal_sd_fraction: float = Field(default=1 / 3, ge=0)
    flip_fraction: float = Field(default=0.25, ge=0, le=1)
    flip_mode: Literal["sign", "toggle"] = "sign"
    # per-slice scaling cannot be carried by the planted weights
    normalization: Literal["none", "frobenius", "max"] = "frobenius"
    seed: int = 0

    @model_validator(mode="after")
    def check_rank(self):
        if self.true_rank > min(min(self.scales), self.N):
            raise ValueError(f"true_rank {self.true_rank} exceeds min(scales, N) = {min(min(self.scales), self.N)}")
        return self


class SyntheticDataset(ArrayModel):
    stacks: list[TensorStack]
    clean: list[TensorStack]
    U: np.ndarray
    modes: list[ScaleModes] = Field(default_factory=list)
    noise: dict = Field(default_factory=dict)


class PredictionConfig(BaseModel):
    n_factors: int = Field(default=70, ge=1)
    splits: int = Field(default=100, ge=1)
    train_frac: float = Field(default=0.7, gt=0, lt=1)
    lam: Optional[float] = Field(default=None, ge=0)
    grid: list[float] = Field(default_factory=lambda: [10.0 ** (e / 2) for e in range(-6, 7)])
    cv_folds: int = Field(default=5, ge=2)
    min_subjects: int = Field(default=10, ge=4)
    seed: int = 0


class MMDConfig(BaseModel):
    permutations: int = Field(default=10_000, ge=1)
    q: float = Field(default=0.05, gt=0, lt=1)
    k: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


class TensorFileHeader(BaseModel):
    magic: str = MAGIC
    scale_id: str
    P: int = Field(ge=1)
    N: int = Field(ge=1)
    subjects: list[str]
    dtype: Literal["<f8"] = "<f8"

    @model_validator(mode="after")
    def check_header(self):
        if self.magic != MAGIC:
            raise ValueError(f"bad magic {self.magic!r}")
        if len(self.subjects) != self.N:
            raise ValueError(f"header lists {len(self.subjects)} subjects but N = {self.N}")
        return self

    @property
    def payload_size(self) -> int:
        return self.P * self.P * self.N * 8


class StudyConfig(BaseModel):
    simulation: SimulationConfig = Field(default_factory=lambda: SimulationConfig(noise="normal"))
    structures: list[Literal["random", "sparse"]] = Field(default_factory=lambda: ["random", "sparse"])
    noises: list[Literal["none", "normal", "rademacher"]] = Field(default_factory=lambda: ["normal", "rademacher"])
    repetitions: int = Field(default=10, ge=1)
    max_k: int = Field(default=10, ge=1)
    fit: FitConfig = Field(default_factory=lambda: FitConfig(K=10))

    @model_validator(mode="after")
    def check_k(self):
        if self.max_k > min(min(self.simulation.scales), self.simulation.N):
            raise ValueError(f"max_k {self.max_k} exceeds the smallest scale or N")
        return self
