import logging
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from src.exceptions import InvalidInputError
from src.schemas import AvailabilityMask, Edge, KruskalDecomposition, ScaleModes, TraitTable

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _read_csv(path: Path | str, required: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={column: str for column in required if column.endswith("id")},
                            float_precision="round_trip", keep_default_na=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise InvalidInputError(f"cannot read {path}: {e}") from e
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise InvalidInputError(f"{path} lacks the columns {missing}")
    return frame


def write_table(frame: pd.DataFrame, path: Path | str) -> Path:
    """
    Write a table as CSV with lossless float formatting, so equal tables give identical files.

    :param frame: pd.DataFrame: The table
    :param path: Path | str: Destination
    :return: Path: The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_matrix(matrix: np.ndarray, path: Path | str, labels: list[str], label: str, prefix: str) -> Path:
    frame = pd.DataFrame(np.asarray(matrix), columns=[f"{prefix}{k + 1}" for k in range(np.shape(matrix)[1])])
    frame.insert(0, label, labels)
    return write_table(frame, path)


def _read_matrix(path: Path, label: str) -> tuple[list[str], np.ndarray]:
    frame = _read_csv(path, [label])
    values = frame.drop(columns=[label])
    return frame[label].astype(str).tolist(), values.to_numpy(dtype=np.float64).reshape(len(frame), values.shape[1])


def write_mask(mask: AvailabilityMask, path: Path | str) -> Path:
    rows = [{"subject_id": s, "scale_id": scale, "available": int(mask.gamma[i, j])}
            for i, s in enumerate(mask.subjects) for j, scale in enumerate(mask.scale_ids)]
    return write_table(pd.DataFrame(rows, columns=["subject_id", "scale_id", "available"]), path)


def read_mask(path: Path | str) -> AvailabilityMask:
    """
    Read an availability mask from long-format CSV ``subject_id,scale_id,available``.

    Subjects and scales keep their order of first appearance; every pair must be listed exactly once.

    :param path: Path | str: The CSV file
    :return: AvailabilityMask: The mask
    :raises InvalidInputError: On missing or duplicated pairs or an invalid mask
    """
    frame = _read_csv(path, ["subject_id", "scale_id", "available"])
    if frame.duplicated(["subject_id", "scale_id"]).any():
        raise InvalidInputError(f"{path} lists a subject/scale pair twice")
    subjects = list(dict.fromkeys(frame["subject_id"]))
    scales = list(dict.fromkeys(frame["scale_id"]))
    table = frame.pivot(index="subject_id", columns="scale_id", values="available").reindex(index=subjects,
                                                                                          columns=scales)
    if table.isna().any().any():
        raise InvalidInputError(f"{path} does not list every subject/scale pair")
    try:
        return AvailabilityMask(gamma=table.to_numpy(dtype=np.int64), subjects=subjects, scale_ids=scales)
    except ValidationError as e:
        raise InvalidInputError(f"invalid mask in {path}: {e}") from e


def read_traits(path: Path | str, kinds_path: Optional[Path | str] = None) -> TraitTable:
    """
    Read traits from ``subject_id,<trait1>,<trait2>,...`` with empty cells for missing values, and optionally
    their kinds from a ``trait,kind,category`` sidecar. Traits absent from the sidecar are continuous.

    :param path: Path | str: Trait CSV
    :param kinds_path: Path | str | None: Kind sidecar CSV
    :return: TraitTable: The traits
    :raises InvalidInputError: On non-numeric values or invalid traits
    """
    frame = _read_csv(path, ["subject_id"])
    kinds, categories = {}, {}
    if kinds_path is not None:
        sidecar = _read_csv(kinds_path, ["trait", "kind"])
        for row in sidecar.itertuples(index=False):
            kinds[str(row.trait)] = row.kind
            category = getattr(row, "category", None)
            if isinstance(category, str):
                categories[str(row.trait)] = category
    values = {}
    for column in frame.columns.drop("subject_id"):
        try:
            values[str(column)] = pd.to_numeric(frame[column], errors="raise").to_numpy(dtype=np.float64)
        except (ValueError, TypeError) as e:
            raise InvalidInputError(f"trait {column!r} has non-numeric values") from e
    unknown = set(kinds) - set(values)
    if unknown:
        logger.warning("kind sidecar lists traits absent from %s: %s", path, sorted(unknown))
        kinds = {k: v for k, v in kinds.items() if k in values}
    try:
        return TraitTable(subjects=frame["subject_id"].astype(str).tolist(), values=values, kinds=kinds,
                          categories=categories)
    except ValidationError as e:
        raise InvalidInputError(f"invalid traits in {path}: {e}") from e


def write_edges(edges: list[Edge], path: Path | str) -> Path:
    frame = pd.DataFrame([edge.model_dump() for edge in edges], columns=["node_a", "node_b", "value"])
    return write_table(frame, path)


def write_decomposition(decomp: KruskalDecomposition, directory: Path | str, manifest: dict[str, Any]) -> Path:
    """
    Write ``U.csv``, one ``V_<scale>.csv`` per scale, ``d.csv`` and ``manifest.yaml`` into a directory.

    The manifest gets the scale order, objective traces, convergence flags and status added to the
    caller's entries.

    :param decomp: KruskalDecomposition: The decomposition
    :param directory: Path | str: Output directory, created when missing
    :param manifest: dict: Run settings and results to record
    :return: Path: The directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(decomp.U, directory / "U.csv", list(decomp.subjects), "subject_id", "u")
    for scale in decomp.scales:
        write_matrix(scale.V, directory / f"V_{scale.scale_id}.csv",
                     [str(a) for a in range(scale.V.shape[0])], "node", "v")
    write_matrix(np.array([scale.d for scale in decomp.scales]).reshape(len(decomp.scales), decomp.K),
                 directory / "d.csv", decomp.scale_ids, "scale_id", "d")
    record = {**manifest, "scales": decomp.scale_ids, "objective_trace": decomp.objective_trace,
              "converged": decomp.converged, "status": decomp.status}
    (directory / "manifest.yaml").write_text(yaml.safe_dump(record, sort_keys=True), encoding="utf-8")
    return directory


def read_manifest(directory: Path | str) -> dict[str, Any]:
    path = Path(directory) / "manifest.yaml"
    try:
        return yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise InvalidInputError(f"cannot read {path}: {e}") from e


def read_decomposition(directory: Path | str) -> KruskalDecomposition:
    """
    Load a decomposition written by :func:`write_decomposition`; its invariants are checked on load.

    :param directory: Path | str: The directory
    :return: KruskalDecomposition: The decomposition
    :raises InvalidInputError: If files are missing or the invariants fail
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    subjects, U = _read_matrix(directory / "U.csv", "subject_id")
    scale_ids, d = _read_matrix(directory / "d.csv", "scale_id")
    if scale_ids != [str(s) for s in manifest.get("scales", scale_ids)]:
        raise InvalidInputError(f"d.csv and the manifest in {directory} disagree on the scales")
    scales = []
    for j, scale_id in enumerate(scale_ids):
        _, V = _read_matrix(directory / f"V_{scale_id}.csv", "node")
        scales.append(ScaleModes(scale_id=scale_id, d=d[j], V=V))
    try:
        return KruskalDecomposition(scales=scales, U=U, subjects=subjects,
                                    objective_trace=manifest.get("objective_trace", []),
                                    converged=manifest.get("converged", []), status=manifest.get("status", []))
    except ValidationError as e:
        raise InvalidInputError(f"decomposition in {directory} violates its invariants: {e}") from e
