import logging
from contextlib import contextmanager
from typing import Iterator, Optional

import numpy as np
import typer
from pydantic import ValidationError

from src.conf.config import configure_logging
from src.exceptions import DegenerateError, DimensionError, InvalidInputError
from src.schemas import KruskalDecomposition, TraitTable

logger = logging.getLogger(__name__)

EXIT_DEGENERATE = 1
EXIT_USAGE = 2


@contextmanager
def exit_on_error(log_level: Optional[str] = None) -> Iterator[None]:
    """
    Configure logging for one command and turn library errors into exit codes.

    Degenerate numerical problems exit with 1; invalid input, invalid settings and unwritable paths exit
    with 2. The message goes to stderr.

    :param log_level: str | None: Logging level for this invocation
    :return: Iterator[None]
    """
    configure_logging(log_level)
    try:
        yield
    except DegenerateError as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_DEGENERATE)
    except (InvalidInputError, DimensionError, ValidationError, OSError) as e:
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_USAGE)


def parse_ints(value: str, option: str) -> list[int]:
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected comma-separated integers, got {value!r}", param_hint=option)


def factors_for(decomp: KruskalDecomposition, subjects: list[str], k: Optional[int] = None) -> np.ndarray:
    """Rows of ``U`` in the given subject order, limited to the first ``k`` factors."""
    position = {s: i for i, s in enumerate(decomp.subjects)}
    missing = [s for s in subjects if s not in position]
    if missing:
        raise InvalidInputError(f"{len(missing)} subjects have no factors, e.g. {missing[:3]}")
    if k is not None and not 1 <= k <= decomp.K:
        raise DimensionError(f"--k must lie in [1, {decomp.K}], got {k}")
    return decomp.U[[position[s] for s in subjects], :k]


def traits_for(traits: TraitTable, subjects: list[str]) -> TraitTable:
    """Reorder a trait table to the given subjects; subjects without a row get missing values."""
    position = {s: i for i, s in enumerate(traits.subjects)}
    absent = [s for s in subjects if s not in position]
    if absent:
        logger.warning("%d subjects have no trait row and count as missing", len(absent))
    rows = np.array([position.get(s, -1) for s in subjects])
    values = {}
    for name in traits.names:
        column = np.append(traits.trait(name), np.nan)
        values[name] = column[rows]
    return TraitTable(subjects=subjects, values=values, kinds=traits.kinds, categories=traits.categories)
