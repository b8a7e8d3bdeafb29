import logging
from pathlib import Path
from typing import Annotated, Optional

import typer

from src.conf.config import settings
from src.exceptions import InvalidInputError
from src.repository.tables import read_mask, write_decomposition
from src.repository.tensors import read_tensor, write_tensor
from src.routes.common import exit_on_error
from src.schemas import AvailabilityMask, FitConfig, TensorStack
from src.services import decomposition as decomposition_service
from src.services import missing as missing_service
from src.services.tensor_core import normalize_stack

logger = logging.getLogger(__name__)

router = typer.Typer()


def _order_by_mask(stacks: list[TensorStack], mask: AvailabilityMask) -> list[TensorStack]:
    by_id = {x.scale_id: x for x in stacks}
    if sorted(by_id) != sorted(mask.scale_ids) or len(by_id) != len(stacks):
        raise InvalidInputError(f"tensor files hold scales {sorted(by_id)}, the mask lists {mask.scale_ids}")
    ordered = [by_id[scale_id] for scale_id in mask.scale_ids]
    for j, x in enumerate(ordered):
        expected = [mask.subjects[i] for i in mask.available(j)]
        if list(x.subjects) != expected:
            raise InvalidInputError(f"subjects of scale {x.scale_id} do not match the mask's available subjects")
    return ordered


@router.command("decompose")
def decompose(
    files: Annotated[list[Path], typer.Argument(help="Tensor files, one per scale", exists=True, dir_okay=False)],
    out: Annotated[Path, typer.Option(help="Output directory", file_okay=False)],
    k: Annotated[int, typer.Option("--k", help="Number of components")],
    restarts: Annotated[int, typer.Option(help="Restarts per component")] = settings.RESTARTS,
    max_iters: Annotated[int, typer.Option(help="Sweep cap per restart")] = settings.MAX_ITERS,
    tol: Annotated[float, typer.Option(help="Relative objective change that stops a restart")] = settings.TOL,
    seed: Annotated[int, typer.Option(help="Seed of the random restarts")] = 0,
    init: Annotated[str, typer.Option(help="hosvd or random first restart")] = "hosvd",
    normalization: Annotated[str, typer.Option(help="none, frobenius, slice or max")] = "none",
    eig_method: Annotated[str, typer.Option(help="lapack or power")] = settings.EIG_METHOD,
    mask: Annotated[Optional[Path], typer.Option(help="Availability mask CSV for missing scans",
                                                 exists=True, dir_okay=False)] = None,
    impute: Annotated[bool, typer.Option("--impute", help="Write full stacks with imputed slices")] = False,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    """
    Fit the multi-scale decomposition of the given stacks.

    Writes U.csv, V_<scale>.csv, d.csv and manifest.yaml (settings, objective traces, CPVE per k). Without
    --mask every file must list the same subjects in the same order.
    """
    with exit_on_error(log_level):
        config = FitConfig(K=k, restarts=restarts, max_iters=max_iters, tol=tol, seed=seed, init=init,
                           normalization=normalization, eig_method=eig_method)
        stacks = [read_tensor(path) for path in files]
        availability = None
        if mask is not None:
            availability = read_mask(mask)
            stacks = _order_by_mask(stacks, availability)
            decomp = missing_service.fit_missing(stacks, availability, config)
        else:
            if impute:
                raise InvalidInputError("--impute needs --mask")
            if any(list(x.subjects) != list(stacks[0].subjects) for x in stacks):
                raise InvalidInputError("tensor files list different subjects; pass --mask for missing scans")
            decomp = decomposition_service.multiscale_pca(stacks, config)

        prepared = [normalize_stack(x, config.normalization) for x in stacks]
        curve = [decomposition_service.cpve(decomp, prepared, h, availability) for h in range(1, decomp.K + 1)]
        manifest = {"config": config.model_dump(), "inputs": [path.name for path in files],
                    "mask": mask.name if mask is not None else None, "cpve": curve}
        write_decomposition(decomp, out, manifest)
        for note in decomp.status:
            typer.echo(note, err=True)

        if impute:
            for j, x in enumerate(stacks):
                full = missing_service.complete_stack(decomp, availability, prepared[j], j)
                write_tensor(full, out / f"imputed_{x.scale_id}.tensor")
        logger.info("wrote %d components for %d scales to %s", decomp.K, len(stacks), out)
