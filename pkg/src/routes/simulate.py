import logging
from pathlib import Path
from typing import Annotated, Optional

import typer
import yaml

from src.conf.config import settings
from src.repository.tables import write_matrix, write_table
from src.repository.tensors import write_tensor
from src.routes.common import exit_on_error, parse_ints
from src.schemas import FitConfig, SimulationConfig, StudyConfig
from src.services import simulation as simulation_service

logger = logging.getLogger(__name__)

router = typer.Typer()


def _parcellations(value: str) -> list[tuple[int, int]]:
    try:
        pairs = [tuple(int(n) for n in part.lower().split("x")) for part in value.split(",") if part.strip()]
    except ValueError:
        pairs = []
    if not pairs or any(len(pair) != 2 for pair in pairs):
        raise typer.BadParameter(f"expected LEFTxRIGHT pairs such as 1x1,2x4, got {value!r}",
                                 param_hint="--parcellations")
    return pairs


@router.command("simulate")
def simulate(
    out: Annotated[Path, typer.Option(help="Output directory", file_okay=False)],
    scales: Annotated[str, typer.Option(help="Comma-separated node counts, one per scale")] = "25,50,75",
    n: Annotated[int, typer.Option("--n", help="Number of subjects")] = 100,
    rank: Annotated[int, typer.Option(help="Planted rank")] = 10,
    structure: Annotated[str, typer.Option(help="random or sparse network modes")] = "random",
    sparsity: Annotated[float, typer.Option(help="Fraction of mode entries zeroed for sparse modes")] = 0.75,
    noise: Annotated[str, typer.Option(help="none, normal or rademacher")] = "none",
    flip_mode: Annotated[str, typer.Option(help="sign or toggle for rademacher noise")] = "sign",
    normalization: Annotated[str, typer.Option(help="none, frobenius or max, applied before noise")] = "frobenius",
    seed: Annotated[int, typer.Option(help="Random seed")] = 0,
    parcellations: Annotated[Optional[str], typer.Option(
        help="Nested parcellations as LEFTxRIGHT pairs (e.g. 1x1,2x4); replaces --scales")] = None,
    regions: Annotated[int, typer.Option(help="Base regions per hemisphere for --parcellations")] = 34,
    study: Annotated[bool, typer.Option("--study", help="Also run the variance-explained study grid")] = False,
    repetitions: Annotated[int, typer.Option(help="Study repetitions per cell")] = 10,
    max_k: Annotated[int, typer.Option(help="Largest number of components scored by the study")] = 10,
    restarts: Annotated[int, typer.Option(help="Restarts per component in the study fits")] = settings.RESTARTS,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    """
    Simulate a planted multi-scale population and write one tensor file per scale.

    Also writes the planted subject factors (U_true.csv), the planted modes (V_true_<scale>.csv) and a
    simulation.yaml manifest. With --study the variance-explained grid is written to study.csv.
    """
    with exit_on_error(log_level):
        config = SimulationConfig(scales=parse_ints(scales, "--scales"), N=n, true_rank=rank, structure=structure,
                                  sparsity=sparsity, noise=noise, flip_mode=flip_mode, normalization=normalization,
                                  seed=seed)
        if parcellations is not None:
            data = simulation_service.generate_parcellated(config, _parcellations(parcellations), regions)
        else:
            data = simulation_service.generate(config)

        out.mkdir(parents=True, exist_ok=True)
        for x in data.stacks:
            write_tensor(x, out / f"{x.scale_id}.tensor")
        subjects = list(data.stacks[0].subjects)
        write_matrix(data.U, out / "U_true.csv", subjects, "subject_id", "u")
        for modes in data.modes:
            write_matrix(modes.V, out / f"V_true_{modes.scale_id}.csv",
                         [str(a) for a in range(modes.V.shape[0])], "node", "v")
        manifest = {"simulation": config.model_dump(), "scales": [x.scale_id for x in data.stacks],
                    "noise": data.noise, "planted_d": {m.scale_id: float(m.d[0]) for m in data.modes}}
        if parcellations is not None:
            manifest["parcellations"] = [list(p) for p in _parcellations(parcellations)]
            manifest["regions"] = regions
        (out / "simulation.yaml").write_text(yaml.safe_dump(manifest, sort_keys=True), encoding="utf-8")
        logger.info("wrote %d tensor files to %s", len(data.stacks), out)

        if study:
            grid = StudyConfig(simulation=config, repetitions=repetitions, max_k=max_k,
                               fit=FitConfig(K=max_k, restarts=restarts, max_iters=settings.MAX_ITERS,
                                             tol=settings.TOL, seed=seed, eig_method=settings.EIG_METHOD))
            table = simulation_service.run_recovery_study(grid)
            write_table(table, out / "study.csv")
            for note in table.attrs.get("notes", []):
                typer.echo(note, err=True)
