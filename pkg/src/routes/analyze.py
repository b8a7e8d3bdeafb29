import logging
import re
from pathlib import Path
from typing import Annotated, Optional

import typer

from src.conf.config import settings
from src.exceptions import InvalidInputError
from src.repository.tables import read_decomposition, read_traits, write_edges, write_table
from src.routes.common import exit_on_error, factors_for, traits_for
from src.schemas import MMDConfig, PredictionConfig
from src.services import analysis as analysis_service

logger = logging.getLogger(__name__)

router = typer.Typer()


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


@router.command("delta")
def delta(
    decomposition: Annotated[Path, typer.Option(help="Decomposition directory", exists=True, file_okay=False)],
    traits: Annotated[Path, typer.Option(help="Trait CSV", exists=True, dir_okay=False)],
    trait: Annotated[str, typer.Option(help="Trait to map")],
    out: Annotated[Path, typer.Option(help="Output directory", file_okay=False)],
    kinds: Annotated[Optional[Path], typer.Option(help="Trait kind sidecar CSV", exists=True,
                                                  dir_okay=False)] = None,
    scale: Annotated[Optional[list[str]], typer.Option(help="Scale to map (repeatable); all by default")] = None,
    k: Annotated[Optional[int], typer.Option("--k", help="Leading factors used; all by default")] = None,
    top: Annotated[int, typer.Option(help="Edges kept per scale")] = settings.TOP_EDGES,
    s_variant: Annotated[str, typer.Option(help="squared or unsquared scaling")] = settings.S_VARIANT,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    """
    Map a trait onto connectivity changes and write the strongest edges of every scale.

    Writes delta_<trait>_<scale>.csv with columns node_a,node_b,value (0-based nodes).
    """
    with exit_on_error(log_level):
        if s_variant not in ("squared", "unsquared"):
            raise InvalidInputError(f"--s-variant must be squared or unsquared, got {s_variant!r}")
        decomp = read_decomposition(decomposition)
        table = traits_for(read_traits(traits, kinds), list(decomp.subjects))
        y = table.trait(trait)
        U = factors_for(decomp, list(decomp.subjects), k)
        w, _ = analysis_service.trait_direction(U, y, table.kinds.get(trait, "continuous"), settings.LDA_SHRINKAGE)
        out.mkdir(parents=True, exist_ok=True)
        for scale_id in scale or decomp.scale_ids:
            network = analysis_service.thresholded(
                analysis_service.delta_network(decomp, w, scale_id, y, s_variant), top)
            write_edges(network.edges, out / f"delta_{_safe(trait)}_{_safe(scale_id)}.csv")
            logger.info("scale %s: s = %.6g, %d edges kept", scale_id, network.s, network.retained)


@router.command("mmd")
def mmd(
    single: Annotated[Path, typer.Option(help="Single-scale decomposition directory", exists=True,
                                         file_okay=False)],
    multi: Annotated[Path, typer.Option(help="Multi-scale decomposition directory", exists=True,
                                        file_okay=False)],
    traits: Annotated[Path, typer.Option(help="Trait CSV", exists=True, dir_okay=False)],
    out: Annotated[Path, typer.Option(help="Output CSV", dir_okay=False)],
    kinds: Annotated[Optional[Path], typer.Option(help="Trait kind sidecar CSV", exists=True,
                                                  dir_okay=False)] = None,
    k: Annotated[Optional[int], typer.Option("--k", help="Leading factors compared; all by default")] = None,
    permutations: Annotated[int, typer.Option(help="Relabelings per test")] = settings.PERMUTATIONS,
    fdr: Annotated[float, typer.Option(help="Benjamini-Hochberg level")] = settings.FDR_Q,
    seed: Annotated[int, typer.Option(help="Seed of the relabelings")] = 0,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    """
    Test every trait's upper against lower quartile group in both factor sets.

    Writes trait,p_single,p_multi,reject_single,reject_multi with rejections at the --fdr level.
    """
    with exit_on_error(log_level):
        config = MMDConfig(permutations=permutations, q=fdr, k=k, seed=seed)
        decomps = {"single": read_decomposition(single), "multi": read_decomposition(multi)}
        table = read_traits(traits, kinds)
        factor_sets = {name: factors_for(d, list(table.subjects), k) for name, d in decomps.items()}
        result = analysis_service.mmd_trait_study(factor_sets, table, config)
        write_table(result, out)
        for note in result.attrs.get("notes", []):
            typer.echo(note, err=True)


def _models(values: list[str]) -> dict[str, Path]:
    models = {}
    for value in values:
        name, sep, path = value.partition("=")
        if not sep or not name or not path:
            raise typer.BadParameter(f"expected NAME=DIRECTORY, got {value!r}", param_hint="--model")
        if name in models:
            raise typer.BadParameter(f"model name {name!r} given twice", param_hint="--model")
        models[name] = Path(path)
    return models


@router.command("predict")
def predict(
    model: Annotated[list[str], typer.Option(help="NAME=DIRECTORY of a decomposition (repeatable); "
                                                  "the first is the reference")],
    traits: Annotated[Path, typer.Option(help="Trait CSV", exists=True, dir_okay=False)],
    out: Annotated[Path, typer.Option(help="Output CSV", dir_okay=False)],
    kinds: Annotated[Optional[Path], typer.Option(help="Trait kind sidecar CSV", exists=True,
                                                  dir_okay=False)] = None,
    factors: Annotated[int, typer.Option(help="Leading factors used by the ridge models")] = settings.N_FACTORS,
    lam: Annotated[Optional[float], typer.Option("--lambda", help="Fixed ridge penalty")] = None,
    cv: Annotated[bool, typer.Option(
        "--cv", help="No-op that states the default, a cross-validated penalty; conflicts with --lambda")] = False,
    splits: Annotated[int, typer.Option(help="Random train/test splits")] = settings.SPLITS,
    train_frac: Annotated[float, typer.Option(help="Training fraction of each split")] = settings.TRAIN_FRAC,
    seed: Annotated[int, typer.Option(help="Seed of the splits")] = 0,
    log_level: Annotated[Optional[str], typer.Option(help="Logging level")] = None,
):
    """
    Compare ridge prediction of every trait from several factor sets.

    Writes the median test MSE of every model and the relative change of the reference against the others.
    """
    with exit_on_error(log_level):
        if lam is not None and cv:
            raise InvalidInputError("--lambda and --cv are mutually exclusive")
        models = _models(model)
        config = PredictionConfig(n_factors=factors, splits=splits, train_frac=train_frac, lam=lam,
                                  grid=settings.RIDGE_GRID, cv_folds=settings.CV_FOLDS, seed=seed)
        table = read_traits(traits, kinds)
        matrices = {name: factors_for(read_decomposition(path), list(table.subjects))
                    for name, path in models.items()}
        result = analysis_service.prediction_study(matrices, table, config)
        write_table(result, out)
        for note in result.attrs.get("notes", []):
            typer.echo(note, err=True)
