import logging

from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler


class Settings(BaseSettings):
    LOG_LEVEL: str = "INFO"

    RESTARTS: int = 5
    MAX_ITERS: int = 200
    TOL: float = 1e-8
    EIG_METHOD: str = "lapack"

    PERMUTATIONS: int = 10_000
    FDR_Q: float = 0.05
    TOP_EDGES: int = 100
    S_VARIANT: str = "squared"
    LDA_SHRINKAGE: float = 1e-6

    SPLITS: int = 100
    TRAIN_FRAC: float = 0.7
    N_FACTORS: int = 70
    CV_FOLDS: int = 5
    RIDGE_GRID: list[float] = [10.0 ** (e / 2) for e in range(-6, 7)]

    model_config = SettingsConfigDict(env_prefix="MGPCA_", env_file=".env", env_file_encoding="utf-8",
                                      extra="ignore")


settings = Settings()


def configure_logging(level: str | None = None) -> None:
    """
    Route library logging through a rich handler on stderr.

    Library modules only create loggers; this is called once per CLI invocation.

    :param level: str | None: Logging level name, defaults to ``settings.LOG_LEVEL``
    :return: None
    """
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    logging.basicConfig(level=(level or settings.LOG_LEVEL).upper(), format="%(message)s",
                        datefmt="[%X]", handlers=[handler], force=True)
