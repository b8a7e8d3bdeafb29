import typer
from dotenv import load_dotenv

from src.routes import analyze, decompose, simulate

load_dotenv()

app = typer.Typer(help="Multi-scale graph PCA: simulate, decompose and analyze stacks of brain networks.",
                  no_args_is_help=True, add_completion=False)

for router in (simulate.router, decompose.router, analyze.router):
    app.registered_commands += router.registered_commands


if __name__ == "__main__":
    app()
