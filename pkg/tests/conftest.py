import numpy as np
import pandas as pd
import pytest
from typer.testing import CliRunner

from main import app


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def invoke(runner):
    def _invoke(*args):
        return runner.invoke(app, [str(arg) for arg in args])

    return _invoke


@pytest.fixture(scope="module")
def simulated(invoke, tmp_path_factory):
    out = tmp_path_factory.mktemp("simulated")
    result = invoke("simulate", "--out", out, "--scales", "16,20", "--n", 12, "--rank", 2, "--noise", "normal",
                    "--seed", 1)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def decomposed(invoke, simulated, tmp_path_factory):
    out = tmp_path_factory.mktemp("multi")
    result = invoke("decompose", simulated / "scale_1.tensor", simulated / "scale_2.tensor", "--out", out,
                    "--k", 2, "--restarts", 2)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def single(invoke, simulated, tmp_path_factory):
    out = tmp_path_factory.mktemp("single")
    result = invoke("decompose", simulated / "scale_2.tensor", "--out", out, "--k", 2, "--restarts", 2)
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture(scope="module")
def traits(tmp_path_factory):
    rng = np.random.default_rng(2)
    path = tmp_path_factory.mktemp("traits") / "traits.csv"
    frame = pd.DataFrame({"subject_id": [str(i + 1) for i in range(12)],
                          "score": rng.standard_normal(12),
                          "smoker": np.tile([0, 1], 6)})
    frame.to_csv(path, index=False)
    kinds = path.with_name("kinds.csv")
    kinds.write_text("trait,kind,category\nsmoker,binary,substance use\n", encoding="utf-8")
    return path, kinds
