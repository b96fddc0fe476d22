import numpy as np
import pytest

from tinyq import nnf, ptq


@pytest.fixture(scope="session")
def graph():
    return nnf.fixture_model()


@pytest.fixture(scope="session")
def calib_samples():
    return [x for x, _ in nnf.fixture_dataset(32, 1)]


@pytest.fixture(scope="session")
def qmodel(graph, calib_samples):
    return ptq.quantize_model(graph, ptq.calibrate(graph, calib_samples))


@pytest.fixture(scope="session")
def dataset():
    return nnf.fixture_dataset(500, 42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory):
    """Fixture files written and quantized through the CLI: float.aicm, quant.aicm, images/, labels.csv."""
    from tinyq.shell.cli import main

    out = tmp_path_factory.mktemp("pipeline")
    assert main(["fixture", "--out", str(out), "--n", "60", "--seed", "42"]) == 0
    assert main(["calibrate+quantize", "--model", str(out / "float.aicm"), "--calib", str(out / "images"),
                 "--limit", "32", "--out", str(out / "quant.aicm")]) == 0
    return out


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict_line():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(number, title, ok, detail):
        line = f"CRITERION {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
