import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent

# Reference toy model for the acceptance suite; trained once and cached.
ACCEPTANCE_TRAIN = ["--dataset-size", "8192", "--epochs", "24", "--channels", "16,32", "--attn-dim", "32",
                    "--heads", "4", "--batch-size", "32", "--lr", "2e-3", "--latent-scale", "6", "--seed", "0"]

_criteria: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _criteria[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")


def acceptance_model_path() -> Path:
    override = os.environ.get("DELTAEDIT_ACCEPTANCE_MODEL")
    if override:
        return Path(override)
    return ROOT / ".cache" / "acceptance" / "model.f32k"


@pytest.fixture(scope="session")
def acceptance_model():
    """Path to the trained reference model, training it through the CLI when absent."""
    from deltaedit.cli import main

    path = acceptance_model_path()
    if not path.exists():
        if main(["train-toy", *ACCEPTANCE_TRAIN, "--run-dir", str(path.parent)]) != 0:
            pytest.fail("training the acceptance model failed")
    return path


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, detail = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
