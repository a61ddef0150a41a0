import json
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
_criteria: dict = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str) -> bool:
        _criteria[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_criteria):
            terminalreporter.write_line(_criteria[k])


@dataclass
class FullRun:
    out: Path
    seconds: dict = field(default_factory=dict)

    @property
    def total_seconds(self) -> float:
        return sum(self.seconds.values())

    def json(self, rel: str):
        return json.loads((self.out / rel).read_text())

    def delta(self, model: str, split: str, category: str = "All", tau: str = "1.25") -> float:
        for r in self.json("report.json")["reports"]:
            if (r["model"], r["split"], r["category"]) == (model, split, category):
                return r["delta"][tau]
        raise KeyError((model, split, category))


def _ddl(*args) -> float:
    start = time.perf_counter()
    subprocess.run([sys.executable, "-m", "ddl.cli", *map(str, args)], check=True)
    return time.perf_counter() - start


@pytest.fixture(scope="session")
def full_runs(tmp_path_factory):
    """Desk-scale runs: the default diffusion pipeline and two reference (oracle-source) runs.

    The diffusion run is driven stage by stage so the diffusion training time
    can be read off separately; ``ddl all`` then finishes the remaining stages.
    """
    root = tmp_path_factory.mktemp("full")
    diffusion = FullRun(root / "diffusion")
    diffusion.seconds["gen-scenes"] = _ddl("gen-scenes", "--out", diffusion.out)
    diffusion.seconds["train-diffusion"] = _ddl("train-diffusion", "--out", diffusion.out)
    diffusion.seconds["rest"] = _ddl("all", "--out", diffusion.out)
    refs = []
    for name in ("reference-a", "reference-b"):
        run = FullRun(root / name)
        run.seconds["all"] = _ddl("all", "--config", CONFIGS / "reference.yaml", "--out", run.out)
        refs.append(run)
    return {"diffusion": diffusion, "reference": refs}
