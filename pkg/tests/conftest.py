import sys
from functools import lru_cache
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from lcvd.experiment.config import ExperimentConfig  # noqa: E402
from lcvd.experiment.pipeline import build_benchmark, run_pretrain  # noqa: E402


@lru_cache(maxsize=None)
def desk_run(seed: int):
    """(config, benchmark, pretrained model) on the default desk benchmark; cached per seed."""
    cfg = ExperimentConfig(seed=seed)
    bench = build_benchmark(cfg)
    model, _ = run_pretrain(cfg, bench)
    return cfg, bench, model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
