"""Shared toy-trained models for the acceptance checks.

Training runs once per session.  Setting ``M2M_MODEL_CACHE`` to a directory
reuses checkpoints from an earlier run (useful while iterating); leave it
unset for an honest from-scratch run.
"""

import os
import sys
import time
from pathlib import Path

import pytest

from m2msplat.mrn import MotionRefinementNet, MrnConfig
from m2msplat.train import TrainConfig, train_toy


class TrainedModel:
    def __init__(self, net, initial_eval, final_eval, seconds, cached):
        self.net = net
        self.initial_eval = initial_eval
        self.final_eval = final_eval
        self.seconds = seconds
        self.cached = cached


def _train(n_flows: int, tmp_dir: Path, cfg: TrainConfig | None = None) -> TrainedModel:
    cfg = cfg or TrainConfig(log_every=0)
    cache = os.environ.get("M2M_MODEL_CACHE")
    if cache:
        path = Path(cache) / f"toy_n{n_flows}.m2mw"
        if path.is_file():
            return TrainedModel(MotionRefinementNet.load(path), None, None, 0.0, True)
    else:
        path = tmp_dir / f"toy_n{n_flows}.m2mw"
    start = time.perf_counter()
    res = train_toy(cfg, MrnConfig.toy(n_flows=n_flows), out=path)
    return TrainedModel(res.net, res.initial_eval, res.final_eval, time.perf_counter() - start, False)


@pytest.fixture(scope="session")
def toy_models(tmp_path_factory):
    """Lazily trained models keyed by N, all under the default toy protocol."""
    tmp = tmp_path_factory.mktemp("toy_models")
    cache = {}

    def get(n_flows: int) -> TrainedModel:
        if n_flows not in cache:
            cache[n_flows] = _train(n_flows, tmp)
        return cache[n_flows]

    return get


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
