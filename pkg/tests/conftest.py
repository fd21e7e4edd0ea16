from __future__ import annotations

import pytest

from multigcn import SimConfig, Simulator, build_csr, generate_rmat
from multigcn.node import NodeConfig

MODELS = ("OPPE", "OPPR", "TMM", "SREM", "TMM+SREM")

# One line per acceptance criterion, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


class RunCache:
    """Memoized simulations shared across test modules (runs are deterministic)."""

    def __init__(self) -> None:
        self._graphs: dict = {}
        self._runs: dict = {}

    def graph(self, scale: int, degree: int = 32, seed: int = 0, f_in: int = 512, f_out: int = 128):
        key = (scale, degree, seed, f_in, f_out)
        if key not in self._graphs:
            self._graphs[key] = build_csr(generate_rmat(scale, degree, seed=seed), f_in, f_out)
        return self._graphs[key]

    def run(self, model: str, scale: int = 12, *, degree: int = 32, seed: int = 0, node: dict | None = None,
            **cfg):
        key = (model, scale, degree, seed, tuple(sorted((node or {}).items())), tuple(sorted(cfg.items())))
        if key not in self._runs:
            g = self.graph(scale, degree, seed)
            config = SimConfig(model=model, node=NodeConfig(**(node or {})), **{"trace": True, **cfg})
            sim = Simulator(config, g)
            self._runs[key] = (sim.run(), sim)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return RunCache()
