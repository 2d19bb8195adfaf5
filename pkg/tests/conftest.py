import os

import numpy as np
import pytest
import torch

from htc_clip.taxonomy import parse_taxonomy

# Deterministic, single-threaded numerics for every test.
torch.set_num_threads(int(os.environ.get("HTC_CLIP_THREADS", "1")))

TOY_LINES = ["Root\tA\tB", "A\tA1\tA2"]
SEVEN_LINES = ["Root\tA\tB\tC", "A\tA1\tA2", "B\tB1", "C\tC1"]


@pytest.fixture
def toy():
    return parse_taxonomy(TOY_LINES)


@pytest.fixture
def seven():
    return parse_taxonomy(SEVEN_LINES)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tree_lines(rng, n_labels, max_children=4):
    """Random tree over n_labels labels in taxonomy-file form."""
    names = [f"L{i}" for i in range(n_labels)]
    kids = {"Root": []}
    for i, name in enumerate(names):
        pool = ["Root"] + names[:i]
        while True:
            parent = pool[int(rng.integers(len(pool)))]
            if len(kids.get(parent, [])) < max_children:
                break
        kids.setdefault(parent, []).append(name)
    return ["\t".join([p, *c]) for p, c in kids.items() if c]


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; all verdicts are printed at the end of the run."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
