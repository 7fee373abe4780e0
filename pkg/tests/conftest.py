import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from hncr.data import IdIndex, Interactions, build_dataset  # noqa: E402


def block_toy(n=20, per_user=8, seed=0, ratios=(0.6, 0.2, 0.2)):
    """``n`` users and ``n`` items in two blocks; each user rates ``per_user`` items of its own block."""
    rng = np.random.default_rng(seed)
    half = n // 2
    pairs = []
    for u in range(n):
        base = 0 if u < half else half
        for i in np.sort(rng.choice(half, size=per_user, replace=False)):
            pairs.append((u, base + int(i)))
    inter = Interactions(IdIndex(f"u{u}" for u in range(n)), IdIndex(f"i{i}" for i in range(n)), np.array(pairs), "all")
    return build_dataset(inter, ratios, seed=seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
