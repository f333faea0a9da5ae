import sys

import numpy as np
import pytest

from simgraph.config import Config


def unit_rows(rng, n, r):
    v = rng.standard_normal((n, r))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_graph(rng, n_levels=None, r=None, k=None):
    """Nodes of one random pair, gates in (0, 1) and raw edge matrices."""
    n_levels = int(rng.integers(1, 5)) if n_levels is None else n_levels
    r = int(rng.integers(1, 65)) if r is None else r
    k = int(rng.integers(1, r + 1)) if k is None else k
    deltas = []
    for _ in range(n_levels):
        a, b = unit_rows(rng, 2, r)
        deltas.append((a - b) ** 2)
    gates = [rng.uniform(0.01, 0.99, r) for _ in range(n_levels - 1)]
    raw = [rng.uniform(-0.5, 1.0, (r, r)) for _ in range(n_levels - 1)]
    return deltas, gates, raw, k


def scalar_rectify(deltas, gates, raw, k):
    """Node-by-node recursion with explicit top-k selection and weighting."""
    rect = [list(map(float, deltas[0]))]
    for lvl in range(1, len(deltas)):
        edges = raw[lvl - 1]
        p = gates[lvl - 1]
        below = rect[-1]
        cur = []
        for i in range(len(deltas[lvl])):
            row = [float(v) for v in edges[i]]
            chosen = sorted(range(len(row)), key=lambda j: (-row[j], j))[:k]
            pos = [max(row[j], 0.0) for j in chosen]
            total = sum(pos)
            w = [v / total for v in pos] if total > 0 else [1.0 / k] * k
            mixed = sum(wj * below[j] for wj, j in zip(w, chosen))
            cur.append(float(p[i]) * float(deltas[lvl][i]) + (1.0 - float(p[i])) * mixed)
        rect.append(cur)
    return rect, sum(rect[-1])


def brute_pool(z):
    """max + mean per channel with plain loops."""
    c, h, w = z.shape
    out = np.empty(c)
    for ch in range(c):
        vals = [float(z[ch, i, j]) for i in range(h) for j in range(w)]
        out[ch] = max(vals) + sum(vals) / len(vals)
    return out


@pytest.fixture
def small_config():
    return Config(levels=((6, 4, 4), (8, 3, 3), (10, 2, 2)), r=8, k=2, n_classes=6,
                  samples_per_class=8, batch_size=8, classes_per_batch=2, epochs=2,
                  k_list=(1, 2), slice_rows=5)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in module.RESULTS:
            terminalreporter.write_line(line)
