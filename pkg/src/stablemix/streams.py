"""Deterministic random-stream splitting and block-parallel ensembles.

Every ensemble is cut into fixed-size blocks; block ``i`` draws from
``split(root, i)``.  Results are concatenated in block order, so the output
does not depend on how many workers evaluated the blocks.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Any, Callable, Sequence

import numpy as np

BLOCK_SIZE = 4096


def split(root: int, i: int) -> np.random.Generator:
    """Return stream ``i`` derived from ``root`` (counter-based, order free)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(root, spawn_key=(i,))))


def root_from(rng: np.random.Generator) -> int:
    """Draw a root seed from ``rng`` for a fan-out of independent streams."""
    return int(rng.integers(0, 2**63 - 1))


def block_sizes(n: int, block: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(n, block)
    return [block] * full + ([rest] if rest else [])


def _call(args):
    fn, root, i, extra = args
    return fn(split(root, i), i, *extra)


def map_streams(
    fn: Callable[..., Any],
    count: int,
    root: int,
    extra: Sequence[Any] = (),
    workers: int = 1,
) -> list[Any]:
    """Evaluate ``fn(split(root, i), i, *extra)`` for ``i < count`` in index order.

    ``fn`` must be a module-level function when ``workers > 1``.
    """
    jobs = [(fn, root, i, tuple(extra)) for i in range(count)]
    if workers <= 1 or count <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, jobs))
