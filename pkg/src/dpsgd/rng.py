"""Counter-based random streams.

Every draw is addressed by ``(seed, tag, node, iteration, index)``. A stream
owns one Philox key per ``(seed, tag, node)`` and lays iterations out
contiguously on the counter, so the values for iteration ``k`` do not depend
on what was drawn before, on how many iterations are fetched at once, or on
which thread asks for them.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

__all__ = ["CounterStream", "NOISE_TAG", "INDEX_TAG", "ESTIMATOR_TAG"]

NOISE_TAG = 1
INDEX_TAG = 2
ESTIMATOR_TAG = 3

_MAX_SEED = 2**64
_MAX_NODE = 2**32
_CHUNK = 256


def _check_seed(seed: int) -> int:
    seed = int(seed)
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must lie in [0, 2**64), got {seed}")
    return seed


class CounterStream:
    """Random-access stream of fixed-width draws for one node.

    Parameters
    ----------
    seed : int
        Run seed, ``0 <= seed < 2**64``.
    node : int
        Node index.
    width : int
        Number of 64-bit words consumed per iteration.
    tag : int
        Purpose tag separating e.g. gradient noise from index sampling.
    """

    def __init__(self, seed: int, node: int, width: int, tag: int = NOISE_TAG):
        if not 0 <= node < _MAX_NODE:
            raise ValueError(f"node index out of range: {node}")
        if width < 1:
            raise ValueError(f"width must be >= 1, got {width}")
        self.seed = _check_seed(seed)
        self.node = int(node)
        self.width = int(width)
        self.tag = int(tag)
        self._key = (self.seed << 64) | (self.tag << 32) | self.node
        self._lo = -_CHUNK - 1
        self._buf = np.empty((0, self.width), dtype=np.uint64)
        self._derived: dict[str, np.ndarray] = {}

    def _fill(self, k: int) -> None:
        lo = k - k % _CHUNK
        start = lo * self.width
        bg = np.random.Philox(key=self._key, counter=start // 4)
        if start % 4:
            bg.random_raw(start % 4)
        self._buf = bg.random_raw(_CHUNK * self.width).reshape(_CHUNK, self.width)
        self._derived = {}
        self._lo = lo

    def _block(self, k: int, kind: str) -> np.ndarray:
        if k < 0:
            raise ValueError(f"iteration must be >= 0, got {k}")
        if not self._lo <= k < self._lo + _CHUNK:
            self._fill(k)
        if kind == "raw":
            return self._buf
        # transforms are elementwise, so converting a whole chunk at once
        # gives the same values as converting one row
        block = self._derived.get(kind)
        if block is None:
            if kind == "uniform":
                block = ((self._buf >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
            else:
                block = ndtri(self._block(k, "uniform"))
            self._derived[kind] = block
        return block

    def raw(self, k: int) -> np.ndarray:
        """Return the ``width`` raw words belonging to iteration ``k``."""
        return self._block(k, "raw")[k - self._lo]

    def uniform(self, k: int) -> np.ndarray:
        """Uniforms on the open interval (0, 1), 53-bit resolution."""
        return self._block(k, "uniform")[k - self._lo]

    def normal(self, k: int) -> np.ndarray:
        """Standard normals by inverse CDF, exactly one word per value."""
        return self._block(k, "normal")[k - self._lo]

    def integers(self, k: int, high: int) -> np.ndarray:
        """Integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform(k) * high).astype(np.int64), high - 1)
