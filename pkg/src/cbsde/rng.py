"""Counter-based random numbers keyed by (seed, path index, step, slot).

Every draw is a pure function of its coordinates, so a path gets the same
numbers whether it is simulated alone, in a batch, or on another thread.
The bijection is Philox4x32-10, vectorised with numpy.
Normals use the inverse normal CDF from scipy rather than numpy's SIMD
transcendental loops, whose last-ulp results may depend on array alignment.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_LO = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10):
    """Apply the Philox4x32 bijection.

    ``counter`` is a sequence of four broadcastable integer arrays (32-bit
    words), ``key`` a pair of 32-bit ints. Returns four uint64 arrays holding
    32-bit outputs.
    """
    c0, c1, c2, c3 = np.broadcast_arrays(*[np.asarray(c, dtype=np.uint64) for c in counter])
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _S32) ^ c1 ^ np.uint64(k0),
            p1 & _LO,
            (p0 >> _S32) ^ c3 ^ np.uint64(k1),
            p0 & _LO,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return c0, c1, c2, c3


def _to_unit(hi, lo):
    # 53-bit uniform strictly inside (0, 1)
    bits = ((hi >> np.uint64(5)) << np.uint64(26)) | (lo >> np.uint64(6))
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


class CounterRNG:
    """Stateless generator: ``uniforms(paths, step, slot)`` is reproducible by coordinates.

    Slots let one (path, step) pair hold many independent draws; callers
    reserve disjoint slot ranges per purpose.
    """

    def __init__(self, seed: int):
        seed = int(seed)
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self._key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)

    def _block(self, paths, step, slot):
        paths = np.asarray(paths, dtype=np.uint64)
        return philox4x32(
            (np.uint64(step), np.uint64(slot), paths & _LO, paths >> _S32), self._key
        )

    def uniforms2(self, paths, step: int, slot: int):
        """Two independent uniforms per path from one Philox block."""
        a, b, c, d = self._block(paths, step, slot)
        return _to_unit(a, b), _to_unit(c, d)

    def uniforms(self, paths, step: int, slot: int):
        return self.uniforms2(paths, step, slot)[0]

    def normals(self, paths, step: int, slot: int, dim: int = 1):
        """Array of shape (len(paths), dim) of standard normals.

        Consumes ``ceil(dim / 2)`` consecutive slots starting at ``slot``.
        """
        paths = np.atleast_1d(paths)
        out = np.empty((paths.shape[0], dim))
        for j in range(0, dim, 2):
            u1, u2 = self.uniforms2(paths, step, slot + j // 2)
            out[:, j] = ndtri(u1)
            if j + 1 < dim:
                out[:, j + 1] = ndtri(u2)
        return out
