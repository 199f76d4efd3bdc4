"""Platform-stable random streams.

Every random draw in the package goes through :class:`Stream`, which keys a
Philox-4x64 counter-based generator with a :class:`numpy.random.SeedSequence`
built from ``(seed, *keys)``. Only the raw 64-bit output of the bit generator
is consumed; floats and index selections are derived here, so results do not
depend on the (version-dependent) sampling algorithms of
:class:`numpy.random.Generator`.

* uniform floats: ``(raw >> 11) * 2**-53`` in ``[0, 1)``
* selection without replacement: partial Fisher-Yates, ``j = i + raw % (n - i)``
* string keys are mapped to integers by the first 8 bytes of their SHA-256
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def key_to_int(key):
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK64
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Stream:
    """Deterministic random stream identified by a seed and a tuple of keys."""

    def __init__(self, seed, *keys):
        entropy = [key_to_int(seed)] + [key_to_int(k) for k in keys]
        self._bitgen = np.random.Philox(np.random.SeedSequence(entropy))

    def raw(self, n):
        return self._bitgen.random_raw(int(n)).astype(np.uint64, copy=False)

    def uniform(self, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.raw(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def choice(self, n, k):
        """Select ``k`` distinct indices from ``range(n)`` in draw order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot select {k} of {n} items")
        idx = np.arange(n, dtype=np.int64)
        draws = self.raw(k)
        for i in range(k):
            j = i + int(draws[i] % np.uint64(n - i))
            idx[i], idx[j] = idx[j], idx[i]
        return idx[:k].copy()

    def permutation(self, n):
        return self.choice(n, n)
