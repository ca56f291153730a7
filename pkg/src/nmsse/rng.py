"""Counter-style random streams.

Every draw is addressed by ``(seed, *stream, block)`` so that the value of
sample ``i`` never depends on how many other samples were requested before
it, or on the order in which workers consume blocks.
"""

import numpy as np

BLOCK = 256

# stream tags
XI = 0
ETA = 1
ETA_SECOND = 2
ETA_NONLINEAR = 3
TEST = 9


def generator(seed, *keys):
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def standard_normals(seed, stream, start, count, width):
    """Standard normals for sample indices ``start .. start+count-1``.

    Returns an array of shape ``(count, width)``; row ``r`` is a function of
    ``(seed, stream, start + r, width)`` only.
    """
    out = np.empty((count, width))
    if count == 0 or width == 0:
        return out
    first, last = start // BLOCK, (start + count - 1) // BLOCK
    pos = 0
    for block in range(first, last + 1):
        z = generator(seed, *stream, block).standard_normal((BLOCK, width))
        lo = max(start - block * BLOCK, 0)
        hi = min(start + count - block * BLOCK, BLOCK)
        out[pos:pos + hi - lo] = z[lo:hi]
        pos += hi - lo
    return out
