"""Named random sub-streams derived from one root seed."""
import zlib

import numpy as np


def stream(root: int, *names) -> np.random.Generator:
    """Generator for ``(root, *names)``; names may be strings or integers.

    Streams with different names are independent, and the mapping is stable
    across processes and Python versions (no reliance on ``hash``).
    """
    key = [int(root) & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(key))
