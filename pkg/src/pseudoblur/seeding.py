import zlib

import numpy as np


def derive_seed(root: int, *labels) -> int:
    """Deterministic 31-bit child seed for a named consumer of the root seed."""
    words = [int(root) & 0xFFFFFFFF]
    for lab in labels:
        words.append(zlib.crc32(lab.encode()) if isinstance(lab, str) else int(lab) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)
