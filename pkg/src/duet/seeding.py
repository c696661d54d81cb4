"""Named random streams derived from one root seed."""

from __future__ import annotations

import hashlib


def derive_seed(root: int, *keys) -> int:
    """Deterministic 63-bit seed for the stream ``root/key1/key2/...``."""
    text = "/".join([str(int(root))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1
