import hashlib


def derive_seed(seed: int, *components: object) -> int:
    """Deterministic 64-bit sub-seed: ``blake2b-64(seed, component, ...)``."""
    h = hashlib.blake2b(str(int(seed)).encode(), digest_size=8)
    for c in components:
        h.update(b"\x1f" + str(c).encode())
    return int.from_bytes(h.digest(), "little")
