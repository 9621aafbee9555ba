import zlib


def derive_seed(*parts):
    """Stable 32-bit seed from ints and strings (independent of PYTHONHASHSEED)."""
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))
