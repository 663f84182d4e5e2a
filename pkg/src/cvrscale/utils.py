"""Handy tools shared by all modules: hashing, digests and the seedable random generator."""

import csv
import hashlib
import json
import os
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

#: FNV-1a 64-bit parameters
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
#: splitmix64 increment (golden ratio)
SPLITMIX_GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit digest of a byte string.

    Args:
        data: bytes to hash

    Returns:
        unsigned 64-bit digest

    Example:
        >>> hex(fnv1a64(b""))
        '0xcbf29ce484222325'
        >>> hex(fnv1a64(b"a"))
        '0xaf63dc4c8601ec8c'

    """
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def fnv1a64_keys(keys: np.ndarray) -> np.ndarray:
    """Vectorized FNV-1a 64-bit over the 8 big-endian bytes of each unsigned 64-bit key."""
    keys = np.asarray(keys, dtype=np.uint64)
    h = np.full(keys.shape, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for shift in range(56, -8, -8):
            h ^= (keys >> np.uint64(shift)) & np.uint64(0xFF)
            h *= prime
    return h


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace, stable under key reordering."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest_obj(obj: Any) -> str:
    """SHA-256 hex digest of the canonical JSON form of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def digest_bytes(data: bytes) -> str:
    """SHA-256 hex digest of raw bytes."""
    return hashlib.sha256(data).hexdigest()


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 generator.

    The ``i``-th draw after construction is ``mix64(seed + i * GAMMA)`` (mod 2^64, ``i`` starting at 1) where
    ``mix64`` is the splitmix64 finalizer. Every draw is a pure function of ``(seed, counter)``, so vectorized
    draws are identical to scalar ones on every platform.

    Args:
        seed: any integer, reduced modulo 2^64

    Example:
        >>> rng = SplitMix64(7)
        >>> a = rng.next_u64(3)
        >>> b = SplitMix64(7)
        >>> [int(b.next_u64(1)[0]) for _ in range(3)] == [int(v) for v in a]
        True

    """

    def __init__(self, seed: int) -> None:
        self.state = int(seed) & MASK64

    def next_u64(self, size: int) -> np.ndarray:
        """Draw ``size`` unsigned 64-bit integers."""
        with np.errstate(over="ignore"):
            counters = np.arange(1, size + 1, dtype=np.uint64) * np.uint64(SPLITMIX_GAMMA) + np.uint64(self.state)
        self.state = (self.state + size * SPLITMIX_GAMMA) & MASK64
        return _mix64(counters)

    def fork(self, stream: int) -> "SplitMix64":
        """Derive an independent child generator; does not advance this one."""
        base = np.array([(self.state ^ ((int(stream) * SPLITMIX_GAMMA) & MASK64)) & MASK64], dtype=np.uint64)
        return SplitMix64(int(_mix64(base)[0]))

    def uniform(self, size: int) -> np.ndarray:
        """Uniform floats in ``[0, 1)`` with 53 random bits each."""
        return (self.next_u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_open(self, size: int) -> np.ndarray:
        """Uniform floats in the open interval ``(0, 1)``."""
        return ((self.next_u64(size) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def normal(self, size: int) -> np.ndarray:
        """Standard normal draws by Box-Muller."""
        u1 = self.uniform_open(size)
        u2 = self.uniform(size)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def gumbel(self, size: int) -> np.ndarray:
        """Standard Gumbel draws."""
        return -np.log(-np.log(self.uniform_open(size)))

    def exponential(self, rate: float, size: int) -> np.ndarray:
        """Exponential inter-arrival times with the given rate."""
        return -np.log(self.uniform_open(size)) / rate

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Integers in ``[low, high)``; modulo bias is below 2^-40 for the ranges used here."""
        span = np.uint64(high - low)
        return (self.next_u64(size) % span).astype(np.int64) + low

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(n)``."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        draws = self.next_u64(n - 1)
        for pos, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[pos] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


def format_cell(value: Any) -> str:
    """Report cell text; floats keep 10 significant digits and ``None`` is an empty cell.

    Example:
        >>> [format_cell(v) for v in (0.1 + 0.2, 3, None, "masknet")]
        ['0.3', '3', '', 'masknet']

    """
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.10g}"
    return str(value)


def write_csv(
    path: str, columns: Sequence[str], rows: Iterable[Mapping[str, Any]], config_digest: Optional[str] = None
) -> None:
    """Write rows as CSV, optionally led by a ``# config_digest=<hex>`` comment line."""
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fopen:
        if config_digest is not None:
            fopen.write(f"# config_digest={config_digest}\n")
        writer = csv.writer(fopen, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row.get(col)) for col in columns])


def read_csv(path: str) -> Tuple[Optional[str], List[Dict[str, str]]]:
    """Rows of a report written by :func:`write_csv` together with its config digest, if any."""
    with open(path, encoding="utf-8", newline="") as fopen:
        lines = fopen.read().splitlines()
    digest = None
    if lines and lines[0].startswith("# config_digest="):
        digest = lines.pop(0).split("=", 1)[1]
    return digest, list(csv.DictReader(lines))
