"""Feature extraction: raw query-item features to the dense input vector ``x0``.

Four feature kinds are supported:

- ``numerical`` -> two values, the standardized value and ``log1p`` of the (clamped) raw value
- ``categorical`` -> hashed embedding row, MISSING maps to a dedicated ``unseen`` row appended to the table
- ``text`` -> average of hashed character n-gram embeddings
- ``sequential`` -> mean of hashed embeddings of the most recent ``max_len`` keys

Hashing and pooling happen in :func:`encode_batch` (plain numpy, no gradients); :func:`assemble_batch` then turns
the encoded batch into ``x0`` with differentiable embedding lookups, so tables are trained with the rest of the
model.

"""

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from cvrscale.errors import DimensionError, SchemaError
from cvrscale.numerics import Tensor, concat, embedding_bag
from cvrscale.utils import fnv1a64, fnv1a64_keys

KINDS = ("numerical", "categorical", "text", "sequential")
#: parameters each kind declares in the schema document
KIND_PARAMS = {
    "numerical": (),
    "categorical": ("vocab_size", "embed_dim"),
    "text": ("ngram_n", "vocab_size", "embed_dim"),
    "sequential": ("max_len", "vocab_size", "embed_dim"),
}
DEFAULT_NGRAM_N = 3
STD_FLOOR = 1e-8


class _Missing:
    """Placeholder for a value absent from the record (the ``unseen`` convention)."""

    _instance: Optional["_Missing"] = None

    def __new__(cls) -> "_Missing":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"

    def __reduce__(self) -> str:
        return "MISSING"


MISSING = _Missing()
#: raw values keyed by feature name
FeatureRecord = Dict[str, Any]


@dataclass(frozen=True)
class FeatureSpec:
    """One feature of the schema."""

    name: str
    kind: str
    vocab_size: Optional[int] = None
    embed_dim: Optional[int] = None
    ngram_n: Optional[int] = None
    max_len: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise SchemaError(f"Feature `{self.name}` has unknown kind `{self.kind}`, expected one of {KINDS}")
        if not self.name or any(ch.isspace() for ch in self.name) or "," in self.name:
            raise SchemaError(f"Feature name {self.name!r} must be non-empty without spaces or commas")
        for param in KIND_PARAMS[self.kind]:
            val = getattr(self, param)
            if val is None or int(val) < 1:
                raise SchemaError(f"Feature `{self.name}` needs `{param}` >= 1, got {val}")

    @property
    def width(self) -> int:
        """Number of ``x0`` columns this feature contributes."""
        return 2 if self.kind == "numerical" else int(self.embed_dim)

    @property
    def table_rows(self) -> int:
        """Rows of the embedding table; categoricals carry one extra ``unseen`` row."""
        if self.kind == "numerical":
            return 0
        return int(self.vocab_size) + (1 if self.kind == "categorical" else 0)

    def to_line(self) -> str:
        params = " ".join(f"{param}={getattr(self, param)}" for param in KIND_PARAMS[self.kind])
        return f"{self.name} {self.kind} {params}".rstrip()

    @classmethod
    def from_line(cls, line: str) -> "FeatureSpec":
        parts = line.split()
        if len(parts) < 2:
            raise SchemaError(f"Malformed schema line {line!r}, expected `name kind param=value ...`")
        params: Dict[str, int] = {}
        for item in parts[2:]:
            key, sep, val = item.partition("=")
            if not sep or key not in ("vocab_size", "embed_dim", "ngram_n", "max_len"):
                raise SchemaError(f"Malformed schema parameter {item!r} in line {line!r}")
            params[key] = int(val)
        return cls(name=parts[0], kind=parts[1], **params)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature specs; the order defines the ``x0`` layout."""

    specs: Tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        names = [spec.name for spec in self.specs]
        dupes = sorted({name for name in names if names.count(name) > 1})
        if dupes:
            raise SchemaError(f"Duplicate feature names in schema: {dupes}")

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self.specs]

    def __getitem__(self, name: str) -> FeatureSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise SchemaError(f"Unknown feature `{name}`, schema has {self.names}")

    def __contains__(self, name: str) -> bool:
        return name in self.names

    @property
    def input_dim(self) -> int:
        """``D``, the width of ``x0``; a pure function of the schema."""
        return sum(spec.width for spec in self.specs)

    def slices(self) -> Dict[str, slice]:
        """Column range of each feature inside ``x0``."""
        out, start = {}, 0
        for spec in self.specs:
            out[spec.name] = slice(start, start + spec.width)
            start += spec.width
        return out

    def to_text(self) -> str:
        return "".join(spec.to_line() + "\n" for spec in self.specs)

    @classmethod
    def from_text(cls, text: str) -> "FeatureSchema":
        lines = [line.strip() for line in text.splitlines()]
        return cls(tuple(FeatureSpec.from_line(line) for line in lines if line and not line.startswith("#")))

    @classmethod
    def load(cls, path: str) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fopen:
            return cls.from_text(fopen.read())

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fopen:
            fopen.write(self.to_text())

    @property
    def fingerprint(self) -> int:
        """FNV-1a 64-bit digest of the canonical text form."""
        return fnv1a64(self.to_text().encode("utf-8"))

    def with_feature(self, spec: FeatureSpec) -> "FeatureSchema":
        return FeatureSchema(self.specs + (spec,))

    def without(self, name: str) -> "FeatureSchema":
        if name not in self:
            raise SchemaError(f"Unknown feature `{name}`, schema has {self.names}")
        return FeatureSchema(tuple(spec for spec in self.specs if spec.name != name))

    def scaled(self, embed_dim: Optional[int] = None, vocab_mult: int = 1) -> "FeatureSchema":
        """Embedding-scaling variant: new dimension and/or vocabulary multiplier for every embedded feature."""
        specs = []
        for spec in self.specs:
            if spec.kind != "numerical":
                spec = replace(
                    spec,
                    embed_dim=embed_dim or spec.embed_dim,
                    vocab_size=int(spec.vocab_size) * int(vocab_mult),
                )
            specs.append(spec)
        return FeatureSchema(tuple(specs))


@dataclass
class NormStats:
    """Mean and (floored) standard deviation per numerical feature."""

    mean: Dict[str, float] = field(default_factory=dict)
    std: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.std = {name: max(float(val), STD_FLOOR) for name, val in self.std.items()}

    def __contains__(self, name: str) -> bool:
        return name in self.mean

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {"mean": dict(self.mean), "std": dict(self.std)}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Mapping[str, float]]) -> "NormStats":
        return cls(mean=dict(doc.get("mean", {})), std=dict(doc.get("std", {})))

    def merged(self, fresh: "NormStats", keep: Iterable[str]) -> "NormStats":
        """Stats of ``keep`` taken from ``self``, everything else from ``fresh``."""
        keep = set(keep)
        mean = {name: (self.mean[name] if name in keep and name in self else val) for name, val in fresh.mean.items()}
        std = {name: (self.std[name] if name in keep and name in self else val) for name, val in fresh.std.items()}
        return NormStats(mean=mean, std=std)


def fit_norm_stats(records: Iterable[FeatureRecord], schema: FeatureSchema) -> NormStats:
    """Estimate per-feature mean and std of numerical features, ignoring MISSING values."""
    numerical = [spec.name for spec in schema.specs if spec.kind == "numerical"]
    values: Dict[str, List[float]] = {name: [] for name in numerical}
    for record in records:
        for name in numerical:
            val = record.get(name, MISSING)
            if val is not MISSING:
                values[name].append(float(val))
    stats = NormStats()
    for name in numerical:
        arr = np.asarray(values[name], dtype=np.float64)
        stats.mean[name] = float(arr.mean()) if arr.size else 0.0
        stats.std[name] = max(float(arr.std()), STD_FLOOR) if arr.size else 1.0
    return stats


def hash_index(key: int, vocab_size: int) -> int:
    """Bucket of a 64-bit key: FNV-1a over its 8 big-endian bytes, modulo ``vocab_size``.

    Example:
        >>> hash_index(123456789, 1)
        0

    """
    return fnv1a64(int(key).to_bytes(8, "big", signed=False)) % int(vocab_size)


def hash_indices(keys: Union[Sequence[int], np.ndarray], vocab_size: int) -> np.ndarray:
    """Vectorized :func:`hash_index`."""
    keys = np.asarray(keys, dtype=np.uint64)
    return (fnv1a64_keys(keys) % np.uint64(vocab_size)).astype(np.int64)


def collision_rate(keys: Iterable[int], vocab_size: int) -> float:
    """Fraction of distinct keys sharing a bucket with an earlier distinct key."""
    distinct = np.unique(np.asarray(list(keys), dtype=np.uint64))
    if distinct.size == 0:
        return 0.0
    buckets = np.unique(hash_indices(distinct, vocab_size))
    return 1.0 - buckets.size / distinct.size


def char_ngrams(text: str, n: int) -> List[str]:
    """Overlapping character n-grams; a non-empty string shorter than ``n`` is a single gram.

    Example:
        >>> char_ngrams("abc", 2)
        ['ab', 'bc']

    """
    if not text:
        return []
    if len(text) < n:
        return [text]
    return [text[i : i + n] for i in range(len(text) - n + 1)]


@lru_cache(maxsize=1 << 16)
def _gram_key(gram: str) -> int:
    return fnv1a64(gram.encode("utf-8"))


def text_indices(text: Any, ngram_n: int, vocab_size: int) -> List[int]:
    """Table rows of the hashed n-grams of ``text``; MISSING or empty text has none."""
    if text is MISSING or not text:
        return []
    return [hash_index(_gram_key(gram), vocab_size) for gram in char_ngrams(str(text), ngram_n)]


def sequence_indices(keys: Any, max_len: int, vocab_size: int) -> List[int]:
    """Table rows of the most recent ``max_len`` keys."""
    if keys is MISSING or not keys:
        return []
    return hash_indices(list(keys)[-int(max_len) :], vocab_size).tolist()


def _table_array(table: Union[Tensor, np.ndarray]) -> np.ndarray:
    return table.data if isinstance(table, Tensor) else np.asarray(table, dtype=np.float64)


def encode_numerical(value: Any, mean: float, std: float) -> np.ndarray:
    """Standardized value and ``log1p(max(x, 0))``; MISSING gives zeros.

    Example:
        >>> np.allclose(encode_numerical(3.0, mean=1.0, std=2.0), [1.0, np.log(4.0)])
        True

    """
    if value is MISSING:
        return np.zeros(2)
    value = float(value)
    return np.array([(value - mean) / max(std, STD_FLOOR), np.log1p(max(value, 0.0))])


def encode_categorical(key: Any, table: Union[Tensor, np.ndarray], vocab_size: int) -> np.ndarray:
    """Embedding row of a categorical key; MISSING reads the ``unseen`` row at index ``vocab_size``."""
    arr = _table_array(table)
    row = int(vocab_size) if key is MISSING else hash_index(key, vocab_size)
    return arr[row].copy()


def _mean_rows(arr: np.ndarray, rows: Sequence[int]) -> np.ndarray:
    if not rows:
        return np.zeros(arr.shape[1])
    out = np.zeros(arr.shape[1])
    for row in rows:
        out += arr[row]
    return out / len(rows)


def encode_text(text: Any, ngram_n: int, table: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Average embedding of the hashed character n-grams; empty text gives the zero vector."""
    arr = _table_array(table)
    return _mean_rows(arr, text_indices(text, ngram_n, arr.shape[0]))


def encode_sequential(keys: Any, table: Union[Tensor, np.ndarray], max_len: int) -> np.ndarray:
    """Mean embedding of the most recent ``max_len`` keys; empty history gives the zero vector."""
    arr = _table_array(table)
    return _mean_rows(arr, sequence_indices(keys, max_len, arr.shape[0]))


@dataclass
class DenseBlock:
    """Per-item constant columns of one numerical feature."""

    name: str
    values: np.ndarray


@dataclass
class BagBlock:
    """Hashed lookups of one embedded feature: entry ``j`` adds ``weights[j] * table[indices[j]]`` to item
    ``rows[j]``."""

    name: str
    rows: np.ndarray
    indices: np.ndarray
    weights: np.ndarray


@dataclass
class EncodedBatch:
    """Stage-A output: everything ``x0`` needs except the embedding tables."""

    n_items: int
    blocks: List[Union[DenseBlock, BagBlock]]

    def block(self, name: str) -> Union[DenseBlock, BagBlock]:
        for blk in self.blocks:
            if blk.name == name:
                return blk
        raise SchemaError(f"Unknown feature `{name}` in encoded batch")

    def take_items(self, items: np.ndarray) -> "EncodedBatch":
        """Sub-batch of the given item positions, in the given order."""
        items = np.asarray(items, dtype=np.int64)
        position = np.full(self.n_items, -1, dtype=np.int64)
        position[items] = np.arange(items.size)
        blocks: List[Union[DenseBlock, BagBlock]] = []
        for blk in self.blocks:
            if isinstance(blk, DenseBlock):
                blocks.append(DenseBlock(blk.name, blk.values[items]))
                continue
            new_rows = position[blk.rows]
            keep = new_rows >= 0
            order = np.argsort(new_rows[keep], kind="stable")
            blocks.append(
                BagBlock(blk.name, new_rows[keep][order], blk.indices[keep][order], blk.weights[keep][order])
            )
        return EncodedBatch(int(items.size), blocks)

    def permute_feature(self, name: str, perm: np.ndarray) -> "EncodedBatch":
        """Copy where item ``i`` carries the ``name`` values of item ``perm[i]``."""
        self.block(name)
        perm = np.asarray(perm, dtype=np.int64)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        blocks: List[Union[DenseBlock, BagBlock]] = []
        for blk in self.blocks:
            if blk.name != name:
                blocks.append(blk)
            elif isinstance(blk, DenseBlock):
                blocks.append(DenseBlock(name, blk.values[perm]))
            else:
                new_rows = inverse[blk.rows]
                order = np.argsort(new_rows, kind="stable")
                blocks.append(BagBlock(name, new_rows[order], blk.indices[order], blk.weights[order]))
        return EncodedBatch(self.n_items, blocks)


def _check_record(record: Mapping[str, Any], schema: FeatureSchema) -> None:
    unknown = [name for name in record if name not in schema]
    if unknown:
        raise SchemaError(f"Record carries features unknown to the schema: {sorted(unknown)}")


def encode_batch(records: Sequence[FeatureRecord], schema: FeatureSchema, stats: NormStats) -> EncodedBatch:
    """Hash, pool-weight and normalize raw records (stage A of serving, the data path of training).

    Args:
        records: raw feature values; absent names are treated as MISSING
        schema: feature layout
        stats: normalization constants of numerical features

    Returns:
        encoded batch with one block per schema feature, in schema order

    Raises:
        SchemaError: if a record names an unknown feature or stats lack a numerical feature

    """
    for record in records:
        _check_record(record, schema)
    n_items = len(records)
    blocks: List[Union[DenseBlock, BagBlock]] = []
    for spec in schema.specs:
        column = [record.get(spec.name, MISSING) for record in records]
        if spec.kind == "numerical":
            if spec.name not in stats:
                raise SchemaError(f"No normalization stats for numerical feature `{spec.name}`")
            mean, std = stats.mean[spec.name], stats.std[spec.name]
            values = np.zeros((n_items, 2))
            for i, val in enumerate(column):
                values[i] = encode_numerical(val, mean, std)
            blocks.append(DenseBlock(spec.name, values))
            continue
        if spec.kind == "categorical":
            present = np.array([val is not MISSING for val in column], dtype=bool)
            indices = np.full(n_items, int(spec.vocab_size), dtype=np.int64)
            if present.any():
                keys = np.array([int(val) for val in column if val is not MISSING], dtype=np.uint64)
                indices[present] = hash_indices(keys, int(spec.vocab_size))
            blocks.append(BagBlock(spec.name, np.arange(n_items, dtype=np.int64), indices, np.ones(n_items)))
            continue
        rows: List[int] = []
        idx: List[int] = []
        weights: List[float] = []
        for i, val in enumerate(column):
            if spec.kind == "text":
                bag = text_indices(val, int(spec.ngram_n), int(spec.vocab_size))
            else:
                bag = sequence_indices(val, int(spec.max_len), int(spec.vocab_size))
            rows.extend([i] * len(bag))
            idx.extend(bag)
            weights.extend([1.0 / len(bag)] * len(bag))
        blocks.append(
            BagBlock(
                spec.name,
                np.asarray(rows, dtype=np.int64),
                np.asarray(idx, dtype=np.int64),
                np.asarray(weights, dtype=np.float64),
            )
        )
    return EncodedBatch(n_items, blocks)


def table_name(feature: str) -> str:
    """Checkpoint name of a feature's embedding table."""
    return f"embed/{feature}/table"


def assemble_batch(encoded: EncodedBatch, schema: FeatureSchema, tables: Mapping[str, Tensor]) -> Tensor:
    """Concatenate all feature slices into ``x0`` of shape ``(n_items, D)``, in schema order."""
    pieces = []
    for spec, blk in zip(schema.specs, encoded.blocks):
        if blk.name != spec.name:
            raise SchemaError(f"Encoded batch order differs from schema at `{spec.name}` / `{blk.name}`")
        if isinstance(blk, DenseBlock):
            pieces.append(Tensor(blk.values))
            continue
        table = tables.get(table_name(spec.name))
        if table is None:
            raise SchemaError(f"No embedding table for feature `{spec.name}`")
        if table.shape != (spec.table_rows, spec.width):
            raise DimensionError(
                f"Table of `{spec.name}` is {table.shape}, schema expects {(spec.table_rows, spec.width)}"
            )
        pieces.append(embedding_bag(table, blk.rows, blk.indices, blk.weights, encoded.n_items))
    return concat(pieces, axis=1)


def assemble_x0(
    record: FeatureRecord, schema: FeatureSchema, tables: Mapping[str, Tensor], stats: NormStats
) -> Tensor:
    """``x0`` of a single record, shape ``(1, D)``."""
    return assemble_batch(encode_batch([record], schema, stats), schema, tables)


def init_tables(schema: FeatureSchema, factory: Any) -> Dict[str, Tensor]:
    """Fresh embedding tables, rows uniform in +-0.05."""
    return {
        table_name(spec.name): factory.uniform(table_name(spec.name), (spec.table_rows, spec.width), 0.05)
        for spec in schema.specs
        if spec.kind != "numerical"
    }
