"""Deterministic synthetic ranking data with planted structure.

Each item's ground-truth utility is a linear term over numerical features, one pairwise product term, a per-brand
affinity, a per-style affinity read from the title and a bonus when the item's brand appears in the shopper's
history. Purchases are sampled from ``softmax(utility / tau)`` with the Gumbel-max trick, clicks are Bernoulli
draws around the utility. Features become available on a configured day and are MISSING before it, the way older
log partitions lack newer features.

Every random draw comes from a :class:`~cvrscale.utils.SplitMix64` stream forked per day and per group, so days can
be generated independently and the output is a pure function of the :class:`SynthSpec`.

"""

import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from cvrscale.errors import ContractError, SchemaError
from cvrscale.evaluation import ScoredGroup, mean_ap
from cvrscale.features import MISSING, FeatureRecord, FeatureSchema, FeatureSpec
from cvrscale.training import RankingGroup
from cvrscale.utils import SplitMix64, canonical_json, digest_bytes, digest_obj

log = logging.getLogger(__name__)

#: literal written for MISSING values in record files
MISSING_TOKEN = "∅"
STYLES = ("classic", "sleek", "rugged", "compact", "deluxe", "eco", "vintage", "sport", "smart", "basic")
#: generator streams
_WORLD_STREAM = 0x574F524C44
_DAY_STREAM = 0x444159
#: population constants of the raw numerical features
RATING_MEAN, RATING_STD = 3.5, 0.8
LOG_PRICE_MEAN, LOG_PRICE_STD = 3.0, 0.5
DISCOUNT_MAX = 0.5
DISCOUNT_STD = DISCOUNT_MAX / np.sqrt(12.0)


@dataclass(frozen=True)
class PlantedWeights:
    """Coefficients of the ground-truth utility."""

    rating: float = 1.5
    price: float = -0.6
    discount: float = 0.3
    noise: float = 0.0
    #: product of standardized rating and discount
    rating_x_discount: float = 0.8
    brand_scale: float = 0.7
    style_scale: float = 0.5
    history_bonus: float = 0.5


@dataclass(frozen=True)
class SynthSpec:
    """Everything the generator output depends on.

    Args:
        seed: root seed
        n_days: number of day partitions
        groups_per_day: query groups per day
        items_per_group: inclusive range of items per group
        tau: noise temperature, 0 makes the purchase the utility argmax
        click_offset: shift of the click logit relative to the utility
        multi_purchase: also purchase further items, each with probability ``sigmoid(u / tau - 2)``
        availability: feature name -> first day it is present
        n_brands: distinct brand keys
        weights: planted utility coefficients

    """

    seed: int = 7
    n_days: int = 16
    groups_per_day: int = 200
    items_per_group: Tuple[int, int] = (8, 8)
    tau: float = 1.0
    click_offset: float = -1.0
    multi_purchase: bool = False
    availability: Tuple[Tuple[str, int], ...] = (("history", 8),)
    n_brands: int = 48
    brand_vocab: int = 64
    text_vocab: int = 256
    history_vocab: int = 64
    embed_dim: int = 4
    history_len: int = 5
    weights: PlantedWeights = field(default_factory=PlantedWeights)

    def __post_init__(self) -> None:
        lo, hi = self.items_per_group
        if self.n_days < 1 or self.groups_per_day < 1 or not 1 <= lo <= hi:
            raise ContractError(
                f"Need n_days, groups_per_day >= 1 and 1 <= items range, got {self.n_days},"
                f" {self.groups_per_day}, {self.items_per_group}"
            )
        if self.tau < 0:
            raise ContractError(f"Temperature must be non-negative, got {self.tau}")
        unknown = [name for name, _ in self.availability if name not in FEATURE_NAMES]
        if unknown:
            raise SchemaError(f"Availability names unknown features {unknown}")

    @property
    def schema(self) -> FeatureSchema:
        return canonical_schema(self)

    def first_day(self, name: str) -> int:
        return dict(self.availability).get(name, 0)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        doc["items_per_group"] = list(self.items_per_group)
        doc["availability"] = [list(pair) for pair in self.availability]
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SynthSpec":
        doc = dict(doc)
        if "items_per_group" in doc:
            doc["items_per_group"] = tuple(doc["items_per_group"])
        if "availability" in doc:
            doc["availability"] = tuple((str(name), int(day)) for name, day in doc["availability"])
        if "weights" in doc:
            doc["weights"] = PlantedWeights(**doc["weights"])
        return cls(**doc)

    def digest(self) -> str:
        return digest_obj(self.to_dict())


FEATURE_NAMES = ("rating", "price", "discount", "noise", "brand", "title", "history")


def canonical_schema(spec: Optional[SynthSpec] = None, with_discount: bool = True) -> FeatureSchema:
    """Schema of the generated records; ``with_discount=False`` gives the older layout used as warmstart base."""
    spec = spec or SynthSpec()
    specs = [
        FeatureSpec("rating", "numerical"),
        FeatureSpec("price", "numerical"),
        FeatureSpec("noise", "numerical"),
        FeatureSpec("brand", "categorical", vocab_size=spec.brand_vocab, embed_dim=spec.embed_dim),
        FeatureSpec("title", "text", ngram_n=3, vocab_size=spec.text_vocab, embed_dim=spec.embed_dim),
        FeatureSpec(
            "history", "sequential", max_len=spec.history_len, vocab_size=spec.history_vocab, embed_dim=spec.embed_dim
        ),
    ]
    schema = FeatureSchema(tuple(specs))
    return schema.with_feature(FeatureSpec("discount", "numerical")) if with_discount else schema


@dataclass(frozen=True)
class World:
    """Brand keys and affinities shared by all days."""

    brand_keys: np.ndarray
    brand_affinity: np.ndarray
    style_affinity: np.ndarray

    @classmethod
    def from_spec(cls, spec: SynthSpec) -> "World":
        rng = SplitMix64(spec.seed).fork(_WORLD_STREAM)
        keys = rng.fork(0).next_u64(spec.n_brands)
        brand = np.round(rng.fork(1).normal(spec.n_brands) * spec.weights.brand_scale, 6)
        style = np.round(rng.fork(2).normal(len(STYLES)) * spec.weights.style_scale, 6)
        return cls(keys, brand, style)

    def brand_of(self, key: int) -> int:
        return int(np.flatnonzero(self.brand_keys == np.uint64(key))[0])


def planted_utility(record: Mapping[str, Any], history: Sequence[int], world: World, weights: PlantedWeights) -> float:
    """Ground-truth utility of one item from its complete (never MISSING) raw values."""
    rating = (record["rating"] - RATING_MEAN) / RATING_STD
    price = (np.log(record["price"]) - LOG_PRICE_MEAN) / LOG_PRICE_STD
    discount = (record["discount"] - DISCOUNT_MAX / 2) / DISCOUNT_STD
    brand = world.brand_of(record["brand"])
    style = STYLES.index(record["title"].split()[-1])
    return float(
        weights.rating * rating
        + weights.price * price
        + weights.discount * discount
        + weights.noise * record["noise"]
        + weights.rating_x_discount * rating * discount
        + world.brand_affinity[brand]
        + world.style_affinity[style]
        + (weights.history_bonus if int(record["brand"]) in set(history) else 0.0)
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def generate_group(spec: SynthSpec, world: World, day: int, index: int) -> RankingGroup:
    """One query group; its draws come from the stream forked for ``(day, index)``."""
    rng = SplitMix64(spec.seed).fork(_DAY_STREAM).fork(day).fork(index)
    lo, hi = spec.items_per_group
    n = int(rng.fork(0).integers(lo, hi + 1, 1)[0])
    rating = np.round(RATING_MEAN + RATING_STD * rng.fork(1).normal(n), 6)
    price = np.round(np.exp(LOG_PRICE_MEAN + LOG_PRICE_STD * rng.fork(2).normal(n)), 2)
    discount = np.round(DISCOUNT_MAX * rng.fork(3).uniform(n), 6)
    noise = np.round(rng.fork(4).normal(n), 6)
    brands = rng.fork(5).integers(0, spec.n_brands, n)
    styles = rng.fork(6).integers(0, len(STYLES), n)
    n_hist = int(rng.fork(7).integers(0, spec.history_len + 3, 1)[0])
    history = [int(world.brand_keys[b]) for b in rng.fork(8).integers(0, spec.n_brands, n_hist)]
    items: List[FeatureRecord] = []
    for i in range(n):
        items.append(
            {
                "rating": float(rating[i]),
                "price": float(price[i]),
                "discount": float(discount[i]),
                "noise": float(noise[i]),
                "brand": int(world.brand_keys[brands[i]]),
                "title": f"b{int(brands[i]):02d} {STYLES[styles[i]]}",
                "history": list(history),
            }
        )
    utility = np.array([planted_utility(item, history, world, spec.weights) for item in items])
    if spec.tau == 0:
        noisy = utility
    else:
        noisy = utility / spec.tau + rng.fork(9).gumbel(n)
    purchase = np.zeros(n)
    purchase[int(np.argmax(noisy))] = 1.0
    if spec.multi_purchase and spec.tau > 0:
        extra = rng.fork(10).uniform(n) < _sigmoid(utility / spec.tau - 2.0)
        purchase[extra] = 1.0
    click = (rng.fork(11).uniform(n) < _sigmoid(utility + spec.click_offset)).astype(np.float64)
    click = np.maximum(click, purchase)
    for name, first in spec.availability:
        if day < first:
            for item in items:
                item[name] = MISSING
    return RankingGroup(
        query_id=day * spec.groups_per_day + index,
        day=day,
        items=items,
        labels={"purchase": purchase, "click": click},
        utility=utility,
    )


@dataclass
class SynthDataset:
    """Query groups in day order; ``days`` lists the partitions present."""

    groups: List[RankingGroup]
    days: List[int]
    schema: FeatureSchema
    spec: Optional[SynthSpec] = None

    def day_groups(self, day: int) -> List[RankingGroup]:
        return [g for g in self.groups if g.day == day]

    def day_digests(self) -> Dict[int, str]:
        schema = self.schema
        return {day: digest_bytes(day_text(self.day_groups(day), schema).encode("utf-8")) for day in self.days}

    def digest(self) -> str:
        """SHA-256 over the per-day record-file digests."""
        return digest_obj([[day, dig] for day, dig in sorted(self.day_digests().items())])


def generate(spec: SynthSpec) -> SynthDataset:
    """All days of the dataset."""
    world = World.from_spec(spec)
    groups = [generate_group(spec, world, day, g) for day in range(spec.n_days) for g in range(spec.groups_per_day)]
    log.info(f"Generated {len(groups)} groups over {spec.n_days} days (spec {spec.digest()[:12]})")
    return SynthDataset(groups, list(range(spec.n_days)), spec.schema, spec)


def window(dataset: SynthDataset, last_n_days: int) -> SynthDataset:
    """The most recent ``last_n_days`` partitions, in original order."""
    if not 1 <= last_n_days <= len(dataset.days):
        raise ContractError(f"Window of {last_n_days} days outside [1, {len(dataset.days)}]")
    days = dataset.days[-last_n_days:]
    keep = set(days)
    return SynthDataset([g for g in dataset.groups if g.day in keep], list(days), dataset.schema, dataset.spec)


def oracle_map(groups: Sequence[RankingGroup]) -> float:
    """mAP of ranking every group by its planted utility."""
    scored = []
    for group in groups:
        if group.utility is None:
            raise ContractError(f"Group {group.query_id} carries no planted utility")
        scored.append(ScoredGroup(group.query_id, group.utility, group.labels["purchase"]))
    return mean_ap(scored)


def project(groups: Sequence[RankingGroup], schema: FeatureSchema) -> List[RankingGroup]:
    """Copies of the groups whose records only keep the schema's features."""
    names = set(schema.names)
    return [
        RankingGroup(
            g.query_id, g.day, [{k: v for k, v in item.items() if k in names} for item in g.items], g.labels, g.utility
        )
        for g in groups
    ]


def _format_value(spec: FeatureSpec, value: Any) -> str:
    if value is MISSING:
        return MISSING_TOKEN
    if spec.kind == "numerical":
        return repr(float(value))
    if spec.kind == "sequential":
        return " ".join(str(int(key)) for key in value)
    return str(value)


def _parse_value(spec: FeatureSpec, text: str) -> Any:
    if text == MISSING_TOKEN:
        return MISSING
    if spec.kind == "numerical":
        return float(text)
    if spec.kind == "categorical":
        return int(text)
    if spec.kind == "sequential":
        return [int(key) for key in text.split()]
    return text


def record_columns(schema: FeatureSchema) -> List[str]:
    return ["day", "query_id", "item_idx", "label_purchase", "label_click"] + schema.names + ["utility"]


def day_text(groups: Sequence[RankingGroup], schema: FeatureSchema) -> str:
    """Record-file content of one day: a header, then one line per item."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(record_columns(schema))
    for group in groups:
        utility = group.utility if group.utility is not None else [None] * group.n_items
        for i, item in enumerate(group.items):
            writer.writerow(
                [group.day, group.query_id, i, int(group.labels["purchase"][i]), int(group.labels["click"][i])]
                + [_format_value(spec, item.get(spec.name, MISSING)) for spec in schema.specs]
                + ["" if utility[i] is None else repr(float(utility[i]))]
            )
    return buffer.getvalue()


def parse_day(text: str, schema: FeatureSchema) -> List[RankingGroup]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != record_columns(schema):
        raise SchemaError(f"Record file header {rows[:1]} does not match schema columns {record_columns(schema)}")
    groups: List[RankingGroup] = []
    pending: Dict[str, List[Any]] = {}

    def _flush() -> None:
        if pending:
            utility = None if "" in pending["utility"] else np.array(pending["utility"], dtype=np.float64)
            groups.append(
                RankingGroup(
                    pending["query_id"][0],
                    pending["day"][0],
                    pending["items"],
                    {"purchase": np.array(pending["purchase"]), "click": np.array(pending["click"])},
                    utility,
                )
            )
            pending.clear()

    for row in rows[1:]:
        day, query_id = int(row[0]), int(row[1])
        if pending and pending["query_id"][0] != query_id:
            _flush()
        if not pending:
            pending.update(day=[day], query_id=[query_id], items=[], purchase=[], click=[], utility=[])
        pending["purchase"].append(float(row[3]))
        pending["click"].append(float(row[4]))
        pending["items"].append({spec.name: _parse_value(spec, val) for spec, val in zip(schema.specs, row[5:-1])})
        pending["utility"].append(row[-1] if row[-1] == "" else float(row[-1]))
    _flush()
    return groups


def write_dataset(dataset: SynthDataset, path: str) -> Dict[int, str]:
    """Day files ``day_<d>.csv``, ``manifest.csv`` (``day,digest,count``), ``schema.txt`` and ``spec.json``."""
    os.makedirs(path, exist_ok=True)
    schema = dataset.schema
    manifest = []
    digests = {}
    for day in dataset.days:
        groups = dataset.day_groups(day)
        data = day_text(groups, schema).encode("utf-8")
        with open(os.path.join(path, f"day_{day:03d}.csv"), "wb") as fopen:
            fopen.write(data)
        digests[day] = digest_bytes(data)
        manifest.append(f"{day},{digests[day]},{sum(g.n_items for g in groups)}\n")
    with open(os.path.join(path, "manifest.csv"), "w", encoding="utf-8") as fopen:
        fopen.write("day,digest,count\n" + "".join(manifest))
    schema.save(os.path.join(path, "schema.txt"))
    if dataset.spec is not None:
        with open(os.path.join(path, "spec.json"), "w", encoding="utf-8") as fopen:
            fopen.write(canonical_json(dataset.spec.to_dict()) + "\n")
    log.info(f"Wrote {len(dataset.days)} day files to {path}")
    return digests


def read_dataset(path: str, days: Optional[Sequence[int]] = None) -> SynthDataset:
    """Load day files, checking each against its manifest digest and item count."""
    with open(os.path.join(path, "manifest.csv"), encoding="utf-8") as fopen:
        manifest = list(csv.DictReader(fopen))
    spec = None
    spec_path = os.path.join(path, "spec.json")
    if os.path.isfile(spec_path):
        with open(spec_path, encoding="utf-8") as fopen:
            spec = SynthSpec.from_dict(json.load(fopen))
    schema = FeatureSchema.load(os.path.join(path, "schema.txt"))
    wanted = None if days is None else set(days)
    groups: List[RankingGroup] = []
    loaded: List[int] = []
    for entry in manifest:
        day = int(entry["day"])
        if wanted is not None and day not in wanted:
            continue
        with open(os.path.join(path, f"day_{day:03d}.csv"), "rb") as fopen:
            data = fopen.read()
        if digest_bytes(data) != entry["digest"]:
            raise ContractError(f"Day {day} file does not match its manifest digest")
        day_groups = parse_day(data.decode("utf-8"), schema)
        if sum(g.n_items for g in day_groups) != int(entry["count"]):
            raise ContractError(f"Day {day} holds another item count than its manifest says")
        groups.extend(day_groups)
        loaded.append(day)
    return SynthDataset(groups, loaded, schema, spec)
