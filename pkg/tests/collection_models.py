"""Tiny schemas, configs and datasets shared by the tests."""

from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from cvrscale.config import (
    BackboneConfig,
    DcnConfig,
    DhenConfig,
    MaskNetConfig,
    MmoeConfig,
    RankMixerConfig,
    RunConfig,
    TransformerConfig,
)
from cvrscale.features import MISSING, FeatureRecord, FeatureSchema, FeatureSpec
from cvrscale.numerics import Tensor, backward
from cvrscale.synth import SynthDataset, SynthSpec, generate

TINY_SCHEMA = FeatureSchema(
    (
        FeatureSpec("rating", "numerical"),
        FeatureSpec("brand", "categorical", vocab_size=8, embed_dim=2),
        FeatureSpec("title", "text", ngram_n=3, vocab_size=16, embed_dim=2),
        FeatureSpec("history", "sequential", max_len=3, vocab_size=8, embed_dim=2),
    )
)

TINY_BACKBONES: Dict[str, BackboneConfig] = {
    "dcnv2": DcnConfig(cross_width=4, deep_width=3, n_cross_layers=2, n_deep_layers=1, low_rank=2),
    "masknet": MaskNetConfig(cross_width=4, deep_width=3, parallel_blocks=2, sequential_blocks=2),
    "transformer": TransformerConfig(d_model=4, seq_len=2, n_layers=1, n_heads=2, ffn_dim=4),
    "rankmixer": RankMixerConfig(d_model=4, seq_len=2, n_layers=1, ffn_dim=4, n_heads=2),
}
TINY_BACKBONES["dhen"] = DhenConfig(members=(TINY_BACKBONES["dcnv2"], TINY_BACKBONES["masknet"]))

TINY_SYNTH = SynthSpec(
    seed=3,
    n_days=3,
    groups_per_day=8,
    items_per_group=(4, 6),
    availability=(("history", 1),),
    n_brands=12,
    brand_vocab=16,
    text_vocab=32,
    history_vocab=16,
    embed_dim=2,
    history_len=3,
)


def tiny_records() -> List[FeatureRecord]:
    return [
        {"rating": 4.5, "brand": 11, "title": "b01 sleek", "history": [11, 12]},
        {"rating": 2.0, "brand": MISSING, "title": "", "history": MISSING},
        {"rating": MISSING, "brand": 12, "title": "b02 eco", "history": [3, 4, 5, 6]},
    ]


def tiny_run_config(backbone: Optional[BackboneConfig] = None, **changes: Any) -> RunConfig:
    config = RunConfig(
        backbone=backbone or TINY_BACKBONES["masknet"],
        mmoe=MmoeConfig(n_experts=2),
        batch_size=4,
        epochs=2,
        seed=0,
        log_every=1,
    )
    return config.replace(**changes)


def tiny_dataset(spec: SynthSpec = TINY_SYNTH) -> SynthDataset:
    return generate(spec)


def check_gradients(
    loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-6, rtol: float = 1e-4, atol: float = 1e-7
) -> None:
    """Compare the backward pass against central finite differences for every entry of ``tensors``."""
    for tensor in tensors:
        tensor.zero_grad()
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    for tensor, expected in zip(tensors, analytic):
        numeric = np.zeros_like(tensor.data)
        for idx in np.ndindex(*tensor.shape):
            orig = tensor.data[idx]
            tensor.data[idx] = orig + eps
            upper = loss_fn().item()
            tensor.data[idx] = orig - eps
            lower = loss_fn().item()
            tensor.data[idx] = orig
            numeric[idx] = (upper - lower) / (2 * eps)
        np.testing.assert_allclose(expected, numeric, rtol=rtol, atol=atol, err_msg=str(tensor.name))
    for tensor in tensors:
        tensor.zero_grad()
