"""The CVR ranking model: embedding tables, a backbone and the multi-task head over one parameter store."""

import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence

import numpy as np

from cvrscale.backbones import Backbone, build_backbone
from cvrscale.config import RunConfig
from cvrscale.errors import DimensionError
from cvrscale.features import EncodedBatch, FeatureRecord, FeatureSchema, NormStats, assemble_batch, encode_batch
from cvrscale.features import init_tables
from cvrscale.multitask import init_mmoe_params, mmoe_forward
from cvrscale.numerics import ParamFactory, Tensor

log = logging.getLogger(__name__)


class CvrModel:
    """Parameters plus the schema and normalization they were trained with.

    Args:
        schema: feature layout defining ``x0``
        config: run configuration (backbone and head shapes, seed)
        params: named parameters; insertion order is the checkpoint order
        stats: normalization of numerical features

    """

    def __init__(
        self, schema: FeatureSchema, config: RunConfig, params: "OrderedDict[str, Tensor]", stats: NormStats
    ) -> None:
        self.schema = schema
        self.config = config
        self.params = params
        self.stats = stats
        self.backbone: Backbone = build_backbone(config.backbone)
        self._check_params()

    @classmethod
    def initialize(
        cls, schema: FeatureSchema, config: RunConfig, stats: NormStats, seed: Optional[int] = None
    ) -> "CvrModel":
        """Fresh parameters drawn from ``seed`` (the run seed by default)."""
        factory = ParamFactory(config.seed if seed is None else seed)
        return cls(schema, config, fresh_params(schema, config, factory), stats)

    def _check_params(self) -> None:
        expected = param_layout(self.schema, self.config)
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise DimensionError(f"Model parameters lack {missing}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise DimensionError(f"Parameter `{name}` is {self.params[name].shape}, expected {shape}")

    @property
    def tasks(self) -> Sequence[str]:
        return self.config.mmoe.tasks

    @property
    def primary_task(self) -> str:
        return self.config.mmoe.primary_task

    def input_projection_names(self) -> List[str]:
        return self.backbone.input_param_names()

    def encode(self, records: Sequence[FeatureRecord]) -> EncodedBatch:
        return encode_batch(records, self.schema, self.stats)

    def forward(self, encoded: EncodedBatch) -> Dict[str, Tensor]:
        """Per-task logits of shape ``(n_items,)``."""
        x0 = assemble_batch(encoded, self.schema, self.params)
        hidden = self.backbone.forward(x0, self.params)
        logits, _ = mmoe_forward(hidden, self.config.mmoe, self.params)
        return logits

    def score_encoded(self, encoded: EncodedBatch) -> np.ndarray:
        """Primary-task logits as float64, no gradient bookkeeping kept."""
        return self.forward(encoded)[self.primary_task].numpy()

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        return self.score_encoded(self.encode(records))

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()


def fresh_params(schema: FeatureSchema, config: RunConfig, factory: ParamFactory) -> "OrderedDict[str, Tensor]":
    """Tables, then backbone, then head; every parameter keyed by its own name."""
    backbone = build_backbone(config.backbone)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    params.update(init_tables(schema, factory))
    params.update(backbone.init_params(factory, schema.input_dim))
    params.update(init_mmoe_params(config.mmoe, backbone.hidden_width, factory))
    return params


def param_layout(schema: FeatureSchema, config: RunConfig) -> "OrderedDict[str, tuple]":
    """Names and shapes of every parameter the model needs, without drawing values."""
    params = fresh_params(schema, config, ParamFactory(0))
    return OrderedDict((name, tensor.shape) for name, tensor in params.items())
