"""Feature-interaction backbones.

Vectors are rows (batch first), so a linear map is ``x @ W + b`` with ``W`` of shape ``(in, out)``. Written
in that layout the cross layers read

- DCNv2: ``x_{l+1} = x_0 * ((x_l @ V_l) @ U_l + b_l) + x_l`` with ``V_l: w x r`` and ``U_l: r x w``
- MaskNet: ``x_{l+1} = (relu(x_0 @ V_l + b_l) @ U_l) * x_l``, no residual

Parameter names follow ``<family>/<layer>/<role>``; the ``input`` layer is the only one whose shape depends on
the feature width ``D`` and forms the warmstart boundary.

"""

import math
from typing import Dict, List, Mapping

import numpy as np

from cvrscale.config import (
    BackboneConfig,
    DcnConfig,
    DhenConfig,
    MaskNetConfig,
    RankMixerConfig,
    TransformerConfig,
)
from cvrscale.errors import ConfigError, DimensionError
from cvrscale.numerics import (
    ParamFactory,
    Tensor,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    softmax_rows,
    take,
    transpose,
)

Params = Mapping[str, Tensor]


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    """Affine map with parameters ``<name>/weight`` and ``<name>/bias``."""
    weight = params[f"{name}/weight"]
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"Layer `{name}` expects width {weight.shape[0]}, got input {x.shape}")
    return matmul(x, weight) + params[f"{name}/bias"]


def _init_linear(factory: ParamFactory, name: str, fan_in: int, fan_out: int) -> Dict[str, Tensor]:
    return {
        f"{name}/weight": factory.glorot(f"{name}/weight", (fan_in, fan_out)),
        f"{name}/bias": factory.zeros(f"{name}/bias", (fan_out,)),
    }


def project_input(x0: Tensor, weight: Tensor, bias: Tensor, width: int) -> Tensor:
    """One-layer relu projection of ``x0`` to ``width`` columns.

    Example:
        >>> x0 = Tensor([[1.0, 2.0]])
        >>> project_input(x0, Tensor(np.eye(2)), Tensor(np.zeros(2)), width=2).data.tolist()
        [[1.0, 2.0]]

    """
    if weight.shape != (x0.shape[-1], width) or bias.shape != (width,):
        raise DimensionError(
            f"Failed `project_input`, weight {weight.shape} / bias {bias.shape} for input {x0.shape} -> {width}"
        )
    return relu(matmul(x0, weight) + bias)


def dcn_cross_layer(x_l: Tensor, x_0: Tensor, u: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """DCNv2 low-rank cross layer with residual.

    Example:
        >>> x = Tensor([[1.0, 2.0]])
        >>> eye = Tensor(np.eye(2))
        >>> dcn_cross_layer(x, x, eye, eye, Tensor(np.zeros(2))).data.tolist()
        [[2.0, 6.0]]

    """
    width, rank = v.shape
    if rank > width:
        raise ConfigError(f"Failed `dcn_cross_layer`, rank {rank} exceeds width {width}")
    if u.shape != (rank, width) or x_l.shape[-1] != width or x_0.shape != x_l.shape:
        raise DimensionError(f"Failed `dcn_cross_layer`, U {u.shape} V {v.shape} x_l {x_l.shape} x_0 {x_0.shape}")
    return x_0 * (matmul(matmul(x_l, v), u) + b) + x_l


def masknet_block(x_in: Tensor, x_0: Tensor, u: Tensor, v: Tensor, b: Tensor) -> Tensor:
    """Instance-guided mask applied to ``x_in``; no residual."""
    if v.shape[0] != x_0.shape[-1] or u.shape != (v.shape[1], x_in.shape[-1]) or b.shape != (v.shape[1],):
        raise DimensionError(f"Failed `masknet_block`, U {u.shape} V {v.shape} x_in {x_in.shape} x_0 {x_0.shape}")
    return matmul(relu(matmul(x_0, v) + b), u) * x_in


def masknet_forward(x0: Tensor, config: MaskNetConfig, params: Params, prefix: str = "masknet") -> Tensor:
    """Project ``x0``, run the mask branches and the FC-DNN.

    Parallel branches are concatenated; each branch is a chain of ``sequential_blocks`` blocks
    ``M_n(... M_1(x0, x0) ..., x0)``.
    """
    proj = project_input(x0, params[f"{prefix}/input/weight"], params[f"{prefix}/input/bias"], config.cross_width)
    branches = []
    for p in range(config.n_branches):
        x = proj
        for s in range(config.chain_length):
            name = f"{prefix}/block{p}.{s}"
            x = masknet_block(x, proj, params[f"{name}/U"], params[f"{name}/V"], params[f"{name}/bias"])
        branches.append(x)
    merged = branches[0] if len(branches) == 1 else concat(branches, axis=-1)
    return relu(linear(merged, params, f"{prefix}/dnn"))


def tokenize_global(x0: Tensor, weight: Tensor, bias: Tensor, seq_len: int, d_model: int) -> Tensor:
    """Relu-project ``x0`` and split the result row-major into ``seq_len`` tokens of ``d_model``."""
    flat = project_input(x0, weight, bias, seq_len * d_model)
    return reshape(flat, (x0.shape[0], seq_len, d_model))


def _multi_head_attention(x: Tensor, params: Params, name: str, n_heads: int) -> Tensor:
    batch, seq_len, d_model = x.shape
    head_dim = d_model // n_heads

    def _heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, seq_len, n_heads, head_dim)), (0, 2, 1, 3))

    q = _heads(linear(x, params, f"{name}/q"))
    k = _heads(linear(x, params, f"{name}/k"))
    v = _heads(linear(x, params, f"{name}/v"))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    # full bidirectional attention, global tokens carry no order
    context = matmul(softmax_rows(scores), v)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, seq_len, d_model))
    return linear(merged, params, f"{name}/o")


def transformer_encode(
    tokens: Tensor, config: TransformerConfig, params: Params, prefix: str = "transformer"
) -> Tensor:
    """Pre-norm encoder layers; returns the token grid."""
    if tokens.shape[1:] != (config.seq_len, config.d_model):
        raise DimensionError(f"Transformer expects tokens (B, {config.seq_len}, {config.d_model}), got {tokens.shape}")
    x = tokens
    for layer in range(config.n_layers):
        name = f"{prefix}/layer{layer}"
        normed = layer_norm(x, params[f"{name}/ln1/gain"], params[f"{name}/ln1/bias"])
        x = x + _multi_head_attention(normed, params, f"{name}/attn", config.n_heads)
        normed = layer_norm(x, params[f"{name}/ln2/gain"], params[f"{name}/ln2/bias"])
        x = x + linear(relu(linear(normed, params, f"{name}/ffn1")), params, f"{name}/ffn2")
    return x


def transformer_forward(
    tokens: Tensor, config: TransformerConfig, params: Params, prefix: str = "transformer"
) -> Tensor:
    """Encode, then reduce ``mean-pool || first token`` with a final linear to ``d_model``."""
    encoded = transformer_encode(tokens, config, params, prefix)
    batch = encoded.shape[0]
    pooled = encoded.mean(axis=1)
    first = reshape(take(encoded, np.array([0]), axis=1), (batch, config.d_model))
    return linear(concat([pooled, first], axis=-1), params, f"{prefix}/head")


def mixing_indices(seq_len: int, n_heads: int) -> np.ndarray:
    """Flat gather indices of the token-mixing permutation.

    With tokens laid out as ``(seq_len, n_heads)`` head-slices, output slot ``(t, h)`` reads input slot
    ``((t + h) mod seq_len, h)``.

    Example:
        >>> mixing_indices(2, 2).tolist()
        [0, 3, 2, 1]

    """
    return np.array(
        [((t + h) % seq_len) * n_heads + h for t in range(seq_len) for h in range(n_heads)], dtype=np.int64
    )


def token_mixing(tokens: Tensor, n_heads: int) -> Tensor:
    """Rotate head-slices across tokens; a pure permutation of values."""
    batch, seq_len, d_model = tokens.shape
    head_dim = d_model // n_heads
    slots = reshape(tokens, (batch, seq_len * n_heads, head_dim))
    mixed = take(slots, mixing_indices(seq_len, n_heads), axis=1)
    return reshape(mixed, (batch, seq_len, d_model))


def _per_token_linear(x: Tensor, params: Params, name: str) -> Tensor:
    # (B, S, in) -> (S, B, in) @ (S, in, out) -> (B, S, out)
    out = matmul(transpose(x, (1, 0, 2)), params[f"{name}/weight"])
    return transpose(out, (1, 0, 2)) + params[f"{name}/bias"]


def rankmixer_forward(tokens: Tensor, config: RankMixerConfig, params: Params, prefix: str = "rankmixer") -> Tensor:
    """Token mixing then independent per-token FFNs with residual, mean-pooled over tokens."""
    if tokens.shape[1:] != (config.seq_len, config.d_model):
        raise DimensionError(f"RankMixer expects tokens (B, {config.seq_len}, {config.d_model}), got {tokens.shape}")
    x = tokens
    for layer in range(config.n_layers):
        name = f"{prefix}/layer{layer}"
        # permutation only, values pass through unchanged
        x = token_mixing(x, config.n_heads)
        hidden = relu(_per_token_linear(x, params, f"{name}/ffn1"))
        x = x + _per_token_linear(hidden, params, f"{name}/ffn2")
    return x.mean(axis=1)


class Backbone:
    """Parameter layout and forward pass of one backbone family."""

    def __init__(self, config: BackboneConfig, prefix: str) -> None:
        self.config = config
        self.prefix = prefix

    @property
    def hidden_width(self) -> int:
        return self.config.hidden_width

    def input_param_names(self) -> List[str]:
        """Names of the ``D``-dependent input projection."""
        return [f"{self.prefix}/input/weight", f"{self.prefix}/input/bias"]

    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        raise NotImplementedError

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        raise NotImplementedError


class DcnBackbone(Backbone):
    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        cfg, pre = self.config, self.prefix
        params = _init_linear(factory, f"{pre}/input", in_dim, cfg.cross_width)
        for layer in range(cfg.n_cross_layers):
            name = f"{pre}/cross{layer}"
            params[f"{name}/V"] = factory.glorot(f"{name}/V", (cfg.cross_width, cfg.low_rank))
            params[f"{name}/U"] = factory.glorot(f"{name}/U", (cfg.low_rank, cfg.cross_width))
            params[f"{name}/bias"] = factory.zeros(f"{name}/bias", (cfg.cross_width,))
        width = cfg.cross_width
        for layer in range(cfg.n_deep_layers):
            params.update(_init_linear(factory, f"{pre}/deep{layer}", width, cfg.deep_width))
            width = cfg.deep_width
        return params

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        cfg, pre = self.config, self.prefix
        proj = project_input(x0, params[f"{pre}/input/weight"], params[f"{pre}/input/bias"], cfg.cross_width)
        cross = proj
        for layer in range(cfg.n_cross_layers):
            name = f"{pre}/cross{layer}"
            cross = dcn_cross_layer(cross, proj, params[f"{name}/U"], params[f"{name}/V"], params[f"{name}/bias"])
        deep = proj
        for layer in range(cfg.n_deep_layers):
            deep = relu(linear(deep, params, f"{pre}/deep{layer}"))
        # cross and deep branches side by side
        return concat([cross, deep], axis=-1)


class MaskNetBackbone(Backbone):
    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        cfg, pre = self.config, self.prefix
        params = _init_linear(factory, f"{pre}/input", in_dim, cfg.cross_width)
        for p in range(cfg.n_branches):
            for s in range(cfg.chain_length):
                name = f"{pre}/block{p}.{s}"
                params[f"{name}/V"] = factory.glorot(f"{name}/V", (cfg.cross_width, cfg.cross_width))
                params[f"{name}/bias"] = factory.zeros(f"{name}/bias", (cfg.cross_width,))
                params[f"{name}/U"] = factory.glorot(f"{name}/U", (cfg.cross_width, cfg.cross_width))
        params.update(_init_linear(factory, f"{pre}/dnn", cfg.n_branches * cfg.cross_width, cfg.deep_width))
        return params

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        return masknet_forward(x0, self.config, params, self.prefix)


def _init_ln(factory: ParamFactory, name: str, width: int) -> Dict[str, Tensor]:
    return {
        f"{name}/gain": factory.ones(f"{name}/gain", (width,)),
        f"{name}/bias": factory.zeros(f"{name}/bias", (width,)),
    }


class TransformerBackbone(Backbone):
    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        cfg, pre = self.config, self.prefix
        d = cfg.d_model
        params = _init_linear(factory, f"{pre}/input", in_dim, cfg.seq_len * d)
        for layer in range(cfg.n_layers):
            name = f"{pre}/layer{layer}"
            params.update(_init_ln(factory, f"{name}/ln1", d))
            for role in ("q", "k", "v", "o"):
                params.update(_init_linear(factory, f"{name}/attn/{role}", d, d))
            params.update(_init_ln(factory, f"{name}/ln2", d))
            params.update(_init_linear(factory, f"{name}/ffn1", d, cfg.ffn_dim))
            params.update(_init_linear(factory, f"{name}/ffn2", cfg.ffn_dim, d))
        params.update(_init_linear(factory, f"{pre}/head", 2 * d, d))
        return params

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        cfg, pre = self.config, self.prefix
        weight, bias = params[f"{pre}/input/weight"], params[f"{pre}/input/bias"]
        tokens = tokenize_global(x0, weight, bias, cfg.seq_len, cfg.d_model)
        return transformer_forward(tokens, cfg, params, pre)


class RankMixerBackbone(Backbone):
    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        cfg, pre = self.config, self.prefix
        params = _init_linear(factory, f"{pre}/input", in_dim, cfg.seq_len * cfg.d_model)
        for layer in range(cfg.n_layers):
            for role, fan_in, fan_out in (("ffn1", cfg.d_model, cfg.ffn_dim), ("ffn2", cfg.ffn_dim, cfg.d_model)):
                name = f"{pre}/layer{layer}/{role}"
                params[f"{name}/weight"] = factory.glorot(f"{name}/weight", (cfg.seq_len, fan_in, fan_out))
                params[f"{name}/bias"] = factory.zeros(f"{name}/bias", (cfg.seq_len, fan_out))
        return params

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        cfg, pre = self.config, self.prefix
        weight, bias = params[f"{pre}/input/weight"], params[f"{pre}/input/bias"]
        tokens = tokenize_global(x0, weight, bias, cfg.seq_len, cfg.d_model)
        return rankmixer_forward(tokens, cfg, params, pre)


class DhenBackbone(Backbone):
    """Members run on the same ``x0`` and their hidden outputs are concatenated."""

    def __init__(self, config: DhenConfig, prefix: str) -> None:
        super().__init__(config, prefix)
        self.members = [
            build_backbone(member, f"{prefix}/{i}.{member.family}") for i, member in enumerate(config.members)
        ]

    def input_param_names(self) -> List[str]:
        return [name for member in self.members for name in member.input_param_names()]

    def init_params(self, factory: ParamFactory, in_dim: int) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for member in self.members:
            params.update(member.init_params(factory, in_dim))
        return params

    def forward(self, x0: Tensor, params: Params) -> Tensor:
        return dhen_forward(x0, self.members, params)


def dhen_forward(x0: Tensor, members: List[Backbone], params: Params) -> Tensor:
    """Concatenate the hidden outputs of every member backbone."""
    if not members:
        raise ConfigError("Failed `dhen_forward`, no member backbones")
    outputs = [member.forward(x0, params) for member in members]
    return outputs[0] if len(outputs) == 1 else concat(outputs, axis=-1)


_BACKBONES = {
    DcnConfig: DcnBackbone,
    MaskNetConfig: MaskNetBackbone,
    TransformerConfig: TransformerBackbone,
    RankMixerConfig: RankMixerBackbone,
    DhenConfig: DhenBackbone,
}


def build_backbone(config: BackboneConfig, prefix: str = "") -> Backbone:
    """Backbone object for a config; ``prefix`` defaults to the family name."""
    return _BACKBONES[type(config)](config, prefix or config.family)
