"""Multi-gate mixture of experts over the backbone hidden vector, one logit per task."""

from typing import Dict, Mapping, Tuple

from cvrscale.config import MmoeConfig
from cvrscale.errors import DimensionError
from cvrscale.numerics import ParamFactory, Tensor, concat, matmul, relu, reshape, softmax_rows

Params = Mapping[str, Tensor]


def expert_width(config: MmoeConfig, hidden_width: int) -> int:
    return config.expert_dim or hidden_width


def init_mmoe_params(
    config: MmoeConfig, hidden_width: int, factory: ParamFactory, prefix: str = "mmoe"
) -> Dict[str, Tensor]:
    """Experts ``<prefix>/expert<i>``, one gate ``<prefix>/gate.<task>`` and one head ``<prefix>/head.<task>``
    per task."""
    width = expert_width(config, hidden_width)
    params: Dict[str, Tensor] = {}

    def _linear(name: str, fan_in: int, fan_out: int) -> None:
        params[f"{name}/weight"] = factory.glorot(f"{name}/weight", (fan_in, fan_out))
        params[f"{name}/bias"] = factory.zeros(f"{name}/bias", (fan_out,))

    for expert in range(config.n_experts):
        _linear(f"{prefix}/expert{expert}", hidden_width, width)
    for task in config.tasks:
        _linear(f"{prefix}/gate.{task}", hidden_width, config.n_experts)
        _linear(f"{prefix}/head.{task}", width, 1)
    return params


def _affine(x: Tensor, params: Params, name: str) -> Tensor:
    weight = params.get(f"{name}/weight")
    if weight is None:
        raise DimensionError(f"MMoE parameters lack `{name}`")
    if weight.shape[0] != x.shape[-1]:
        raise DimensionError(f"MMoE layer `{name}` expects width {weight.shape[0]}, got {x.shape}")
    return matmul(x, weight) + params[f"{name}/bias"]


def mmoe_gates(hidden: Tensor, config: MmoeConfig, params: Params, prefix: str = "mmoe") -> Dict[str, Tensor]:
    """Per-task gate distributions over experts, each of shape ``(B, n_experts)``."""
    return {task: softmax_rows(_affine(hidden, params, f"{prefix}/gate.{task}")) for task in config.tasks}


def mmoe_forward(
    hidden: Tensor, config: MmoeConfig, params: Params, prefix: str = "mmoe"
) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """Task logits of shape ``(B,)`` and the gates that produced them.

    Args:
        hidden: backbone output ``(B, H)``
        config: experts and task list
        params: MMoE parameters

    Returns:
        logits per task in task order, gates per task

    """
    batch = hidden.shape[0]
    experts = [relu(_affine(hidden, params, f"{prefix}/expert{e}")) for e in range(config.n_experts)]
    width = experts[0].shape[-1]
    stacked = concat([reshape(e, (batch, 1, width)) for e in experts], axis=1)
    gates = mmoe_gates(hidden, config, params, prefix)
    logits = {}
    for task in config.tasks:
        # convex combination of experts: (B, 1, E) @ (B, E, W)
        mixed = reshape(matmul(reshape(gates[task], (batch, 1, config.n_experts)), stacked), (batch, width))
        logits[task] = reshape(_affine(mixed, params, f"{prefix}/head.{task}"), (batch,))
    return logits, gates
