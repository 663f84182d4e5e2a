"""Analytic inference FLOPs of the backbones.

Convention: one multiply-accumulate is 2 FLOPs, so an ``m -> n`` linear map costs ``2 * m * n`` per row; bias adds
are folded into the map. Activations, normalizations, softmax, Hadamard products, residual adds and pooling
cost 1 FLOP per element touched. Token mixing is a pure data movement and costs nothing.

"""

from cvrscale.config import BackboneConfig, DcnConfig, DhenConfig, MaskNetConfig, RankMixerConfig, TransformerConfig
from cvrscale.errors import ContractError


def linear_flops(fan_in: int, fan_out: int, rows: int = 1) -> int:
    """FLOPs of applying an ``fan_in -> fan_out`` map to ``rows`` rows.

    Example:
        >>> linear_flops(4, 3, rows=2)
        48

    """
    return 2 * fan_in * fan_out * rows


def _dcn_flops(cfg: DcnConfig, in_dim: int) -> int:
    w, r = cfg.cross_width, cfg.low_rank
    total = linear_flops(in_dim, w) + w
    # two low-rank maps, Hadamard with x0, residual
    total += cfg.n_cross_layers * (linear_flops(w, r) + linear_flops(r, w) + 2 * w)
    width = w
    for _ in range(cfg.n_deep_layers):
        total += linear_flops(width, cfg.deep_width) + cfg.deep_width
        width = cfg.deep_width
    return total


def _masknet_flops(cfg: MaskNetConfig, in_dim: int) -> int:
    w = cfg.cross_width
    total = linear_flops(in_dim, w) + w
    per_block = linear_flops(w, w) + w + linear_flops(w, w) + w
    total += cfg.n_branches * cfg.chain_length * per_block
    return total + linear_flops(cfg.n_branches * w, cfg.deep_width) + cfg.deep_width


def _transformer_flops(cfg: TransformerConfig, in_dim: int) -> int:
    s, d, f, h = cfg.seq_len, cfg.d_model, cfg.ffn_dim, cfg.n_heads
    total = linear_flops(in_dim, s * d) + s * d
    per_layer = (
        2 * s * d  # two layer norms
        + 3 * linear_flops(d, d, s)  # q, k, v
        + 2 * s * s * d  # scores
        + s * s * h  # softmax
        + 2 * s * s * d  # weighted values
        + linear_flops(d, d, s)  # output projection
        + linear_flops(d, f, s)
        + s * f
        + linear_flops(f, d, s)
        + 2 * s * d  # residuals
    )
    return total + cfg.n_layers * per_layer + s * d + linear_flops(2 * d, d)


def _rankmixer_flops(cfg: RankMixerConfig, in_dim: int) -> int:
    s, d, f = cfg.seq_len, cfg.d_model, cfg.ffn_dim
    total = linear_flops(in_dim, s * d) + s * d
    per_layer = linear_flops(d, f, s) + s * f + linear_flops(f, d, s) + s * d
    return total + cfg.n_layers * per_layer + s * d


def count_flops(config: BackboneConfig, in_dim: int, batch: int = 1) -> int:
    """Inference FLOPs of the backbone for ``batch`` rows of ``in_dim`` features.

    Args:
        config: backbone configuration
        in_dim: width ``D`` of ``x0``
        batch: number of rows

    Returns:
        integer FLOP count, linear in ``batch``

    """
    if in_dim < 1 or batch < 1:
        raise ContractError(f"Failed `count_flops`, need in_dim >= 1 and batch >= 1, got {in_dim} / {batch}")
    if isinstance(config, DhenConfig):
        return sum(count_flops(member, in_dim, batch) for member in config.members)
    per_row = {
        DcnConfig: _dcn_flops,
        MaskNetConfig: _masknet_flops,
        TransformerConfig: _transformer_flops,
        RankMixerConfig: _rankmixer_flops,
    }[type(config)](config, in_dim)
    return per_row * batch
