"""Analytic parameter and FLOP accounting.

All arithmetic is exact integer closed forms derived from the model
constructors, so the totals can be checked against the number of trainable
scalars each model actually instantiates. The FLOP convention (one
multiply-accumulate = 2 FLOPs; only matmuls and convolutions counted,
norms/softmax/activations excluded) is carried in every report because
published figures rarely state theirs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .selector import SelectorConfig
from .student import SanVitConfig
from .vit import ViTConfig

FLOP_CONVENTION = (
    "1 MAC = 2 FLOPs; matmul and convolution kernels only "
    "(layer norm, softmax, activations, bias adds excluded); forward pass, one image"
)


@dataclass
class CostReport:
    params_total: int = 0
    params_by_component: dict = field(default_factory=dict)
    flops_total: int = 0
    flops_by_component: dict = field(default_factory=dict)
    attention_comparisons: int = 0
    notes: str = FLOP_CONVENTION

    def __post_init__(self):
        if self.params_by_component:
            assert self.params_total == sum(self.params_by_component.values())
        if self.flops_by_component:
            assert self.flops_total == sum(self.flops_by_component.values())

    def as_dict(self) -> dict:
        return {
            "params_total": self.params_total,
            "params_by_component": dict(self.params_by_component),
            "flops_total": self.flops_total,
            "flops_by_component": dict(self.flops_by_component),
            "attention_comparisons": self.attention_comparisons,
            "notes": self.notes,
        }


def attention_comparisons(seq: int) -> int:
    """Query-key score entries of one attention map: seq^2 (single layer,
    single head)."""
    if seq < 1:
        raise ValueError(f"sequence length must be >= 1, got {seq}")
    return seq * seq


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def conv2d_flops(h_out: int, w_out: int, c_out: int, c_in: int, kh: int, kw: int) -> int:
    return 2 * h_out * w_out * c_out * c_in * kh * kw


# -- parameter counting ---------------------------------------------------------


def _vit_param_components(config: ViTConfig) -> dict[str, int]:
    d = config.dim
    comp = {
        "patch_embed": config.patch_dim * d + d,
        "cls": d,
        "pos_embed": config.seq_len * d if config.pe_mode == "learned" else 0,
        # per block: attention 4D^2+4D, MLP 8D^2+5D, two layer norms 4D
        "blocks": config.depth * (12 * d * d + 13 * d),
        "final_norm": 2 * d,
        "head": d * config.num_classes + config.num_classes,
    }
    return comp


def _selector_param_components(config: SelectorConfig) -> dict[str, int]:
    first = config.stages[0][0]
    comp = {"stem": first * 3 * 4 * 4 + first}  # 4x4 stride-2 stem
    in_ch = first
    total_blocks = 0
    for s, (ch, blocks) in enumerate(config.stages):
        for b in range(blocks):
            stride2 = s > 0 and b == 0
            k1 = 16 if stride2 else 9  # 4x4 on stage transitions, else 3x3
            n = ch * in_ch * k1 + ch  # conv1
            n += ch * ch * 9 + ch  # conv2
            if stride2 or in_ch != ch:
                kp = 4 if stride2 else 1  # 2x2 strided projection, else 1x1
                n += ch * in_ch * kp + ch
            total_blocks += n
            in_ch = ch
    comp["blocks"] = total_blocks
    comp["head"] = in_ch * config.n_outputs + config.n_outputs
    return comp


def count_params(config, selector: SelectorConfig | None = None) -> CostReport:
    """Exact trainable-scalar counts for any model config.

    For a student config the count covers the student network itself; pass
    ``selector`` to include the selector CNN as a pipeline component.
    """
    if isinstance(config, ViTConfig):
        comp = _vit_param_components(config)
        comparisons = attention_comparisons(config.n_patches)
    elif isinstance(config, SelectorConfig):
        comp = _selector_param_components(config)
        comparisons = attention_comparisons(config.k)
    elif isinstance(config, SanVitConfig):
        base = dict(config.base.__dict__)
        base["pe_mode"] = "sinusoidal" if config.base.pe_mode == "learned" else config.base.pe_mode
        comp = _vit_param_components(ViTConfig(**base))
        comp["pos_slots"] = (config.k + 1) * config.base.dim if config.pe_variant == "learned_postslice" else 0
        if selector is not None:
            comp["selector"] = sum(_selector_param_components(selector).values())
        comparisons = attention_comparisons(config.k)
    else:
        raise TypeError(f"unsupported config type {type(config).__name__}")
    comp = {k: v for k, v in comp.items() if v}
    return CostReport(params_total=sum(comp.values()), params_by_component=comp,
                      attention_comparisons=comparisons)


# -- FLOP counting ---------------------------------------------------------------


def _transformer_flops(dim: int, depth: int, mlp_ratio: int, seq: int) -> int:
    d = dim
    per_layer = (
        3 * matmul_flops(seq, d, d)  # QKV projections
        + 2 * seq * seq * d  # attention scores
        + 2 * seq * seq * d  # attention-weighted values
        + matmul_flops(seq, d, d)  # output projection
        + 2 * matmul_flops(seq, d, mlp_ratio * d)  # MLP in + out
    )
    return depth * per_layer


def _selector_flop_components(config: SelectorConfig) -> dict[str, int]:
    size = config.input_size
    first = config.stages[0][0]
    size = (size + 2 - 4) // 2 + 1  # stem: 4x4, stride 2, pad 1
    comp = {"stem": conv2d_flops(size, size, first, 3, 4, 4)}
    in_ch = first
    blocks = 0
    for s, (ch, nblocks) in enumerate(config.stages):
        for b in range(nblocks):
            stride2 = s > 0 and b == 0
            k1 = 4 if stride2 else 3
            out_size = (size + 2 - k1) // (2 if stride2 else 1) + 1
            blocks += conv2d_flops(out_size, out_size, ch, in_ch, k1, k1)
            blocks += conv2d_flops(out_size, out_size, ch, ch, 3, 3)
            if stride2 or in_ch != ch:
                kp = 2 if stride2 else 1
                blocks += conv2d_flops(out_size, out_size, ch, in_ch, kp, kp)
            size = out_size
            in_ch = ch
    comp["blocks"] = blocks
    comp["head"] = matmul_flops(1, in_ch, config.n_outputs)
    return comp


def count_flops(config, seq_len_override: int | None = None,
                selector: SelectorConfig | None = None) -> CostReport:
    """Forward-pass FLOPs per image under the stated convention.

    ``seq_len_override`` replaces the transformer sequence length (patch
    embedding still covers all patches). For a student config, pass
    ``selector`` to include the selector CNN the pipeline runs first.
    """
    if isinstance(config, ViTConfig):
        seq = seq_len_override if seq_len_override is not None else config.seq_len
        comp = {
            "patch_embed": matmul_flops(config.n_patches, config.patch_dim, config.dim),
            "transformer": _transformer_flops(config.dim, config.depth, config.mlp_ratio, seq),
            "head": matmul_flops(1, config.dim, config.num_classes),
        }
        comparisons = attention_comparisons(config.n_patches)
    elif isinstance(config, SelectorConfig):
        comp = _selector_flop_components(config)
        comparisons = attention_comparisons(config.k)
    elif isinstance(config, SanVitConfig):
        base = config.base
        seq = seq_len_override if seq_len_override is not None else config.k + 1
        comp = {
            "patch_embed": matmul_flops(base.n_patches, base.patch_dim, base.dim),
            "student_transformer": _transformer_flops(base.dim, base.depth, base.mlp_ratio, seq),
            "head": matmul_flops(1, base.dim, base.num_classes),
        }
        if selector is not None:
            comp["selector"] = sum(_selector_flop_components(selector).values())
        comparisons = attention_comparisons(config.k)
    else:
        raise TypeError(f"unsupported config type {type(config).__name__}")
    return CostReport(flops_total=sum(comp.values()), flops_by_component=comp,
                      attention_comparisons=comparisons)


def model_cost(config, selector: SelectorConfig | None = None) -> CostReport:
    """Joined parameter + FLOP report for one model (or student pipeline)."""
    p = count_params(config, selector=selector)
    f = count_flops(config, selector=selector)
    return CostReport(params_total=p.params_total, params_by_component=p.params_by_component,
                      flops_total=f.flops_total, flops_by_component=f.flops_by_component,
                      attention_comparisons=p.attention_comparisons)
