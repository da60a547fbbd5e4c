"""Analytic cost models: parameter counts, FLOP estimates, retained-activation memory.

Conventions (fixed so reports are deterministic and comparable):

* 1 multiply-accumulate = 2 flops; a dense map of an (m, k) input to n outputs
  costs 2*m*k*n flops, bias included in the MAC convention.
* transcendentals (the exp inside silu and softmax) cost ``EXP_FLOPS`` = 4.
* activation memory counts tensors retained for the backward pass at 8 bytes
  per element: every layer accounts for its own retained inputs and outputs,
  so tensors shared across a layer boundary are counted once per consumer.
* the B-spline edge layer retains its basis activations per edge
  (rows * c_in * c_out * n_basis elements); the hinge-basis layers share one
  basis block across output channels (rows * c_in * n_basis). That per-edge
  retention is what drives the memory gap between the variants.

Only orderings and closed-form ratios are load-bearing; absolute numbers are
a documented model, not a measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from transukan.kan import (
    AffineLayer,
    BSplineKanLayer,
    EfficientKanLayer,
    KanGrid,
    ReLUKanLayer,
)
from transukan.kansformer import (
    EncoderStack,
    KansformerBlockParams,
    LayerNormParams,
    MsaKanParams,
)
from transukan.network import (
    CnnEncoderParams,
    Conv2dLayer,
    DecoderParams,
    ModelConfig,
    PatchEmbedParams,
    TransUKanModel,
)

EXP_FLOPS = 4
SILU_FLOPS = EXP_FLOPS + 3          # exp, add, divide, multiply
HINGE_BASIS_FLOPS = 7               # 2 subs, 2 hinges, product, square, scale
SOFTMAX_FLOPS = EXP_FLOPS + 3       # shift, exp, accumulate, divide
LAYER_NORM_FLOPS = 8                # mean, centered square, normalize, affine
BYTES_PER_ELEMENT = 8


def bspline_basis_flops(n_basis: int, order: int) -> int:
    """Per-scalar cost of the iterative basis evaluation."""
    width = n_basis + order - 1     # degree-0 indicator count
    total = width                   # one comparison per indicator
    for deg in range(1, order):
        total += 7 * (width - deg)  # two ratios, two products, one add per basis
    return total


@dataclass
class CostEntry:
    name: str
    params: int = 0
    flops: int = 0
    activation_bytes: int = 0


@dataclass
class CostReport:
    variant: str
    entries: list[CostEntry] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def total_flops(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def total_activation_bytes(self) -> int:
        return sum(e.activation_bytes for e in self.entries)

    def to_tsv(self) -> str:
        lines = [f"{self.variant}\t{e.name}\t{e.params}\t{e.flops}"
                 f"\t{e.activation_bytes}" for e in self.entries]
        lines.append(f"{self.variant}\tTOTAL\t{self.total_params}"
                     f"\t{self.total_flops}\t{self.total_activation_bytes}")
        return "\n".join(lines)

    def to_pretty(self) -> str:
        header = f"{'layer':<34} {'params':>12} {'flops':>14} {'act bytes':>12}"
        rows = [f"[{self.variant}]", header, "-" * len(header)]
        for e in self.entries:
            rows.append(f"{e.name:<34} {e.params:>12} {e.flops:>14} "
                        f"{e.activation_bytes:>12}")
        rows.append("-" * len(header))
        rows.append(f"{'TOTAL':<34} {self.total_params:>12} "
                    f"{self.total_flops:>14} {self.total_activation_bytes:>12}")
        return "\n".join(rows)


def _e(name, params=0, flops=0, mem_elems=0) -> CostEntry:
    return CostEntry(name, int(params), int(flops),
                     int(mem_elems) * BYTES_PER_ELEMENT)


# ---------------------------------------------------------------------------
# Closed-form building blocks, shared by object dispatch and variant tables
# ---------------------------------------------------------------------------

def _affine_entries(name, rows, c_in, c_out):
    return [_e(name, params=c_in * c_out + c_out, flops=2 * rows * c_in * c_out,
               mem_elems=rows * (c_in + c_out))]


def _effkan_entries(name, rows, c_in, c_out, nb, per_basis_scale=False):
    entries = [
        _e(f"{name}.expand", flops=rows * c_in * nb * HINGE_BASIS_FLOPS,
           mem_elems=rows * c_in * (1 + nb)),
        _e(f"{name}.pool", flops=rows * c_in * nb, mem_elems=rows * c_in),
        _e(f"{name}.square", flops=rows * c_in, mem_elems=rows * c_in),
        _e(f"{name}.affine", params=c_in * c_out + c_out,
           flops=2 * rows * c_in * c_out, mem_elems=rows * c_out),
    ]
    if per_basis_scale:
        entries.insert(1, _e(f"{name}.basis_scale", params=c_in * nb,
                             flops=rows * c_in * nb,
                             mem_elems=rows * c_in * nb))
    return entries


def _relukan_entries(name, rows, c_in, c_out, nb):
    return [
        _e(f"{name}.expand", flops=rows * c_in * nb * HINGE_BASIS_FLOPS,
           mem_elems=rows * c_in * (1 + nb)),
        _e(f"{name}.integrate", params=c_out * nb * c_in + c_out,
           flops=2 * rows * nb * c_in * c_out, mem_elems=rows * c_out),
    ]


def _bspline_entries(name, rows, c_in, c_out, nb, order):
    return [
        _e(f"{name}.base", params=c_in * c_out,
           flops=rows * c_in * SILU_FLOPS + 2 * rows * c_in * c_out,
           mem_elems=rows * (2 * c_in + c_out)),
        _e(f"{name}.basis", flops=rows * c_in * bspline_basis_flops(nb, order),
           mem_elems=rows * c_in * c_out * nb),
        _e(f"{name}.spline", params=c_in * c_out + c_in * c_out * nb,
           flops=2 * rows * c_in * nb * c_out, mem_elems=rows * c_out),
    ]


def _mlp_entries(name, rows, d, ratio):
    hidden = int(round(ratio * d))
    return [
        _e(f"{name}.fc1", params=d * hidden + hidden, flops=2 * rows * d * hidden,
           mem_elems=rows * (d + hidden)),
        _e(f"{name}.act", flops=rows * hidden * SILU_FLOPS, mem_elems=rows * hidden),
        _e(f"{name}.fc2", params=hidden * d + d, flops=2 * rows * hidden * d,
           mem_elems=rows * (hidden + d)),
    ]


def _layer_norm_entries(name, rows, d):
    return [_e(name, params=2 * d, flops=rows * d * LAYER_NORM_FLOPS,
               mem_elems=2 * rows * d)]


def _attention_core_entries(name, batch, t, d, heads):
    head_dim = d // heads
    att = batch * heads * t * t
    return [
        _e(f"{name}.scores", flops=2 * att * head_dim + att, mem_elems=att),
        _e(f"{name}.softmax", flops=att * SOFTMAX_FLOPS, mem_elems=att),
        _e(f"{name}.context", flops=2 * att * head_dim, mem_elems=batch * t * d),
    ]


def _conv_entries(name, batch, c_in, c_out, k, h_in, w_in, stride, padding):
    h_out = (h_in + 2 * padding - k) // stride + 1
    w_out = (w_in + 2 * padding - k) // stride + 1
    entry = _e(name, params=c_out * c_in * k * k + c_out,
               flops=2 * batch * c_out * c_in * k * k * h_out * w_out,
               mem_elems=batch * (c_in * h_in * w_in + c_out * h_out * w_out))
    return [entry], (h_out, w_out)


VARIANT_LAYER_ENTRIES = {
    "mlp": lambda name, rows, c_in, c_out, nb, order: _affine_entries(
        name, rows, c_in, c_out),
    "efficientkan": lambda name, rows, c_in, c_out, nb, order: _effkan_entries(
        name, rows, c_in, c_out, nb),
    "relukan": lambda name, rows, c_in, c_out, nb, order: _relukan_entries(
        name, rows, c_in, c_out, nb),
    "bspline_kan": lambda name, rows, c_in, c_out, nb, order: _bspline_entries(
        name, rows, c_in, c_out, nb, order),
}

VARIANTS = tuple(VARIANT_LAYER_ENTRIES)


# ---------------------------------------------------------------------------
# Object dispatch
# ---------------------------------------------------------------------------

def _msa_entries(name, p: MsaKanParams, batch, t):
    rows = batch * t
    d = p.d_model
    entries = []
    for sub, layer in (("q_proj", p.q_proj), ("k_proj", p.k_proj),
                       ("v_proj", p.v_proj)):
        entries += _effkan_entries(f"{name}.{sub}", rows, d, d,
                                   layer.grid.n_basis, layer.per_basis_scale)
    entries += _attention_core_entries(f"{name}.attn", batch, t, d, p.n_heads)
    entries += _affine_entries(f"{name}.out_proj", rows, d, d)
    return entries


def _block_entries(name, p: KansformerBlockParams, batch, t):
    rows = batch * t
    d = p.d_model
    entries = _layer_norm_entries(f"{name}.ln1", rows, d)
    if not p.conventional_order:
        entries += _effkan_entries(f"{name}.kan1", rows, d, d,
                                   p.kan1.grid.n_basis, p.kan1.per_basis_scale)
    entries += _msa_entries(f"{name}.msa", p.msa, batch, t)
    entries.append(_e(f"{name}.residual1", flops=rows * d, mem_elems=rows * d))
    entries += _layer_norm_entries(f"{name}.ln2", rows, d)
    entries += _effkan_entries(f"{name}.kan2", rows, d, d,
                               p.kan2.grid.n_basis, p.kan2.per_basis_scale)
    entries.append(_e(f"{name}.residual2", flops=rows * d, mem_elems=rows * d))
    return entries


def _encoder_entries(name, stack: EncoderStack, batch):
    t, d = stack.n_tokens, stack.d_model
    entries = [_e(f"{name}.pos_embed", params=t * d, flops=batch * t * d,
                  mem_elems=batch * t * d)]
    for i, block in enumerate(stack.blocks):
        entries += _block_entries(f"{name}.block{i}", block, batch, t)
    return entries


def _model_entries(model: TransUKanModel, batch):
    cfg = model.config
    h = w = cfg.image_size
    entries = []
    c_prev = cfg.in_channels
    for i, (conv_a, conv_b) in enumerate(model.cnn.stages):
        ch = cfg.cnn_channels[i]
        sub, (h, w) = _conv_entries(f"cnn.stage{i}.conv_a", batch, c_prev, ch, 3,
                                    h, w, 1, 1)
        entries += sub
        entries.append(_e(f"cnn.stage{i}.relu_a", flops=batch * ch * h * w,
                          mem_elems=batch * ch * h * w))
        sub, (h, w) = _conv_entries(f"cnn.stage{i}.conv_b", batch, ch, ch, 3,
                                    h, w, 2, 1)
        entries += sub
        entries.append(_e(f"cnn.stage{i}.relu_b", flops=batch * ch * h * w,
                          mem_elems=batch * ch * h * w))
        c_prev = ch
    t = cfg.n_tokens
    entries += _affine_entries("embed.proj", batch * t, cfg.cnn_channels[-1],
                               cfg.d_model)
    entries += _encoder_entries("encoder", model.encoder, batch)
    ch_prev = cfg.d_model
    size = cfg.image_size // 8
    for i, out_ch in enumerate(cfg.decoder_channels):
        size *= 2
        skip_ch = cfg.cnn_channels[len(cfg.cnn_channels) - 1 - i]
        entries.append(_e(f"decoder.block{i}.upsample",
                          mem_elems=batch * ch_prev * size * size))
        sub, _ = _conv_entries(f"decoder.block{i}.conv", batch,
                               ch_prev + skip_ch, out_ch, 3, size, size, 1, 1)
        entries += sub
        entries.append(_e(f"decoder.block{i}.relu", flops=batch * out_ch * size * size,
                          mem_elems=batch * out_ch * size * size))
        ch_prev = out_ch
    sub, _ = _conv_entries("decoder.head", batch, ch_prev, cfg.n_classes, 1,
                           size, size, 1, 0)
    entries += sub
    return entries


def _dispatch(obj, rows, batch=None) -> list[CostEntry]:
    name = type(obj).__name__
    if isinstance(obj, AffineLayer):
        return _affine_entries("affine", rows, obj.c_in, obj.c_out)
    if isinstance(obj, EfficientKanLayer):
        return _effkan_entries("efficientkan", rows, obj.c_in, obj.c_out,
                               obj.grid.n_basis, obj.per_basis_scale)
    if isinstance(obj, ReLUKanLayer):
        return _relukan_entries("relukan", rows, obj.c_in, obj.c_out,
                                obj.grid.n_basis)
    if isinstance(obj, BSplineKanLayer):
        return _bspline_entries("bspline_kan", rows, obj.c_in, obj.c_out,
                                obj.n_basis, obj.k_spline)
    if isinstance(obj, LayerNormParams):
        return _layer_norm_entries("layer_norm", rows, obj.d)
    if isinstance(obj, Conv2dLayer):
        raise TypeError("conv layers are profiled through the model walk; "
                        "pass the full model")
    raise TypeError(f"cannot profile object of type {name}")


def _entries_for(obj, input_shape=None, batch=1) -> list[CostEntry]:
    if isinstance(obj, TransUKanModel):
        return _model_entries(obj, batch)
    if isinstance(obj, EncoderStack):
        return _encoder_entries("encoder", obj, batch)
    if isinstance(obj, KansformerBlockParams):
        t = input_shape[1] if input_shape is not None else 1
        return _block_entries("block", obj, batch, t)
    if isinstance(obj, MsaKanParams):
        t = input_shape[1] if input_shape is not None else 1
        return _msa_entries("msa", obj, batch, t)
    rows = batch
    if input_shape is not None:
        rows = int(np.prod(input_shape[:-1])) if len(input_shape) > 1 else 1
    return _dispatch(obj, rows)


def count_params(model_or_layer) -> CostReport:
    """Closed-form parameter counts; agrees exactly with tensor enumeration."""
    entries = _entries_for(model_or_layer)
    stripped = [CostEntry(e.name, params=e.params) for e in entries]
    return CostReport(type(model_or_layer).__name__, stripped)


def estimate_flops(model_or_layer, input_shape) -> CostReport:
    """Deterministic multiply-accumulate counting for one forward pass."""
    batch = int(input_shape[0])
    entries = _entries_for(model_or_layer, input_shape=tuple(input_shape),
                           batch=batch)
    stripped = [CostEntry(e.name, flops=e.flops) for e in entries]
    return CostReport(type(model_or_layer).__name__, stripped)


def estimate_activation_memory(model_or_layer, batch: int) -> CostReport:
    """Bytes of forward activations retained for the backward pass."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    entries = _entries_for(model_or_layer, batch=batch)
    stripped = [CostEntry(e.name, activation_bytes=e.activation_bytes)
                for e in entries]
    return CostReport(type(model_or_layer).__name__, stripped)


# ---------------------------------------------------------------------------
# Variant comparison (Kansformer encoder with substituted sublayers)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    """Encoder geometry for the variant comparison.

    The ``mlp`` variant is the conventional block: affine Q/K/V and a
    two-layer feed-forward with ``mlp_ratio`` expansion. Every KAN variant
    replaces Q/K/V and carries two d->d KAN sublayers per block (one inside
    the attention branch, one as the feed-forward), all on the same basis
    budget of G+K functions per input channel.
    """

    d_model: int = 64
    depth: int = 4
    n_heads: int = 4
    grid: KanGrid = field(default_factory=KanGrid)
    mlp_ratio: float = 4.0
    n_tokens: int = 64
    batch: int = 1


def _variant_block_entries(variant, name, arch: ArchConfig):
    rows = arch.batch * arch.n_tokens
    d = arch.d_model
    nb = arch.grid.n_basis
    order = arch.grid.K if arch.grid.K >= 1 else 1  # spline order on the same budget
    make = VARIANT_LAYER_ENTRIES[variant]
    entries = _layer_norm_entries(f"{name}.ln1", rows, d)
    if variant != "mlp":
        entries += make(f"{name}.kan1", rows, d, d, nb, order)
    for sub in ("q", "k", "v"):
        entries += make(f"{name}.msa.{sub}_proj", rows, d, d, nb, order)
    entries += _attention_core_entries(f"{name}.msa.attn", arch.batch,
                                       arch.n_tokens, d, arch.n_heads)
    entries += _affine_entries(f"{name}.msa.out_proj", rows, d, d)
    entries.append(_e(f"{name}.residual1", flops=rows * d, mem_elems=rows * d))
    entries += _layer_norm_entries(f"{name}.ln2", rows, d)
    if variant == "mlp":
        entries += _mlp_entries(f"{name}.ffn", rows, d, arch.mlp_ratio)
    else:
        entries += make(f"{name}.kan2", rows, d, d, nb, order)
    entries.append(_e(f"{name}.residual2", flops=rows * d, mem_elems=rows * d))
    return entries


def variant_report(variant: str, arch: ArchConfig) -> CostReport:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    entries = [_e("pos_embed", params=arch.n_tokens * arch.d_model,
                  flops=arch.batch * arch.n_tokens * arch.d_model,
                  mem_elems=arch.batch * arch.n_tokens * arch.d_model)]
    for i in range(arch.depth):
        entries += _variant_block_entries(variant, f"block{i}", arch)
    return CostReport(variant, entries)


def retained_basis_bytes(report: CostReport) -> int:
    """Bytes of basis activations (entries named ``*.basis`` / ``*.expand``)."""
    return sum(e.activation_bytes for e in report.entries
               if e.name.endswith(".basis") or e.name.endswith(".expand"))


@dataclass
class VariantComparison:
    arch: ArchConfig
    reports: dict[str, CostReport]

    @property
    def params_ordering_ok(self) -> bool:
        p = {v: r.total_params for v, r in self.reports.items()}
        needed = [k for k in ("efficientkan", "mlp", "relukan") if k in p]
        return all(p[a] < p[b] for a, b in zip(needed, needed[1:]))

    @property
    def memory_ordering_ok(self) -> bool:
        m = {v: r.total_activation_bytes for v, r in self.reports.items()}
        if "bspline_kan" not in m or "efficientkan" not in m:
            return True
        return m["bspline_kan"] > m["efficientkan"]

    def ratios_vs(self, base: str = "mlp") -> dict[str, float]:
        if base not in self.reports:
            return {}
        base_params = self.reports[base].total_params
        return {v: r.total_params / base_params for v, r in self.reports.items()}

    def to_tsv(self) -> str:
        return "\n".join(r.to_tsv() for r in self.reports.values())

    def to_pretty(self) -> str:
        header = (f"{'variant':<14} {'params':>12} {'flops':>14} "
                  f"{'act bytes':>14} {'params/mlp':>11}")
        lines = [header, "-" * len(header)]
        ratios = self.ratios_vs("mlp")
        for v, r in self.reports.items():
            ratio = f"{ratios[v]:.3f}" if v in ratios else "-"
            lines.append(f"{v:<14} {r.total_params:>12} {r.total_flops:>14} "
                         f"{r.total_activation_bytes:>14} {ratio:>11}")
        return "\n".join(lines)


def compare_variants(arch: ArchConfig, variants=VARIANTS) -> VariantComparison:
    """Cost table for MLP/B-spline/ReLU/Efficient KAN encoder substitutions."""
    reports = {v: variant_report(v, arch) for v in variants}
    return VariantComparison(arch=arch, reports=reports)
