"""Transformer encoder blocks with EfficientKAN sublayers.

The block applies, in order: layer norm, an EfficientKAN map, multi-head
self-attention whose Q/K/V projections are themselves single EfficientKAN
layers, a residual add, then a second norm + EfficientKAN + residual.
The attention output projection stays affine.
"""

from __future__ import annotations

import numpy as np

from transukan import tensor as T
from transukan.tensor import ContractError, DimensionError, Tensor
from transukan.kan import AffineLayer, EfficientKanLayer, KanGrid


class LayerNormParams:
    def __init__(self, d: int):
        self.d = d
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class MsaKanParams:
    """Multi-head self-attention with EfficientKAN Q/K/V projections."""

    def __init__(self, d_model: int, n_heads: int, grid: KanGrid | None = None,
                 rng: np.random.Generator | None = None):
        if d_model % n_heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        rng = rng or np.random.default_rng(0)
        grid = grid or KanGrid()
        self.q_proj = EfficientKanLayer(d_model, d_model, grid, rng=rng)
        self.k_proj = EfficientKanLayer(d_model, d_model, grid, rng=rng)
        self.v_proj = EfficientKanLayer(d_model, d_model, grid, rng=rng)
        self.out_proj = AffineLayer(d_model, d_model, rng=rng)

    def parameters(self):
        out = []
        for prefix, sub in (("q_proj", self.q_proj), ("k_proj", self.k_proj),
                            ("v_proj", self.v_proj), ("out_proj", self.out_proj)):
            out.extend((f"{prefix}.{n}", p) for n, p in sub.parameters())
        return out


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    b, t, _ = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, head_dim)), (0, 2, 1, 3))


def msa_kan(x: Tensor, p: MsaKanParams, return_attn: bool = False):
    """Scaled dot-product attention over KAN-projected Q, K, V."""
    if x.ndim != 3 or x.shape[-1] != p.d_model:
        raise DimensionError(f"msa_kan expects (B, T, {p.d_model}), got {x.shape}")
    b, t, d = x.shape
    q = _split_heads(p.q_proj.forward(x), p.n_heads, p.head_dim)
    k = _split_heads(p.k_proj.forward(x), p.n_heads, p.head_dim)
    v = _split_heads(p.v_proj.forward(x), p.n_heads, p.head_dim)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                     1.0 / np.sqrt(p.head_dim))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = p.out_proj.forward(merged)
    return (out, attn) if return_attn else out


class KansformerBlockParams:
    """One encoder block: LN -> EfficientKAN -> MSA -> +residual, then
    LN -> EfficientKAN -> +residual.

    ``conventional_order`` switches to the ordinary pre-norm layout (MSA
    directly on the normed input, no KAN inside the attention branch); it
    exists for comparison runs only.
    """

    def __init__(self, d_model: int, n_heads: int, grid: KanGrid | None = None,
                 rng: np.random.Generator | None = None,
                 conventional_order: bool = False):
        rng = rng or np.random.default_rng(0)
        grid = grid or KanGrid()
        self.d_model = d_model
        self.conventional_order = conventional_order
        self.ln1 = LayerNormParams(d_model)
        self.ln2 = LayerNormParams(d_model)
        self.kan1 = EfficientKanLayer(d_model, d_model, grid, rng=rng)
        self.kan2 = EfficientKanLayer(d_model, d_model, grid, rng=rng)
        self.msa = MsaKanParams(d_model, n_heads, grid, rng=rng)

    def parameters(self):
        out = []
        for prefix, sub in (("ln1", self.ln1), ("ln2", self.ln2),
                            ("kan1", self.kan1), ("kan2", self.kan2),
                            ("msa", self.msa)):
            out.extend((f"{prefix}.{n}", p) for n, p in sub.parameters())
        return out


def kansformer_block(z_prev: Tensor, p: KansformerBlockParams) -> Tensor:
    if z_prev.ndim != 3 or z_prev.shape[-1] != p.d_model:
        raise DimensionError(f"kansformer_block expects (B, T, {p.d_model}), "
                             f"got {z_prev.shape}")
    if p.conventional_order:
        branch = msa_kan(p.ln1.forward(z_prev), p.msa)
    else:
        branch = msa_kan(p.kan1.forward(p.ln1.forward(z_prev)), p.msa)
    z_mid = T.add(branch, z_prev)
    return T.add(p.kan2.forward(p.ln2.forward(z_mid)), z_mid)


class EncoderStack:
    """Learned positional embedding followed by ``depth`` Kansformer blocks."""

    def __init__(self, d_model: int, depth: int, n_heads: int, n_tokens: int,
                 grid: KanGrid | None = None, rng: np.random.Generator | None = None,
                 conventional_order: bool = False):
        rng = rng or np.random.default_rng(0)
        grid = grid or KanGrid()
        self.d_model = d_model
        self.depth = depth
        self.n_tokens = n_tokens
        self.pos_embed = Tensor(rng.uniform(-0.02, 0.02, size=(n_tokens, d_model)),
                                requires_grad=True)
        self.blocks = [KansformerBlockParams(d_model, n_heads, grid, rng=rng,
                                             conventional_order=conventional_order)
                       for _ in range(depth)]

    def parameters(self):
        out = [("pos_embed", self.pos_embed)]
        for i, block in enumerate(self.blocks):
            out.extend((f"block{i}.{n}", p) for n, p in block.parameters())
        return out


def encoder_forward(tokens: Tensor, stack: EncoderStack) -> Tensor:
    if tokens.ndim != 3 or tokens.shape[1] != stack.n_tokens \
            or tokens.shape[2] != stack.d_model:
        raise DimensionError(f"encoder expects (B, {stack.n_tokens}, "
                             f"{stack.d_model}), got {tokens.shape}")
    z = T.add(tokens, stack.pos_embed)
    for block in stack.blocks:
        z = kansformer_block(z, block)
    return z
