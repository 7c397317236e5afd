"""Gated dual-stream window attention blocks.

Each block runs two sub-blocks: one anchored on the local window partition and
one on the shifted partition. Inside a sub-block every head computes a
self-attention branch (queries and keys from the LR stream under one
partition) and a cross-attention branch (queries from LR, keys from the
reference stream under the other partition); values always come from the
reference stream. The two branch outputs are mixed by a per-head learnable
gate sigma(lambda_h), a convex combination by construction.

The reference stream is updated in parallel by plain windowed self-attention,
keeping it independent of the LR stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numerics import (
    Parameter,
    Tensor,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    sigmoid,
    softmax,
    transpose,
)
from .windowing import (
    TokenGrid,
    WindowSet,
    partition_shifted,
    relative_position_bias,
    reverse_shifted,
)

GATING_OUTPUT = "output"
GATING_MATRIX = "matrix"

ABLATION_MODES = ("full", "frozen-gate", "self-only", "cross-only")


class GateState:
    """Per-head gating scalars lambda_h and the ablation mode applied to them.

    Mixing weights are (1 - sigmoid(lambda_h), sigmoid(lambda_h)); the modes
    replace them with fixed values: frozen-gate pins lambda at 0 (equal
    attention to both branches), self-only forces (1, 0), cross-only (0, 1).
    """

    def __init__(self, lambdas: list[Parameter], mode: str = "full"):
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
        self.lambdas = lambdas
        self.mode = mode

    @property
    def frozen(self) -> bool:
        return self.mode != "full"

    def weights(self, head: int):
        """Return (w_self, w_cross) for a head; tensors only in learnable mode."""
        if self.mode == "full":
            w_cross = sigmoid(self.lambdas[head])
            return 1.0 - w_cross, w_cross
        if self.mode == "frozen-gate":
            return 0.5, 0.5
        if self.mode == "self-only":
            return 1.0, 0.0
        return 0.0, 1.0  # cross-only


@dataclass
class HeadConfig:
    """One attention head: projections plus its partition assignment.

    ``self_shift``/``cross_shift`` are the cyclic-shift amounts (0 for the
    local partition, k//2 for the shifted one) used by the two branches; the
    two are always opposite, and half the heads carry each orientation.
    """

    head_index: int
    dim_per_head: int
    self_shift: int
    cross_shift: int
    wq: Parameter
    bq: Parameter
    wk_lr: Parameter
    bk_lr: Parameter
    wk_ref: Parameter
    bk_ref: Parameter
    wv: Parameter
    bv: Parameter

    @property
    def partition_assignment(self) -> str:
        return "self-local/cross-shifted" if self.self_shift == 0 else "self-shifted/cross-local"


def attention_scores(q: Tensor, k: Tensor, rpe_bias: Tensor | None = None, dim: int | None = None) -> Tensor:
    """Row-stochastic window attention: softmax(q k^T / sqrt(dim) + bias).

    ``q`` and ``k`` are (num_windows, tokens, dim) under the same window
    geometry; the bias, when given, is (tokens, tokens) and broadcasts over
    windows.
    """
    if q.shape != k.shape:
        raise ValueError(f"query/key window geometry mismatch: {q.shape} vs {k.shape}")
    d = dim if dim is not None else q.shape[-1]
    if d <= 0:
        raise ValueError("head dimension must be positive")
    logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    if rpe_bias is not None:
        logits = logits + rpe_bias
    return softmax(logits, axis=-1)


def _record(record, **entry):
    if record is not None:
        record.setdefault("attention", []).append(entry)


def _apply_values(scores: Tensor, values: WindowSet, shift: int) -> Tensor:
    mixed = matmul(scores, values.windows)
    ws = WindowSet(windows=mixed, k=values.k, shifted=values.shifted,
                   origin_shape=values.origin_shape, stream=values.stream)
    return reverse_shifted(ws, shift).tokens


def gated_head(
    lr_grid: TokenGrid,
    ref_grid: TokenGrid,
    cfg: HeadConfig,
    gate: GateState,
    k: int,
    rpe_self: Tensor | None = None,
    rpe_cross: Tensor | None = None,
    gating_level: str = GATING_OUTPUT,
    record=None,
    tag: str = "",
) -> Tensor:
    """One head of gated double attention over normalized input grids.

    Output-level gating evaluates each branch to token space and mixes there;
    matrix-level gating (the alternative reading) evaluates both score
    matrices under the self branch's partition, mixes them, and applies the
    mixed matrix to the shared reference values.
    """
    if (lr_grid.height, lr_grid.width) != (ref_grid.height, ref_grid.width):
        raise ValueError(
            f"stream extents differ: {(lr_grid.height, lr_grid.width)} vs {(ref_grid.height, ref_grid.width)}"
        )
    w_self, w_cross = gate.weights(cfg.head_index)

    q = linear(lr_grid.tokens, cfg.wq, cfg.bq)
    v = linear(ref_grid.tokens, cfg.wv, cfg.bv)
    q_grid = TokenGrid(q, lr_grid.stream)
    v_grid = TokenGrid(v, ref_grid.stream)

    need_self = not (isinstance(w_self, float) and w_self == 0.0)
    need_cross = not (isinstance(w_cross, float) and w_cross == 0.0)

    out_self = out_cross = None
    scores_self = scores_cross = None

    if need_self or gating_level == GATING_MATRIX:
        k_lr = linear(lr_grid.tokens, cfg.wk_lr, cfg.bk_lr)
        qs = partition_shifted(q_grid, k, cfg.self_shift).windows
        ks = partition_shifted(TokenGrid(k_lr, lr_grid.stream), k, cfg.self_shift).windows
        vs = partition_shifted(v_grid, k, cfg.self_shift)
        scores_self = attention_scores(qs, ks, rpe_self, cfg.dim_per_head)
        _record(record, tag=tag, head=cfg.head_index, branch="self", shift=cfg.self_shift,
                scores=scores_self.data)
        if gating_level == GATING_OUTPUT:
            out_self = _apply_values(scores_self, vs, cfg.self_shift)

    if need_cross:
        k_ref = linear(ref_grid.tokens, cfg.wk_ref, cfg.bk_ref)
        cross_shift = cfg.self_shift if gating_level == GATING_MATRIX else cfg.cross_shift
        qc = partition_shifted(q_grid, k, cross_shift).windows
        kc = partition_shifted(TokenGrid(k_ref, ref_grid.stream), k, cross_shift).windows
        vc = partition_shifted(v_grid, k, cross_shift)
        scores_cross = attention_scores(qc, kc, rpe_cross, cfg.dim_per_head)
        _record(record, tag=tag, head=cfg.head_index, branch="cross", shift=cross_shift,
                scores=scores_cross.data)
        if gating_level == GATING_OUTPUT:
            out_cross = _apply_values(scores_cross, vc, cfg.cross_shift)

    if gating_level == GATING_MATRIX:
        vs = partition_shifted(v_grid, k, cfg.self_shift)
        if scores_cross is None:  # self-only ablation
            mixed_scores = scores_self
        elif scores_self is None:
            mixed_scores = scores_cross
        else:
            mixed_scores = w_self * scores_self + w_cross * scores_cross
        return _apply_values(mixed_scores, vs, cfg.self_shift)

    if out_cross is None:
        return out_self
    if out_self is None:
        return out_cross
    return w_self * out_self + w_cross * out_cross


def multi_head_attention(
    lr_grid: TokenGrid,
    ref_grid: TokenGrid,
    heads: list[HeadConfig],
    gate: GateState,
    w_o: Parameter,
    b_o: Parameter,
    k: int,
    rpe_self: Tensor | None = None,
    rpe_cross: Tensor | None = None,
    gating_level: str = GATING_OUTPUT,
    record=None,
    tag: str = "",
) -> TokenGrid:
    """Concatenate gated head outputs and project: concat(head_0..head_h) W_O."""
    d_emb = sum(h.dim_per_head for h in heads)
    if w_o.shape[0] != d_emb:
        raise ValueError(f"output projection rows {w_o.shape[0]} != concatenated head dim {d_emb}")
    outs = []
    for i, cfg in enumerate(heads):
        bias_s = rpe_self[cfg.head_index] if rpe_self is not None else None
        bias_c = rpe_cross[cfg.head_index] if rpe_cross is not None else None
        outs.append(
            gated_head(lr_grid, ref_grid, cfg, gate, k, bias_s, bias_c, gating_level, record, tag)
        )
    stacked = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
    return TokenGrid(linear(stacked, w_o, b_o), lr_grid.stream)


def mlp_block(x: Tensor, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter) -> Tensor:
    """Two-layer token-wise MLP with exact-erf gelu: w2 . gelu(w1 . x)."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


class WindowSelfAttention:
    """Plain windowed multi-head self-attention (reference-stream update)."""

    def __init__(self, reg, prefix: str, dim: int, num_heads: int, k: int):
        self.k = k
        self.num_heads = num_heads
        self.dim_per_head = dim // num_heads
        d_h = self.dim_per_head
        self.wq = [reg.make(f"{prefix}.head{h}.wq", (dim, d_h), "xavier") for h in range(num_heads)]
        self.bq = [reg.make(f"{prefix}.head{h}.bq", (d_h,), "zeros") for h in range(num_heads)]
        self.wk = [reg.make(f"{prefix}.head{h}.wk", (dim, d_h), "xavier") for h in range(num_heads)]
        self.bk = [reg.make(f"{prefix}.head{h}.bk", (d_h,), "zeros") for h in range(num_heads)]
        self.wv = [reg.make(f"{prefix}.head{h}.wv", (dim, d_h), "xavier") for h in range(num_heads)]
        self.bv = [reg.make(f"{prefix}.head{h}.bv", (d_h,), "zeros") for h in range(num_heads)]
        self.w_o = reg.make(f"{prefix}.w_o", (dim, dim), "xavier")
        self.b_o = reg.make(f"{prefix}.b_o", (dim,), "zeros")
        self.rpe_table = reg.make(f"{prefix}.rpe", ((2 * k - 1) ** 2, num_heads), "rpe", value=k)

    def forward(self, grid: TokenGrid, shift: int, record=None, tag: str = "") -> TokenGrid:
        bias = relative_position_bias(self.k, self.rpe_table, self.num_heads)
        outs = []
        for h in range(self.num_heads):
            q = partition_shifted(TokenGrid(linear(grid.tokens, self.wq[h], self.bq[h]), grid.stream), self.k, shift)
            kk = partition_shifted(TokenGrid(linear(grid.tokens, self.wk[h], self.bk[h]), grid.stream), self.k, shift)
            v = partition_shifted(TokenGrid(linear(grid.tokens, self.wv[h], self.bv[h]), grid.stream), self.k, shift)
            scores = attention_scores(q.windows, kk.windows, bias[h], self.dim_per_head)
            _record(record, tag=tag, head=h, branch="ref-self", shift=shift, scores=scores.data)
            outs.append(_apply_values(scores, v, shift))
        stacked = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return TokenGrid(linear(stacked, self.w_o, self.b_o), grid.stream)


class GatedWindowAttention:
    """Multi-head gated double attention for the LR-stream update."""

    def __init__(self, reg, prefix: str, dim: int, num_heads: int, k: int, base_shift: int, mode: str, gating_level: str):
        self.k = k
        self.gating_level = gating_level
        d_h = dim // num_heads
        other_shift = k // 2 if base_shift == 0 else 0
        split = (num_heads + 1) // 2  # odd counts give the extra head to the first group
        self.heads = []
        lambdas = []
        for h in range(num_heads):
            self_shift = base_shift if h < split else other_shift
            cross_shift = other_shift if h < split else base_shift
            self.heads.append(
                HeadConfig(
                    head_index=h,
                    dim_per_head=d_h,
                    self_shift=self_shift,
                    cross_shift=cross_shift,
                    wq=reg.make(f"{prefix}.head{h}.wq", (dim, d_h), "xavier"),
                    bq=reg.make(f"{prefix}.head{h}.bq", (d_h,), "zeros"),
                    wk_lr=reg.make(f"{prefix}.head{h}.wk_lr", (dim, d_h), "xavier"),
                    bk_lr=reg.make(f"{prefix}.head{h}.bk_lr", (d_h,), "zeros"),
                    wk_ref=reg.make(f"{prefix}.head{h}.wk_ref", (dim, d_h), "xavier"),
                    bk_ref=reg.make(f"{prefix}.head{h}.bk_ref", (d_h,), "zeros"),
                    wv=reg.make(f"{prefix}.head{h}.wv", (dim, d_h), "xavier"),
                    bv=reg.make(f"{prefix}.head{h}.bv", (d_h,), "zeros"),
                )
            )
            lam = reg.make(
                f"{prefix}.head{h}.gate_lambda", (), "constant",
                value=1.0 if mode == "full" else 0.0, trainable=(mode == "full"),
            )
            lambdas.append(lam)
        self.gate = GateState(lambdas, mode)
        self.w_o = reg.make(f"{prefix}.w_o", (dim, dim), "xavier")
        self.b_o = reg.make(f"{prefix}.b_o", (dim,), "zeros")
        self.rpe_self = reg.make(f"{prefix}.rpe_self", ((2 * k - 1) ** 2, num_heads), "rpe", value=k)
        self.rpe_cross = reg.make(f"{prefix}.rpe_cross", ((2 * k - 1) ** 2, num_heads), "rpe", value=k)

    def forward(self, lr_n: TokenGrid, ref_n: TokenGrid, record=None, tag: str = "") -> TokenGrid:
        bias_s = relative_position_bias(self.k, self.rpe_self, len(self.heads))
        bias_c = relative_position_bias(self.k, self.rpe_cross, len(self.heads))
        return multi_head_attention(
            lr_n, ref_n, self.heads, self.gate, self.w_o, self.b_o, self.k,
            bias_s, bias_c, self.gating_level, record, tag,
        )


class Mlp:
    def __init__(self, reg, prefix: str, dim: int, hidden: int):
        self.w1 = reg.make(f"{prefix}.w1", (dim, hidden), "xavier")
        self.b1 = reg.make(f"{prefix}.b1", (hidden,), "zeros")
        self.w2 = reg.make(f"{prefix}.w2", (hidden, dim), "xavier")
        self.b2 = reg.make(f"{prefix}.b2", (dim,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        return mlp_block(x, self.w1, self.b1, self.w2, self.b2)


class LayerNorm:
    def __init__(self, reg, prefix: str, dim: int, eps: float = 1e-5):
        self.gamma = reg.make(f"{prefix}.gamma", (dim,), "ones")
        self.beta = reg.make(f"{prefix}.beta", (dim,), "zeros")
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class DualStreamSubBlock:
    """One attention + MLP update of both streams at a given base partition.

    ``update_ref=False`` builds the variant whose reference-stream output is
    never consumed (the terminal sub-block of a stage, after which the
    reference is re-embedded): the gated LR update still reads the normalized
    reference, but the dead REF attention/MLP update is not built, so every
    parameter that exists sits on the loss path.
    """

    def __init__(self, reg, prefix: str, dim: int, num_heads: int, k: int, base_shift: int, mode: str,
                 gating_level: str, mlp_ratio: int = 4, update_ref: bool = True):
        self.base_shift = base_shift
        self.update_ref = update_ref
        self.ln_lr1 = LayerNorm(reg, f"{prefix}.ln_lr1", dim)
        self.ln_ref1 = LayerNorm(reg, f"{prefix}.ln_ref1", dim)
        self.attn_lr = GatedWindowAttention(reg, f"{prefix}.lr_attn", dim, num_heads, k, base_shift, mode, gating_level)
        self.ln_lr2 = LayerNorm(reg, f"{prefix}.ln_lr2", dim)
        self.mlp_lr = Mlp(reg, f"{prefix}.lr_mlp", dim, mlp_ratio * dim)
        if update_ref:
            self.attn_ref = WindowSelfAttention(reg, f"{prefix}.ref_attn", dim, num_heads, k)
            self.ln_ref2 = LayerNorm(reg, f"{prefix}.ln_ref2", dim)
            self.mlp_ref = Mlp(reg, f"{prefix}.ref_mlp", dim, mlp_ratio * dim)

    def forward(self, lr: TokenGrid, ref: TokenGrid, record=None, tag: str = ""):
        lr_n = TokenGrid(self.ln_lr1.forward(lr.tokens), lr.stream)
        ref_n = TokenGrid(self.ln_ref1.forward(ref.tokens), ref.stream)

        lr_hat = self.attn_lr.forward(lr_n, ref_n, record, f"{tag}.lr").tokens + lr.tokens
        lr_out = self.mlp_lr.forward(self.ln_lr2.forward(lr_hat)) + lr_hat

        if self.update_ref:
            ref_hat = self.attn_ref.forward(ref_n, self.base_shift, record, f"{tag}.ref").tokens + ref.tokens
            ref_out = self.mlp_ref.forward(self.ln_ref2.forward(ref_hat)) + ref_hat
            ref = TokenGrid(ref_out, ref.stream)
        return TokenGrid(lr_out, lr.stream), ref


class DualStreamBlock:
    """Local-partition sub-block followed by the shifted-partition sub-block."""

    def __init__(self, reg, prefix: str, dim: int, num_heads: int, k: int, mode: str, gating_level: str,
                 mlp_ratio: int = 4, final_in_stage: bool = False):
        self.sub_local = DualStreamSubBlock(reg, f"{prefix}.w", dim, num_heads, k, 0, mode, gating_level, mlp_ratio)
        self.sub_shifted = DualStreamSubBlock(reg, f"{prefix}.sw", dim, num_heads, k, k // 2, mode, gating_level,
                                              mlp_ratio, update_ref=not final_in_stage)

    def forward(self, lr: TokenGrid, ref: TokenGrid, record=None, tag: str = ""):
        if lr.height % self.sub_local.attn_lr.k or lr.width % self.sub_local.attn_lr.k:
            raise ValueError(f"grid extents {lr.height}x{lr.width} not divisible by window size")
        lr, ref = self.sub_local.forward(lr, ref, record, f"{tag}.w")
        lr, ref = self.sub_shifted.forward(lr, ref, record, f"{tag}.sw")
        return lr, ref

    def gates(self) -> list[GateState]:
        return [self.sub_local.attn_lr.gate, self.sub_shifted.attn_lr.gate]
