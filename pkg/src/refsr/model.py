"""End-to-end model assembly.

Pipeline: a 16-block spectrally-normalized residual feature extractor lifts
the LR image to token space; three stages of dual-stream attention blocks run
at 1x, 2x and 4x the input extent, each stage consuming a freshly embedded
reference crop of matching size; between stages the LR stream is upsampled by
conv + pixel shuffle and summed with a sinusoidal position encoding; a linear
head projects tokens back to RGB.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attention import ABLATION_MODES, GATING_MATRIX, GATING_OUTPUT, DualStreamBlock
from .numerics import Parameter, Tensor, conv2d, leaky_relu, linear, spectral_normalize
from .windowing import STREAM_LR, TokenGrid, patch_embed, sinusoidal_encoding

FE_ACT_SLOPE = 0.2
INFERENCE_CROP_RATIO = 4.8  # reference crop extent per stage before resizing


@dataclass(frozen=True)
class ModelConfig:
    """Architectural hyperparameters.

    The embedding dim is tied to the head count (d_emb = 96 * num_heads) and
    every stage extent must stay divisible by the window size. Defaults are
    the full-scale configuration; the desk-scale test configuration is
    num_heads=2, blocks_per_stage=1, lr_input_size=16.
    """

    num_stages: int = 3
    blocks_per_stage: int = 2
    num_heads: int = 2
    window: int = 8
    lr_input_size: int = 40
    ablation_mode: str = "full"
    gating_level: str = GATING_OUTPUT
    mlp_ratio: int = 4
    fe_blocks: int = 16
    dtype: str = "float64"

    @property
    def d_emb(self) -> int:
        return 96 * self.num_heads

    @property
    def scale(self) -> int:
        return 2 ** (self.num_stages - 1)

    @property
    def output_size(self) -> int:
        return self.lr_input_size * self.scale

    def stage_size(self, stage: int) -> int:
        return self.lr_input_size * (2**stage)

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def validate(self):
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation_mode!r}")
        if self.gating_level not in (GATING_OUTPUT, GATING_MATRIX):
            raise ValueError(f"unknown gating level {self.gating_level!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        for s in range(self.num_stages):
            if self.stage_size(s) % self.window != 0:
                raise ValueError(
                    f"stage {s} extent {self.stage_size(s)} not divisible by window {self.window}"
                )
        return self


def apply_ablation(cfg: ModelConfig, mode: str) -> ModelConfig:
    """Return a config with the given ablation mode (validated)."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    return dataclasses.replace(cfg, ablation_mode=mode)


class ParamRegistry:
    """Creates uniquely named parameters with seeded initialization."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        self.rng = rng
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def make(self, name, shape, init, value=None, trainable=True, sn=False) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "constant":
            data = np.full(shape, float(value))
        elif init == "normal02":
            data = 0.02 * self.rng.standard_normal(shape)
        elif init == "normal":
            data = float(value) * self.rng.standard_normal(shape)
        elif init == "rpe":
            # locality prior: start near-diagonal attention by lifting the
            # zero-displacement entry of the (2k-1)^2 displacement table
            k = int(value)
            data = 0.02 * self.rng.standard_normal(shape)
            data[(k - 1) * (2 * k - 1) + (k - 1), :] += 4.0
        elif init == "xavier":
            fan_in, fan_out = shape[0], shape[1]
            data = self.rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))
        elif init == "conv-he":
            kh, kw, cin, _ = shape
            gain = np.sqrt(2.0 / (1.0 + FE_ACT_SLOPE**2))
            data = self.rng.standard_normal(shape) * (gain / np.sqrt(kh * kw * cin))
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(data.astype(self.dtype), name=name, requires_grad=trainable)
        if sn:
            p.init_spectral_state(self.rng)
        self.params[name] = p
        return p

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.requires_grad]


class ResidualBlock:
    """conv3x3 -> leaky activation -> conv3x3, additive skip; weights spectrally normalized."""

    def __init__(self, reg: ParamRegistry, prefix: str, channels: int):
        self.w1 = reg.make(f"{prefix}.conv1.weight", (3, 3, channels, channels), "conv-he", sn=True)
        self.b1 = reg.make(f"{prefix}.conv1.bias", (channels,), "zeros")
        self.w2 = reg.make(f"{prefix}.conv2.weight", (3, 3, channels, channels), "conv-he", sn=True)
        self.b2 = reg.make(f"{prefix}.conv2.bias", (channels,), "zeros")

    def forward(self, x: Tensor, sn_iters: int, sn_update: bool) -> Tensor:
        h = conv2d(x, spectral_normalize(self.w1, sn_iters, sn_update), self.b1)
        h = leaky_relu(h, FE_ACT_SLOPE)
        h = conv2d(h, spectral_normalize(self.w2, sn_iters, sn_update), self.b2)
        return x + h


class FeatureExtractor:
    """Entry conv to embedding width followed by 16 residual blocks."""

    def __init__(self, reg: ParamRegistry, prefix: str, d_emb: int, num_blocks: int):
        self.entry_w = reg.make(f"{prefix}.entry.weight", (3, 3, 3, d_emb), "conv-he", sn=True)
        self.entry_b = reg.make(f"{prefix}.entry.bias", (d_emb,), "zeros")
        self.blocks = [ResidualBlock(reg, f"{prefix}.block{i}", d_emb) for i in range(num_blocks)]

    def forward(self, img: Tensor, sn_iters: int, sn_update: bool) -> Tensor:
        x = conv2d(img, spectral_normalize(self.entry_w, sn_iters, sn_update), self.entry_b)
        for blk in self.blocks:
            x = blk.forward(x, sn_iters, sn_update)
        return x


class Upsampler:
    """conv to 4C channels + pixel shuffle x2."""

    def __init__(self, reg: ParamRegistry, prefix: str, d_emb: int):
        self.w = reg.make(f"{prefix}.conv.weight", (3, 3, d_emb, 4 * d_emb), "conv-he")
        self.b = reg.make(f"{prefix}.conv.bias", (4 * d_emb,), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        from .numerics import pixel_shuffle

        return pixel_shuffle(conv2d(x, self.w, self.b), 2)


class RefSRModel:
    """Trainable x4 super-resolution model conditioned on a reference image."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        # power iterations per inference forward; verification sets 0 to freeze
        # the stored (u, v) so the map matches the constant-(u, v) adjoint
        self.sn_eval_iters = 1
        rng = np.random.default_rng(seed)
        self.reg = ParamRegistry(rng, cfg.np_dtype())
        d = cfg.d_emb

        self.fe = FeatureExtractor(self.reg, "fe", d, cfg.fe_blocks)
        self.patch_w = []
        self.patch_b = []
        self.stages = []
        for s in range(cfg.num_stages):
            self.patch_w.append(self.reg.make(f"pe{s}.weight", (3, d), "xavier"))
            self.patch_b.append(self.reg.make(f"pe{s}.bias", (d,), "zeros"))
            blocks = [
                DualStreamBlock(
                    self.reg, f"stage{s}.block{b}", d, cfg.num_heads, cfg.window,
                    cfg.ablation_mode, cfg.gating_level, cfg.mlp_ratio,
                    final_in_stage=(b == cfg.blocks_per_stage - 1),
                )
                for b in range(cfg.blocks_per_stage)
            ]
            self.stages.append(blocks)
        self.upsamplers = [Upsampler(self.reg, f"up{s}", d) for s in range(cfg.num_stages - 1)]
        # small-scale head starting at mid-range keeps the initial output inside
        # the image range instead of spending early steps fixing gross scale
        self.head_w = self.reg.make("head.weight", (d, 3), "normal", value=0.01)
        self.head_b = self.reg.make("head.bias", (3,), "constant", value=0.5)

    # -- parameters ---------------------------------------------------------

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        if trainable_only:
            return self.reg.trainable()
        return list(self.reg.params.values())

    def lambda_values(self) -> dict[str, float]:
        return {
            name: float(p.data)
            for name, p in self.reg.params.items()
            if name.endswith("gate_lambda")
        }

    def spectral_parameters(self) -> list[Parameter]:
        return [p for p in self.reg.params.values() if p.spectral_state is not None]

    def converge_spectral(self, iters: int = 5):
        """Run extra power iterations on every normalized weight (verification)."""
        from .numerics import no_grad

        with no_grad():
            for p in self.spectral_parameters():
                spectral_normalize(p, iters=iters, update=True)

    def count_parameters(self):
        """Exact trainable scalar count, grouped by top-level module."""
        groups: dict[str, int] = {}
        for name, p in self.reg.params.items():
            if not p.requires_grad:
                continue
            group = name.split(".", 1)[0]
            groups[group] = groups.get(group, 0) + p.size
        return groups, sum(groups.values())

    # -- forward ------------------------------------------------------------

    def _reference_crop(self, ref_img: np.ndarray, stage: int, rng) -> np.ndarray:
        m = self.cfg.stage_size(stage)
        ext = ref_img.shape[0]
        if rng is not None:
            y, x = int(rng.integers(0, ext - m + 1)), int(rng.integers(0, ext - m + 1))
            return ref_img[y : y + m, x : x + m, :]
        # deterministic center crop of ~4.8x the stage extent, resized down
        from .dataset import bicubic_resize

        want = min(int(round(INFERENCE_CROP_RATIO * m)), ext)
        off = (ext - want) // 2
        crop = ref_img[off : off + want, off : off + want, :]
        if want == m:
            return crop
        return bicubic_resize(crop, (m, m))

    def _check_finite(self, t: Tensor, where: str):
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"non-finite activations in {where}")

    def forward(
        self,
        lr_img: np.ndarray,
        ref_img: np.ndarray,
        rng: np.random.Generator | None = None,
        record=None,
        training: bool = False,
    ) -> Tensor:
        """Super-resolve one LR image given one reference image.

        ``rng`` selects training-time random reference crop positions; without
        it, crops are deterministic center crops, so repeated calls with fixed
        weights are bit-identical. Raises FloatingPointError naming the block
        when an activation goes non-finite.
        """
        cfg = self.cfg
        m0 = cfg.lr_input_size
        if lr_img.shape != (m0, m0, 3):
            raise ValueError(f"LR input shape {lr_img.shape} != ({m0}, {m0}, 3)")
        if ref_img.ndim != 3 or ref_img.shape[2] != 3 or min(ref_img.shape[:2]) < cfg.output_size:
            raise ValueError(
                f"reference must be at least {cfg.output_size} px square RGB, got {ref_img.shape}"
            )
        dt = cfg.np_dtype()
        sn_iters, sn_update = (1, True) if training else (self.sn_eval_iters, False)

        x = self.fe.forward(Tensor(np.ascontiguousarray(lr_img, dtype=dt)), sn_iters, sn_update)
        self._check_finite(x, "feature_extractor")
        lr = TokenGrid(x, STREAM_LR)

        for s in range(cfg.num_stages):
            crop = np.ascontiguousarray(self._reference_crop(ref_img, s, rng), dtype=dt)
            if crop.shape[0] != cfg.stage_size(s):
                raise ValueError(f"stage {s} crop extent {crop.shape[0]} != {cfg.stage_size(s)}")
            ref = patch_embed(crop, self.patch_w[s], self.patch_b[s])
            for b, blk in enumerate(self.stages[s]):
                lr, ref = blk.forward(lr, ref, record, f"stage{s}.block{b}")
                self._check_finite(lr.tokens, f"stage{s}.block{b}")
            if s < cfg.num_stages - 1:
                up = self.upsamplers[s].forward(lr.tokens)
                spe = sinusoidal_encoding(up.shape[0], up.shape[1], up.shape[2]).astype(dt)
                lr = TokenGrid(up + Tensor(spe), STREAM_LR)
                self._check_finite(lr.tokens, f"up{s}")

        out = linear(lr.tokens, self.head_w, self.head_b)
        self._check_finite(out, "head")
        return out


def extract_lr_features(model: RefSRModel, img: np.ndarray, training: bool = False) -> TokenGrid:
    """Feature-extractor front half as a standalone operation."""
    m0 = model.cfg.lr_input_size
    if img.shape != (m0, m0, 3):
        raise ValueError(f"LR input shape {img.shape} != ({m0}, {m0}, 3)")
    sn_iters = 1 if training else model.sn_eval_iters
    x = model.fe.forward(Tensor(np.ascontiguousarray(img, dtype=model.cfg.np_dtype())), sn_iters, training)
    return TokenGrid(x, STREAM_LR)


def count_parameters(cfg: ModelConfig, seed: int = 0):
    """Build a model for ``cfg`` and report (per-module counts, total)."""
    light = dataclasses.replace(cfg, dtype="float32")
    model = RefSRModel(light, seed=seed)
    return model.count_parameters()
