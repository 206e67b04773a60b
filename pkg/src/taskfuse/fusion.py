"""The base fusion network: dual encoders, saliency-gated fusion, reconstruction.

Both encoders are chains of residual conv blocks. Their final features are
concatenated, weighted by a gate computed from pooled statistics of the
concatenated feature's gradient map, decoded by another residual chain, and
reconstructed into a single-channel fused image through a sigmoid head.

Channel plan (base width C, default 16): encoders 1 -> C -> ... -> C,
gate and decoder operate at 2C, reconstruction 2C -> C -> C/2 -> C/2 and a
1-channel head. All convs are 3x3 stride 1 with same padding, so spatial
extent is preserved end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .tensor import (
    Tensor,
    add,
    avg_pool2d,
    batch_norm,
    broadcast_hw,
    concat,
    conv2d,
    global_avg_pool,
    global_max_pool,
    l1,
    linear,
    lrelu,
    max_pool2d,
    maximum,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    spatial_gradient,
    upsample_nearest,
)

ABLATIONS = ("I", "II", "III", "IV", "V", "VI")


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared across modules."""

    num_blocks: int = 4          # encoder/decoder depth (M)
    channels: int = 16           # encoder width C; fusion path runs at 2C
    text_dim: int = 64           # instruction embedding length
    dyn_kernel: int = 3          # dynamic depthwise kernel size
    lrelu_slope: float = 0.2
    gate_pool: int = 2           # window for the MaxP/MeanP gate branches
    ablation: str = ""           # "", or one of ABLATIONS

    def validate(self) -> None:
        if self.num_blocks < 2:
            raise ConfigurationError("num_blocks must be >= 2")
        if self.channels < 2 or self.channels % 2:
            raise ConfigurationError("channels must be an even number >= 2")
        if self.ablation and self.ablation not in ABLATIONS:
            raise ConfigurationError(f"unknown ablation {self.ablation!r}")

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "channels": self.channels,
            "text_dim": self.text_dim,
            "dyn_kernel": self.dyn_kernel,
            "lrelu_slope": self.lrelu_slope,
            "gate_pool": self.gate_pool,
            "ablation": self.ablation,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        cfg = ModelConfig(
            num_blocks=int(d["num_blocks"]),
            channels=int(d["channels"]),
            text_dim=int(d["text_dim"]),
            dyn_kernel=int(d["dyn_kernel"]),
            lrelu_slope=float(d["lrelu_slope"]),
            gate_pool=int(d["gate_pool"]),
            ablation=str(d.get("ablation", "")),
        )
        cfg.validate()
        return cfg


# -- parameter containers ------------------------------------------------------


@dataclass
class ConvParams:
    kernel: Tensor  # [Cout, Cin/groups, k, k]
    bias: Tensor    # [Cout]


@dataclass
class LinearParams:
    weight: Tensor  # [Dout, Din]
    bias: Tensor    # [Dout]


@dataclass
class BnParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class ConvBlockParams:
    """conv 3x3 -> batch norm -> leaky relu"""

    conv: ConvParams
    bn: BnParams


@dataclass
class ResidualBlockParams:
    """Three conv blocks plus a skip (1x1 projection when widths differ)."""

    blocks: list  # 3 x ConvBlockParams
    skip: ConvParams | None


@dataclass
class SaliencyGateParams:
    """Gradient-driven fusion gate over the concatenated encoder features."""

    gmp_fc: LinearParams
    gap_fc: LinearParams
    maxp_conv: ConvParams
    meanp_conv: ConvParams


@dataclass
class ConcatFuseParams:
    """Ablation I: the gate is replaced by a 1x1 conv on the concatenation."""

    conv: ConvParams


@dataclass
class ReconParams:
    blocks: list          # ConvBlockParams chain ending at C/2 channels
    head: ConvParams      # C/2 -> 1, followed by sigmoid


@dataclass
class FusionNetParams:
    ir_encoder: list      # num_blocks x ResidualBlockParams
    vi_encoder: list
    gate: SaliencyGateParams | ConcatFuseParams
    decoder: list         # num_blocks x ResidualBlockParams at 2C
    recon: ReconParams
    lrelu_slope: float = 0.2
    gate_pool: int = 2


# -- initializers ----------------------------------------------------------------


def init_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> ConvParams:
    bound = 1.0 / np.sqrt(cin * k * k)
    kernel = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    return ConvParams(Tensor(kernel, True), Tensor.zeros((cout,), True))


def zero_conv(cout: int, cin: int, k: int) -> ConvParams:
    return ConvParams(Tensor.zeros((cout, cin, k, k), True), Tensor.zeros((cout,), True))


def init_linear(rng: np.random.Generator, dout: int, din: int) -> LinearParams:
    bound = 1.0 / np.sqrt(din)
    weight = rng.uniform(-bound, bound, size=(dout, din))
    return LinearParams(Tensor(weight, True), Tensor.zeros((dout,), True))


def init_bn(c: int) -> BnParams:
    return BnParams(
        gamma=Tensor.ones((c,), True),
        beta=Tensor.zeros((c,), True),
        running_mean=np.zeros(c, dtype=np.float64),
        running_var=np.ones(c, dtype=np.float64),
    )


def init_conv_block(rng, cout: int, cin: int, k: int = 3) -> ConvBlockParams:
    return ConvBlockParams(conv=init_conv(rng, cout, cin, k), bn=init_bn(cout))


def init_residual_block(rng, cin: int, cout: int) -> ResidualBlockParams:
    blocks = [
        init_conv_block(rng, cout, cin),
        init_conv_block(rng, cout, cout),
        init_conv_block(rng, cout, cout),
    ]
    skip = init_conv(rng, cout, cin, 1) if cin != cout else None
    return ResidualBlockParams(blocks=blocks, skip=skip)


def build_fusion_net(cfg: ModelConfig, rng: np.random.Generator) -> FusionNetParams:
    cfg.validate()
    c = cfg.channels
    c2 = 2 * c
    ir_enc = [init_residual_block(rng, 1 if i == 0 else c, c) for i in range(cfg.num_blocks)]
    vi_enc = [init_residual_block(rng, 1 if i == 0 else c, c) for i in range(cfg.num_blocks)]
    if cfg.ablation == "I":
        gate = ConcatFuseParams(conv=init_conv(rng, c2, c2, 1))
    else:
        gate = SaliencyGateParams(
            gmp_fc=init_linear(rng, c2, c2),
            gap_fc=init_linear(rng, c2, c2),
            maxp_conv=init_conv(rng, c2, c2, 3),
            meanp_conv=init_conv(rng, c2, c2, 3),
        )
    decoder = [init_residual_block(rng, c2, c2) for _ in range(cfg.num_blocks)]
    recon = ReconParams(
        blocks=[
            init_conv_block(rng, c, c2),
            init_conv_block(rng, c // 2, c),
            init_conv_block(rng, c // 2, c // 2),
        ],
        head=init_conv(rng, 1, c // 2, 3),
    )
    return FusionNetParams(
        ir_encoder=ir_enc,
        vi_encoder=vi_enc,
        gate=gate,
        decoder=decoder,
        recon=recon,
        lrelu_slope=cfg.lrelu_slope,
        gate_pool=cfg.gate_pool,
    )


# -- forward passes ------------------------------------------------------------


def conv_block_forward(p: ConvBlockParams, x: Tensor, *, training: bool,
                       slope: float) -> Tensor:
    k = p.conv.kernel.shape[-1]
    y = conv2d(x, p.conv.kernel, p.conv.bias, padding=k // 2)
    y = batch_norm(y, p.bn.gamma, p.bn.beta, p.bn.running_mean, p.bn.running_var,
                   training=training)
    return lrelu(y, slope)


def crb_forward(p: ResidualBlockParams, x: Tensor, *, training: bool,
                slope: float) -> Tensor:
    """Residual block: out = blocks(x) + skip(x); spatial extent preserved."""
    y = x
    for blk in p.blocks:
        y = conv_block_forward(blk, y, training=training, slope=slope)
    sk = x if p.skip is None else conv2d(x, p.skip.kernel, p.skip.bias)
    return add(y, sk)


def encode(blocks, image: Tensor, *, training: bool, slope: float) -> list[Tensor]:
    """Run the encoder chain, returning every intermediate feature."""
    if image.ndim != 4 or image.shape[1] != 1:
        raise DimensionError(f"encoder expects [B, 1, H, W], got {image.shape}")
    feats = []
    x = image
    for blk in blocks:
        x = crb_forward(blk, x, training=training, slope=slope)
        feats.append(x)
    return feats


def saliency_gate(p: SaliencyGateParams, f_ir: Tensor, f_vi: Tensor, *,
                  pool_k: int = 2) -> Tensor:
    """Pool the gradient map of the concatenated features into channel and
    spatial attention branches, combine them, and gate the concatenation."""
    if f_ir.shape != f_vi.shape:
        raise DimensionError(f"gate: feature shapes differ, {f_ir.shape} vs {f_vi.shape}")
    cat = concat([f_ir, f_vi], axis=1)
    b, c2, h, w = cat.shape
    g = spatial_gradient(cat)
    # channel branches: global pooling -> linear -> relu
    gmp = relu(linear(reshape(global_max_pool(g), (b, c2)), p.gmp_fc.weight, p.gmp_fc.bias))
    gap = relu(linear(reshape(global_avg_pool(g), (b, c2)), p.gap_fc.weight, p.gap_fc.bias))
    vec = add(gmp, gap)
    # spatial branches: windowed pooling -> conv -> relu -> upsample back
    mx = relu(conv2d(max_pool2d(g, pool_k), p.maxp_conv.kernel, p.maxp_conv.bias, padding=1))
    mn = relu(conv2d(avg_pool2d(g, pool_k), p.meanp_conv.kernel, p.meanp_conv.bias, padding=1))
    maps = add(upsample_nearest(mx, pool_k), upsample_nearest(mn, pool_k))
    att = mul(broadcast_hw(vec, h, w), maps)
    return mul(sigmoid(att), cat)


def fuse_features(gate, f_ir: Tensor, f_vi: Tensor, *, pool_k: int = 2) -> Tensor:
    if isinstance(gate, ConcatFuseParams):
        cat = concat([f_ir, f_vi], axis=1)
        return conv2d(cat, gate.conv.kernel, gate.conv.bias)
    return saliency_gate(gate, f_ir, f_vi, pool_k=pool_k)


def reconstruct(decoder, recon: ReconParams, fused: Tensor, *, training: bool,
                slope: float) -> Tensor:
    """Decode the fused features and reconstruct the fused image in (0, 1)."""
    x = fused
    for blk in decoder:
        x = crb_forward(blk, x, training=training, slope=slope)
    for blk in recon.blocks:
        x = conv_block_forward(blk, x, training=training, slope=slope)
    k = recon.head.kernel.shape[-1]
    return sigmoid(conv2d(x, recon.head.kernel, recon.head.bias, padding=k // 2))


def fusion_forward(params: FusionNetParams, ir: Tensor, vi: Tensor, *,
                   training: bool = False) -> Tensor:
    """Plain base-network fusion of an IR/VIS pair."""
    slope = params.lrelu_slope
    ir_feats = encode(params.ir_encoder, ir, training=training, slope=slope)
    vi_feats = encode(params.vi_encoder, vi, training=training, slope=slope)
    fused = fuse_features(params.gate, ir_feats[-1], vi_feats[-1], pool_k=params.gate_pool)
    return reconstruct(params.decoder, params.recon, fused, training=training, slope=slope)


# -- losses ------------------------------------------------------------------


def brightness_loss(i_f: Tensor, i_ir: Tensor, i_vi: Tensor) -> Tensor:
    """Mean L1 between the fused image and the pixelwise max of the sources."""
    return l1(i_f, maximum(i_ir, i_vi))


def gradient_loss(i_f: Tensor, i_ir: Tensor, i_vi: Tensor) -> Tensor:
    """Mean L1 between the fused gradient magnitude and the max source one."""
    return l1(
        spatial_gradient(i_f),
        maximum(spatial_gradient(i_ir), spatial_gradient(i_vi)),
    )


def fusion_loss(i_f: Tensor, i_ir: Tensor, i_vi: Tensor,
                brightness_weight: float = 0.2) -> Tensor:
    """Gradient loss plus weighted brightness loss."""
    if brightness_weight < 0:
        raise ConfigurationError("brightness_weight must be >= 0")
    return add(
        gradient_loss(i_f, i_ir, i_vi),
        scale(brightness_loss(i_f, i_ir, i_vi), brightness_weight),
    )
