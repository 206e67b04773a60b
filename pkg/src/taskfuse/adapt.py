"""Task regulation of the frozen fusion network via dynamic prompt injection.

One injector sits after each of the first M-1 encoder blocks of each stream
(2(M-1) injectors total). An injector predicts a per-sample depthwise conv
kernel from the instruction embedding plus pooled image statistics, extracts
a prompt by convolving the feature with that kernel and refining it through
a small conv stack, and adds the prompt back onto the feature. The last conv
of the refiner stack is zero-initialized, so an untrained regulator leaves
the base network's output exactly unchanged.

Ablation variants (built by `build_regulator` from ModelConfig.ablation):
  II  - kernel predicted from image statistics only (no text path),
  III - static residual conv refiners (no dynamic kernel, no text),
  IV  - no per-depth injectors; text is added to the fused image and
        refined with convs,
  V   - text broadcast and concatenated with each feature, refined with
        convs (no dynamic kernel),
  VI  - kernel predicted from the text projection only (no pooling path).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .fusion import (
    BnParams,
    ConvBlockParams,
    ConvParams,
    FusionNetParams,
    LinearParams,
    ModelConfig,
    conv_block_forward,
    crb_forward,
    fuse_features,
    init_bn,
    init_conv,
    init_conv_block,
    init_linear,
    reconstruct,
    zero_conv,
)
from .instructions import InstructionEmbedding
from .tensor import (
    Tensor,
    add,
    batch_norm,
    broadcast_hw,
    concat,
    conv2d,
    global_avg_pool,
    global_max_pool,
    linear,
    lrelu,
    relu,
    reshape,
)

STREAMS = ("ir", "vi")


@dataclass
class TextAdapterParams:
    """Two linear layers (relu between) mapping text to the image domain."""

    fc1: LinearParams
    fc2: LinearParams


@dataclass
class RefinerParams:
    """Prompt refiner: BN + LReLU, then three conv+BN+LReLU blocks.

    (Three convs, four batch norms, four leaky relus in total; the final
    conv is zero-initialized for identity at initialization.)
    """

    bn0: BnParams
    blocks: list  # 3 x ConvBlockParams


@dataclass
class DynamicInjectorParams:
    """Full injector; also covers variants II (adapter None) and VI (pools None)."""

    adapter: TextAdapterParams | None
    pre_conv_avg: ConvParams | None
    pre_conv_max: ConvParams | None
    kernel_fc1: LinearParams
    kernel_fc2: LinearParams
    refiner: RefinerParams
    kernel_size: int = 3


@dataclass
class StaticInjectorParams:
    """Variant III: a plain conv refiner applied residually."""

    refiner: RefinerParams


@dataclass
class TextConcatInjectorParams:
    """Variant V: broadcast text concatenated with the feature, then convs."""

    adapter: TextAdapterParams
    refiner: RefinerParams


@dataclass
class OutputTextParams:
    """Variant IV: text added to the fused image, then a conv refiner."""

    adapter: TextAdapterParams  # maps text to a single channel
    refiner: RefinerParams      # 1 -> C -> C -> 1, zero-init last


@dataclass
class RegulatorParams:
    modules: list                      # per-depth injectors, ir block then vi block
    output_module: OutputTextParams | None
    variant: str                       # "", "II", "III", "V", "VI" ("IV" uses output_module)
    num_blocks: int = 4


def module_index(stream: str, depth: int, num_blocks: int) -> int:
    """Index of the injector for (stream, depth); depth is 0-based in 0..M-2."""
    if stream not in STREAMS:
        raise ConfigurationError(f"unknown stream {stream!r}")
    if not 0 <= depth < num_blocks - 1:
        raise ConfigurationError(f"depth {depth} outside 0..{num_blocks - 2}")
    return depth if stream == "ir" else (num_blocks - 1) + depth


# -- builders -----------------------------------------------------------------


def init_text_adapter(rng, text_dim: int, hidden: int, out: int) -> TextAdapterParams:
    return TextAdapterParams(
        fc1=init_linear(rng, hidden, text_dim),
        fc2=init_linear(rng, out, hidden),
    )


def init_refiner(rng, cin: int, mid: int, cout: int) -> RefinerParams:
    """Conv refiner ending in a zero conv (prompt is exactly 0 at init)."""
    blocks = [
        init_conv_block(rng, mid, cin),
        init_conv_block(rng, mid, mid),
        ConvBlockParams(conv=zero_conv(cout, mid, 3), bn=init_bn(cout)),
    ]
    return RefinerParams(bn0=init_bn(cin), blocks=blocks)


def build_regulator(cfg: ModelConfig, rng: np.random.Generator) -> RegulatorParams:
    cfg.validate()
    c = cfg.channels
    k = cfg.dyn_kernel
    dt = cfg.text_dim
    variant = cfg.ablation if cfg.ablation in ("II", "III", "IV", "V", "VI") else ""
    n_mod = 2 * (cfg.num_blocks - 1)

    if variant == "IV":
        out_mod = OutputTextParams(
            adapter=init_text_adapter(rng, dt, c, 1),
            refiner=init_refiner(rng, 1, c, 1),
        )
        return RegulatorParams(modules=[], output_module=out_mod, variant="IV",
                               num_blocks=cfg.num_blocks)

    modules = []
    for _ in range(n_mod):
        if variant == "III":
            modules.append(StaticInjectorParams(refiner=init_refiner(rng, c, c, c)))
        elif variant == "V":
            modules.append(TextConcatInjectorParams(
                adapter=init_text_adapter(rng, dt, c, c),
                refiner=init_refiner(rng, 2 * c, c, c),
            ))
        else:
            in_dim = {"": 3 * c, "II": 2 * c, "VI": c}[variant]
            modules.append(DynamicInjectorParams(
                adapter=None if variant == "II" else init_text_adapter(rng, dt, c, c),
                pre_conv_avg=None if variant == "VI" else init_conv(rng, c, c, 3),
                pre_conv_max=None if variant == "VI" else init_conv(rng, c, c, 3),
                kernel_fc1=init_linear(rng, in_dim, in_dim),
                kernel_fc2=init_linear(rng, c * k * k, in_dim),
                refiner=init_refiner(rng, c, c, c),
                kernel_size=k,
            ))
    return RegulatorParams(modules=modules, output_module=None, variant=variant,
                           num_blocks=cfg.num_blocks)


# -- forward pieces --------------------------------------------------------------


def _embedding_batch(embedding, batch: int, text_dim: int) -> Tensor:
    vec = embedding.vector if isinstance(embedding, InstructionEmbedding) else np.asarray(embedding)
    if vec.shape != (text_dim,):
        raise DimensionError(f"embedding length {vec.shape} != ({text_dim},)")
    return Tensor(np.broadcast_to(vec, (batch, text_dim)).copy())


def adapter_forward(adapter: TextAdapterParams, embedding, batch: int) -> Tensor:
    """Project the instruction embedding into the image domain, per sample."""
    text_dim = adapter.fc1.weight.shape[1]
    x = _embedding_batch(embedding, batch, text_dim)
    h = relu(linear(x, adapter.fc1.weight, adapter.fc1.bias))
    return linear(h, adapter.fc2.weight, adapter.fc2.bias)


def predict_kernel(p: DynamicInjectorParams, feat: Tensor,
                   text_proj: Tensor | None) -> Tensor:
    """Per-sample depthwise kernel [B, C, 1, k, k] from stats and text."""
    b, c, _, _ = feat.shape
    parts = []
    if p.pre_conv_avg is not None:
        fa = global_avg_pool(conv2d(feat, p.pre_conv_avg.kernel, p.pre_conv_avg.bias, padding=1))
        fm = global_max_pool(conv2d(feat, p.pre_conv_max.kernel, p.pre_conv_max.bias, padding=1))
        parts.append(reshape(fa, (b, c)))
        parts.append(reshape(fm, (b, c)))
    if text_proj is not None:
        if text_proj.shape != (b, c):
            raise DimensionError(f"text projection {text_proj.shape} != {(b, c)}")
        parts.append(text_proj)
    z = concat(parts, axis=1) if len(parts) > 1 else parts[0]
    h = relu(linear(z, p.kernel_fc1.weight, p.kernel_fc1.bias))
    flat = linear(h, p.kernel_fc2.weight, p.kernel_fc2.bias)
    k = p.kernel_size
    return reshape(flat, (b, c, 1, k, k))


def refiner_forward(p: RefinerParams, x: Tensor, *, training: bool,
                    slope: float) -> Tensor:
    y = lrelu(batch_norm(x, p.bn0.gamma, p.bn0.beta, p.bn0.running_mean,
                         p.bn0.running_var, training=training), slope)
    for blk in p.blocks:
        y = conv_block_forward(blk, y, training=training, slope=slope)
    return y


def dynamic_prompt(p: DynamicInjectorParams, kernel: Tensor, feat: Tensor, *,
                   training: bool, slope: float) -> Tensor:
    """Convolve the feature with its per-sample kernel, then refine."""
    b, c, h, w = feat.shape
    if kernel.shape != (b, c, 1, p.kernel_size, p.kernel_size):
        raise DimensionError(
            f"dynamic kernel shape {kernel.shape} != {(b, c, 1, p.kernel_size, p.kernel_size)}"
        )
    k = p.kernel_size
    # per-sample depthwise conv via the grouped-channel trick
    xr = reshape(feat, (1, b * c, h, w))
    wr = reshape(kernel, (b * c, 1, k, k))
    y = conv2d(xr, wr, stride=1, padding=k // 2, groups=b * c)
    y = reshape(y, (b, c, h, w))
    return refiner_forward(p.refiner, y, training=training, slope=slope)


def inject(prompt: Tensor, feat: Tensor) -> Tensor:
    """Residual injection of the prompt into the feature."""
    if prompt.shape != feat.shape:
        raise DimensionError(f"inject: {prompt.shape} vs {feat.shape}")
    return add(prompt, feat)


def injector_forward(module, feat: Tensor, embedding, *, training: bool,
                     slope: float) -> Tensor:
    b = feat.shape[0]
    if isinstance(module, StaticInjectorParams):
        prompt = refiner_forward(module.refiner, feat, training=training, slope=slope)
    elif isinstance(module, TextConcatInjectorParams):
        tvec = adapter_forward(module.adapter, embedding, b)
        tmap = broadcast_hw(tvec, feat.shape[2], feat.shape[3])
        prompt = refiner_forward(module.refiner, concat([feat, tmap], axis=1),
                                 training=training, slope=slope)
    else:
        text_proj = None
        if module.adapter is not None:
            text_proj = adapter_forward(module.adapter, embedding, b)
        kernel = predict_kernel(module, feat, text_proj)
        prompt = dynamic_prompt(module, kernel, feat, training=training, slope=slope)
    return inject(prompt, feat)


def regulated_fusion_forward(
    reg: RegulatorParams,
    net: FusionNetParams,
    ir: Tensor,
    vi: Tensor,
    embedding,
    *,
    training: bool = False,
) -> Tensor:
    """Task-adapted fusion: encoders with prompt injection, then the frozen
    fusion/reconstruction path.

    The base network always runs in eval mode here (its parameters and batch
    norm statistics stay untouched); `training` only switches the regulator's
    own batch norms.
    """
    slope = net.lrelu_slope
    m = reg.num_blocks
    if len(net.ir_encoder) != m or len(net.vi_encoder) != m:
        raise ConfigurationError(
            f"regulator built for {m} encoder blocks, network has {len(net.ir_encoder)}"
        )
    outs = {}
    for stream, blocks, image in (("ir", net.ir_encoder, ir), ("vi", net.vi_encoder, vi)):
        if image.ndim != 4 or image.shape[1] != 1:
            raise DimensionError(f"encoder expects [B, 1, H, W], got {image.shape}")
        x = image
        for i, blk in enumerate(blocks):
            x = crb_forward(blk, x, training=False, slope=slope)
            if i < m - 1 and reg.modules:
                mod = reg.modules[module_index(stream, i, m)]
                x = injector_forward(mod, x, embedding, training=training, slope=slope)
        outs[stream] = x
    fused = fuse_features(net.gate, outs["ir"], outs["vi"], pool_k=net.gate_pool)
    i_f = reconstruct(net.decoder, net.recon, fused, training=False, slope=slope)
    if reg.output_module is not None:
        om = reg.output_module
        b, _, h, w = i_f.shape
        tvec = adapter_forward(om.adapter, embedding, b)          # [B, 1]
        tmap = broadcast_hw(tvec, h, w)                           # [B, 1, H, W]
        delta = refiner_forward(om.refiner, add(i_f, tmap),
                                training=training, slope=slope)
        i_f = add(i_f, delta)
    return i_f
