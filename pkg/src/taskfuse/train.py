"""Training drivers: stage 0 (task heads), stage 1 (base fusion network),
stage 2 (regulator on the frozen base), plus evaluation and ablations.

Stage 1 minimizes the fusion loss with a warmup/decay learning-rate ramp.
Stage 0 manufactures the frozen task heads by training them on the plain
fused outputs of the stage-1 network. Stage 2 samples one task per batch,
encodes its instruction, and updates only the regulator; the base network
and heads are bitwise-frozen throughout.

Every run is fully determined by (config, seed, dataset): model init, batch
shuffling, task sampling, and augmentation draw from separate fixed seed
streams. Loss traces are written as CSV `epoch,step,loss,lr`.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import RegulatorParams, build_regulator, regulated_fusion_forward
from .checkpoint import Checkpoint, load_into
from .data import Sample, augment
from .errors import ConfigurationError, ContractError, NumericError
from .fusion import (
    FusionNetParams,
    ModelConfig,
    build_fusion_net,
    fusion_forward,
    fusion_loss,
)
from .instructions import (
    CANONICAL_INSTRUCTIONS,
    InstructionEmbedding,
    check_pairwise_distinct,
    encode_text,
    import_embedding,
)
from .params import set_requires_grad, trainable_tensors
from .tasks import (
    TASK_KINDS,
    TaskHeadParams,
    build_head,
    head_forward,
    metric_fbeta,
    metric_mae,
    metric_miou,
    seg_prediction_classes,
    task_loss,
)
from .tensor import Adam, Tensor, sigmoid

STAGES = ("heads", "bfn", "toar")
_STAGE_ALIASES = {"0": "heads", "1": "bfn", "2": "toar",
                  "heads": "heads", "bfn": "bfn", "toar": "toar"}

# independent seed streams
_S_INIT = 11
_S_BATCH = 23
_S_TASK = 37
_S_AUG = 53


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def normalize_stage(stage: str) -> str:
    try:
        return _STAGE_ALIASES[str(stage)]
    except KeyError:
        raise ConfigurationError(f"unknown stage {stage!r}, expected 0/1/2") from None


@dataclass
class TrainConfig:
    stage: str = "bfn"
    epochs: int = 20
    batch_size: int = 6
    max_steps: int = 0          # 0 = run all epochs
    lr_start: float = 1e-4      # stage-1 ramp
    lr_peak: float = 1e-3
    lr_end: float = 1e-4
    warmup_frac: float = 0.2
    lr_heads: float = 1e-3
    lr_regulator: float = 1e-2  # stage-2 constant
    brightness_weight: float = 0.2
    seed: int = 0
    tasks: tuple = tuple(TASK_KINDS)
    instructions: dict = field(default_factory=lambda: dict(CANONICAL_INSTRUCTIONS))
    embedding_path: str = ""
    augment: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"stage must be one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.brightness_weight < 0:
            raise ConfigurationError("brightness_weight must be >= 0")
        for t in self.tasks:
            if t not in TASK_KINDS:
                raise ConfigurationError(f"unknown task {t!r}")
        if not self.tasks:
            raise ConfigurationError("at least one task must be configured")
        self.model.validate()

    def to_meta(self) -> dict:
        return {
            "stage": self.stage,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "lr_start": self.lr_start,
            "lr_peak": self.lr_peak,
            "lr_end": self.lr_end,
            "warmup_frac": self.warmup_frac,
            "lr_heads": self.lr_heads,
            "lr_regulator": self.lr_regulator,
            "brightness_weight": self.brightness_weight,
            "seed": self.seed,
            "tasks": list(self.tasks),
            "instructions": dict(self.instructions),
            "embedding_path": self.embedding_path,
            "augment": self.augment,
            "model": self.model.to_dict(),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_meta(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Stage-1: linear warmup then linear decay; stages 0 and 2: constant."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 0..{cfg.epochs - 1}")
    if cfg.stage == "toar":
        return cfg.lr_regulator
    if cfg.stage == "heads":
        return cfg.lr_heads
    warmup = max(1, round(cfg.epochs * cfg.warmup_frac))
    if epoch < warmup:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / warmup
    tail = cfg.epochs - warmup
    if tail == 0:
        return cfg.lr_peak
    return cfg.lr_peak + (cfg.lr_end - cfg.lr_peak) * (epoch - warmup) / tail


# -- batching helpers ----------------------------------------------------------


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    nb = n // batch_size
    if nb == 0:
        yield perm
        return
    for k in range(nb):
        yield perm[k * batch_size : (k + 1) * batch_size]


def _random_augment(sample: Sample, rng: np.random.Generator) -> Sample:
    ops = []
    if rng.random() < 0.5:
        ops.append("hflip")
    if rng.random() < 0.5:
        ops.append("vflip")
    ops.extend(["rot90"] * int(rng.integers(0, 4)))
    return augment(sample, ops) if ops else sample


def _stack_images(batch: list[Sample]) -> tuple[Tensor, Tensor]:
    ir = np.stack([s.ir for s in batch])[:, None, :, :]
    vi = np.stack([s.vis for s in batch])[:, None, :, :]
    return Tensor(ir), Tensor(vi)


def _stack_target(batch: list[Sample], task: str) -> np.ndarray:
    if task == "seg":
        return np.stack([s.gt.seg for s in batch])
    if task == "sod":
        return np.stack([s.gt.sod for s in batch])[:, None, :, :]
    return np.stack([s.gt.det for s in batch])[:, None, :, :]


def _snapshot(stage: str, tree, meta: dict) -> Checkpoint:
    ckpt = Checkpoint.from_tree(stage, tree, meta)
    ckpt.entries = [(n, k, a.copy()) for n, k, a in ckpt.entries]
    return ckpt


def _check_finite_loss(value: float, last_good: Checkpoint) -> None:
    if not math.isfinite(value):
        err = NumericError(f"training loss became non-finite ({value})")
        err.last_good = last_good
        raise err


# -- stage 1: base fusion network ---------------------------------------------------


def train_stage1(cfg: TrainConfig, samples: list[Sample]):
    """Train the base network on the fusion loss; returns (net, trace)."""
    cfg = replace(cfg, stage="bfn")
    cfg.validate()
    net = build_fusion_net(cfg.model, _rng(cfg.seed, _S_INIT))
    opt = Adam(trainable_tensors(net))
    trace: list[tuple[int, int, float, float]] = []
    meta = {"config": cfg.config_hash(), "model": cfg.model.to_dict(), "seed": cfg.seed}
    last_good = _snapshot("bfn", net, meta)
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        lr = lr_schedule(epoch, cfg)
        brng = _rng(cfg.seed, _S_BATCH, epoch)
        for idx in _epoch_batches(len(samples), cfg.batch_size, brng):
            batch = [samples[i] for i in idx]
            if cfg.augment:
                arng = _rng(cfg.seed, _S_AUG, step)
                batch = [_random_augment(s, arng) for s in batch]
            ir, vi = _stack_images(batch)
            fused = fusion_forward(net, ir, vi, training=True)
            loss = fusion_loss(fused, ir, vi, cfg.brightness_weight)
            lval = loss.item()
            _check_finite_loss(lval, last_good)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            trace.append((epoch, step, lval, lr))
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        last_good = _snapshot("bfn", net, {**meta, "epoch": epoch})
    return net, trace


# -- stage 0: frozen task heads -----------------------------------------------------


@dataclass
class HeadsParams:
    seg: TaskHeadParams
    sod: TaskHeadParams
    det: TaskHeadParams

    def get(self, kind: str) -> TaskHeadParams:
        if kind not in TASK_KINDS:
            raise ConfigurationError(f"no head for task {kind!r}")
        return getattr(self, kind)


def fused_images(net: FusionNetParams, samples: list[Sample],
                 reg: RegulatorParams | None = None, embedding=None,
                 batch_size: int = 16) -> np.ndarray:
    """Eval-mode fused images [N, 1, H, W] (no gradients, no stat updates)."""
    outs = []
    for k in range(0, len(samples), batch_size):
        batch = samples[k : k + batch_size]
        ir, vi = _stack_images(batch)
        if reg is None:
            out = fusion_forward(net, ir, vi, training=False)
        else:
            out = regulated_fusion_forward(reg, net, ir, vi, embedding, training=False)
        outs.append(out.data)
    return np.concatenate(outs, axis=0)


def pretrain_heads(cfg: TrainConfig, samples: list[Sample], net: FusionNetParams):
    """Train one head per task on plain fused outputs, then freeze them."""
    cfg = replace(cfg, stage="heads")
    cfg.validate()
    fused = fused_images(net, samples)
    heads = HeadsParams(
        seg=build_head("seg", _rng(cfg.seed, _S_INIT, 0)),
        sod=build_head("sod", _rng(cfg.seed, _S_INIT, 1)),
        det=build_head("det", _rng(cfg.seed, _S_INIT, 2)),
    )
    traces: dict[str, list] = {}
    meta = {"config": cfg.config_hash(), "seed": cfg.seed}
    for t_i, kind in enumerate(TASK_KINDS):
        head = heads.get(kind)
        opt = Adam(trainable_tensors(head))
        trace = []
        step = 0
        last_good = _snapshot("heads", heads, meta)
        for epoch in range(cfg.epochs):
            brng = _rng(cfg.seed, _S_BATCH, t_i, epoch)
            lr = lr_schedule(epoch, cfg)
            for idx in _epoch_batches(len(samples), cfg.batch_size, brng):
                batch = [samples[i] for i in idx]
                x = Tensor(fused[idx])
                pred = head_forward(head, x)
                loss = task_loss(kind, pred, _stack_target(batch, kind))
                lval = loss.item()
                _check_finite_loss(lval, last_good)
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                trace.append((epoch, step, lval, lr))
                step += 1
        traces[kind] = trace
    set_requires_grad(heads, False)
    return heads, traces


# -- stage 2: regulator on the frozen base -------------------------------------------


def task_embeddings(cfg: TrainConfig) -> dict[str, InstructionEmbedding]:
    """One embedding per configured task, from text or an imported file."""
    embeddings = {}
    for task in cfg.tasks:
        if cfg.embedding_path and len(cfg.tasks) == 1:
            embeddings[task] = import_embedding(cfg.embedding_path, cfg.model.text_dim)
        else:
            text = cfg.instructions.get(task)
            if not text:
                raise ConfigurationError(f"no instruction configured for task {task!r}")
            embeddings[task] = encode_text(text, cfg.model.text_dim)
    if len(embeddings) > 1:
        check_pairwise_distinct(embeddings.values())
    return embeddings


def train_stage2(cfg: TrainConfig, samples: list[Sample], net: FusionNetParams,
                 heads: HeadsParams):
    """Train the regulator only; base network and heads stay bitwise-frozen."""
    cfg = replace(cfg, stage="toar")
    cfg.validate()
    for task in cfg.tasks:
        heads.get(task)  # raises if a configured task has no head
    set_requires_grad(net, False)
    set_requires_grad(heads, False)
    embeddings = task_embeddings(cfg)
    reg = build_regulator(cfg.model, _rng(cfg.seed, _S_INIT))
    opt = Adam(trainable_tensors(reg))
    trace: list[tuple[int, int, float, float]] = []
    meta = {
        "config": cfg.config_hash(),
        "model": cfg.model.to_dict(),
        "seed": cfg.seed,
        "instructions": {t: embeddings[t].instruction_text for t in cfg.tasks},
    }
    last_good = _snapshot("toar", reg, meta)
    task_rng = _rng(cfg.seed, _S_TASK)
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        if done:
            break
        lr = lr_schedule(epoch, cfg)
        brng = _rng(cfg.seed, _S_BATCH, epoch)
        for idx in _epoch_batches(len(samples), cfg.batch_size, brng):
            task = cfg.tasks[int(task_rng.integers(len(cfg.tasks)))]
            batch = [samples[i] for i in idx]
            if cfg.augment:
                arng = _rng(cfg.seed, _S_AUG, step)
                batch = [_random_augment(s, arng) for s in batch]
            ir, vi = _stack_images(batch)
            fused = regulated_fusion_forward(reg, net, ir, vi, embeddings[task],
                                             training=True)
            pred = head_forward(heads.get(task), fused)
            loss = task_loss(task, pred, _stack_target(batch, task))
            lval = loss.item()
            _check_finite_loss(lval, last_good)
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            trace.append((epoch, step, lval, lr))
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        last_good = _snapshot("toar", reg, {**meta, "epoch": epoch})
    return reg, trace


# -- evaluation ---------------------------------------------------------------------


def evaluate_task(net: FusionNetParams, heads: HeadsParams, samples: list[Sample],
                  task: str, reg: RegulatorParams | None = None, embedding=None,
                  batch_size: int = 16) -> dict:
    """Mean task loss and task metrics over a sample list (eval mode)."""
    head = heads.get(task)
    total_loss = 0.0
    metrics: dict[str, float] = {}
    per_sample: dict[str, list[float]] = {}
    n = len(samples)
    for k in range(0, n, batch_size):
        batch = samples[k : k + batch_size]
        ir, vi = _stack_images(batch)
        if reg is None:
            fused = fusion_forward(net, ir, vi, training=False)
        else:
            fused = regulated_fusion_forward(reg, net, ir, vi, embedding, training=False)
        logits = head_forward(head, fused)
        target = _stack_target(batch, task)
        total_loss += task_loss(task, logits, target).item() * len(batch)
        if task == "seg":
            pred_cls = seg_prediction_classes(logits)
            for b, s in enumerate(batch):
                per_sample.setdefault("miou", []).append(
                    metric_miou(pred_cls[b], s.gt.seg)
                )
        elif task == "sod":
            prob = sigmoid(logits).data[:, 0]
            for b, s in enumerate(batch):
                per_sample.setdefault("mae", []).append(metric_mae(prob[b], s.gt.sod))
                per_sample.setdefault("fbeta", []).append(metric_fbeta(prob[b], s.gt.sod))
        else:
            prob = sigmoid(logits).data[:, 0]
            for b, s in enumerate(batch):
                per_sample.setdefault("mse", []).append(
                    float(((prob[b] - s.gt.det) ** 2).mean())
                )
    metrics["loss"] = total_loss / n
    for key, vals in per_sample.items():
        metrics[key] = float(np.mean(vals))
    return metrics


# -- checkpoints --------------------------------------------------------------------


def save_net(path, net: FusionNetParams, meta: dict) -> Checkpoint:
    ckpt = Checkpoint.from_tree("bfn", net, meta)
    ckpt.save(path)
    return ckpt


def load_net(path) -> tuple[FusionNetParams, Checkpoint]:
    ckpt = Checkpoint.load(path)
    if ckpt.stage != "bfn":
        raise ConfigurationError(f"{path}: expected a stage-1 checkpoint, got {ckpt.stage!r}")
    mcfg = ModelConfig.from_dict(ckpt.metadata["model"])
    net = build_fusion_net(mcfg, _rng(0))
    load_into(net, ckpt)
    return net, ckpt


def save_heads(path, heads: HeadsParams, meta: dict) -> Checkpoint:
    ckpt = Checkpoint.from_tree("heads", heads, meta)
    ckpt.save(path)
    return ckpt


def load_heads(path) -> tuple[HeadsParams, Checkpoint]:
    ckpt = Checkpoint.load(path)
    if ckpt.stage != "heads":
        raise ConfigurationError(f"{path}: expected a heads checkpoint, got {ckpt.stage!r}")
    heads = HeadsParams(
        seg=build_head("seg", _rng(0)),
        sod=build_head("sod", _rng(0)),
        det=build_head("det", _rng(0)),
    )
    load_into(heads, ckpt)
    set_requires_grad(heads, False)
    return heads, ckpt


def save_regulator(path, reg: RegulatorParams, meta: dict) -> Checkpoint:
    ckpt = Checkpoint.from_tree("toar", reg, meta)
    ckpt.save(path)
    return ckpt


def load_regulator(path) -> tuple[RegulatorParams, Checkpoint]:
    ckpt = Checkpoint.load(path)
    if ckpt.stage != "toar":
        raise ConfigurationError(f"{path}: expected a regulator checkpoint, got {ckpt.stage!r}")
    mcfg = ModelConfig.from_dict(ckpt.metadata["model"])
    reg = build_regulator(mcfg, _rng(0))
    load_into(reg, ckpt)
    return reg, ckpt


def write_trace(path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("epoch,step,loss,lr\n")
        for epoch, step, loss, lr in rows:
            fh.write(f"{epoch},{step},{loss!r},{lr!r}\n")


# -- ablations -----------------------------------------------------------------------

ABLATION_FLAGS = {
    "disable_ff": "I",
    "disable_instructions": "II",
    "disable_tdpi": "III",
    "add_text_to_output": "IV",
    "concat_text_features": "V",
    "disable_gap_gmp": "VI",
}


def ablation_from_flags(flags: dict) -> str:
    active = [name for name, on in flags.items() if on]
    unknown = [n for n in active if n not in ABLATION_FLAGS]
    if unknown:
        raise ConfigurationError(f"unknown ablation flags: {unknown}")
    if len(active) > 1:
        raise ConfigurationError(f"conflicting ablation flags: {active}")
    return ABLATION_FLAGS[active[0]] if active else ""


def run_ablation_trial(model_tag: str, cfg: TrainConfig,
                       train_samples: list[Sample], val_samples: list[Sample],
                       base_net: FusionNetParams, heads: HeadsParams,
                       stage2_steps: int = 50, stage1_steps: int = 200) -> dict:
    """Train one (possibly ablated) model's regulator for a short seg-only run
    and report its held-out segmentation loss.

    Model I changes the base architecture, so it retrains its own stage-1
    network first; all variants share the same frozen heads.
    """
    if model_tag not in ("",) + tuple(ABLATION_FLAGS.values()):
        raise ConfigurationError(f"unknown ablation model {model_tag!r}")
    mcfg = replace(cfg.model, ablation=model_tag)
    net = base_net
    if model_tag == "I":
        cfg1 = replace(cfg, stage="bfn", model=mcfg, max_steps=stage1_steps,
                       epochs=max(1, math.ceil(stage1_steps * cfg.batch_size
                                               / max(1, len(train_samples)))))
        net, _ = train_stage1(cfg1, train_samples)
    cfg2 = replace(cfg, stage="toar", model=mcfg, tasks=("seg",),
                   max_steps=stage2_steps,
                   epochs=max(1, math.ceil(stage2_steps * cfg.batch_size
                                           / max(1, len(train_samples)))))
    reg, trace = train_stage2(cfg2, train_samples, net, heads)
    emb = task_embeddings(replace(cfg2, stage="toar"))["seg"]
    ev = evaluate_task(net, heads, val_samples, "seg", reg, emb)
    return {
        "model": model_tag or "full",
        "seg_loss": ev["loss"],
        "miou": ev["miou"],
        "final_train_loss": trace[-1][2] if trace else float("nan"),
    }
