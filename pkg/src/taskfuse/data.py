"""Synthetic paired IR/VIS scenes, augmentation, and PGM/PPM image I/O.

Each scene combines structure visible in only one modality: hot objects are
bright in IR but nearly invisible in VIS, a vegetation region is textured in
VIS but flat in IR, and a road band shows moderately in both. Ground truth
covers all three tasks (class map, salient-object mask, center heatmap).
Generation is a pure function of the scene seed.

Dataset directory layout: <root>/<split>/<id>_{ir,vis,seg,sod,det}.pgm with
seg stored as raw class indices and the rest as 8-bit intensities.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, InputError

NUM_CLASSES = 4  # 0 background, 1 hot object, 2 road band, 3 vegetation
DET_SIGMA = 2.0  # px, detection heatmap gaussians

GT_KEYS = ("ir", "vis", "seg", "sod", "det")


@dataclass
class GroundTruth:
    seg: np.ndarray  # int [H, W] in 0..NUM_CLASSES-1
    sod: np.ndarray  # float [H, W], binary mask of the most salient object
    det: np.ndarray  # float [H, W] in [0, 1], gaussians at object centers


@dataclass
class Sample:
    ir: np.ndarray   # float [H, W] in [0, 1]
    vis: np.ndarray  # float [H, W] in [0, 1]
    gt: GroundTruth
    seed: int


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    min_objects: int = 1
    max_objects: int = 3
    ir_noise: float = 0.01
    vis_noise: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ConfigurationError("scene size must be at least 8x8")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError("need 1 <= min_objects <= max_objects")
        if self.ir_noise < 0 or self.vis_noise < 0:
            raise ConfigurationError("noise sigma must be >= 0")


def _disc_mask(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_one(spec: SceneSpec, seed: int) -> Sample:
    """Build one scene from its seed; bitwise-reproducible."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    h, w = spec.height, spec.width

    vis = np.full((h, w), rng.uniform(0.25, 0.33))
    ir = np.full((h, w), rng.uniform(0.12, 0.18))
    seg = np.zeros((h, w), dtype=np.int64)

    # vegetation: textured in VIS, flat in IR
    veg = np.zeros((h, w), dtype=bool)
    for _ in range(rng.integers(2, 5)):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        ry = rng.uniform(h / 7, h / 3.5)
        rx = rng.uniform(w / 7, w / 3.5)
        yy, xx = np.mgrid[0:h, 0:w]
        veg |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    vis[veg] = rng.uniform(0.35, 0.85, size=int(veg.sum()))
    ir[veg] += 0.06
    seg[veg] = 3

    # road band: smooth and mid-bright in both
    band_h = int(rng.integers(4, 8))
    y0 = int(rng.integers(1, max(2, h - band_h - 1)))
    road = np.zeros((h, w), dtype=bool)
    road[y0 : y0 + band_h, :] = True
    vis[road] = 0.50
    ir[road] = 0.30
    seg[road] = 2

    # hot objects: bright in IR, low contrast in VIS; one is the hottest
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    centers: list[tuple[float, float, float]] = []
    attempts = 0
    while len(centers) < n_obj and attempts < 200:
        attempts += 1
        r = rng.uniform(2.0, 4.0)
        cy = rng.uniform(r + 1, h - r - 1)
        cx = rng.uniform(r + 1, w - r - 1)
        if all((cy - oy) ** 2 + (cx - ox) ** 2 > (r + orr + 1) ** 2
               for oy, ox, orr in centers):
            centers.append((cy, cx, r))
    n_obj = len(centers)
    salient_idx = 0  # first object gets the hottest temperature
    obj_masks = []
    for i, (cy, cx, r) in enumerate(centers):
        mask = _disc_mask(h, w, cy, cx, r)
        temp = rng.uniform(0.90, 0.98) if i == salient_idx else rng.uniform(0.60, 0.75)
        ir[mask] = temp
        vis[mask] = vis[mask] + 0.04
        seg[mask] = 1
        obj_masks.append(mask)

    sod = obj_masks[salient_idx].astype(np.float64) if obj_masks else np.zeros((h, w))

    det = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for cy, cx, _ in centers:
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * DET_SIGMA ** 2))
        det = np.maximum(det, blob)

    ir = np.clip(ir + rng.normal(0.0, spec.ir_noise, (h, w)), 0.0, 1.0)
    vis = np.clip(vis + rng.normal(0.0, spec.vis_noise, (h, w)), 0.0, 1.0)

    return Sample(ir=ir, vis=vis, gt=GroundTruth(seg=seg, sod=sod, det=det), seed=seed)


def generate(spec: SceneSpec, n: int) -> list[Sample]:
    """Generate n scenes; per-scene seeds derive from spec.seed."""
    if n < 1:
        raise ConfigurationError("generate: n must be >= 1")
    spec.validate()
    master = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed])))
    seeds = master.integers(0, 2 ** 62, size=n)
    return [generate_one(spec, int(s)) for s in seeds]


# -- augmentation ---------------------------------------------------------------


def _all_arrays(s: Sample):
    return [s.ir, s.vis, s.gt.seg, s.gt.sod, s.gt.det]


def augment(sample: Sample, ops, seed: int = 0) -> Sample:
    """Apply geometric ops identically to images and every ground truth.

    ops is a sequence of "hflip", "vflip", "rot90", or ("crop", h, w); the
    seed drives the crop offset only.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    arrays = _all_arrays(sample)
    for op in ops:
        if op == "hflip":
            arrays = [a[:, ::-1] for a in arrays]
        elif op == "vflip":
            arrays = [a[::-1, :] for a in arrays]
        elif op == "rot90":
            arrays = [np.rot90(a) for a in arrays]
        elif isinstance(op, (tuple, list)) and len(op) == 3 and op[0] == "crop":
            ch, cw = int(op[1]), int(op[2])
            hh, ww = arrays[0].shape
            if ch > hh or cw > ww or ch < 1 or cw < 1:
                raise DimensionError(f"crop {ch}x{cw} does not fit in {hh}x{ww}")
            y0 = int(rng.integers(0, hh - ch + 1))
            x0 = int(rng.integers(0, ww - cw + 1))
            arrays = [a[y0 : y0 + ch, x0 : x0 + cw] for a in arrays]
        else:
            raise ConfigurationError(f"unknown augmentation op {op!r}")
    ir, vis, seg, sod, det = (np.ascontiguousarray(a) for a in arrays)
    return Sample(ir=ir, vis=vis, gt=GroundTruth(seg=seg, sod=sod, det=det),
                  seed=sample.seed)


# -- PGM / PPM I/O ------------------------------------------------------------------


def _read_pnm_tokens(blob: bytes, count: int, offset: int) -> tuple[list[int], int]:
    """Read whitespace/comment-separated ASCII integers from a PNM header."""
    tokens: list[int] = []
    i = offset
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i : i + 1] == b"#":
            while i < n and blob[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not blob[j : j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("malformed PNM header")
        try:
            tokens.append(int(blob[i:j]))
        except ValueError as exc:
            raise FormatError(f"malformed PNM header token {blob[i:j]!r}") from exc
        i = j
    if i >= n or not blob[i : i + 1].isspace():
        raise FormatError("PNM header not followed by whitespace")
    return tokens, i + 1


def _read_pnm(path) -> tuple[str, int, int, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 2:
        raise FormatError(f"{path}: not a PNM file")
    magic = blob[:2].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path}: unsupported magic {magic!r}")
    (w, h, maxval), data_off = _read_pnm_tokens(blob, 3, 2)
    if maxval != 255:
        raise FormatError(f"{path}: unsupported bit depth (maxval {maxval}, need 255)")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: bad dimensions {w}x{h}")
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    payload = blob[data_off : data_off + need]
    if len(payload) != need:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(
        (h, w, 3) if channels == 3 else (h, w)
    )
    return magic, w, h, arr


def read_image(path) -> np.ndarray:
    """Read a P5 PGM (or P6 PPM, converted to luminance) as floats in [0, 1]."""
    magic, _, _, arr = _read_pnm(path)
    if magic == "P6":
        rgb = arr.astype(np.float64)
        lum = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
        return lum / 255.0
    return arr.astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    """Write floats in [0, 1] as a P5 PGM with a canonical header.

    Quantization rounds half up; values outside [0, 1] are clipped.
    """
    if image.ndim != 2:
        raise DimensionError(f"write_image expects [H, W], got {image.shape}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_index_image(path) -> np.ndarray:
    """Read a P5 PGM whose bytes are raw class indices."""
    magic, _, _, arr = _read_pnm(path)
    if magic != "P5":
        raise FormatError(f"{path}: index maps must be P5")
    return arr.astype(np.int64)


def write_index_image(path, indices: np.ndarray) -> None:
    if indices.min() < 0 or indices.max() > 255:
        raise InputError("index map values must fit a byte")
    q = indices.astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


# -- dataset directory layout ----------------------------------------------------


def save_dataset(root, split: str, samples) -> None:
    d = os.path.join(root, split)
    os.makedirs(d, exist_ok=True)
    for i, s in enumerate(samples):
        stem = os.path.join(d, f"{i:04d}")
        write_image(stem + "_ir.pgm", s.ir)
        write_image(stem + "_vis.pgm", s.vis)
        write_index_image(stem + "_seg.pgm", s.gt.seg)
        write_image(stem + "_sod.pgm", s.gt.sod)
        write_image(stem + "_det.pgm", s.gt.det)


def list_pair_ids(root, split: str) -> list[str]:
    d = os.path.join(root, split)
    if not os.path.isdir(d):
        raise InputError(f"missing dataset split directory: {d}")
    ids = sorted(
        m.group(1)
        for f in os.listdir(d)
        if (m := re.match(r"^(.+)_ir\.pgm$", f))
    )
    if not ids:
        raise InputError(f"no *_ir.pgm files under {d}")
    return ids


def load_dataset(root, split: str) -> list[Sample]:
    """Load a split; 8-bit quantization applies (seeds are not recoverable)."""
    d = os.path.join(root, split)
    samples = []
    for sid in list_pair_ids(root, split):
        stem = os.path.join(d, sid)
        for suffix in ("_ir.pgm", "_vis.pgm", "_seg.pgm", "_sod.pgm", "_det.pgm"):
            if not os.path.isfile(stem + suffix):
                raise InputError(f"missing dataset file: {stem + suffix}")
        ir = read_image(stem + "_ir.pgm")
        vis = read_image(stem + "_vis.pgm")
        seg = read_index_image(stem + "_seg.pgm")
        if seg.max() >= NUM_CLASSES:
            raise InputError(f"{stem}_seg.pgm: class index outside 0..{NUM_CLASSES - 1}")
        sod = read_image(stem + "_sod.pgm")
        det = read_image(stem + "_det.pgm")
        samples.append(Sample(ir=ir, vis=vis,
                              gt=GroundTruth(seg=seg, sod=sod, det=det), seed=0))
    return samples


def sobel_energy(img: np.ndarray) -> float:
    """Total |Gx|+|Gy| Sobel energy; used to check source complementarity."""
    xp = np.pad(img, 1, mode="reflect")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    h, w = img.shape
    kx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
    for i in range(3):
        for j in range(3):
            sl = xp[i : i + h, j : j + w]
            gx += sl * kx[i, j]
            gy += sl * kx[j, i]
    return float((np.abs(gx) + np.abs(gy)).sum())
