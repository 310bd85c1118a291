"""Synthetic two-domain segmentation corpus, PPM/PGM persistence, batching.

Scenes are a textured background (class 0) plus colored geometric shapes,
one shape family per class. Target images come from the same scene sampler
followed by a fixed parametric domain shift (channel affine + noise +
vignette), so the "domain gap" is a config knob.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, EmptyBatch, FormatError, IoError
from .numerics import IGNORE, Rng

# Access audit: evaluation-only target labels are read through
# eval_label(); the trainer tests assert this counter never moves
# during training.
EVAL_LABEL_READS = 0

_PALETTE = np.array([
    [0.45, 0.45, 0.45],   # background
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
    [0.75, 0.25, 0.80],
    [0.15, 0.75, 0.75],
    [0.95, 0.55, 0.15],
])


@dataclass(frozen=True)
class ShiftSpec:
    scale: tuple = (0.45, 1.3, 1.5)
    offset: tuple = (0.2, -0.12, 0.05)
    noise_sigma: float = 0.05
    vignette: float = 0.5

    @staticmethod
    def identity():
        return ShiftSpec(scale=(1, 1, 1), offset=(0, 0, 0), noise_sigma=0.0, vignette=0.0)


@dataclass(frozen=True)
class DataConfig:
    C: int = 4
    H: int = 64
    W: int = 64
    n_source: int = 200
    n_target: int = 200
    shift: ShiftSpec = field(default_factory=ShiftSpec)


@dataclass
class SegSample:
    image: np.ndarray   # (H, W, 3) in [0,1]
    label: np.ndarray   # (H, W) uint8 class index, IGNORE for unlabeled


@dataclass
class DomainDataset:
    samples: list
    domain_tag: str            # "source" | "target"
    class_count: int
    eval_labels: list = None   # quarantined target ground truth


@dataclass
class MiniBatch:
    source: list
    target: list


def eval_label(ds: DomainDataset, k: int) -> np.ndarray:
    """Audited accessor for quarantined target ground truth."""
    global EVAL_LABEL_READS
    EVAL_LABEL_READS += 1
    return ds.eval_labels[k]


def _draw_scene(cfg: DataConfig, gen: np.random.Generator, index: int):
    H, W, C = cfg.H, cfg.W, cfg.C
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    # textured background: base color + two low-frequency waves + grain
    base = _PALETTE[0] * gen.uniform(0.8, 1.2)
    img = np.tile(base, (H, W, 1))
    for _ in range(2):
        fy, fx = gen.uniform(0.5, 3.0, size=2)
        phase = gen.uniform(0, 2 * np.pi)
        wave = 0.05 * np.sin(2 * np.pi * (fy * yy / H + fx * xx / W) + phase)
        img += wave[:, :, None] * gen.uniform(0.3, 1.0, size=3)
    img += gen.normal(0, 0.01, size=(H, W, 3))
    label = np.zeros((H, W), dtype=np.uint8)

    # two classes are force-included per image so every class shows up in
    # >= 2/(C-1) >= 20% of images for C <= 8 (round-robin on the index)
    fams = C - 1
    present = {index % fams + 1, (index + 1) % fams + 1}
    for c in range(1, C):
        if gen.uniform() < 0.6:
            present.add(c)
    for c in sorted(present):
        cy = gen.uniform(0.2, 0.8) * H
        cx = gen.uniform(0.2, 0.8) * W
        r = gen.uniform(0.10, 0.22) * min(H, W)
        color = np.clip(_PALETTE[c] * gen.uniform(0.85, 1.15, size=3), 0, 1)
        kind = (c - 1) % 3
        if kind == 0:      # axis-aligned rectangle
            ar = gen.uniform(0.6, 1.6)
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * ar)
        elif kind == 1:    # disk
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        else:              # upward triangle
            mask = (yy >= cy - r) & (yy <= cy + r) & \
                   (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
        img[mask] = color + gen.normal(0, 0.01, size=(int(mask.sum()), 3))
        label[mask] = c
    return np.clip(img, 0, 1), label


def apply_domain_shift(img: np.ndarray, spec: ShiftSpec, gen: np.random.Generator) -> np.ndarray:
    H, W, _ = img.shape
    out = img * np.asarray(spec.scale) + np.asarray(spec.offset)
    if spec.vignette > 0:
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        r2 = ((yy - (H - 1) / 2) / (H / 2)) ** 2 + ((xx - (W - 1) / 2) / (W / 2)) ** 2
        out *= (1.0 - spec.vignette * 0.5 * r2)[:, :, None]
    if spec.noise_sigma > 0:
        out += gen.normal(0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0, 1)


def gen_synthetic_pair(cfg: DataConfig, rng: Rng):
    """Build (source, target) datasets; target labels are quarantined."""
    if cfg.C < 2 or cfg.H < 16 or cfg.W < 16:
        raise ConfigInvalid("need C >= 2 and H, W >= 16")
    if cfg.C > 8:
        raise ConfigInvalid("shape vocabulary supports at most 8 classes")
    src_gen = rng.stream("data/source")
    src = [SegSample(*_draw_scene(cfg, src_gen, i)) for i in range(cfg.n_source)]

    scene_gen = rng.stream("data/target-scenes")
    shift_gen = rng.stream("data/target-shift")
    trg, truth = [], []
    for i in range(cfg.n_target):
        img, lbl = _draw_scene(cfg, scene_gen, i)
        shifted = apply_domain_shift(img, cfg.shift, shift_gen)
        trg.append(SegSample(shifted, np.full_like(lbl, IGNORE)))
        truth.append(lbl)
    return (DomainDataset(src, "source", cfg.C),
            DomainDataset(trg, "target", cfg.C, eval_labels=truth))


def downsample_labels(label: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling: top-left sample of each block."""
    H, W = label.shape
    if factor < 1 or H % factor or W % factor:
        raise ConfigInvalid(f"{H}x{W} not divisible by factor {factor}")
    return label[::factor, ::factor].copy()


def sample_batch(source: DomainDataset, target, n_src: int, n_trg: int,
                 rng: Rng, step: int) -> MiniBatch:
    """Deterministic per-step mini-batch (target empty in DG mode)."""
    gen = rng.stream(f"batch/{step}")
    if not source.samples:
        raise EmptyBatch("source dataset is empty")
    si = gen.integers(0, len(source.samples), size=n_src)
    batch_src = [source.samples[i] for i in si]
    batch_trg = []
    if target is not None and n_trg > 0:
        ti = gen.integers(0, len(target.samples), size=n_trg)
        batch_trg = [target.samples[i] for i in ti]
    return MiniBatch(batch_src, batch_trg)


# -- PPM / PGM persistence --------------------------------------------------

def _write_pnm(path, magic, arr, maxval=255):
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n{maxval}\n".encode())
        f.write(arr.astype(np.uint8).tobytes())


def _read_pnm(path, magic):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    tokens, pos = [], 0
    while len(tokens) < 4 and pos < len(raw):
        # header tokens separated by whitespace; '#' starts a comment
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if len(tokens) < 4 or tokens[0].decode() != magic:
        raise FormatError(f"{path}: bad magic or truncated header")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    nch = 3 if magic == "P6" else 1
    body = raw[pos:pos + h * w * nch]
    if len(body) != h * w * nch:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, nch)
    return arr[:, :, 0] if nch == 1 else arr


def save_dataset(ds: DomainDataset, dirpath: str) -> None:
    try:
        os.makedirs(dirpath, exist_ok=True)
    except OSError as e:
        raise IoError(str(e)) from e
    s0 = ds.samples[0]
    lines = [f"C={ds.class_count} H={s0.image.shape[0]} W={s0.image.shape[1]} "
             f"domain={ds.domain_tag} n={len(ds.samples)}"]
    for k, s in enumerate(ds.samples):
        img_name, lbl_name = f"img_{k}.ppm", f"lbl_{k}.pgm"
        _write_pnm(os.path.join(dirpath, img_name), "P6",
                   np.round(s.image * 255.0))
        _write_pnm(os.path.join(dirpath, lbl_name), "P5", s.label)
        lines.append(f"{img_name} {lbl_name}")
    with open(os.path.join(dirpath, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(dirpath: str) -> DomainDataset:
    manifest = os.path.join(dirpath, "manifest.txt")
    if not os.path.exists(manifest):
        raise IoError(f"missing manifest: {manifest}")
    with open(manifest) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    head = dict(kv.split("=") for kv in lines[0].split())
    C, H, W, n = int(head["C"]), int(head["H"]), int(head["W"]), int(head["n"])
    domain = head["domain"]
    if len(lines) - 1 != n:
        raise FormatError(f"manifest promises {n} samples, lists {len(lines) - 1}")
    samples = []
    for ln in lines[1:]:
        img_name, lbl_name = ln.split()
        img = _read_pnm(os.path.join(dirpath, img_name), "P6")
        lbl = _read_pnm(os.path.join(dirpath, lbl_name), "P5")
        if img.shape[:2] != (H, W) or lbl.shape != (H, W):
            raise FormatError(f"{img_name}: dimensions disagree with manifest")
        bad = (lbl >= C) & (lbl != IGNORE)
        if bad.any():
            raise FormatError(f"{lbl_name}: label {int(lbl[bad][0])} out of range for C={C}")
        samples.append(SegSample(img.astype(np.float64) / 255.0, lbl.astype(np.uint8)))
    return DomainDataset(samples, domain, C)
