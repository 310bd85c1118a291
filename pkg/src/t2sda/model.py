"""Student/teacher segmentation network and its training machinery.

The network is a 3-layer strided conv encoder, a 1x1-conv + bilinear-x4 +
softmax segmentor, and a two-block conv projector. No normalization layers:
gradients stay exactly finite-difference-checkable and batch-independent.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import IoError, NonFiniteGradient, ShapeMismatch
from .numerics import Rng

# (name, kind) in declared architecture order; kind picks the lr group
PARAM_GROUPS = {
    "enc1_w": "encoder", "enc1_b": "encoder",
    "enc2_w": "encoder", "enc2_b": "encoder",
    "enc3_w": "encoder", "enc3_b": "encoder",
    "seg_w": "head", "seg_b": "head",
    "proj1_w": "head", "proj1_b": "head",
    "proj2_w": "head", "proj2_b": "head",
}
PARAM_ORDER = list(PARAM_GROUPS)


@dataclass(frozen=True)
class ModelArch:
    C: int = 4
    D: int = 32              # encoder output channels
    d: int = 16              # projector output channels
    widths: tuple = (16, 32)  # first two encoder widths
    proj_width: int = 32

    def shapes(self):
        w1, w2 = self.widths
        return {
            "enc1_w": (3, 3, 3, w1), "enc1_b": (w1,),
            "enc2_w": (3, 3, w1, w2), "enc2_b": (w2,),
            "enc3_w": (3, 3, w2, self.D), "enc3_b": (self.D,),
            "seg_w": (1, 1, self.D, self.C), "seg_b": (self.C,),
            "proj1_w": (3, 3, self.D, self.proj_width), "proj1_b": (self.proj_width,),
            "proj2_w": (3, 3, self.proj_width, self.d), "proj2_b": (self.d,),
        }


def init_params(arch: ModelArch, rng: Rng) -> dict:
    """Glorot-uniform conv weights, zero biases."""
    gen = rng.stream("init")
    params = {}
    for name, shape in arch.shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            kh, kw, cin, cout = shape
            bound = np.sqrt(6.0 / (kh * kw * cin + kh * kw * cout))
            params[name] = gen.uniform(-bound, bound, size=shape)
    return params


def as_tensors(params: dict, requires_grad: bool) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def forward(params: dict, img: np.ndarray):
    """Run encoder, segmentor, projector on one (H, W, 3) image.

    Returns (features, probs, embeddings) Tensors of shapes
    (H/4, W/4, D), (H, W, C), (H/4, W/4, d).
    """
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"expected (H, W, 3) image, got {img.shape}")
    if img.shape[0] % 4 or img.shape[1] % 4:
        raise ShapeMismatch("H and W must be divisible by 4")
    x = Tensor(img)
    p = params
    h1 = x.conv2d(p["enc1_w"], p["enc1_b"], stride=2, pad=1).relu()
    h2 = h1.conv2d(p["enc2_w"], p["enc2_b"], stride=2, pad=1).relu()
    feats = h2.conv2d(p["enc3_w"], p["enc3_b"], stride=1, pad=1)
    logits = feats.conv2d(p["seg_w"], p["seg_b"], stride=1, pad=0)
    probs = logits.upsample_bilinear(4).softmax(axis=-1)
    e1 = feats.conv2d(p["proj1_w"], p["proj1_b"], stride=1, pad=1).relu()
    embed = e1.conv2d(p["proj2_w"], p["proj2_b"], stride=1, pad=1)
    return feats, probs, embed


def forward_numpy(params: dict, img: np.ndarray):
    """Gradient-free forward for the teacher; returns plain arrays."""
    tensors = as_tensors(params, requires_grad=False)
    feats, probs, embed = forward(tensors, img)
    return feats.data, probs.data, embed.data


@dataclass
class TeacherState:
    params: dict
    eta: float = 0.999


def ema_update(teacher: TeacherState, student: dict) -> TeacherState:
    """theta_t <- eta * theta_t + (1 - eta) * theta_s, elementwise."""
    new = {}
    for name, sv in student.items():
        tv = teacher.params[name]
        if tv.shape != sv.shape:
            raise ShapeMismatch(f"{name}: {tv.shape} vs {sv.shape}")
        new[name] = teacher.eta * tv + (1.0 - teacher.eta) * sv
    return TeacherState(new, teacher.eta)


@dataclass
class PseudoLabel:
    labels: np.ndarray       # (H, W) argmax class
    confidence: np.ndarray   # (H, W) max probability
    quality: float           # fraction of pixels with confidence > delta_p


def pseudo_label(teacher: TeacherState, img: np.ndarray, delta_p: float) -> PseudoLabel:
    _, probs, _ = forward_numpy(teacher.params, img)
    labels = np.argmax(probs, axis=-1).astype(np.uint8)  # ties: lowest index
    conf = np.max(probs, axis=-1)
    return PseudoLabel(labels, conf, float(np.mean(conf > delta_p)))


@dataclass
class OptimState:
    lr_encoder: float
    lr_head: float
    weight_decay: float = 0.01
    t_warm: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure_moments(self, params: dict):
        for name, val in params.items():
            self.m.setdefault(name, np.zeros_like(val))
            self.v.setdefault(name, np.zeros_like(val))


def optimizer_step(opt: OptimState, params: dict, grads: dict):
    """Decoupled-weight-decay adaptive update with bias correction and a
    linear warmup factor min(1, step / t_warm) on the effective lr."""
    opt.ensure_moments(params)
    warm = 1.0 if opt.t_warm <= 0 else min(1.0, opt.step / opt.t_warm)
    t = opt.step + 1
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient of {name} is not finite")
        lr = warm * (opt.lr_encoder if PARAM_GROUPS[name] == "encoder" else opt.lr_head)
        opt.m[name] = opt.beta1 * opt.m[name] + (1 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1 - opt.beta2) * g * g
        m_hat = opt.m[name] / (1 - opt.beta1 ** t)
        v_hat = opt.v[name] / (1 - opt.beta2 ** t)
        new[name] = p - lr * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * p)
    opt.step = t
    return new


# -- checkpoint format: magic 'T2S1', config hash, then f64 arrays ----------

_MAGIC = b"T2S1"


def config_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode()).digest()[:8]


def save_checkpoint(path: str, cfg_text: str, step: int, student: dict,
                    teacher: TeacherState, opt: OptimState) -> None:
    blobs = []
    for group in (student, teacher.params, opt.m, opt.v):
        for name in PARAM_ORDER:
            blobs.append(np.ascontiguousarray(group[name], dtype="<f8").tobytes())
    try:
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(config_hash(cfg_text))
            f.write(struct.pack("<QQd", step, opt.step, teacher.eta))
            for b in blobs:
                f.write(b)
    except OSError as e:
        raise IoError(str(e)) from e


def load_checkpoint(path: str, cfg_text: str, arch: ModelArch):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(str(e)) from e
    if raw[:4] != _MAGIC:
        raise IoError(f"{path}: not a T2S1 checkpoint")
    if raw[4:12] != config_hash(cfg_text):
        raise IoError(f"{path}: checkpoint was written under a different config")
    step, opt_step, eta = struct.unpack("<QQd", raw[12:36])
    pos = 36
    shapes = arch.shapes()
    groups = []
    for _ in range(4):
        group = {}
        for name in PARAM_ORDER:
            shape = shapes[name]
            n = int(np.prod(shape))
            group[name] = np.frombuffer(raw[pos:pos + 8 * n], dtype="<f8").reshape(shape).copy()
            pos += 8 * n
        groups.append(group)
    student, teacher_params, m, v = groups
    return step, student, TeacherState(teacher_params, eta), m, v, opt_step
