"""Training orchestration: the per-step pipeline (translate, teacher
forward, pseudo-label, mix, pair, losses, optimize, EMA), the run loop with
checkpoints and periodic evaluation, and the flat key=value config format.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import analysis, losses, pairing
from .autodiff import Tensor, concat
from .data import (DataConfig, MiniBatch, ShiftSpec, downsample_labels,
                   eval_label, gen_synthetic_pair, sample_batch)
from .errors import ConfigInvalid, NoActiveClasses
from .model import (ModelArch, OptimState, TeacherState, as_tensors,
                    ema_update, forward, forward_numpy, init_params,
                    load_checkpoint, optimizer_step, save_checkpoint)
from .numerics import Rng
from .translate import EngineSpec, apply_engine, classmix


@dataclass(frozen=True)
class RunConfig:
    mode: str = "uda"            # uda | dg
    engine: str = "fda"
    beta_fda: float = 0.09
    jitter_strength: float = 0.8
    blur_sigma: float = 1.0
    pull_kind: str = "infonce"
    drw_mode: str = "dynamic"
    tau: float = 0.2
    lambda_pull: float = 0.1     # 0 disables pulling
    eta: float = 0.999
    alpha: float = 0.5
    beta_drw: float = 0.5
    delta_p: float = 0.968
    n_queries: int = 16          # sized to the 16x16 toy feature maps
    m_negatives: int = 64
    C: int = 4
    H: int = 64
    W: int = 64
    D: int = 32
    d: int = 16
    iters: int = 2000
    batch_source: int = 2
    batch_target: int = 2
    lr_encoder: float = 1e-3
    lr_head: float = 1e-2        # heads learn 10x faster than the encoder
    t_warm: int = 100
    weight_decay: float = 0.01
    seed: int = 0
    n_source: int = 200
    n_target: int = 200
    n_eval: int = 40
    shift_scale: tuple = (0.45, 1.3, 1.5)
    shift_offset: tuple = (0.2, -0.12, 0.05)
    noise_sigma: float = 0.05
    vignette: float = 0.5
    ckpt_every: int = 1000
    eval_every: int = 1000
    mean_of_normalized: bool = False

    def validate(self):
        if self.mode not in ("uda", "dg"):
            raise ConfigInvalid(f"unknown mode {self.mode!r}")
        if self.mode == "dg" and self.engine == "fda":
            raise ConfigInvalid("DG mode cannot use the fda engine (needs target images)")
        if self.engine not in ("fda", "color_jitter", "gaussian_blur", "identity"):
            raise ConfigInvalid(f"unknown engine {self.engine!r}")
        if self.m_negatives % 2:
            raise ConfigInvalid("m_negatives must be even")
        if not 0 <= self.alpha <= 1 or self.tau <= 0:
            raise ConfigInvalid("alpha in [0,1] and tau > 0 required")
        return self

    def arch(self) -> ModelArch:
        return ModelArch(C=self.C, D=self.D, d=self.d)

    def data_config(self) -> DataConfig:
        return DataConfig(C=self.C, H=self.H, W=self.W, n_source=self.n_source,
                          n_target=self.n_target,
                          shift=ShiftSpec(self.shift_scale, self.shift_offset,
                                          self.noise_sigma, self.vignette))

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(tau=self.tau, lambda_pull=self.lambda_pull,
                                 pull_kind=self.pull_kind, beta_drw=self.beta_drw,
                                 drw_mode=self.drw_mode)

    def to_text(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(float(x)) for x in v)
            parts.append(f"{f.name} = {v}")
        return "\n".join(parts) + "\n"


def parse_config(text: str) -> RunConfig:
    """Flat `key = value` config; unknown keys are rejected."""
    spec = {f.name: f for f in fields(RunConfig)}
    defaults = RunConfig()
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in spec:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        cur = getattr(defaults, key)
        try:
            if isinstance(cur, bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(cur, int):
                kwargs[key] = int(val)
            elif isinstance(cur, float):
                kwargs[key] = float(val)
            elif isinstance(cur, tuple):
                kwargs[key] = tuple(float(x) for x in val.split(","))
            else:
                kwargs[key] = val
        except ValueError as e:
            raise ConfigInvalid(f"line {lineno}: {e}") from e
    if "T2S_SEED" in os.environ:
        kwargs["seed"] = int(os.environ["T2S_SEED"])
    return RunConfig(**kwargs).validate()


@dataclass
class TrainState:
    student: dict
    teacher: TeacherState
    opt: OptimState
    step: int
    rng: Rng
    history: list = field(default_factory=list)
    target_images_seen: int = 0


def init_state(cfg: RunConfig) -> TrainState:
    rng = Rng(cfg.seed)
    student = init_params(cfg.arch(), rng)
    teacher = TeacherState({k: v.copy() for k, v in student.items()}, eta=cfg.eta)
    opt = OptimState(lr_encoder=cfg.lr_encoder, lr_head=cfg.lr_head,
                     weight_decay=cfg.weight_decay, t_warm=cfg.t_warm)
    opt.ensure_moments(student)
    return TrainState(student, teacher, opt, 0, rng)


def _make_pseudo_target(cfg: RunConfig, src_img, batch_targets, gen):
    spec = EngineSpec(cfg.engine, cfg.beta_fda, cfg.jitter_strength,
                      cfg.blur_sigma)
    refs = [t.image for t in batch_targets] if batch_targets else []
    return apply_engine(spec, src_img, refs, gen)


def train_step(state: TrainState, batch: MiniBatch, cfg: RunConfig) -> TrainState:
    step = state.step
    uda = cfg.mode == "uda"
    teacher_t = as_tensors(state.teacher.params, requires_grad=False)
    student_t = as_tensors(state.student, requires_grad=True)

    # (1) pseudo-target translation of every source image
    tgen = state.rng.stream(f"translate/{step}")
    pseudo_targets = [_make_pseudo_target(cfg, s.image, batch.target, tgen)
                      for s in batch.source]

    # (2) teacher forward on source and clean target; (3) pseudo-labels
    teach_src_emb = []
    for s in batch.source:
        _, _, emb = forward(teacher_t, s.image)
        teach_src_emb.append(emb.data)
    plabels, confs, qualities, teach_trg_emb = [], [], [], []
    if uda:
        state.target_images_seen += len(batch.target)
        for t in batch.target:
            _, probs, emb = forward(teacher_t, t.image)
            lbl = np.argmax(probs.data, axis=-1).astype(np.uint8)
            cf = np.max(probs.data, axis=-1)
            plabels.append(lbl)
            confs.append(cf)
            qualities.append(float(np.mean(cf > cfg.delta_p)))
            teach_trg_emb.append(emb.data)

    # (4) ClassMix: source donor pasted onto the pseudo-labeled recipient
    mixed = []
    if uda:
        for i, t in enumerate(batch.target):
            donor = batch.source[i % len(batch.source)]
            mgen = state.rng.stream(f"classmix/{step}/{i}")
            mimg, mlbl, _ = classmix(donor.image, donor.label, t.image,
                                     plabels[i], mgen)
            mixed.append((mimg, mlbl, qualities[i]))

    # (5) student forwards
    l_src = Tensor(0.0)
    for s in batch.source:
        _, probs, _ = forward(student_t, s.image)
        l_src = l_src + losses.source_ce(probs, s.label)
    l_src = l_src * (1.0 / len(batch.source))

    l_trg = Tensor(0.0)
    if uda and mixed:
        for mimg, mlbl, q in mixed:
            _, probs, _ = forward(student_t, mimg)
            l_trg = l_trg + losses.target_ce(probs, mlbl, q)
        l_trg = l_trg * (1.0 / len(mixed))

    query_rows, labels_ds = [], []
    for s, pt in zip(batch.source, pseudo_targets):
        _, _, emb = forward(student_t, pt)
        query_rows.append(emb.reshape(-1, cfg.d))
        labels_ds.append(downsample_labels(s.label, 4).ravel())
    query_emb = concat(query_rows, axis=0)
    labels_ds = np.concatenate(labels_ds)

    # (6) pairing + dynamic re-weighting
    if uda:
        trg_emb_cat = np.concatenate([e.reshape(-1, cfg.d) for e in teach_trg_emb])
        pl_ds = np.concatenate([downsample_labels(p, 4).ravel() for p in plabels])
        cf_ds = np.concatenate([downsample_labels_f(cf, 4).ravel() for cf in confs])
    else:
        trg_emb_cat = pl_ds = cf_ds = None
    src_emb_cat = np.concatenate([e.reshape(-1, cfg.d) for e in teach_src_emb])
    pairs = pairing.build_pair_batch(
        query_emb, labels_ds, src_emb_cat, trg_emb_cat, pl_ds, cf_ds,
        cfg.alpha, cfg.n_queries, cfg.m_negatives, cfg.C,
        state.rng, step, mean_of_normalized=cfg.mean_of_normalized)
    active = pairs.active_classes()
    if uda and cfg.drw_mode == "dynamic" and active:
        conf_by_class = losses.class_confidence(
            np.concatenate([p.ravel() for p in plabels]),
            np.concatenate([c.ravel() for c in confs]), cfg.C)
        pairs.drw_weights = losses.drw_weights(conf_by_class, cfg.beta_drw, active)
    elif cfg.drw_mode == "fixed" and active:
        fixed = cfg_loss_fixed(cfg)
        total = sum(fixed[c] for c in active)
        pairs.drw_weights = {c: fixed[c] / total for c in active}

    # (7) total loss, backward, optimizer step
    pull_used = cfg.lambda_pull > 0
    l_pull_val = 0.0
    if pull_used:
        try:
            l_pull = losses.pull_loss(pairs, cfg.loss_config())
            l_pull_val = float(l_pull.data)
            total = losses.total_loss(l_src, l_trg, l_pull, cfg.lambda_pull)
        except NoActiveClasses:
            pull_used = False
            total = l_src + l_trg
    else:
        total = l_src + l_trg
    total.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in student_t.items()}
    new_student = optimizer_step(state.opt, state.student, grads)

    # (8) EMA teacher update, once per step, after the optimizer
    new_teacher = ema_update(state.teacher, new_student)

    q_bar = float(np.mean(qualities)) if qualities else 0.0
    state.history.append({
        "step": step,
        "L_source": float(l_src.data),
        "L_target": float(l_trg.data) if uda else 0.0,
        "L_pull": l_pull_val if pull_used else 0.0,
        "lambda_L_pull": cfg.lambda_pull * l_pull_val if pull_used else 0.0,
        "q_bar": q_bar,
        "gamma": pairs.gamma if pairs.gamma is not None else "",
        "w_star": ";".join(f"{c}:{pairs.drw_weights[c]:.12g}"
                           for c in sorted(pairs.drw_weights)),
    })
    state.student = new_student
    state.teacher = new_teacher
    state.step = step + 1
    return state


def downsample_labels_f(grid: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor downsample for float grids (confidence maps)."""
    return grid[::factor, ::factor].copy()


def cfg_loss_fixed(cfg: RunConfig):
    # fixed-weight (SRW) mode needs a user-provided list; default uniform
    return {c: 1.0 for c in range(cfg.C)}


HISTORY_COLUMNS = ["step", "L_source", "L_target", "L_pull", "lambda_L_pull",
                   "q_bar", "gamma", "w_star"]


def history_csv(history) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join(str(row[c]) for c in HISTORY_COLUMNS))
    return "\n".join(lines) + "\n"


def evaluate(student: dict, target_eval, C: int) -> tuple:
    """Held-out target mIoU of the student's argmax predictions."""
    cm = np.zeros((C, C), dtype=np.int64)
    for k, sample in enumerate(target_eval.samples):
        _, probs, _ = forward_numpy(student, sample.image)
        pred = np.argmax(probs, axis=-1)
        truth = eval_label(target_eval, k)
        cm += analysis.confusion_matrix(truth, pred, C)
    return analysis.miou(cm)


def run(cfg: RunConfig, out_dir: str, resume: str | None = None,
        datasets=None) -> dict:
    """Train for cfg.iters steps; write checkpoints, loss log, eval metrics.

    `datasets` may carry pre-built (source, target, target_eval) to share
    corpora across runs; otherwise they are generated from cfg.seed.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    if datasets is None:
        datasets = build_datasets(cfg)
    source_ds, target_ds, eval_ds = datasets
    state = init_state(cfg)
    if resume is not None:
        step, student, teacher, m, v, opt_step = load_checkpoint(
            resume, cfg.to_text(), cfg.arch())
        state.student, state.teacher = student, teacher
        state.opt.m, state.opt.v, state.opt.step = m, v, opt_step
        state.step = step

    eval_rows = []
    train_target = target_ds if cfg.mode == "uda" else None
    n_trg = cfg.batch_target if cfg.mode == "uda" else 0
    while state.step < cfg.iters:
        batch = sample_batch(source_ds, train_target, cfg.batch_source,
                             n_trg, state.rng, state.step)
        state = train_step(state, batch, cfg)
        if cfg.eval_every > 0 and state.step % cfg.eval_every == 0 and state.step < cfg.iters:
            _, m_iou = evaluate(state.student, eval_ds, cfg.C)
            eval_rows.append((state.step, m_iou))
        if cfg.ckpt_every > 0 and state.step % cfg.ckpt_every == 0:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{state.step}.t2s"),
                            cfg.to_text(), state.step, state.student,
                            state.teacher, state.opt)

    per_class, m_iou = evaluate(state.student, eval_ds, cfg.C)
    eval_rows.append((state.step, m_iou))
    save_checkpoint(os.path.join(out_dir, "ckpt_final.t2s"), cfg.to_text(),
                    state.step, state.student, state.teacher, state.opt)
    with open(os.path.join(out_dir, "loss_log.csv"), "w") as f:
        f.write(history_csv(state.history))
    with open(os.path.join(out_dir, "eval_log.csv"), "w") as f:
        f.write("step,miou\n")
        f.writelines(f"{s},{v}\n" for s, v in eval_rows)
    return {"state": state, "miou": m_iou, "per_class_iou": per_class,
            "eval_rows": eval_rows}


def build_datasets(cfg: RunConfig):
    rng = Rng(cfg.seed)
    source_ds, target_ds = gen_synthetic_pair(cfg.data_config(), rng)
    eval_cfg = replace(cfg.data_config(), n_source=1, n_target=cfg.n_eval)
    _, eval_ds = gen_synthetic_pair(eval_cfg, rng.namespaced("eval"))
    return source_ds, target_ds, eval_ds
