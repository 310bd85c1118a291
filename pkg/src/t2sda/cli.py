"""Command line interface: t2s train / eval / translate / analyze.

Exit codes: 0 ok, 2 config error, 3 io error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import analysis, trainer
from .data import load_dataset, save_dataset, SegSample, DomainDataset
from .errors import (ConfigInvalid, EmptyBatch, EmptyInput, FormatError,
                     IoError, NonFiniteGradient, SpectralResidue, T2SError)
from .model import load_checkpoint, forward_numpy
from .numerics import Rng
from .translate import color_jitter, fda_translate, gaussian_blur


def _load_run_config(path: str) -> trainer.RunConfig:
    try:
        with open(path) as f:
            return trainer.parse_config(f.read())
    except OSError as e:
        raise IoError(str(e)) from e


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    result = trainer.run(cfg, args.out, resume=args.resume)
    if args.dump_pairs:
        _dump_pairs(cfg, args.dump_pairs)
    print(f"final target mIoU: {result['miou']:.4f}")
    return 0


def _dump_pairs(cfg: trainer.RunConfig, path: str):
    """Re-run the first step's pairing and dump the PairBatch as CSV."""
    from .data import sample_batch
    datasets = trainer.build_datasets(cfg)
    state = trainer.init_state(cfg)
    batch = sample_batch(datasets[0], datasets[1] if cfg.mode == "uda" else None,
                         cfg.batch_source,
                         cfg.batch_target if cfg.mode == "uda" else 0,
                         state.rng, 0)
    trainer.train_step(state, batch, cfg)
    # replay pairing deterministically for the dump
    state2 = trainer.init_state(cfg)
    pairs = _first_step_pairs(state2, batch, cfg)
    with open(path, "w") as f:
        f.write("class,role," + ",".join(f"v{i}" for i in range(cfg.d)) + "\n")
        for c in pairs.active_classes():
            for row in pairs.queries[c].data:
                f.write(f"{c},query," + ",".join(map(str, row)) + "\n")
            f.write(f"{c},pos," + ",".join(map(str, pairs.positives[c])) + "\n")
            negs = pairs.negatives[c]
            half = len(negs) // 2
            for i, row in enumerate(negs):
                role = "neg_src" if i < half or pairs.gamma is None else "neg_trg"
                f.write(f"{c},{role}," + ",".join(map(str, row)) + "\n")


def _first_step_pairs(state, batch, cfg):
    from . import pairing
    from .autodiff import concat
    from .data import downsample_labels
    from .model import as_tensors, forward
    teacher_t = as_tensors(state.teacher.params, requires_grad=False)
    tgen = state.rng.stream("translate/0")
    rows, labels = [], []
    for s in batch.source:
        pt = trainer._make_pseudo_target(cfg, s.image, batch.target, tgen)
        _, _, emb = forward(teacher_t, pt)
        rows.append(emb.reshape(-1, cfg.d))
        labels.append(downsample_labels(s.label, 4).ravel())
    src_emb = np.concatenate([forward(teacher_t, s.image)[2].data.reshape(-1, cfg.d)
                              for s in batch.source])
    trg_emb = pl_ds = cf_ds = None
    if cfg.mode == "uda":
        embs, pls, cfs = [], [], []
        for t in batch.target:
            _, probs, emb = forward(teacher_t, t.image)
            embs.append(emb.data.reshape(-1, cfg.d))
            pls.append(downsample_labels(
                np.argmax(probs.data, axis=-1).astype(np.uint8), 4).ravel())
            cfs.append(trainer.downsample_labels_f(
                np.max(probs.data, axis=-1), 4).ravel())
        trg_emb, pl_ds, cf_ds = (np.concatenate(embs), np.concatenate(pls),
                                 np.concatenate(cfs))
    return pairing.build_pair_batch(
        concat(rows, axis=0), np.concatenate(labels), src_emb,
        trg_emb, pl_ds, cf_ds, cfg.alpha, cfg.n_queries, cfg.m_negatives,
        cfg.C, state.rng, 0, mean_of_normalized=cfg.mean_of_normalized)


def cmd_eval(args) -> int:
    cfg = _load_run_config(args.config) if args.config else trainer.RunConfig()
    ds = load_dataset(args.data)
    cfg = trainer.RunConfig(**{**cfg.__dict__, "C": ds.class_count})
    step, student, _, _, _, _ = load_checkpoint(args.ckpt, cfg.to_text(), cfg.arch())
    cm = np.zeros((cfg.C, cfg.C), dtype=np.int64)
    for s in ds.samples:
        _, probs, _ = forward_numpy(student, s.image)
        cm += analysis.confusion_matrix(s.label, np.argmax(probs, axis=-1), cfg.C)
    per_class, m = analysis.miou(cm)
    for c, iou in enumerate(per_class):
        print(f"class {c}: IoU {iou:.4f}")
    print(f"mIoU: {m:.4f}   (checkpoint step {step})")
    return 0


def cmd_translate(args) -> int:
    src = load_dataset(args.src)
    gen = Rng(args.seed).stream("cli-translate")
    out_samples = []
    if args.engine == "fda":
        ref = load_dataset(args.ref)
        for s in src.samples:
            r = ref.samples[gen.integers(0, len(ref.samples))]
            out_samples.append(SegSample(fda_translate(s.image, r.image, args.beta),
                                         s.label))
    elif args.engine == "color_jitter":
        out_samples = [SegSample(color_jitter(s.image, args.strength, gen), s.label)
                       for s in src.samples]
    elif args.engine == "gaussian_blur":
        out_samples = [SegSample(gaussian_blur(s.image, args.sigma), s.label)
                       for s in src.samples]
    else:
        out_samples = [SegSample(s.image.copy(), s.label) for s in src.samples]
    save_dataset(DomainDataset(out_samples, src.domain_tag, src.class_count), args.out)
    print(f"wrote {len(out_samples)} translated samples to {args.out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _load_run_config(args.config) if args.config else trainer.RunConfig()
    ds = load_dataset(args.data)
    cfg = trainer.RunConfig(**{**cfg.__dict__, "C": ds.class_count})
    _, student, _, _, _, _ = load_checkpoint(args.ckpt, cfg.to_text(), cfg.arch())

    src_ds = load_dataset(args.source_data) if args.source_data else None
    bank = analysis.build_feature_bank(
        lambda img: forward_numpy(student, img),
        src_ds.samples if src_ds else [], ds.samples,
        [s.label for s in ds.samples], feature_kind=args.features)
    cm = np.zeros((cfg.C, cfg.C), dtype=np.int64)
    for s in ds.samples:
        _, probs, _ = forward_numpy(student, s.image)
        cm += analysis.confusion_matrix(s.label, np.argmax(probs, axis=-1), cfg.C)
    per_class, m = analysis.miou(cm)
    rows = [("run", 0, "iou", str(c), per_class[c]) for c in range(cfg.C)]
    for c in bank.classes("target"):
        try:
            rows.append(("run", 0, "ccd", str(c), analysis.ccd(bank, c)))
            rows.append(("run", 0, "pdd", str(c), analysis.pdd(bank, c)))
        except T2SError:
            pass
    if src_ds:
        for c, v in analysis.cross_domain_similarity(bank).items():
            rows.append(("run", 0, "similarity", str(c), v))
    paths = analysis.emit_report(rows, args.out)
    print(f"mIoU: {m:.4f}; wrote {len(paths)} report files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2s", description="desk-scale T2S-DA lab")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--dump-pairs")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset dir")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    tr = sub.add_parser("translate", help="translate a dataset directory")
    tr.add_argument("--engine", default="fda",
                    choices=["fda", "color_jitter", "gaussian_blur", "identity"])
    tr.add_argument("--beta", type=float, default=0.09)
    tr.add_argument("--strength", type=float, default=0.5)
    tr.add_argument("--sigma", type=float, default=1.0)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--src", required=True)
    tr.add_argument("--ref")
    tr.add_argument("--out", required=True)
    tr.set_defaults(fn=cmd_translate)

    a = sub.add_parser("analyze", help="metrics + feature diagnostics report")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--source-data")
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--features", default="projector", choices=["projector", "encoder"])
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigInvalid as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (IoError, FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3
    except (NonFiniteGradient, SpectralResidue, EmptyInput, EmptyBatch) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
