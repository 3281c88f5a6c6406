"""Desk-scale comparison protocol: real, replicated and synthesized training sets."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .core import INFECTION, LUNG, ConfigError, SamplePair
from .data import make_phantom_corpus, save_corpus
from .evaluation import (EvalCorpus, build_segmenter, check_disjoint, classification_metrics, classify,
                         format_quality_table, image_quality_score, infection_label, segment,
                         segmentation_metrics, train_classifier, train_segmenter)
from .extractors import load_or_pretrain_vgg, segmenter_extractor
from .losses import ReconstructionLoss
from .synth import IF_ST, O_ST, RC_ST, generate_corpus
from .trainer import Trainer

log = logging.getLogger(__name__)

TRAINING_SETS = ("OC-TS", "Sin-TS", "Two-TS", "O-ST", "RC-ST", "IF-ST")
N_SOURCE_SAMPLES = {"OC-TS": None, "Sin-TS": 1, "Two-TS": 2, "O-ST": 1, "RC-ST": 1, "IF-ST": 2}


def phantom_splits(cfg: RunConfig, seed=None):
    """Disjoint train/test phantom corpora for one seed."""
    seed = cfg.seed if seed is None else seed
    ex = cfg.experiment
    train = make_phantom_corpus(cfg.phantom, ex.n_train, seed, "train")
    test = make_phantom_corpus(cfg.phantom, ex.n_test, seed + 7919, "test")
    check_disjoint(train, test)
    return train, test


def pick_training_sample(corpus: EvalCorpus, modality) -> SamplePair:
    """The slice of ``modality`` with the most infection pixels (ties: most lung)."""
    cands = [s for s in corpus if s.modality_tag == modality]
    if not cands:
        raise ConfigError(f"corpus has no slice of modality {modality}")
    return max(cands, key=lambda s: (int((s.mask == INFECTION).sum()), int((s.mask == LUNG).sum())))


def train_oracle(cfg: RunConfig, corpus: EvalCorpus, cache=None):
    """Heavy segmenter on the reference corpus; doubles as the MS-FUL backbone."""
    if cache is not None and Path(cache).exists():
        model = build_segmenter("heavy")
        model.load_state_dict(torch.load(cache, weights_only=True))
        return model.eval()
    model, _ = train_segmenter(corpus, "heavy", cfg.oracle)
    if cache is not None:
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), cache)
    return model


def build_reconstruction_loss(cfg: RunConfig, oracle=None) -> ReconstructionLoss:
    w = cfg.loss_weights
    vgg = load_or_pretrain_vgg(cfg.paths.vgg_cache, seed=0) if w.ms_fvl > 0 else None
    if w.ms_ful > 0 and oracle is None:
        raise ConfigError("ms_ful weight > 0 needs a trained segmenter backbone")
    unet = segmenter_extractor(oracle) if w.ms_ful > 0 else None
    return ReconstructionLoss(w, cfg.category_weights, vgg, cfg.vgg_features, unet, cfg.unet_features)


def train_stack(cfg: RunConfig, sample: SamplePair, recon, out_dir=None, seed=None):
    trainer = Trainer(cfg.trainer_config(seed), sample, recon, out_dir)
    return trainer.train_full(resume=out_dir is not None)


def _replicate(samples, n, name):
    out = []
    for k in range(n):
        s = samples[k % len(samples)]
        out.append(SamplePair(s.image, s.mask, modality_tag=s.modality_tag, scan_id=s.scan_id,
                              name=f"{name}_{k:04d}"))
    return EvalCorpus(out, "train")


def _synth_corpus(images, corpus: EvalCorpus, name):
    return EvalCorpus([SamplePair(img, s.mask, modality_tag=s.modality_tag, scan_id=s.scan_id,
                                  name=f"{name}_{s.name}") for img, s in zip(images, corpus)], "train")


class _ConstantClassifier:
    """Stands in for a classifier whose corpus holds only one label."""

    def __init__(self, label):
        self.label = int(label)


def _classify(model, images):
    if isinstance(model, _ConstantClassifier):
        preds = np.full(len(images), model.label, dtype=np.int64)
        return preds, preds.astype(np.float64)
    return classify(model, images)


def evaluate_segmenter(train: EvalCorpus, test: EvalCorpus, arch, cfg):
    model, history = train_segmenter(train, arch, cfg)
    preds = segment(model, test.images())
    reports = segmentation_metrics(preds, test.masks(), test.scan_ids)
    return {"lung_dsc": reports[LUNG], "infection_dsc": reports[INFECTION], "loss_history": history}


def evaluate_classifier(train: EvalCorpus, test: EvalCorpus, arch, cfg):
    labels = {infection_label(s.mask) for s in train}
    if len(labels) == 1:
        # a single-label corpus can only teach a constant answer
        log.warning("single-label classifier corpus; using the constant predictor %d", next(iter(labels)))
        model, history = _ConstantClassifier(next(iter(labels))), []
    else:
        model, history = train_classifier(train, arch, cfg)
    preds, _ = _classify(model, test.images())
    truth = [infection_label(m) for m in test.masks()]
    reports, confusion = classification_metrics(preds, truth, test.scan_ids)
    return {**reports, "confusion": confusion, "loss_history": history,
            "constant_predictor": isinstance(model, _ConstantClassifier)}


def to_jsonable(obj):
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating, np.integer)):
        return to_jsonable(obj.item())
    return obj


def format_report(report) -> str:
    lines = []
    seg = report["probes"].get("segmenter")
    if seg:
        lines += [f"Segmentation ({report['config']['experiment']['segmenter_arch']})",
                  f"{'Training set':<10}{'#src':>6}{'lung DSC':>28}{'infection DSC':>28}"]
        for name in TRAINING_SETS:
            r = seg[name]
            lines.append(f"{name:<10}{_nsrc(report, name):>6}{_fmt(r['lung_dsc']):>28}"
                         f"{_fmt(r['infection_dsc']):>28}")
        lines.append("")
    cls = report["probes"].get("classifier")
    if cls:
        lines += [f"Classification ({report['config']['experiment']['classifier_arch']})",
                  f"{'Training set':<10}{'#src':>6}{'sensitivity':>28}{'specificity':>28}{'accuracy':>28}"]
        for name in TRAINING_SETS:
            r = cls[name]
            lines.append(f"{name:<10}{_nsrc(report, name):>6}" + "".join(
                f"{_fmt(r[m]):>28}" for m in ("sensitivity", "specificity", "accuracy")))
        lines.append("")
    lines += ["Image quality (oracle DSC x 100)", format_quality_table(report["image_quality"])]
    return "\n".join(lines) + "\n"


def _nsrc(report, name):
    n = N_SOURCE_SAMPLES[name]
    return str(report["corpus_sizes"]["OC-TS"] if n is None else n)


def _fmt(m):
    def f(v):
        return "NaN" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"

    lo, hi = m["ci95"]
    return f"{f(m['mean'])} ({f(lo)}, {f(hi)})"


def run_experiment(cfg: RunConfig, out_dir=None):
    """Train two single-image models, build the six training sets, probe each on the test split.

    Intermediate artifacts (corpora, checkpoints, per-probe results) are
    written under ``out_dir`` as they are produced; returns the report dict.
    """
    t0 = time.time()
    out = Path(out_dir if out_dir is not None else cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    ex = cfg.experiment
    train, test = phantom_splits(cfg)
    save_corpus(train, out / "corpora" / "OC-TS")
    save_corpus(test, out / "corpora" / "test")

    oracle = train_oracle(cfg, train, out / "extractors" / "oracle.pt")
    recon = build_reconstruction_loss(cfg, oracle)

    picks = [pick_training_sample(train, m) for m in (0, 1)]
    stacks = []
    for m, s in enumerate(picks):
        log.info("training modality-%d model on %s", m, s.name)
        stacks.append(train_stack(cfg, s, recon, out / f"model_m{m}"))

    masks = list(train.masks())
    kw = dict(seed=cfg.seed, names=[s.name for s in train], dropout=ex.dropout_at_inference)
    o_img, _ = generate_corpus(stacks[0], masks, O_ST, out_dir=out / "corpora" / "O-ST", **kw)
    rc_img, _ = generate_corpus(stacks[0], masks, RC_ST, out_dir=out / "corpora" / "RC-ST", deltas=ex.deltas, **kw)
    if_img, _ = generate_corpus(stacks, masks, IF_ST, out_dir=out / "corpora" / "IF-ST", **kw)

    sets = {"OC-TS": train,
            "Sin-TS": _replicate(picks[:1], len(train), "sin"),
            "Two-TS": _replicate(picks, len(train), "two"),
            "O-ST": _synth_corpus(o_img, train, "o"),
            "RC-ST": _synth_corpus(rc_img, train, "rc"),
            "IF-ST": _synth_corpus(if_img, train, "if")}
    sizes = {k: len(v) for k, v in sets.items()}
    if len(set(sizes.values())) != 1:
        raise ConfigError(f"training sets differ in size: {sizes}")

    tags = [s.modality_tag for s in train]
    quality = {name: image_quality_score(imgs, masks, oracle, tags)
               for name, imgs in (("O-ST", o_img), ("RC-ST", rc_img), ("IF-ST", if_img))}
    quality["real (OC-TS)"] = image_quality_score(train.images(), masks, oracle, tags)

    probes = {}
    res_dir = out / "results"
    res_dir.mkdir(exist_ok=True)
    for probe in ex.probes:
        probes[probe] = {}
        for name, corpus in sets.items():
            if probe == "segmenter":
                r = evaluate_segmenter(corpus, test, ex.segmenter_arch, cfg.segmenter)
            else:
                # weak augmentation on the large real corpus, strong on the rest
                pcfg = cfg.classifier if name != "OC-TS" else replace(cfg.classifier, augment="WA")
                r = evaluate_classifier(corpus, test, ex.classifier_arch, pcfg)
            probes[probe][name] = to_jsonable(r)
            (res_dir / f"{probe}_{name}.json").write_text(json.dumps(probes[probe][name], indent=2))
            log.info("%s on %s done", probe, name)

    report = {"config": cfg.to_dict(), "seed": cfg.seed, "corpus_sizes": sizes, "test_size": len(test),
              "training_samples": [p.name for p in picks], "image_quality": quality, "probes": probes,
              "elapsed_s": round(time.time() - t0, 1)}
    report = to_jsonable(report)
    (out / "report.json").write_text(json.dumps({k: v for k, v in report.items() if k != "elapsed_s"},
                                                indent=2, sort_keys=True))
    (out / "report.txt").write_text(format_report(report))
    return report

