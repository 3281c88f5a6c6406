"""Command-line entry point: ``cosingan <command> [options]``.

Exit codes: 0 success, 2 configuration / input error, 3 state error (e.g. a
missing or incomplete checkpoint), 4 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import augment as aug
from .config import RunConfig
from .core import ConfigError, DivergenceError, StateError, pixel_to_unit, resize_image, resize_mask
from .data import ingest_volume, load_corpus, make_phantom_corpus, save_corpus
from .evaluation import EvalCorpus, format_quality_table, image_quality_score
from .experiment import (build_reconstruction_loss, evaluate_classifier, evaluate_segmenter, format_report,
                         run_experiment, train_oracle, to_jsonable)
from .synth import IF_ST, O_ST, RC_ST, generate_corpus
from .trainer import GeneratorStack, Trainer

log = logging.getLogger("cosingan")

EXIT_OK, EXIT_CONFIG, EXIT_STATE, EXIT_DIVERGED = 0, 2, 3, 4


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="RunConfig JSON file (defaults: desk profile)")
    p.add_argument("--seed", type=int, default=d, help="override the config seed")
    p.add_argument("--out", default=d, help="output directory (overrides paths.out_dir)")
    p.add_argument("-v", "--verbose", action="store_true", default=d)


def build_parser():
    parser = argparse.ArgumentParser(prog="cosingan", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="slice volumes into PNG image/mask pairs")
    p.add_argument("volumes", nargs="+", help="raw-container headers (*.json) or NIfTI images")
    p.add_argument("--size", type=int, default=None, help="resize slices to SIZE x SIZE")
    p.add_argument("--modality", type=int, default=0, help="modality tag recorded for these scans")

    p = sub.add_parser("phantom", parents=[common], help="write a phantom corpus")
    p.add_argument("--n", type=int, default=36)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--first-scan", type=int, default=0)

    p = sub.add_parser("train", parents=[common], help="train a generator pyramid on one sample")
    p.add_argument("--data", required=True, help="corpus directory holding the training sample")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--sample", help="sample name inside the corpus")
    g.add_argument("--index", type=int, default=0, help="sample index inside the corpus")
    p.add_argument("--oracle", help="segmenter weights for the segmenter-feature term "
                                    "(trained on --data and cached when omitted)")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    p.add_argument("--resume-from", help="continue after this stage checkpoint")

    p = sub.add_parser("synthesize", parents=[common], help="synthesize images for a set of masks")
    p.add_argument("--model", required=True, help="training output directory (or its ckpt/ folder)")
    p.add_argument("--model2", help="second model, required for IF_ST")
    p.add_argument("--masks", required=True, help="corpus directory providing condition masks")
    p.add_argument("--mode", default=O_ST, type=lambda s: s.upper().replace("-", "_"),
                   choices=(O_ST, RC_ST, IF_ST))
    p.add_argument("--dropout", action="store_true", help="keep dropout active at inference")

    p = sub.add_parser("evaluate", parents=[common], help="train probes on one corpus, test on another")
    p.add_argument("--train", required=True, help="training corpus directory")
    p.add_argument("--test", required=True, help="test corpus directory")
    p.add_argument("--probe", choices=("segmenter", "classifier", "both"), default="both")
    p.add_argument("--arch", choices=("light", "heavy"), default="light")
    p.add_argument("--quality", nargs="*", default=None, metavar="SYNTH_DIR",
                   help="also score synthesized corpora with an oracle segmenter trained on --train")

    sub.add_parser("experiment", parents=[common], help="run the full desk-scale comparison")

    p = sub.add_parser("dump-augment", parents=[common], help="write SA/WA augmentation previews per scale")
    p.add_argument("--data", help="corpus directory (default: one phantom)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--n", type=int, default=8, help="draws per scale and regime")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out if getattr(args, "out", None) else cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_ingest(args, cfg, out):
    samples = []
    for v in args.volumes:
        samples += ingest_volume(v, out, size=args.size, modality_tag=args.modality)
    save_corpus(EvalCorpus(samples, "train"), out)
    print(f"wrote {len(samples)} slice pairs to {out}")


def cmd_phantom(args, cfg, out):
    corpus = make_phantom_corpus(cfg.phantom, args.n, cfg.seed, args.split, args.first_scan)
    save_corpus(corpus, out)
    print(f"wrote {len(corpus)} phantom pairs to {out}")


def _pick(corpus, args):
    if args.sample is not None:
        for s in corpus:
            if s.name == args.sample:
                return s
        raise ConfigError(f"sample {args.sample!r} not found")
    if not 0 <= args.index < len(corpus):
        raise ConfigError(f"index {args.index} outside a corpus of {len(corpus)}")
    return corpus[args.index]


def cmd_train(args, cfg, out):
    corpus = load_corpus(args.data)
    if not len(corpus):
        raise ConfigError(f"no samples in {args.data}")
    sample = _pick(corpus, args)
    oracle = None
    if cfg.loss_weights.ms_ful > 0:
        if args.oracle and not Path(args.oracle).exists():
            raise ConfigError(f"oracle weights {args.oracle} not found")
        oracle = train_oracle(cfg, corpus, args.oracle or out / "extractors" / "oracle.pt")
    recon = build_reconstruction_loss(cfg, oracle)
    cfg.save(out / "config.json")
    trainer = Trainer(cfg.trainer_config(), sample, recon, out)
    trainer.train_full(resume=args.resume, resume_from=args.resume_from)
    print(f"trained {len(cfg.schedule.build())} scales on {sample.name}; checkpoints in {out / 'ckpt'}")


def _load_stack(path):
    path = Path(path)
    ckpt = path / "ckpt" if (path / "ckpt").is_dir() else path
    if not ckpt.is_dir():
        raise StateError(f"no checkpoint directory at {path}")
    stack = GeneratorStack.load(ckpt)
    if not stack.is_complete:
        raise StateError(f"model at {path} is only partially trained")
    return stack


def cmd_synthesize(args, cfg, out):
    stacks = [_load_stack(args.model)]
    if args.mode == IF_ST:
        if not args.model2:
            raise ConfigError("IF_ST needs --model2")
        stacks.append(_load_stack(args.model2))
    corpus = load_corpus(args.masks)
    final = tuple(stacks[0].schedule.final_scale)
    masks = [s.mask if s.mask.shape == final else resize_mask(s.mask, final) for s in corpus]
    _, manifest = generate_corpus(stacks, masks, args.mode, seed=cfg.seed, out_dir=out,
                                  names=[s.name for s in corpus], dropout=args.dropout,
                                  deltas=cfg.experiment.deltas)
    print(f"synthesized {len(manifest['samples'])} images ({args.mode}) into {out}")


def cmd_evaluate(args, cfg, out):
    train, test = load_corpus(args.train), load_corpus(args.test)
    test.split = "test"
    probes = ("segmenter", "classifier") if args.probe == "both" else (args.probe,)
    report = {"train": str(args.train), "test": str(args.test), "arch": args.arch, "probes": {}}
    lines = []
    for probe in probes:
        if probe == "segmenter":
            r = evaluate_segmenter(train, test, args.arch, cfg.segmenter)
            lines.append(f"segmenter  lung DSC {r['lung_dsc'].fmt()}  infection DSC {r['infection_dsc'].fmt()}")
        else:
            r = evaluate_classifier(train, test, args.arch, cfg.classifier)
            lines.append("classifier " + "  ".join(f"{m} {r[m].fmt()}"
                                                   for m in ("sensitivity", "specificity", "accuracy")))
        report["probes"][probe] = to_jsonable(r)
    if args.quality is not None:
        oracle = train_oracle(cfg, train)
        rows = {}
        for d in args.quality:
            syn = load_corpus(d)
            rows[Path(d).name] = image_quality_score(syn.images(), syn.masks(), oracle)
        report["image_quality"] = rows
        lines += ["", format_quality_table(rows)]
    report = to_jsonable(report)
    (out / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    text = "\n".join(lines) + "\n"
    (out / "eval_report.txt").write_text(text)
    print(text, end="")


def cmd_experiment(args, cfg, out):
    report = run_experiment(cfg, out)
    print(format_report(report), end="")


def cmd_dump_augment(args, cfg, out):
    from .core import save_grid_png

    corpus = load_corpus(args.data) if args.data else make_phantom_corpus(cfg.phantom, 1, cfg.seed)
    sample = corpus[args.index]
    sched = cfg.schedule.build()
    rng = np.random.default_rng(cfg.seed)
    record = []
    for i, shape in enumerate(sched.scales):
        img = resize_image(sample.image, shape)
        mask = resize_mask(sample.mask, shape)
        for base in (cfg.sa_policy, cfg.wa_policy):
            policy = aug.policy_for_scale(base, sched, i)
            tiles_img, tiles_mask = [], []
            for k in range(args.n):
                d = aug.sample_draw(policy, shape, rng)
                im, mk = aug.apply_draw(d, img, mask)
                tiles_img.append(im)
                tiles_mask.append(pixel_to_unit(np.array([0, 128, 255]))[mk])
                record.append({"scale": i, "kind": policy.kind, "intensity": policy.intensity,
                               "crop_box": list(d.crop_box), "rotation_deg": d.rotation_deg,
                               "flip_h": d.flip_h, "flip_v": d.flip_v,
                               "elastic": d.elastic_field is not None})
            save_grid_png(out / f"augment_scale{i}_{policy.kind}.png", tiles_img + tiles_mask, ncols=args.n)
    (out / "augment_draws.json").write_text(json.dumps(record, indent=2))
    print(f"wrote {len(record)} draws for {len(sched)} scales to {out}")


COMMANDS = {"ingest": cmd_ingest, "phantom": cmd_phantom, "train": cmd_train, "synthesize": cmd_synthesize,
            "evaluate": cmd_evaluate, "experiment": cmd_experiment, "dump-augment": cmd_dump_augment}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        cfg = load_config(args)
        out = _out(args, cfg)
        COMMANDS[args.command](args, cfg, out)
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except StateError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STATE
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
