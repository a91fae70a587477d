"""Command-line entry point: ``t2ireid <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 pipeline error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import TOY_PRESET, RunConfig, load_config
from .data import DatasetManifest, PersonRecord, load_manifest, save_manifest
from .errors import T2IError, ValidationError
from .generator import GenerationConfig, corpus_stats, default_templates_path, generate_corpus, load_templates
from .ontology import default_ontology_path, load_ontology, save_ontology

log = logging.getLogger("t2ireid")

EXIT_OK, EXIT_VALIDATION, EXIT_PIPELINE = 0, 2, 3
IMAGE_SUFFIXES = {".npy", ".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class PipelineError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out, command, cfg: RunConfig, inputs: dict, outputs: list):
    record = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {name: {"path": str(p), "sha256": file_hash(p)} for name, p in inputs.items() if p and Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(str(out) + ".run.json")
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _seed_everything(seed):
    torch.manual_seed(seed)
    torch.set_num_threads(1)


# ---------------------------------------------------------------- toy


def cmd_toy(cfg: RunConfig, args):
    from .toy import build_toy_world

    out = Path(cfg.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    world = build_toy_world(cfg.seed, n_pretrain=args.pretrain_images)
    for im in world:
        np.save(out / "images" / f"{im.image_id}.npy", im.features.astype("<f8"))
    (out / "attributes.json").write_text(json.dumps({im.image_id: im.attributes for im in world}, indent=1, sort_keys=True))
    labels = {im.image_id: {"identity": im.identity, "split": im.split} for im in world}
    (out / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))
    preset = dict(
        TOY_PRESET,
        seed=cfg.seed,
        images=str(out / "images"),
        attributes=str(out / "attributes.json"),
        labels=str(out / "labels.json"),
        ontology=str(out / "ontology.json"),
        templates=str(out / "templates.tsv"),
    )
    (out / "config.json").write_text(json.dumps(preset, indent=2, sort_keys=True) + "\n")
    save_ontology(load_ontology(default_ontology_path()), out / "ontology.json")
    for name, alt in (("templates.tsv", False), ("templates_alt.tsv", True)):
        (out / name).write_text(default_templates_path(alt).read_text(encoding="utf-8"), encoding="utf-8")
    print(f"wrote {len(world)} toy images to {out}")
    return [out]


# ---------------------------------------------------------------- generate


def scan_images(directory):
    from .scorer import ImageRecord

    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValidationError(f"images: no image files in {directory}")
    records = []
    for p in paths:
        if p.suffix == ".npy":
            feats = np.load(p).astype(np.float64).ravel()
            records.append(ImageRecord(p.stem, features=tuple(float(x) for x in feats), path=str(p)))
        else:
            records.append(ImageRecord(p.stem, path=str(p)))
    return records


def make_backend(cfg: RunConfig, ontology):
    from .scorer import MockBackend, PluginBackend, ScriptedBackend

    if cfg.backend == "mock":
        return MockBackend(cfg.backend_dim or 64, cfg.seed)
    if cfg.backend == "scripted":
        truth = json.loads(Path(cfg.attributes).read_text(encoding="utf-8"))
        return ScriptedBackend(truth, ontology, cfg.backend_dim or 512, cfg.seed)
    if not cfg.plugin_cmd:
        raise ValidationError("plugin_cmd: required for the plugin backend")
    return PluginBackend(cfg.plugin_cmd, cfg.backend_dim or 64)


def cmd_generate(cfg: RunConfig, args):
    required = ["images", "out"] + (["attributes"] if cfg.backend == "scripted" else [])
    cfg.validate([p for p in required if p != "out"])
    if cfg.out is None:
        raise ValidationError("out: a path is required")
    ontology = load_ontology(cfg.ontology or default_ontology_path())
    templates = load_templates(cfg.templates or default_templates_path(), ontology)
    gen_cfg = GenerationConfig(cfg.threshold, cfg.scale, cfg.synonym_rate, cfg.max_templates)
    images = scan_images(cfg.images)
    labels = json.loads(Path(cfg.labels).read_text(encoding="utf-8")) if cfg.labels else {}
    backend = make_backend(cfg, ontology)
    try:
        captions = generate_corpus(images, ontology, templates, backend, gen_cfg, cfg.seed, cfg.workers)
    except T2IError as exc:
        raise PipelineError("generate", exc) from exc
    finally:
        if hasattr(backend, "close"):
            backend.close()
    records = []
    for im, cap in zip(images, captions):
        lab = labels.get(im.image_id, {})
        records.append(PersonRecord(
            image_id=im.image_id,
            caption=cap.text,
            features=list(im.features) if im.features is not None else None,
            image_ref=None if im.features is not None else im.path,
            identity=lab.get("identity"),
            split=lab.get("split"),
            fills=cap.fills,
            template_id=cap.template_id,
        ))
    save_manifest(DatasetManifest(records), cfg.out)
    print(f"wrote {len(records)} captions to {cfg.out}")
    return [cfg.out]


# ---------------------------------------------------------------- stats


def cmd_stats(cfg: RunConfig, args):
    from .plotting import plot_attribute_frequencies, write_tsv

    cfg.validate(["manifest"])
    stats = corpus_stats(load_manifest(cfg.manifest).records)
    prefix = Path(cfg.out or Path(cfg.manifest).with_suffix(""))
    outputs = [write_tsv(stats.as_rows(), str(prefix) + ".stats.tsv", ["attribute", "count", "frequency", "share"])]
    summary = {
        "captions": stats.caption_count,
        "optional_mentions": stats.total_optional,
        "unknown": stats.unknown,
        "counts": stats.counts,
    }
    Path(str(prefix) + ".stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outputs.append(Path(str(prefix) + ".stats.json"))
    if cfg.figures:
        outputs.append(plot_attribute_frequencies(stats, str(prefix) + ".stats.png"))
    print(f"{'attribute':<10}{'count':>8}{'per caption':>13}{'share':>8}")
    for row in stats.as_rows():
        print(f"{row['attribute']:<10}{row['count']:>8}{row['frequency']:>13.3f}{row['share']:>8.3f}")
    print(f"captions={stats.caption_count} optional_mentions={stats.total_optional} unknown={stats.unknown}")
    return outputs


# ---------------------------------------------------------------- pretrain / finetune


def _history_outputs(cfg, history):
    from .plotting import plot_loss_curves, write_tsv

    outs = [write_tsv(history, str(cfg.out) + ".losses.tsv")]
    if cfg.figures and history:
        outs.append(plot_loss_curves(history, str(cfg.out) + ".losses.png"))
    return outs


def pretrain_records(manifest: DatasetManifest) -> DatasetManifest:
    """Records with split 'pretrain' if any exist, otherwise every captioned record."""
    chosen = [r for r in manifest.records if r.split == "pretrain"]
    return DatasetManifest(chosen or [r for r in manifest.records if r.caption])


def cmd_pretrain(cfg: RunConfig, args):
    from .pretrain import PretrainConfig, pretrain_loop, save_checkpoint

    cfg.validate(["manifest"])
    if cfg.out is None:
        raise ValidationError("out: a path is required")
    _seed_everything(cfg.seed)
    manifest = pretrain_records(load_manifest(cfg.manifest))
    pcfg = PretrainConfig(
        epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch_size, lr=cfg.pretrain_lr,
        weight_decay=cfg.weight_decay, warmup_frac=cfg.warmup_frac, beta=cfg.beta, tau=cfg.tau,
        learnable_tau=cfg.learnable_tau, mask_rate=cfg.mask_rate, seed=cfg.seed, max_len=cfg.max_len,
        encoder=dict(cfg.encoder),
    )
    try:
        ckpt = pretrain_loop(manifest, pcfg, log_every=10)
    except T2IError as exc:
        raise PipelineError("pretrain", exc) from exc
    ckpt["run_config"] = cfg.to_dict()
    save_checkpoint(ckpt, cfg.out)
    last = ckpt["history"][-1] if ckpt["history"] else {}
    print("pretrain done: " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k.startswith("L_")))
    return [cfg.out, *_history_outputs(cfg, ckpt["history"])]


def cmd_finetune(cfg: RunConfig, args):
    from .finetune import FinetuneConfig, finetune_loop
    from .pretrain import load_checkpoint, save_checkpoint

    cfg.validate(["manifest"] + (["init"] if cfg.init else []))
    if cfg.out is None:
        raise ValidationError("out: a path is required")
    _seed_everything(cfg.seed)
    manifest = load_manifest(cfg.manifest)
    init = load_checkpoint(cfg.init) if cfg.init else None
    fcfg = FinetuneConfig(
        epochs=cfg.finetune_epochs, batch_size=cfg.finetune_batch_size, lr_text=cfg.lr_text,
        lr_visual=cfg.lr_visual, lr_head=cfg.lr_head, gamma=cfg.gamma, alpha=cfg.alpha,
        num_prototypes=cfg.num_prototypes, seed=cfg.seed, encoder=dict(cfg.encoder),
    )
    try:
        ckpt = finetune_loop(manifest, init, fcfg, log_every=10)
    except T2IError as exc:
        raise PipelineError("finetune", exc) from exc
    ckpt["run_config"] = cfg.to_dict()
    save_checkpoint(ckpt, cfg.out)
    last = ckpt["history"][-1] if ckpt["history"] else {}
    print("finetune done: " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k.startswith("L_")))
    return [cfg.out, *_history_outputs(cfg, ckpt["history"])]


# ---------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig, args):
    from .evaluation import cross_domain_evaluate, evaluate
    from .plotting import plot_rank_k, write_tsv
    from .pretrain import load_checkpoint

    if args.cross_domain:
        cfg.validate(["ckpt", "manifest_b"])
    else:
        cfg.validate(["ckpt", "manifest"])
    _seed_everything(cfg.seed)
    ckpt = load_checkpoint(cfg.ckpt)
    try:
        if args.cross_domain:
            report = cross_domain_evaluate(ckpt, load_manifest(cfg.manifest_b))
        else:
            report = evaluate(ckpt, load_manifest(cfg.manifest))
    except T2IError as exc:
        raise PipelineError("eval", exc) from exc
    print(report.table())
    outputs = []
    if cfg.out:
        Path(cfg.out).write_text(report.to_json() + "\n", encoding="utf-8")
        outputs.append(Path(cfg.out))
        outputs.append(write_tsv([report.as_dict()], str(cfg.out) + ".tsv"))
        if cfg.figures:
            outputs.append(plot_rank_k({report.domain or "in-domain": report}, str(cfg.out) + ".png"))
    return outputs


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--no-figures", dest="figures", action="store_false", default=None)

    parser = argparse.ArgumentParser(prog="t2ireid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toy", parents=[common], help="write a synthetic feature-vector benchmark")
    p.add_argument("--pretrain-images", type=int, default=512)

    p = sub.add_parser("generate", parents=[common], help="caption images with pseudo-texts")
    p.add_argument("--images")
    p.add_argument("--ontology")
    p.add_argument("--templates")
    p.add_argument("--backend", choices=["mock", "scripted", "plugin"])
    p.add_argument("--attributes", help="image_id -> attributes JSON (scripted backend)")
    p.add_argument("--labels", help="image_id -> {identity, split} JSON")
    p.add_argument("--plugin-cmd", dest="plugin_cmd")
    p.add_argument("--backend-dim", dest="backend_dim", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--scale", type=float)
    p.add_argument("--rate", dest="synonym_rate", type=float)
    p.add_argument("--max-templates", dest="max_templates", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("stats", parents=[common], help="optional-attribute statistics of a manifest")
    p.add_argument("--manifest")

    p = sub.add_parser("pretrain", parents=[common], help="contrastive + masked-LM pre-training")
    p.add_argument("--manifest")
    p.add_argument("--beta", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", dest="pretrain_epochs", type=int)

    p = sub.add_parser("finetune", parents=[common], help="supervised retrieval fine-tuning")
    p.add_argument("--manifest")
    p.add_argument("--init")
    p.add_argument("--gamma", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", dest="finetune_epochs", type=int)

    p = sub.add_parser("eval", parents=[common], help="Rank-k retrieval evaluation")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--manifest-b", dest="manifest_b")
    p.add_argument("--cross-domain", action="store_true")
    return parser


COMMANDS = {
    "toy": cmd_toy,
    "generate": cmd_generate,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
}
INPUT_FIELDS = ("ontology", "templates", "attributes", "labels", "manifest", "manifest_b", "init", "ckpt")
_NON_CONFIG = {"command", "config", "log_level", "pretrain_images", "cross_domain"}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "toy" and cfg.out is None:
            raise ValidationError("out: a directory is required")
        cfg.validate()
        outputs = COMMANDS[args.command](cfg, args)
        if cfg.out:
            write_run_manifest(
                cfg.out, args.command, cfg,
                {**{k: getattr(cfg, k) for k in INPUT_FIELDS}, "config": args.config},
                outputs,
            )
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PipelineError as exc:
        print(f"pipeline error in stage {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except T2IError as exc:
        print(f"pipeline error in stage {args.command}: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
