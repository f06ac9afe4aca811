"""Command-line surface tying the pipeline together.

Commands: invert, synthesize, train, eval, splits. Configuration is a TOML
file; --seed overrides the configured seed. Exit codes: 0 success, 1 usage
error, 2 data error, 3 numerical error.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import click
import numpy as np
import torch

from . import checkpoint as checkpoint_mod
from . import data as data_mod
from . import evaluation as eval_mod
from . import synthesis as synth_mod
from . import train as train_mod
from .backbone import MockBackbone, MockBackboneConfig, NoiseSchedule
from .detector import DetectorConfig, HOIDetector
from .errors import (
    DhoiError,
    InputError,
    NumericalError,
    NormalizationError,
    RangeError,
    StateError,
)
from .inversion import RelationTable
from .serialization import atomic_write

DEFAULTS = {
    "seed": 0,
    "backbone": {
        "kind": "mock", "image_size": 128, "latent_channels": 4,
        "text_dim": 16, "widths": [16, 32, 64, 128], "fpn_channels": 256,
        "encoder_hidden": 8, "schedule_steps": 1000,
    },
    "inversion": {"steps": 40000, "lr": 8e-2, "batch": 32, "n_steps": 4},
    "synthesis": {"n_samples": 16, "threshold_ratio": 0.5, "n_steps": 4,
                  "human_word": "person"},
    "train": {
        "epochs": 60, "lr": 1e-4, "epochs_finetune": 30, "lr_finetune": 1e-5,
        "n_queries": 64, "d_model": 256, "n_decoder_layers": 6,
        "ffn_hidden": 768, "n_heads": 8, "pos_mask_size": 8,
        "score_threshold": 0.0, "top_k": 100,
    },
    "eval": {"setup": "default", "iou_threshold": 0.5, "rare_threshold": 10},
    "paths": {"dataset": "", "captions": "", "relation_checkpoint": ""},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str = None, seed: int = None) -> dict:
    cfg = DEFAULTS
    if path:
        with open(path, "rb") as fh:
            cfg = _merge(cfg, tomllib.load(fh))
    else:
        cfg = _merge(cfg, {})
    if seed is not None:
        cfg["seed"] = seed
    for section, key in (("inversion", "lr"), ("train", "lr"),
                         ("train", "lr_finetune")):
        if cfg[section][key] <= 0:
            raise InputError(f"{section}.{key} must be > 0")
    if not (0 < cfg["eval"]["iou_threshold"] < 1):
        raise RangeError("eval.iou_threshold must be in (0, 1)")
    return cfg


def make_backbone(cfg: dict, dtype=torch.float64):
    b = cfg["backbone"]
    bcfg = MockBackboneConfig(
        latent_channels=b["latent_channels"], text_dim=b["text_dim"],
        widths=tuple(b["widths"]), fpn_channels=b["fpn_channels"],
        encoder_hidden=b["encoder_hidden"], dtype=dtype)
    backbone = MockBackbone(bcfg, seed=cfg["seed"])
    if b["kind"] != "mock":
        from . import serialization
        if not os.path.exists(b["kind"]):
            raise StateError(f"backbone adapter weights not found: {b['kind']}")
        backbone.load_state_arrays(serialization.load_arrays(b["kind"]))
    cache_dir = os.environ.get("DHOI_CACHE")
    if cache_dir and b["kind"] == "mock":
        from . import serialization
        key = hashlib.sha256(
            json.dumps([b, cfg["seed"]], sort_keys=True).encode()).hexdigest()[:16]
        cache_path = os.path.join(cache_dir, f"backbone-{key}.dhb")
        if os.path.exists(cache_path):
            backbone.load_state_arrays(serialization.load_arrays(cache_path))
        else:
            serialization.save_arrays(cache_path, backbone.state_arrays())
    sched = NoiseSchedule.linear_beta(b["schedule_steps"], dtype=dtype)
    return backbone, sched


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    np.random.seed(seed % 2 ** 32)


@click.group()
def cli():
    """Desk-scale HOI detection pipeline built on a diffusion backbone."""


@cli.command("invert")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", required=True, type=click.Path())
def cmd_invert(config_path, seed, dataset_path, out):
    """Learn relation embeddings; write a RELV1 checkpoint and a loss log."""
    cfg = load_config(config_path, seed)
    _seed_everything(cfg["seed"])
    doc = data_mod.load_dataset(dataset_path or cfg["paths"]["dataset"])
    base_dir = os.path.dirname(os.path.abspath(dataset_path
                                               or cfg["paths"]["dataset"]))
    backbone, sched = make_backbone(cfg)
    triplets = train_mod.build_triplet_latents(
        backbone, doc, base_dir, image_size=cfg["backbone"]["image_size"])
    inv = cfg["inversion"]
    from .inversion import InversionConfig
    icfg = InversionConfig(n_steps=inv["n_steps"], lr=inv["lr"],
                           total_steps=max(inv["steps"], 1))
    table, history = train_mod.run_inversion(
        backbone, sched, triplets, doc["vocab"]["actions"], inv["steps"],
        batch_size=inv["batch"], lr=inv["lr"], seed=cfg["seed"], cfg=icfg)
    table.save(out)
    atomic_write(out + ".log.json",
                 json.dumps(history, indent=2).encode("utf-8"))
    click.echo(f"wrote {out} ({len(table.actions)} relation embeddings, "
               f"{len(history)} steps)")


@cli.command("synthesize")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--table", "table_path", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True),
              default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_synthesize(config_path, seed, table_path, dataset_path, out_dir):
    """Generate pseudo-annotated images from the learned relation table."""
    cfg = load_config(config_path, seed)
    _seed_everything(cfg["seed"])
    backbone, sched = make_backbone(cfg)
    table = RelationTable.load(table_path, dtype=backbone.config.dtype)
    objects = None
    if dataset_path or cfg["paths"]["dataset"]:
        doc = data_mod.load_dataset(dataset_path or cfg["paths"]["dataset"])
        objects = doc["vocab"]["objects"]
    captions_path = cfg["paths"]["captions"]
    if captions_path:
        with open(captions_path, "r", encoding="utf-8") as fh:
            captions = [json.loads(line) for line in fh if line.strip()]
        records = synth_mod.filter_captions(
            captions, synth_mod.DEFAULT_HUMAN_LEXICON, table.actions,
            objects or [])
    else:
        if objects is None:
            raise InputError("template synthesis needs a dataset vocabulary")
        records = synth_mod.template_prompts(table.actions, objects)
    if not records:
        raise InputError("prompt corpus is empty after filtering")
    syn = cfg["synthesis"]
    size = cfg["backbone"]["image_size"]
    manifest = synth_mod.build_dataset(
        records, table, backbone, sched, out_dir, syn["n_samples"],
        cfg["seed"], n_steps=syn["n_steps"], image_size=(size, size),
        threshold_ratio=syn["threshold_ratio"], human_word=syn["human_word"])
    click.echo(f"wrote {len(manifest['images'])} samples to {out_dir} "
               f"(skipped {manifest['skipped']})")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--table", "table_path", default=None, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.argument("datasets", nargs=-1, required=True,
                type=click.Path(exists=True))
def cmd_train(config_path, seed, table_path, out, datasets):
    """Train the detector (joint phase, then target-only fine-tune phase)."""
    cfg = load_config(config_path, seed)
    _seed_everything(cfg["seed"])
    backbone, sched = make_backbone(cfg)
    table_path = table_path or cfg["paths"]["relation_checkpoint"]
    if not table_path or not os.path.exists(table_path):
        raise StateError(f"relation checkpoint not found: {table_path!r}")
    table = RelationTable.load(table_path, dtype=backbone.config.dtype)
    docs = []
    for path in datasets:
        doc = data_mod.load_dataset(path)
        docs.append((doc, os.path.dirname(os.path.abspath(path))))
    objects = sorted({o for doc, _ in docs for o in doc["vocab"]["objects"]})
    triplet_set = sorted({(a, o) for doc, _ in docs
                          for _, _, _, o, a in data_mod.iter_hoi_triplets(doc)})
    t = cfg["train"]
    dcfg = DetectorConfig(
        n_queries=t["n_queries"], d_model=t["d_model"],
        n_decoder_layers=t["n_decoder_layers"], ffn_hidden=t["ffn_hidden"],
        n_heads=t["n_heads"], pos_mask_size=t["pos_mask_size"])
    detector = HOIDetector(backbone, table, objects, triplet_set, dcfg)
    tcfg = train_mod.DetectorTrainConfig(
        epochs=t["epochs"], lr=t["lr"], epochs_finetune=t["epochs_finetune"],
        lr_finetune=t["lr_finetune"], image_size=cfg["backbone"]["image_size"])
    history = train_mod.train_detector(detector, docs, tcfg, seed=cfg["seed"])
    detector.is_trained = True
    checkpoint_mod.save_detector(out, detector)
    atomic_write(out + ".log.json",
                 json.dumps(history, indent=2).encode("utf-8"))
    click.echo(f"wrote {out} ({len(history)} optimizer steps)")


@cli.command("eval")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path())
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(exists=True))
@click.option("--protocol", type=click.Choice(["default", "known_object"]),
              default=None)
@click.option("--out", default=None, type=click.Path())
def cmd_eval(config_path, seed, checkpoint_path, dataset_path, protocol, out):
    """Evaluate a detector checkpoint; emit JSON and a text table."""
    cfg = load_config(config_path, seed)
    _seed_everything(cfg["seed"])
    detector = checkpoint_mod.load_detector(checkpoint_path, dtype=torch.float64)
    doc = data_mod.load_dataset(dataset_path)
    unknown = ({o for o in doc["vocab"]["objects"]}
               - set(detector.object_vocab))
    used = {o for _, _, _, o, _ in data_mod.iter_hoi_triplets(doc)}
    if used & unknown:
        raise InputError(
            f"dataset objects {sorted(used & unknown)} unknown to checkpoint")
    freqs = eval_mod.class_frequencies(doc)
    rare_thr = cfg["eval"]["rare_threshold"]
    partitions = {
        "rare": {c for c, n in freqs.items() if n < rare_thr},
        "non_rare": {c for c, n in freqs.items() if n >= rare_thr},
    }
    proto = eval_mod.EvalProtocol(
        setup=protocol or cfg["eval"]["setup"],
        iou_threshold=cfg["eval"]["iou_threshold"], partitions=partitions)
    report = train_mod.evaluate_detector(
        detector, doc, os.path.dirname(os.path.abspath(dataset_path)), proto,
        image_size=cfg["backbone"]["image_size"],
        score_threshold=cfg["train"]["score_threshold"],
        top_k=cfg["train"]["top_k"])
    click.echo(report.format_table())
    if out:
        atomic_write(out, report.to_json().encode("utf-8"))


@cli.command("splits")
@click.option("--dataset", "dataset_path", required=True,
              type=click.Path(exists=True))
@click.option("--mode", required=True,
              type=click.Choice(list(eval_mod.SPLIT_MODES)))
@click.option("--count", type=int, default=120)
@click.option("--verbs", default="", help="comma-separated verbs for uv mode")
@click.option("--objects", default="", help="comma-separated objects for uo mode")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_splits(dataset_path, mode, count, verbs, objects, out_dir):
    """Write zero-shot train/eval dataset files plus a split manifest."""
    doc = data_mod.load_dataset(dataset_path)
    seen, unseen = eval_mod.make_splits(
        doc, mode, unseen_count=count,
        uv_verbs=[v for v in verbs.split(",") if v],
        uo_objects=[o for o in objects.split(",") if o])
    os.makedirs(out_dir, exist_ok=True)
    train_doc = eval_mod.filter_unseen(doc, unseen)
    data_mod.save_dataset(os.path.join(out_dir, "train.json"), train_doc)
    data_mod.save_dataset(os.path.join(out_dir, "eval.json"), doc)
    manifest = {
        "mode": mode,
        "seen": sorted([list(c) for c in seen]),
        "unseen": sorted([list(c) for c in unseen]),
    }
    atomic_write(os.path.join(out_dir, "split.json"),
                 json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    click.echo(f"{mode}: {len(unseen)} unseen / {len(seen)} seen classes")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.ClickException):
        click.echo(f"usage error: {sys.exc_info()[1]}", err=True)
        return 1
    except (NumericalError, NormalizationError) as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 3
    except DhoiError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except FileNotFoundError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    return 0


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
