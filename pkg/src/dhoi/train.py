"""Training drivers: relation-embedding inversion and detector training.

Both drivers are deterministic given (config, seed) with the mock backbone:
data order, noise seeds, and optimizer state are all derived from the seed.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import data as data_mod
from .detector import GTPair, HOIDetector
from .errors import InputError, NumericalError
from .evaluation import DetRecord, EvalProtocol, EvalReport, GTRecord, evaluate
from .inversion import (
    HOITripletLatents,
    InversionConfig,
    RelationTable,
    inversion_step,
    object_latent,
)

log = logging.getLogger(__name__)


def load_image_rgb(path: str, size: int = None) -> np.ndarray:
    """Load a PNG/JPEG as float RGB in [0, 1], optionally resized to size x size."""
    from PIL import Image

    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float64) / 255.0


def resize_for_detector(image: np.ndarray, min_side: int = 480,
                        max_side: int = 1333, multiple: int = 128) -> np.ndarray:
    """Shortest side toward [min_side, max_side] cap on the long side, then
    snapped to the backbone's dimension multiple."""
    from PIL import Image

    h, w = image.shape[:2]
    scale = min_side / min(h, w)
    if scale * max(h, w) > max_side:
        scale = max_side / max(h, w)
    nh = max(multiple, int(round(h * scale / multiple)) * multiple)
    nw = max(multiple, int(round(w * scale / multiple)) * multiple)
    if (nh, nw) == (h, w):
        return image
    img = Image.fromarray(np.clip(np.round(image * 255), 0, 255).astype(np.uint8))
    img = img.resize((nw, nh), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64) / 255.0


# -- inversion ---------------------------------------------------------------


def build_triplet_latents(backbone, doc: dict, base_dir: str,
                          image_size: int = 128) -> list:
    """Encode every annotated HOI of a dataset into triplet latents."""
    paths = data_mod.image_paths(doc, base_dir)
    dims = {img["id"]: (img["width"], img["height"]) for img in doc["images"]}
    latents_by_image = {}
    triplets = []
    for k, (image_id, h_box, o_box, obj, action) in enumerate(
            data_mod.iter_hoi_triplets(doc)):
        if image_id not in latents_by_image:
            img = load_image_rgb(paths[image_id], size=image_size)
            with torch.no_grad():
                latents_by_image[image_id] = (img, backbone.encode_image(img))
        img, z_hoi = latents_by_image[image_id]
        w0, h0 = dims[image_id]
        sx, sy = image_size / w0, image_size / h0
        box = (o_box[0] * sx, o_box[1] * sy, o_box[2] * sx, o_box[3] * sy)
        with torch.no_grad():
            z_obj = object_latent(backbone, img, box)
        triplets.append(HOITripletLatents(
            z_hoi, z_obj, action, obj, box, sample_id=f"{image_id}/{k}"))
    return triplets


def run_inversion(backbone, sched, triplets, actions, steps: int,
                  batch_size: int = 32, lr: float = 8e-2, seed: int = 0,
                  cfg: InversionConfig = None, table: RelationTable = None):
    """Optimize the relation table; returns (table, per-step loss history)."""
    if not triplets:
        raise InputError("no triplets to invert")
    cfg = cfg or InversionConfig(lr=lr, total_steps=max(steps, 1))
    if table is None:
        table = RelationTable.init_from_text(backbone, actions)
    table.vectors = table.vectors.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([table.vectors], lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for step in range(steps):
        idx = rng.choice(len(triplets), size=min(batch_size, len(triplets)),
                         replace=False)
        batch = [triplets[i] for i in sorted(idx)]
        epoch = step * batch_size // max(len(triplets), 1)
        components = inversion_step(backbone, sched, table, batch, step,
                                    optimizer, cfg, epoch=epoch)
        components["step"] = step
        history.append(components)
    return table, history


# -- detector ----------------------------------------------------------------


def gt_pairs_for_image(doc: dict, image_id: str, detector: HOIDetector,
                       dtype) -> list:
    """Ground-truth pairs with boxes normalized to [0, 1]."""
    dims = {img["id"]: (img["width"], img["height"]) for img in doc["images"]}
    w0, h0 = dims[image_id]
    hoi_index = {t: i for i, t in enumerate(detector.triplets)}
    obj_index = {o: i for i, o in enumerate(detector.object_vocab)}
    act_index = {a: i for i, a in enumerate(detector.actions)}
    pairs = []
    for img_id, h_box, o_box, obj, action in data_mod.iter_hoi_triplets(doc):
        if img_id != image_id:
            continue
        key = (action, obj)
        if key not in hoi_index:
            continue
        scale = torch.tensor([w0, h0, w0, h0], dtype=dtype)
        pairs.append(GTPair(
            hoi_index[key], obj_index[obj], act_index[action],
            torch.as_tensor(h_box, dtype=dtype) / scale,
            torch.as_tensor(o_box, dtype=dtype) / scale))
    return pairs


@dataclass
class DetectorTrainConfig:
    epochs: int = 60
    lr: float = 1e-4
    epochs_finetune: int = 30
    lr_finetune: float = 1e-5
    image_size: int = 128


def train_detector(detector: HOIDetector, datasets, cfg: DetectorTrainConfig,
                   seed: int = 0, target_index: int = -1):
    """Two-phase training: all datasets jointly, then the target dataset only.

    datasets is a list of (doc, base_dir); target_index selects the
    fine-tuning dataset. Returns the per-step loss history.
    """
    dtype = detector.backbone.config.dtype
    samples_all, samples_target = [], []
    for d_i, (doc, base_dir) in enumerate(datasets):
        paths = data_mod.image_paths(doc, base_dir)
        for img in doc["images"]:
            gts = gt_pairs_for_image(doc, img["id"], detector, dtype)
            if not gts:
                continue
            sample = (paths[img["id"]], gts)
            samples_all.append(sample)
            if d_i == target_index % len(datasets):
                samples_target.append(sample)
    if not samples_all:
        raise InputError("no trainable annotations in the given datasets")
    params = [p for p in detector.parameters() if p.requires_grad]
    history = []
    rng = np.random.default_rng(seed)
    step = 0
    cache = {}
    for phase, (epochs, lr, samples) in enumerate(
            [(cfg.epochs, cfg.lr, samples_all),
             (cfg.epochs_finetune, cfg.lr_finetune, samples_target or samples_all)]):
        if epochs == 0:
            continue
        optimizer = torch.optim.Adam(params, lr=lr)
        for _ in range(epochs):
            order = rng.permutation(len(samples))
            for i in order:
                path, gts = samples[int(i)]
                if path not in cache:
                    cache[path] = load_image_rgb(path, size=cfg.image_size)
                total, comps = detector.image_loss(cache[path], gts)
                if not torch.isfinite(total):
                    raise NumericalError(f"non-finite loss at step {step}")
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                history.append({"step": step, "phase": phase,
                                **{k: float(v.detach()) for k, v in comps.items()},
                                "total": float(total.detach())})
                step += 1
    detector.is_trained = True
    return history


def evaluate_detector(detector: HOIDetector, doc: dict, base_dir: str,
                      protocol: EvalProtocol, image_size: int = 128,
                      score_threshold: float = 0.0, top_k: int = 100) -> EvalReport:
    """Predict every image and score against the dataset's ground truth."""
    paths = data_mod.image_paths(doc, base_dir)
    dets, gts = [], []
    for img_id, h_box, o_box, obj, action in data_mod.iter_hoi_triplets(doc):
        gts.append(GTRecord(img_id, action, obj, h_box, o_box))
    dims = {img["id"]: (img["width"], img["height"]) for img in doc["images"]}
    for img in doc["images"]:
        image = load_image_rgb(paths[img["id"]], size=image_size)
        w0, h0 = dims[img["id"]]
        sx, sy = w0 / image_size, h0 / image_size
        for det in detector.predict(image, score_threshold=score_threshold,
                                    top_k=top_k):
            hb = (det.human_box[0] * sx, det.human_box[1] * sy,
                  det.human_box[2] * sx, det.human_box[3] * sy)
            ob = (det.object_box[0] * sx, det.object_box[1] * sy,
                  det.object_box[2] * sx, det.object_box[3] * sy)
            if hb[2] <= hb[0] or ob[2] <= ob[0] or hb[3] <= hb[1] or ob[3] <= ob[1]:
                continue
            dets.append(DetRecord(img["id"], det.hoi_class[0], det.hoi_class[1],
                                  hb, ob, det.hoi_score))
    return evaluate(dets, gts, protocol)
