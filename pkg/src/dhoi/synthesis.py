"""Relation-driven sample generation.

Builds a prompt corpus from captions (lexicon filtering, clause swapping,
placeholder substitution), generates images through the backbone, and
derives pseudo boxes from cross-attention maps via the standard
CAM-localization recipe (threshold at half the map maximum, largest
4-connected component, tight bounding box).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .backbone import LatentGrid, PromptEmbedding
from .errors import ContractError, ExtractionError, InputError, NameLookupError
from . import data as data_mod
from .serialization import atomic_write

_PUNCT = ".,;:!?\"'()"

DEFAULT_HUMAN_LEXICON = frozenset(
    {"man", "woman", "boy", "girl", "person", "people", "child", "men", "women"})

# Irregular verb forms not covered by the suffix rules.
IRREGULAR_FORMS = {
    "ride": ["rode", "ridden"], "hold": ["held"], "sit": ["sat", "sitting"],
    "eat": ["ate", "eaten"], "run": ["ran", "running"], "swim": ["swam", "swum",
    "swimming"], "cut": ["cutting"], "hit": ["hitting"], "throw": ["threw",
    "thrown"], "fly": ["flew", "flown"], "stand": ["stood"], "feed": ["fed"],
    "catch": ["caught"], "drive": ["drove", "driven"], "wear": ["wore", "worn"],
    "carry": ["carried"], "lie": ["lay", "lain", "lying"], "buy": ["bought"],
}


def verb_inflections(verb: str):
    """All surface forms of a verb mapped by the default inflector."""
    forms = {verb}
    if verb.endswith(("s", "x", "z", "ch", "sh")):
        forms.add(verb + "es")
    else:
        forms.add(verb + "s")
    if verb.endswith("ie"):
        forms.add(verb[:-2] + "ying")
    elif verb.endswith("e") and not verb.endswith("ee"):
        forms.add(verb[:-1] + "ing")
    else:
        forms.add(verb + "ing")
    if verb.endswith("e"):
        forms.add(verb + "d")
    elif verb.endswith("y") and len(verb) > 1 and verb[-2] not in "aeiou":
        forms.add(verb[:-1] + "ied")
    else:
        forms.add(verb + "ed")
    forms.update(IRREGULAR_FORMS.get(verb, []))
    return forms


def build_stemming_table(actions) -> dict:
    """Map every inflected surface form to its base action name."""
    table = {}
    for action in actions:
        for form in verb_inflections(action):
            table.setdefault(form, action)
    return table


@dataclass
class PromptRecord:
    """One prompt with its action occurrence and target object class."""

    text: str
    action: str
    object_class: str
    placeholder_span: tuple  # token index range [start, end)

    def __post_init__(self):
        if not self.object_class:
            raise InputError("object_class must be non-empty")
        start, end = self.placeholder_span
        n = len(self.text.split())
        if not (0 <= start < end <= n):
            raise InputError(f"placeholder span {self.placeholder_span} invalid "
                             f"for {self.text!r}")


@dataclass
class PseudoAnnotation:
    human_box: tuple
    object_box: tuple
    object_class: str
    action: str
    confidence: float

    def __post_init__(self):
        for box in (self.human_box, self.object_box):
            x1, y1, x2, y2 = box
            if not (x2 > x1 and y2 > y1):
                raise InputError(f"degenerate pseudo box {box}")
        if not (0 < self.confidence <= 1):
            raise InputError(f"confidence {self.confidence} outside (0, 1]")


def _norm_key(token: str) -> str:
    return token.strip(_PUNCT).lower()


def filter_captions(captions, human_lexicon, action_lexicon,
                    object_lexicon) -> list:
    """Keep captions with a human word and an action word; emit prompt records.

    Action matching runs through a stemming table built from the action
    lexicon, so inflections like "riding" match "ride". One record is
    produced per (action occurrence, object) pair found in the caption.
    """
    human_lexicon = {w.lower() for w in human_lexicon}
    object_lexicon = {w.lower() for w in object_lexicon}
    stems = build_stemming_table(w.lower() for w in action_lexicon)
    records = []
    for cap in captions:
        text = cap["caption"] if isinstance(cap, dict) else cap
        tokens = text.split()
        keys = [_norm_key(t) for t in tokens]
        if not any(k in human_lexicon for k in keys):
            continue
        action_hits = [(i, stems[k]) for i, k in enumerate(keys) if k in stems]
        if not action_hits:
            continue
        object_hits = []
        for i, k in enumerate(keys):
            if k in object_lexicon:
                object_hits.append((i, k))
            elif k.endswith("s") and k[:-1] in object_lexicon:
                object_hits.append((i, k[:-1]))
        norm_text = " ".join(tokens)
        for ai, action in action_hits:
            for oi, obj in object_hits:
                if oi == ai:
                    continue
                records.append(PromptRecord(norm_text, action, obj, (ai, ai + 1)))
    return records


def swap_clauses(rec_a: PromptRecord, rec_b: PromptRecord):
    """Exchange the clauses following the action word of two same-action prompts."""
    if rec_a.action != rec_b.action:
        raise ContractError(
            f"clause swap requires a shared action, got {rec_a.action!r} "
            f"vs {rec_b.action!r}")
    toks_a, toks_b = rec_a.text.split(), rec_b.text.split()
    end_a, end_b = rec_a.placeholder_span[1], rec_b.placeholder_span[1]
    new_a = " ".join(toks_a[:end_a] + toks_b[end_b:])
    new_b = " ".join(toks_b[:end_b] + toks_a[end_a:])
    rec_a2 = replace(rec_a, text=new_a, object_class=rec_b.object_class)
    rec_b2 = replace(rec_b, text=new_b, object_class=rec_a.object_class)
    return rec_a2, rec_b2


def substitute_placeholder(rec: PromptRecord) -> str:
    """Replace the action token(s) with the R_*<action> marker."""
    tokens = rec.text.split()
    start, end = rec.placeholder_span
    return " ".join(tokens[:start] + [f"R_*<{rec.action}>"] + tokens[end:])


def template_prompts(actions, objects, humans=("man", "woman", "person"),
                     scenes=("outdoors", "in a park", "on a street")) -> list:
    """Deterministic template bank for (action, object) pairs absent from captions."""
    records = []
    for action in actions:
        for obj in objects:
            for human, scene in zip(humans, scenes):
                text = f"A {human} {action} a {obj} {scene}"
                records.append(PromptRecord(text, action, obj, (2, 3)))
    return records


def _upsample_map(layer_map: torch.Tensor, size) -> torch.Tensor:
    x = layer_map.unsqueeze(0).unsqueeze(0)
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)[0, 0]


def generate_sample(rec: PromptRecord, table, backbone, sched, seed: int,
                    human_word: str = "person", object_word: str = None,
                    n_steps: int = 4, image_size=(128, 128)):
    """Generate one image plus human/object attention maps at image resolution.

    The prompt embedding is extended with explicit human and object words;
    their attention maps at the final denoising step are layer-averaged,
    bilinearly upsampled, and renormalized to [0, 1].
    """
    object_word = object_word or rec.object_class
    prompt = substitute_placeholder(rec)
    base = backbone.encode_text(prompt, relation_table=table)
    extra = torch.stack([backbone.token_embedding(human_word.lower()),
                         backbone.token_embedding(object_word.lower())])
    cond = PromptEmbedding(torch.cat([base.tokens, extra], dim=0),
                           f"{prompt} {human_word} {object_word}")
    H, W = image_size
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFF)
    zT = LatentGrid(torch.randn(H // 8, W // 8, backbone.config.latent_channels,
                                generator=gen, dtype=backbone.config.dtype), 8)
    with torch.no_grad():
        z0, last = backbone.denoise_iterative(zT, cond, n_steps, sched,
                                              return_last=True)
        image = backbone.decode_latent(z0)
    maps = {}
    for name, idx in (("human", cond.n_tokens - 2), ("object", cond.n_tokens - 1)):
        stack = [_upsample_map(attn[:, :, idx], (H, W)) for attn in last.attention]
        avg = torch.stack(stack).mean(dim=0)
        peak = avg.max()
        maps[name] = (avg / peak if peak > 0 else avg).numpy()
    return image.numpy(), maps


def extract_box(prob_map: np.ndarray, threshold_ratio: float = 0.5) -> tuple:
    """Tight box around the largest 4-connected component above the threshold.

    Returns inclusive pixel indices (x1, y1, x2, y2).
    """
    prob_map = np.asarray(prob_map, dtype=np.float64)
    peak = prob_map.max() if prob_map.size else 0.0
    if peak <= 0:
        raise ExtractionError("probability map has no positive values")
    mask = prob_map >= threshold_ratio * peak
    labels, n = ndimage.label(mask)
    if n == 0:
        raise ExtractionError("no component above threshold")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def build_dataset(records, table, backbone, sched, out_dir: str, n_samples: int,
                  seed: int, n_steps: int = 4, image_size=(128, 128),
                  threshold_ratio: float = 0.5, human_word: str = "person") -> dict:
    """Generate images + pseudo-annotations; write PNGs and a dataset manifest.

    Prompts are sampled with replacement; samples whose box extraction fails
    are skipped and counted in the manifest header.
    """
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    images, annotations = [], []
    actions, objects = set(), set()
    skipped = 0
    for i in range(n_samples):
        rec = records[int(rng.integers(len(records)))]
        sample_seed = int(rng.integers(2 ** 31))
        image, maps = generate_sample(rec, table, backbone, sched, sample_seed,
                                      human_word=human_word, n_steps=n_steps,
                                      image_size=image_size)
        try:
            hx1, hy1, hx2, hy2 = extract_box(maps["human"], threshold_ratio)
            ox1, oy1, ox2, oy2 = extract_box(maps["object"], threshold_ratio)
        except ExtractionError:
            skipped += 1
            continue
        human_box = (float(hx1), float(hy1), float(hx2 + 1), float(hy2 + 1))
        object_box = (float(ox1), float(oy1), float(ox2 + 1), float(oy2 + 1))
        conf = min(float(maps["human"][hy1:hy2 + 1, hx1:hx2 + 1].max()),
                   float(maps["object"][oy1:oy2 + 1, ox1:ox2 + 1].max()))
        ann = PseudoAnnotation(human_box, object_box, rec.object_class,
                               rec.action, conf)
        image_id = f"syn_{i:05d}"
        filename = f"{image_id}.png"
        arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(os.path.join(out_dir, filename))
        images.append({"id": image_id, "path": filename,
                       "width": image_size[1], "height": image_size[0]})
        annotations.append({
            "image_id": image_id,
            "humans": [list(ann.human_box)],
            "objects": [{"box": list(ann.object_box), "category": ann.object_class}],
            "hois": [{"human_idx": 0, "object_idx": 0, "action": ann.action,
                      "confidence": ann.confidence}],
        })
        actions.add(rec.action)
        objects.add(rec.object_class)
    manifest = {
        "source": "synthesized",
        "generator_seed": seed,
        "skipped": skipped,
        "images": images,
        "annotations": annotations,
        "vocab": {"actions": sorted(actions), "objects": sorted(objects)},
    }
    data_mod.validate_dataset(manifest)
    path = os.path.join(out_dir, "manifest.json")
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))
    return manifest
