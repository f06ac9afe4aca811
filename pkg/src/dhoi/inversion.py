"""Relation embedding learning by inversion against a frozen backbone.

One embedding is learned per action class. Training alternates a
cycle-consistency reconstruction (subtract the object latent, denoise the
remainder under the relation embedding, add the object back, denoise under
[relation; object text]) with a relation-centric InfoNCE term over composed
latents. Only the relation table receives gradients.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import LatentGrid, MockBackbone, NoiseSchedule, PromptEmbedding, noise_to
from .errors import (
    InputError,
    NameLookupError,
    NormalizationError,
    NumericalError,
    RangeError,
    SamplingError,
)
from . import serialization


class RelationTable:
    """Learnable relation embeddings, one row per action class."""

    def __init__(self, actions, vectors: torch.Tensor):
        actions = list(actions)
        if len(set(actions)) != len(actions):
            raise InputError("action names must be unique")
        if vectors.ndim != 2 or vectors.shape[0] != len(actions):
            raise InputError("vectors must be [n_actions, d_text]")
        if not torch.isfinite(vectors).all():
            raise InputError("relation vectors must be finite")
        self.actions = actions
        self.vectors = vectors
        self._index = {a: i for i, a in enumerate(actions)}

    def index(self, action: str) -> int:
        if action not in self._index:
            raise NameLookupError(f"unknown action {action!r}")
        return self._index[action]

    def lookup(self, action: str) -> torch.Tensor:
        return self.vectors[self.index(action)]

    @classmethod
    def init_from_text(cls, backbone, actions) -> "RelationTable":
        """Initialize each embedding from the action word's text embedding."""
        rows = []
        for action in actions:
            emb = backbone.encode_text(action)
            rows.append(emb.tokens.mean(dim=0))
        return cls(actions, torch.stack(rows))

    def save(self, path: str):
        serialization.save_relation_table(
            path, self.actions, self.vectors.detach().cpu().numpy())

    @classmethod
    def load(cls, path: str, dtype=torch.float32) -> "RelationTable":
        names, vectors = serialization.load_relation_table(path)
        return cls(names, torch.as_tensor(vectors, dtype=dtype))


@dataclass
class HOITripletLatents:
    """Latents and labels for one annotated interaction."""

    z_hoi: LatentGrid
    z_obj: LatentGrid
    action: str
    object_class: str
    object_box: tuple
    sample_id: str = ""

    def __post_init__(self):
        if self.z_hoi.data.shape != self.z_obj.data.shape:
            raise InputError("z_hoi and z_obj must share a shape")
        if self.z_hoi.stride != self.z_obj.stride:
            raise InputError("z_hoi and z_obj must share a stride")


@dataclass
class ContrastiveBatch:
    anchor: torch.Tensor
    positive: torch.Tensor
    object_negatives: list
    relation_negatives: list
    temperature: float = 0.07


def sample_seed(sample_id: str, epoch: int = 0) -> int:
    """Deterministic per-(sample, epoch) noise seed."""
    digest = hashlib.sha256(f"{sample_id}|{epoch}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def object_latent(backbone, image, object_box) -> LatentGrid:
    """Encode the boxed object region into an otherwise-zero full-size grid.

    The pixel crop snaps outward to the stride-8 grid, so a full-image box
    reproduces encode_image exactly and cells outside the box stay zero.
    """
    img = torch.as_tensor(image, dtype=backbone.config.dtype)
    H, W = img.shape[0], img.shape[1]
    x1, y1, x2, y2 = (float(v) for v in object_box)
    if x1 < 0 or y1 < 0 or x2 > W or y2 > H:
        raise RangeError(f"box {object_box} outside image ({W}x{H})")
    if x2 <= x1 or y2 <= y1:
        raise InputError(f"degenerate box {object_box}")
    s = 8
    lx1, ly1 = int(math.floor(x1 / s)), int(math.floor(y1 / s))
    lx2, ly2 = int(math.ceil(x2 / s)), int(math.ceil(y2 / s))
    if lx2 <= lx1 or ly2 <= ly1:
        raise InputError(f"box {object_box} has zero area at latent scale")
    crop = img[ly1 * s:ly2 * s, lx1 * s:lx2 * s, :]
    enc = backbone.encode_image(crop)
    full = torch.zeros(H // s, W // s, enc.channels, dtype=enc.data.dtype)
    full[ly1:ly2, lx1:lx2, :] = enc.data
    return LatentGrid(full, 8)


def relation_reconstruct(backbone, lat: HOITripletLatents, table: RelationTable,
                         sched: NoiseSchedule, T: int, n_steps: int,
                         seed: int = None) -> LatentGrid:
    """Denoise the noised (z_hoi - z_obj) under the relation embedding alone."""
    vec = table.lookup(lat.action)
    diff = LatentGrid(lat.z_hoi.data - lat.z_obj.data, lat.z_hoi.stride)
    if seed is None:
        seed = sample_seed(lat.sample_id)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFF)
    eps = LatentGrid(torch.randn(diff.data.shape, generator=gen,
                                 dtype=diff.data.dtype), diff.stride)
    zT = noise_to(diff, T, eps, sched)
    cond = PromptEmbedding(vec.unsqueeze(0), f"R_*<{lat.action}>")
    return backbone.denoise_iterative(zT, cond, n_steps, sched)


def hoi_reconstruct(backbone, z_rel0: LatentGrid, lat: HOITripletLatents,
                    table: RelationTable, sched: NoiseSchedule, T: int,
                    n_steps: int, seed: int = None) -> LatentGrid:
    """Add the object latent back and denoise under [relation; object text]."""
    vec = table.lookup(lat.action)
    if z_rel0.data.shape != lat.z_obj.data.shape:
        raise InputError("z_rel0 and z_obj shapes differ")
    combined = LatentGrid(z_rel0.data + lat.z_obj.data, z_rel0.stride)
    if seed is None:
        seed = sample_seed(lat.sample_id) + 1
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFF)
    eps = LatentGrid(torch.randn(combined.data.shape, generator=gen,
                                 dtype=combined.data.dtype), combined.stride)
    zT = noise_to(combined, T, eps, sched)
    obj_emb = backbone.encode_text(lat.object_class)
    cond = PromptEmbedding(torch.cat([vec.unsqueeze(0), obj_emb.tokens], dim=0),
                           f"R_*<{lat.action}> {lat.object_class}")
    return backbone.denoise_iterative(zT, cond, n_steps, sched)


def _unit(x: torch.Tensor) -> torch.Tensor:
    flat = x.reshape(-1)
    norm = torch.linalg.vector_norm(flat)
    if norm == 0:
        raise NormalizationError("cannot normalize a zero tensor")
    return flat / norm


def consistency_loss(z_hoi, z_hoi0) -> torch.Tensor:
    """Squared distance between the L2-normalized flattened latents; in [0, 4]."""
    a = z_hoi.data if isinstance(z_hoi, LatentGrid) else torch.as_tensor(z_hoi)
    b = z_hoi0.data if isinstance(z_hoi0, LatentGrid) else torch.as_tensor(z_hoi0)
    if a.shape != b.shape:
        raise InputError("consistency_loss inputs must share a shape")
    return torch.sum((_unit(a) - _unit(b)) ** 2)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.dot(_unit(a), _unit(b))


def build_contrastive_batch(pool, rel_latents, anchor_idx: int = 0,
                            k_obj: int = 2, n_rel_pairs: int = 2,
                            seed: int = 0, temperature: float = 0.07) -> ContrastiveBatch:
    """Compose anchor/positive/negative latents from a triplet pool.

    rel_latents[i] is the current relation reconstruction for pool[i].
    The positive swaps in a different object latent of the anchor's class;
    object negatives use different-class objects; relation negatives combine
    another action's relation latent with an arbitrary object latent.
    """
    if len(pool) != len(rel_latents):
        raise InputError("pool and rel_latents must align")
    rng = np.random.default_rng(seed)
    a = pool[anchor_idx]
    rel_a = rel_latents[anchor_idx]
    same_obj = [j for j in range(len(pool))
                if j != anchor_idx and pool[j].object_class == a.object_class]
    diff_obj = [j for j in range(len(pool))
                if pool[j].object_class != a.object_class]
    other_rel = [j for j in range(len(pool)) if pool[j].action != a.action]
    if not same_obj:
        raise SamplingError("pool lacks a same-class alternative object (positive)")
    if not diff_obj:
        raise SamplingError("pool lacks a different-class object (object negative)")
    if not other_rel:
        raise SamplingError("pool lacks another relation (relation negative)")

    def grid(x):
        return x.data if isinstance(x, LatentGrid) else x

    anchor = grid(rel_a) + grid(a.z_obj)
    pos_j = same_obj[rng.integers(len(same_obj))]
    positive = grid(rel_a) + grid(pool[pos_j].z_obj)
    object_negatives = []
    for _ in range(k_obj):
        j = diff_obj[rng.integers(len(diff_obj))]
        object_negatives.append(grid(rel_a) + grid(pool[j].z_obj))
    relation_negatives = []
    for _ in range(n_rel_pairs):
        m = other_rel[rng.integers(len(other_rel))]
        n = rng.integers(len(pool))
        relation_negatives.append(grid(rel_latents[m]) + grid(pool[n].z_obj))
    return ContrastiveBatch(anchor, positive, object_negatives,
                            relation_negatives, temperature)


def contrastive_loss(batch: ContrastiveBatch) -> torch.Tensor:
    """InfoNCE over cosine similarities, log-sum-exp stabilized."""
    if batch.temperature <= 0:
        raise RangeError(f"temperature must be > 0, got {batch.temperature}")
    tau = batch.temperature
    s_pos = cosine_similarity(batch.anchor, batch.positive) / tau
    negatives = list(batch.object_negatives) + list(batch.relation_negatives)
    if not negatives:
        return torch.zeros((), dtype=s_pos.dtype)
    s_neg = torch.stack([cosine_similarity(batch.anchor, n) / tau for n in negatives])
    logits = torch.cat([s_pos.unsqueeze(0), s_neg])
    return torch.logsumexp(logits, dim=0) - s_pos


def lambda1(step: int, total_steps: int) -> float:
    """Contrastive weight ramp 0 -> 0.2 over training, half-cosine shaped."""
    if total_steps <= 0 or not (0 <= step <= total_steps):
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    return 0.1 * (1.0 - math.cos(math.pi * step / total_steps))


@dataclass
class InversionConfig:
    n_steps: int = 4
    k_obj: int = 2
    n_rel_pairs: int = 2
    temperature: float = 0.07
    lr: float = 8e-2
    total_steps: int = 1000

    def noise_time(self, sched: NoiseSchedule) -> int:
        return sched.steps - 1


def inversion_loss(backbone, sched, table: RelationTable, triplets,
                   step: int, cfg: InversionConfig, epoch: int = 0):
    """Batch loss L_Consistency + lambda1 * L_Contrastive as a differentiable scalar."""
    T = cfg.noise_time(sched)
    cons_terms = []
    rel_latents = []
    for lat in triplets:
        seed = sample_seed(lat.sample_id, epoch)
        z_rel0 = relation_reconstruct(backbone, lat, table, sched, T,
                                      cfg.n_steps, seed=seed)
        z_hoi0 = hoi_reconstruct(backbone, z_rel0, lat, table, sched, T,
                                 cfg.n_steps, seed=seed + 1)
        term = consistency_loss(lat.z_hoi, z_hoi0)
        if not torch.isfinite(term):
            raise NumericalError(f"non-finite consistency loss for sample "
                                 f"{lat.sample_id!r}")
        cons_terms.append(term)
        rel_latents.append(z_rel0.data)
    l_cons = torch.stack(cons_terms).mean()
    lam = lambda1(min(step, cfg.total_steps), cfg.total_steps)
    contr_terms = []
    if lam > 0:
        for i in range(len(triplets)):
            try:
                batch = build_contrastive_batch(
                    triplets, rel_latents, anchor_idx=i, k_obj=cfg.k_obj,
                    n_rel_pairs=cfg.n_rel_pairs,
                    seed=sample_seed(triplets[i].sample_id, epoch) ^ step,
                    temperature=cfg.temperature)
            except SamplingError:
                continue
            contr_terms.append(contrastive_loss(batch))
    l_contr = (torch.stack(contr_terms).mean() if contr_terms
               else torch.zeros((), dtype=l_cons.dtype))
    total = l_cons + lam * l_contr
    return total, {"consistency": float(l_cons.detach()),
                   "contrastive": float(l_contr.detach()),
                   "lambda1": lam,
                   "total": float(total.detach())}


def inversion_step(backbone, sched, table: RelationTable, triplets, step: int,
                   optimizer, cfg: InversionConfig, epoch: int = 0):
    """One gradient step on the relation table; backbone stays frozen."""
    optimizer.zero_grad()
    total, components = inversion_loss(backbone, sched, table, triplets,
                                       step, cfg, epoch=epoch)
    if not torch.isfinite(total):
        raise NumericalError(f"non-finite inversion loss at step {step}")
    total.backward()
    optimizer.step()
    return components
