"""One-stage HOI detection head on top of the diffusion backbone.

Pipeline per image: noise-free denoiser pass, relation-prompt conditioning
(additive cross-attention value injection), FPN aggregation to stride 32,
mask-pooled query initialization, Hungarian pairing of HOI queries with
human+object query slots, twin transformer decoders, and the joint
classification / box / relation-alignment losses.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from .backbone import LatentGrid, PromptEmbedding
from .errors import (
    DimensionError,
    InputError,
    NameLookupError,
    NumericalError,
    StateError,
)
from .inversion import RelationTable

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    n_queries: int = 64
    d_model: int = 256  # must equal the backbone's FPN channel count
    n_decoder_layers: int = 6
    ffn_hidden: int = 768
    n_heads: int = 8
    pos_mask_size: int = 8
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 1.0
    det_l1_weight: float = 5.0
    det_giou_weight: float = 2.0
    lambda2: float = 0.5
    extract_t: int = 999  # timestep passed for the noise-free feature pass


@dataclass
class HOIPromptBank:
    """Prompt rows for HOI classes, object classes, and raw relations."""

    hoi_prompts: torch.Tensor      # [N_r, d_text]
    triplets: list                 # [(action, object)] aligned with hoi_prompts
    object_prompts: torch.Tensor   # [N_o, d_text]
    object_classes: list
    relation_prompts: torch.Tensor  # [N_a, d_text]
    actions: list

    @property
    def n_hoi(self):
        return len(self.triplets)

    @property
    def n_objects(self):
        return len(self.object_classes)


@dataclass
class QueryBundle:
    q_hat_h: torch.Tensor = None
    q_hat_o: torch.Tensor = None
    q_hat_r: torch.Tensor = None
    pair_slots: list = None       # pair slot index for each q_hat_r row
    init_classes: list = None     # originating HOI class of each q_hat_r row
    q_tilde_h: torch.Tensor = None
    q_tilde_o: torch.Tensor = None
    q_tilde_r: torch.Tensor = None
    q_hat_a: torch.Tensor = None
    q_tilde_a: torch.Tensor = None


@dataclass
class Detection:
    human_box: tuple
    object_box: tuple
    object_class: str
    object_score: float
    hoi_class: tuple  # (action, object)
    hoi_score: float


def build_prompt_bank(backbone, table: RelationTable, object_vocab,
                      feasible_triplets) -> HOIPromptBank:
    """Encode HOI phrases ("R_* <object>"), object names, and raw relations."""
    seen, triplets = set(), []
    for trip in feasible_triplets:
        trip = tuple(trip)
        if trip in seen:
            log.error("duplicate feasible triplet %s dropped", trip)
            continue
        seen.add(trip)
        triplets.append(trip)
    vocab = list(object_vocab)
    vocab_set = set(vocab)
    hoi_rows = []
    for action, obj in triplets:
        table.index(action)
        if obj not in vocab_set:
            raise NameLookupError(f"object {obj!r} not in vocabulary")
        emb = backbone.encode_text(f"R_*<{action}> {obj}", relation_table=table)
        hoi_rows.append(emb.tokens.mean(dim=0))
    obj_rows = [backbone.encode_text(obj).tokens.mean(dim=0) for obj in vocab]
    dtype = table.vectors.dtype
    d_text = table.vectors.shape[1]
    hoi = torch.stack(hoi_rows) if hoi_rows else torch.zeros(0, d_text, dtype=dtype)
    objs = torch.stack(obj_rows) if obj_rows else torch.zeros(0, d_text, dtype=dtype)
    return HOIPromptBank(hoi, triplets, objs, vocab, table.vectors, list(table.actions))


def mask_pool(z32: LatentGrid, weight_map: torch.Tensor) -> torch.Tensor:
    """Attention-weighted spatial mean of the feature grid."""
    z = z32.data if isinstance(z32, LatentGrid) else z32
    if weight_map.shape != z.shape[:2]:
        raise DimensionError(
            f"map shape {tuple(weight_map.shape)} != grid {tuple(z.shape[:2])}")
    if (weight_map < 0).any():
        raise InputError("mask pooling weights must be nonnegative")
    total = weight_map.sum()
    if total == 0:
        log.warning("all-zero pooling map; falling back to unweighted mean")
        return z.reshape(-1, z.shape[2]).mean(dim=0)
    flat = z.reshape(-1, z.shape[2])
    return (weight_map.reshape(-1, 1) * flat).sum(dim=0) / total


def pair_queries(q_hat_r: torch.Tensor, q_hat_h: torch.Tensor,
                 q_hat_o: torch.Tensor):
    """Assign HOI queries to (human, object) pair slots by maximal cosine.

    Returns (row_indices, slot_indices) sorted by slot; cost is the negative
    cosine between each HOI query and the summed pair queries.
    """
    if q_hat_h.shape != q_hat_o.shape:
        raise DimensionError("q_hat_h and q_hat_o must share a shape")
    pair = q_hat_h + q_hat_o
    a = F.normalize(q_hat_r, dim=1, eps=1e-12)
    b = F.normalize(pair, dim=1, eps=1e-12)
    cost = -(a @ b.T)
    if not torch.isfinite(cost).all():
        raise NumericalError("non-finite pairing cost")
    c = cost.detach().cpu().numpy()
    if c.shape[0] <= c.shape[1]:
        rows, cols = linear_sum_assignment(c)
    else:
        cols, rows = linear_sum_assignment(c.T)
    order = np.argsort(cols, kind="stable")
    return rows[order].tolist(), cols[order].tolist()


def box_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.abs(a - b).sum(dim=-1)


def generalized_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU for xyxy boxes; supports broadcasting over leading dims."""
    ix1 = torch.maximum(a[..., 0], b[..., 0])
    iy1 = torch.maximum(a[..., 1], b[..., 1])
    ix2 = torch.minimum(a[..., 2], b[..., 2])
    iy2 = torch.minimum(a[..., 3], b[..., 3])
    inter = (ix2 - ix1).clamp(min=0) * (iy2 - iy1).clamp(min=0)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    union = area_a + area_b - inter
    iou = inter / union.clamp(min=1e-12)
    ex1 = torch.minimum(a[..., 0], b[..., 0])
    ey1 = torch.minimum(a[..., 1], b[..., 1])
    ex2 = torch.maximum(a[..., 2], b[..., 2])
    ey2 = torch.maximum(a[..., 3], b[..., 3])
    enclosure = ((ex2 - ex1) * (ey2 - ey1)).clamp(min=1e-12)
    return iou - (enclosure - union) / enclosure


@dataclass
class GTPair:
    hoi_class: int     # index into bank.triplets
    object_class: int  # index into bank.object_classes
    action: int        # index into bank.actions
    human_box: torch.Tensor  # normalized xyxy
    object_box: torch.Tensor


def match_predictions_to_gt(hoi_probs: torch.Tensor, pred_h: torch.Tensor,
                            pred_o: torch.Tensor, gts,
                            l1_weight: float = 5.0, giou_weight: float = 2.0):
    """DETR-style Hungarian matching of HOI predictions to ground truths.

    cost(q, g) = -p(class_g) + l1_weight * (L1_h + L1_o)
                 - giou_weight * (GIoU_h + GIoU_o), assignment minimizes the
    total; unmatched queries become background.
    """
    if not gts:
        return [], []
    n_q = hoi_probs.shape[0]
    cost = torch.zeros(n_q, len(gts), dtype=hoi_probs.dtype)
    for g, gt in enumerate(gts):
        cls_cost = -hoi_probs[:, gt.hoi_class]
        l1 = box_l1(pred_h, gt.human_box) + box_l1(pred_o, gt.object_box)
        giou = (generalized_iou(pred_h, gt.human_box)
                + generalized_iou(pred_o, gt.object_box))
        cost[:, g] = cls_cost + l1_weight * l1 - giou_weight * giou
    c = cost.detach().cpu().numpy()
    if c.shape[0] >= c.shape[1]:
        rows, cols = linear_sum_assignment(c)
    else:
        cols, rows = linear_sum_assignment(c.T)
    return rows.tolist(), cols.tolist()


class Attention(nn.Module):
    """Multi-head attention with explicit projections (oracle-checkable)."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads:
            raise InputError("d_model must divide by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        nq, d = q.shape
        nk = kv.shape[0]
        qh = self.wq(q).reshape(nq, self.n_heads, self.d_head).transpose(0, 1)
        kh = self.wk(kv).reshape(nk, self.n_heads, self.d_head).transpose(0, 1)
        vh = self.wv(kv).reshape(nk, self.n_heads, self.d_head).transpose(0, 1)
        attn = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(self.d_head), dim=-1)
        out = (attn @ vh).transpose(0, 1).reshape(nq, d)
        return self.wo(out)


class DecoderLayer(nn.Module):
    """Pre-norm layer: with all-zero weights it is the identity map."""

    def __init__(self, d_model: int, n_heads: int, ffn_hidden: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.ln3 = nn.LayerNorm(d_model)
        self.self_attn = Attention(d_model, n_heads)
        self.cross_attn = Attention(d_model, n_heads)
        self.ffn = nn.Sequential(nn.Linear(d_model, ffn_hidden), nn.ReLU(),
                                 nn.Linear(ffn_hidden, d_model))

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        y = self.ln1(x)
        x = x + self.self_attn(y, y)
        x = x + self.cross_attn(self.ln2(x), memory)
        x = x + self.ffn(self.ln3(x))
        return x


class DecoderStack(nn.Module):
    def __init__(self, d_model: int, n_layers: int, n_heads: int, ffn_hidden: int):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, n_heads, ffn_hidden) for _ in range(n_layers))

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, memory)
        return x


class BoxHead(nn.Module):
    """Query -> normalized xyxy box via a sigmoid cxcywh parameterization."""

    def __init__(self, d_model: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(),
                                 nn.Linear(d_model, 4))

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        cxcywh = torch.sigmoid(self.mlp(q))
        cx, cy, w, h = cxcywh.unbind(-1)
        return torch.stack([(cx - w / 2).clamp(0, 1), (cy - h / 2).clamp(0, 1),
                            (cx + w / 2).clamp(0, 1), (cy + h / 2).clamp(0, 1)],
                           dim=-1)


class HOIDetector(nn.Module):
    """Detector head; the backbone stays frozen, the relation table trains."""

    def __init__(self, backbone, table: RelationTable, object_vocab,
                 feasible_triplets, cfg: DetectorConfig = None,
                 human_words=("person",)):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        c = self.cfg
        self.backbone = backbone
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        dtype = backbone.config.dtype
        if backbone.config.fpn_channels != c.d_model:
            raise DimensionError("backbone fpn_channels must equal d_model")
        self.relation_vectors = nn.Parameter(table.vectors.detach().clone())
        self.actions = list(table.actions)
        self.object_vocab = list(object_vocab)
        seen = set()
        self.triplets = [t for t in map(tuple, feasible_triplets)
                         if not (t in seen or seen.add(t))]
        self.human_words = tuple(human_words)
        d_text = backbone.config.text_dim
        widths = backbone.config.widths
        self.cond_k = nn.ModuleList(
            nn.Linear(d_text, w, bias=False) for w in widths)
        self.cond_v = nn.ModuleList(
            nn.Linear(d_text, w, bias=False) for w in widths)
        self.word_bg = nn.Parameter(torch.zeros(d_text))
        self.pos_masks_raw = nn.Parameter(
            torch.zeros(c.n_queries, c.pos_mask_size, c.pos_mask_size))
        self.prompt_proj_r = nn.Linear(d_text, c.d_model)
        self.prompt_proj_o = nn.Linear(d_text, c.d_model)
        self.bg_r = nn.Parameter(torch.zeros(c.d_model))
        self.bg_o = nn.Parameter(torch.zeros(c.d_model))
        self.log_tau_r = nn.Parameter(torch.tensor(math.log(c.tau_init)))
        self.log_tau_o = nn.Parameter(torch.tensor(math.log(c.tau_init)))
        self.d_ins = DecoderStack(c.d_model, c.n_decoder_layers, c.n_heads,
                                  c.ffn_hidden)
        self.d_hoi = DecoderStack(c.d_model, c.n_decoder_layers, c.n_heads,
                                  c.ffn_hidden)
        self.ffn_cls_r = nn.Linear(c.d_model, len(self.triplets) + 1)
        self.ffn_cls_o = nn.Linear(c.d_model, len(self.object_vocab) + 1)
        self.box_head_h = BoxHead(c.d_model)
        self.box_head_o = BoxHead(c.d_model)
        self.is_trained = False
        self.to(dtype)
        self._init_non_backbone(seed=0)

    def _init_non_backbone(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        backbone_params = {id(p) for p in self.backbone.parameters()}
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if id(p) in backbone_params or name == "relation_vectors":
                    continue
                if name.endswith("log_tau_r") or name.endswith("log_tau_o"):
                    continue
                if "ln" in name.split(".")[-2:][0]:
                    continue  # keep LayerNorm at its identity init
                if name in ("bg_r", "bg_o", "word_bg"):
                    # must be nonzero: these rows get L2-normalized
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
                elif p.ndim >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
                elif p.ndim == 1 and p.shape[0] > 0:
                    p.zero_()

    # -- derived state -------------------------------------------------------

    @property
    def table(self) -> RelationTable:
        return RelationTable(self.actions, self.relation_vectors)

    def prompt_bank(self) -> HOIPromptBank:
        return build_prompt_bank(self.backbone, self.table, self.object_vocab,
                                 self.triplets)

    def tau(self, which: str) -> torch.Tensor:
        raw = self.log_tau_r if which == "r" else self.log_tau_o
        return torch.exp(raw).clamp(self.cfg.tau_min, self.cfg.tau_max)

    # -- feature conditioning ------------------------------------------------

    def _word_map(self, flat: torch.Tensor, level: int, word_rows: torch.Tensor,
                  detach_weights: bool = False) -> torch.Tensor:
        """Foreground-ness map from softmax over [word rows; background row]."""
        bank = torch.cat([word_rows, self.word_bg.unsqueeze(0)], dim=0)
        weight = self.cond_k[level].weight
        if detach_weights:
            weight = weight.detach()
        keys = F.linear(bank, weight)
        logits = flat @ keys.T / math.sqrt(flat.shape[1])
        attn = torch.softmax(logits, dim=-1)
        return 1.0 - attn[:, -1]

    def condition_features(self, features, bank: HOIPromptBank):
        """Eq.-style value injection per level plus layer-averaged maps.

        Returns (updated features, M_r [h,w,N_r], M_h [h,w], M_o [h,w],
        M_a [h,w,N_a]) with all maps resampled to the stride-32 level.
        M_h / M_o / M_a are computed from the pre-injection features and do
        not touch them; M_a uses detached features and projection weights so
        gradients reach only the relation table.
        """
        if bank.n_hoi == 0:
            raise InputError("prompt bank is empty")
        target = (features[1].h, features[1].w)
        updated, mr_l, mh_l, mo_l, ma_l = [], [], [], [], []
        human_rows = torch.stack(
            [self.backbone.token_embedding(w) for w in self.human_words])
        for l, feat in enumerate(features):
            z = feat.data
            h, w, ch = z.shape
            flat = z.reshape(h * w, ch)
            keys = self.cond_k[l](bank.hoi_prompts)
            logits = flat @ keys.T / math.sqrt(ch)
            m_r = torch.softmax(logits, dim=-1)
            injected = flat + m_r @ self.cond_v[l](bank.hoi_prompts)
            updated.append(LatentGrid(injected.reshape(h, w, ch), feat.stride))
            m_h = self._word_map(flat, l, human_rows)
            m_o = self._word_map(flat, l, bank.object_prompts)
            m_a_flat = torch.softmax(
                flat.detach() @ F.linear(bank.relation_prompts,
                                         self.cond_k[l].weight.detach()).T
                / math.sqrt(ch), dim=-1)
            mr_l.append(_resample(m_r.reshape(h, w, -1), target))
            mh_l.append(_resample(m_h.reshape(h, w, 1), target))
            mo_l.append(_resample(m_o.reshape(h, w, 1), target))
            ma_l.append(_resample(m_a_flat.reshape(h, w, -1), target))
        m_r = torch.stack(mr_l).mean(dim=0)
        m_h = torch.stack(mh_l).mean(dim=0)[:, :, 0]
        m_o = torch.stack(mo_l).mean(dim=0)[:, :, 0]
        m_a = torch.stack(ma_l).mean(dim=0)
        return updated, m_r, m_h, m_o, m_a

    def positional_masks(self, shape) -> torch.Tensor:
        raw = self.pos_masks_raw.unsqueeze(1)
        masks = F.interpolate(raw, size=shape, mode="bilinear",
                              align_corners=False).squeeze(1)
        return torch.sigmoid(masks)

    def init_queries(self, z32: LatentGrid, m_r, m_h, m_o) -> QueryBundle:
        masks = self.positional_masks((z32.h, z32.w))
        q_r = torch.stack([mask_pool(z32, m_r[:, :, k])
                           for k in range(m_r.shape[2])])
        q_h = torch.stack([mask_pool(z32, m_h * masks[i])
                           for i in range(self.cfg.n_queries)])
        q_o = torch.stack([mask_pool(z32, m_o * masks[i])
                           for i in range(self.cfg.n_queries)])
        return QueryBundle(q_hat_h=q_h, q_hat_o=q_o, q_hat_r=q_r)

    def decode(self, bundle: QueryBundle, z32: LatentGrid) -> QueryBundle:
        memory = z32.data.reshape(-1, z32.channels)
        n_q = bundle.q_hat_h.shape[0]
        ins = self.d_ins(torch.cat([bundle.q_hat_h, bundle.q_hat_o]), memory)
        bundle.q_tilde_h, bundle.q_tilde_o = ins[:n_q], ins[n_q:]
        bundle.q_tilde_r = self.d_hoi(bundle.q_hat_r, memory)
        return bundle

    # -- heads ---------------------------------------------------------------

    def _similarity_logits(self, queries: torch.Tensor, prompts: torch.Tensor,
                           proj: nn.Linear, bg_row: torch.Tensor,
                           tau: torch.Tensor) -> torch.Tensor:
        rows = torch.cat([proj(prompts), bg_row.unsqueeze(0)], dim=0)
        rows = F.normalize(rows, dim=1, eps=1e-12)
        q = F.normalize(queries, dim=1, eps=1e-12)
        return q @ rows.T / tau

    def forward_image(self, image, bank: HOIPromptBank = None) -> dict:
        """Full forward pass; returns queries, logits, and normalized boxes."""
        bank = bank or self.prompt_bank()
        z = self.backbone.encode_image(image)
        out = self.backbone.denoise_once(
            z, self.cfg.extract_t, PromptEmbedding(bank.hoi_prompts, "<bank>"))
        updated, m_r, m_h, m_o, m_a = self.condition_features(out.features, bank)
        z32 = self.backbone.fpn_aggregate(updated)
        bundle = self.init_queries(z32, m_r, m_h, m_o)
        rows, slots = pair_queries(bundle.q_hat_r, bundle.q_hat_h, bundle.q_hat_o)
        bundle.init_classes = rows
        bundle.pair_slots = slots
        bundle.q_hat_r = bundle.q_hat_r[rows]
        bundle = self.decode(bundle, z32)
        z32_det = LatentGrid(z32.data.detach(), 32)
        bundle.q_hat_a = torch.stack(
            [mask_pool(z32_det, m_a[:, :, k]) for k in range(m_a.shape[2])])
        slots_t = torch.as_tensor(slots, dtype=torch.long)
        boxes_h = self.box_head_h(bundle.q_tilde_h)
        boxes_o = self.box_head_o(bundle.q_tilde_o)
        sim_r = self._similarity_logits(bundle.q_tilde_r, bank.hoi_prompts,
                                        self.prompt_proj_r, self.bg_r,
                                        self.tau("r"))
        q_o_at_slots = bundle.q_tilde_o[slots_t]
        sim_o = self._similarity_logits(q_o_at_slots, bank.object_prompts,
                                        self.prompt_proj_o, self.bg_o,
                                        self.tau("o"))
        return {
            "bank": bank, "z32": z32, "bundle": bundle,
            "maps": {"r": m_r, "h": m_h, "o": m_o, "a": m_a},
            "boxes_h": boxes_h, "boxes_o": boxes_o,
            "pair_boxes_h": boxes_h[slots_t], "pair_boxes_o": boxes_o[slots_t],
            "sim_r": sim_r, "sim_o": sim_o,
            "ffn_r": self.ffn_cls_r(bundle.q_tilde_r),
            "ffn_o": self.ffn_cls_o(q_o_at_slots),
        }

    # -- losses --------------------------------------------------------------

    def classification_losses(self, result: dict, y_r: torch.Tensor,
                              y_o: torch.Tensor):
        """(L_HOI, L_Ins): prompt-similarity CE plus linear-classifier CE each."""
        l_hoi = (F.cross_entropy(result["sim_r"], y_r)
                 + F.cross_entropy(result["ffn_r"], y_r))
        l_ins = (F.cross_entropy(result["sim_o"], y_o)
                 + F.cross_entropy(result["ffn_o"], y_o))
        return l_hoi, l_ins

    def relation_update_loss(self, result: dict, matched_rows,
                             matched_actions) -> torch.Tensor:
        """Align pooled relation queries with decoded (q_r - q_o) per action.

        The decoded side is detached; gradient reaches only the relation
        table through the pooled side's prompt rows.
        """
        bundle = result["bundle"]
        if not matched_rows:
            return torch.zeros((), dtype=self.relation_vectors.dtype)
        slots = torch.as_tensor(bundle.pair_slots, dtype=torch.long)
        q_a_tilde = (bundle.q_tilde_r - bundle.q_tilde_o[slots]).detach()
        by_action = {}
        for row, act in zip(matched_rows, matched_actions):
            by_action.setdefault(act, []).append(row)
        loss = torch.zeros((), dtype=self.relation_vectors.dtype)
        for act, rowlist in sorted(by_action.items()):
            target = q_a_tilde[rowlist].mean(dim=0)
            pooled = bundle.q_hat_a[act]
            a = F.normalize(pooled, dim=0, eps=1e-12)
            b = F.normalize(target, dim=0, eps=1e-12)
            loss = loss + torch.sum((a - b) ** 2)
        return loss

    def detection_loss(self, result: dict, gts, matched_rows, matched_gts):
        """L_Det = 5 * L1 + 2 * (1 - GIoU), summed over human+object boxes."""
        if not matched_rows:
            return torch.zeros((), dtype=self.relation_vectors.dtype)
        rows = torch.as_tensor(matched_rows, dtype=torch.long)
        pred_h = result["pair_boxes_h"][rows]
        pred_o = result["pair_boxes_o"][rows]
        gt_h = torch.stack([gts[g].human_box for g in matched_gts])
        gt_o = torch.stack([gts[g].object_box for g in matched_gts])
        l1 = (box_l1(pred_h, gt_h) + box_l1(pred_o, gt_o)).mean()
        giou = (generalized_iou(pred_h, gt_h) + generalized_iou(pred_o, gt_o)).mean()
        return self.cfg.det_l1_weight * l1 + self.cfg.det_giou_weight * (2.0 - giou)

    def image_loss(self, image, gts, bank: HOIPromptBank = None):
        """All loss components for one image plus the weighted total."""
        result = self.forward_image(image, bank)
        bank = result["bank"]
        n_r = result["sim_r"].shape[0]
        hoi_probs = torch.softmax(result["sim_r"], dim=1)[:, :bank.n_hoi]
        rows, cols = match_predictions_to_gt(
            hoi_probs.detach(), result["pair_boxes_h"].detach(),
            result["pair_boxes_o"].detach(), gts,
            self.cfg.det_l1_weight, self.cfg.det_giou_weight)
        y_r = torch.full((n_r,), bank.n_hoi, dtype=torch.long)
        y_o = torch.full((n_r,), bank.n_objects, dtype=torch.long)
        matched_actions = []
        for q, g in zip(rows, cols):
            y_r[q] = gts[g].hoi_class
            y_o[q] = gts[g].object_class
            matched_actions.append(gts[g].action)
        l_hoi, l_ins = self.classification_losses(result, y_r, y_o)
        l_det = self.detection_loss(result, gts, rows, cols)
        l_rel = self.relation_update_loss(result, rows, matched_actions)
        components = {"hoi": l_hoi, "ins": l_ins, "det": l_det, "rel": l_rel}
        total = total_loss(l_hoi, l_ins, l_det, l_rel, self.cfg.lambda2)
        return total, components

    # -- inference -----------------------------------------------------------

    def predict(self, image, bank: HOIPromptBank = None,
                score_threshold: float = 0.0, top_k: int = 100):
        if not self.is_trained:
            raise StateError("detector has no trained weights loaded")
        if top_k <= 0:
            return []
        with torch.no_grad():
            result = self.forward_image(image, bank)
        bank = result["bank"]
        img = torch.as_tensor(image)
        H, W = img.shape[0], img.shape[1]
        hoi_probs = torch.softmax(result["sim_r"], dim=1)[:, :bank.n_hoi]
        obj_probs = torch.softmax(result["sim_o"], dim=1)[:, :bank.n_objects]
        dets = []
        for q in range(hoi_probs.shape[0]):
            hoi_score, hoi_idx = hoi_probs[q].max(dim=0)
            if float(hoi_score) < score_threshold:
                continue
            obj_score, obj_idx = obj_probs[q].max(dim=0)
            hb = result["pair_boxes_h"][q] * torch.tensor([W, H, W, H])
            ob = result["pair_boxes_o"][q] * torch.tensor([W, H, W, H])
            dets.append(Detection(
                tuple(float(v) for v in hb), tuple(float(v) for v in ob),
                bank.object_classes[int(obj_idx)], float(obj_score),
                bank.triplets[int(hoi_idx)], float(hoi_score)))
        dets.sort(key=lambda d: -d.hoi_score)
        return dets[:top_k]


def _resample(maps: torch.Tensor, target) -> torch.Tensor:
    """[h, w, c] -> bilinear [target_h, target_w, c]."""
    x = maps.permute(2, 0, 1).unsqueeze(0)
    if x.shape[2:] != tuple(target):
        x = F.interpolate(x, size=tuple(target), mode="bilinear",
                          align_corners=False)
    return x.squeeze(0).permute(1, 2, 0)


def total_loss(l_hoi, l_ins, l_det, l_rel, lambda2: float = 0.5):
    for name, value in (("hoi", l_hoi), ("ins", l_ins), ("det", l_det),
                        ("rel", l_rel)):
        v = value if torch.is_tensor(value) else torch.as_tensor(float(value))
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite loss component {name!r}")
    return l_hoi + l_ins + l_det + lambda2 * l_rel
