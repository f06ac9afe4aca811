"""Detector checkpointing: one DHB1 container holding all weights, the
relation table as an embedded RELV1 blob, and a JSON metadata blob
(vocabularies, triplets, architecture dims) so a checkpoint is
self-describing.
"""
from __future__ import annotations

import json

import numpy as np
import torch

from . import serialization
from .backbone import MockBackbone, MockBackboneConfig
from .detector import DetectorConfig, HOIDetector
from .errors import StateError
from .inversion import RelationTable


def _bytes_to_array(blob: bytes):
    pad = (-len(blob)) % 4
    buf = blob + b"\x00" * pad
    return np.frombuffer(buf, dtype="<f4").copy(), len(blob)


def _array_to_bytes(arr: np.ndarray, length: int) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()[:length]


def save_detector(path: str, detector: HOIDetector):
    arrays = {f"detector.{k}": v.detach().cpu().numpy().astype(np.float32)
              for k, v in detector.state_dict().items()}
    rel_blob = serialization.pack_relation_table(
        detector.actions, detector.relation_vectors.detach().cpu().numpy())
    arrays["relation_table_blob"], n = _bytes_to_array(rel_blob)
    arrays["relation_table_blob_len"] = np.array([n], dtype=np.float32)
    meta = {
        "object_vocab": detector.object_vocab,
        "triplets": [list(t) for t in detector.triplets],
        "human_words": list(detector.human_words),
        "backbone": {
            "latent_channels": detector.backbone.config.latent_channels,
            "text_dim": detector.backbone.config.text_dim,
            "widths": list(detector.backbone.config.widths),
            "fpn_channels": detector.backbone.config.fpn_channels,
            "encoder_hidden": detector.backbone.config.encoder_hidden,
        },
        "detector": {
            "n_queries": detector.cfg.n_queries,
            "d_model": detector.cfg.d_model,
            "n_decoder_layers": detector.cfg.n_decoder_layers,
            "ffn_hidden": detector.cfg.ffn_hidden,
            "n_heads": detector.cfg.n_heads,
            "pos_mask_size": detector.cfg.pos_mask_size,
        },
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    arrays["meta_blob"], n = _bytes_to_array(meta_blob)
    arrays["meta_blob_len"] = np.array([n], dtype=np.float32)
    serialization.save_arrays(path, arrays)


def load_detector(path: str, dtype=torch.float32) -> HOIDetector:
    try:
        arrays = serialization.load_arrays(path)
    except FileNotFoundError as exc:
        raise StateError(f"checkpoint not found: {path}") from exc
    meta = json.loads(_array_to_bytes(
        arrays["meta_blob"], int(arrays["meta_blob_len"][0])).decode("utf-8"))
    names, vectors = serialization.unpack_relation_table(_array_to_bytes(
        arrays["relation_table_blob"], int(arrays["relation_table_blob_len"][0])))
    table = RelationTable(names, torch.as_tensor(vectors, dtype=dtype))
    bcfg = MockBackboneConfig(dtype=dtype, widths=tuple(meta["backbone"]["widths"]),
                              **{k: v for k, v in meta["backbone"].items()
                                 if k != "widths"})
    backbone = MockBackbone(bcfg, seed=0)
    dcfg = DetectorConfig(**meta["detector"])
    detector = HOIDetector(backbone, table, meta["object_vocab"],
                           [tuple(t) for t in meta["triplets"]], dcfg,
                           human_words=tuple(meta["human_words"]))
    state = {k[len("detector."):]: torch.as_tensor(v, dtype=dtype)
             for k, v in arrays.items() if k.startswith("detector.")}
    detector.load_state_dict(state)
    detector.is_trained = True
    return detector
