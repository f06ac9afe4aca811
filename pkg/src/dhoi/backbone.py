"""Latent-diffusion backbone abstraction plus a deterministic mock implementation.

The mock is a miniature of the real thing: a 2-layer strided conv
autoencoder (pixel stride 8), a hash-based text embedder, and a denoiser
made of 4 downsampling blocks, each a strided convolution followed by a
single-head cross-attention against the conditioning tokens. It is small
enough that every numerical contract can be checked against dense oracles,
while exposing the full interface (forward noising, single noise-free pass,
iterative deterministic sampling, FPN aggregation) a real adapter would.
"""
from __future__ import annotations

import functools
import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    DimensionError,
    InputError,
    NameLookupError,
    RangeError,
)

VALID_STRIDES = (8, 16, 32, 64, 128)
FEATURE_STRIDES = (16, 32, 64, 128)

PLACEHOLDER_RE = re.compile(r"^R_\*<([^<>\s]+)>$")


@dataclass
class LatentGrid:
    """Spatial feature grid in latent space: data [h, w, d] at a pixel stride."""

    data: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"latent grid must be rank 3, got {self.data.ndim}")
        if self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionError("latent grid must have h, w >= 1")
        if self.stride not in VALID_STRIDES:
            raise DimensionError(f"stride {self.stride} not in {VALID_STRIDES}")
        if not torch.isfinite(self.data).all():
            raise InputError("latent grid contains non-finite entries")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class PromptEmbedding:
    """Conditioning tokens [n_tokens, d_text] plus the originating text."""

    tokens: torch.Tensor
    source_text: str

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise InputError("prompt embedding needs >= 1 token row")
        if not torch.isfinite(self.tokens).all():
            raise InputError("prompt embedding contains non-finite entries")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention sequence alphas_bar, one value per step."""

    alphas_bar: torch.Tensor

    def __post_init__(self):
        ab = self.alphas_bar
        if ab.ndim != 1 or ab.numel() < 1:
            raise InputError("alphas_bar must be a non-empty 1-D sequence")
        if ab[0] > 1.0 or (ab <= 0).any():
            raise InputError("alphas_bar values must lie in (0, 1]")
        if (ab[1:] > ab[:-1]).any():
            raise InputError("alphas_bar must be non-increasing")

    @property
    def steps(self) -> int:
        return self.alphas_bar.numel()

    @classmethod
    def linear_beta(cls, steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 2e-2, dtype=torch.float32) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
        ab = torch.cumprod(1.0 - betas, dim=0)
        return cls(ab.to(dtype))

    @classmethod
    def identity(cls, steps: int = 1000, dtype=torch.float32) -> "NoiseSchedule":
        """All-ones schedule: noising and sampling become identity maps."""
        return cls(torch.ones(steps, dtype=dtype))


@dataclass
class DenoiserOutput:
    """One denoiser pass: 4 feature levels, per-layer attention, noise estimate."""

    features: list  # 4 LatentGrids at strides 16/32/64/128
    attention: list  # 4 tensors [h_l, w_l, n_tokens], row-stochastic
    noise_pred: LatentGrid


def noise_to(z0: LatentGrid, t: int, eps: LatentGrid, sched: NoiseSchedule) -> LatentGrid:
    """Forward-noise z0 to time t: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if not (0 <= t < sched.steps):
        raise RangeError(f"t={t} outside [0, {sched.steps})")
    if eps.data.shape != z0.data.shape:
        raise DimensionError("eps must have the same shape as z0")
    ab = sched.alphas_bar[t].to(z0.data.dtype)
    data = torch.sqrt(ab) * z0.data + torch.sqrt(1.0 - ab) * eps.data
    return LatentGrid(data, z0.stride)


@functools.lru_cache(maxsize=65536)
def _hash_unit_vector(token: str, dim: int) -> tuple:
    seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:4], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v = v / np.linalg.norm(v)
    return tuple(float(x) for x in v)


def tokenize(text: str) -> list:
    """Whitespace tokenization; punctuation stripped, placeholders preserved."""
    tokens = []
    for raw in text.split():
        if PLACEHOLDER_RE.match(raw):
            tokens.append(raw)
        else:
            tok = raw.strip(".,;:!?\"'()").lower()
            if tok:
                tokens.append(tok)
    return tokens


@dataclass
class MockBackboneConfig:
    latent_channels: int = 4
    text_dim: int = 16
    widths: tuple = (16, 32, 64, 128)
    fpn_channels: int = 256
    encoder_hidden: int = 8
    dtype: object = torch.float32


class MockBackbone(nn.Module):
    """Deterministic desk-scale backbone with the full diffusion interface.

    All operations are pure functions of (inputs, weights); weights are
    initialized from an explicit seed so two processes construct identical
    backbones.
    """

    def __init__(self, config: MockBackboneConfig = None, seed: int = 0,
                 zero_noise: bool = False):
        super().__init__()
        self.config = config or MockBackboneConfig()
        self.zero_noise = zero_noise
        c = self.config
        d, hid = c.latent_channels, c.encoder_hidden
        self.enc1 = nn.Conv2d(3, hid, kernel_size=4, stride=4)
        self.enc2 = nn.Conv2d(hid, d, kernel_size=2, stride=2)
        self.dec1 = nn.ConvTranspose2d(d, hid, kernel_size=2, stride=2)
        self.dec2 = nn.ConvTranspose2d(hid, 3, kernel_size=4, stride=4)
        in_ch = [d] + list(c.widths[:-1])
        self.blocks = nn.ModuleList(
            nn.Conv2d(i, w, kernel_size=2, stride=2) for i, w in zip(in_ch, c.widths))
        self.to_k = nn.ModuleList(
            nn.Linear(c.text_dim, w, bias=False) for w in c.widths)
        self.to_v = nn.ModuleList(
            nn.Linear(c.text_dim, w, bias=False) for w in c.widths)
        self.time_proj = nn.ModuleList(
            nn.Linear(1, w, bias=False) for w in c.widths)
        self.noise_head = nn.Conv2d(c.widths[0], d, kernel_size=1)
        self.laterals = nn.ModuleList(
            nn.Conv2d(w, c.fpn_channels, kernel_size=1, bias=False) for w in c.widths)
        self.reset_parameters(seed)
        self.to(c.dtype)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if p.ndim >= 2:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.ndim == 4 else 1)
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
                else:
                    p.zero_()

    # -- autoencoder ---------------------------------------------------------

    def encode_image(self, image) -> LatentGrid:
        img = torch.as_tensor(image, dtype=self.config.dtype)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DimensionError(f"image must be [H, W, 3], got {tuple(img.shape)}")
        h, w = img.shape[0], img.shape[1]
        if h % 8 or w % 8:
            raise DimensionError(f"image dims ({h}, {w}) must be divisible by 8")
        if not torch.isfinite(img).all():
            raise InputError("image contains non-finite pixels")
        x = img.permute(2, 0, 1).unsqueeze(0)
        z = self.enc2(torch.tanh(self.enc1(x)))
        return LatentGrid(z.squeeze(0).permute(1, 2, 0), 8)

    def decode_latent(self, z: LatentGrid) -> torch.Tensor:
        if z.stride != 8:
            raise DimensionError(f"decode expects stride 8, got {z.stride}")
        x = z.data.permute(2, 0, 1).unsqueeze(0)
        out = self.dec2(torch.tanh(self.dec1(x)))
        return out.squeeze(0).permute(1, 2, 0).clamp(0.0, 1.0)

    # -- text ---------------------------------------------------------------

    def token_embedding(self, token: str) -> torch.Tensor:
        return torch.tensor(_hash_unit_vector(token, self.config.text_dim),
                            dtype=self.config.dtype)

    def encode_text(self, text: str, relation_table=None) -> PromptEmbedding:
        tokens = tokenize(text)
        if not tokens:
            raise InputError("cannot encode empty text")
        rows = []
        for tok in tokens:
            m = PLACEHOLDER_RE.match(tok)
            if m:
                if relation_table is None:
                    raise NameLookupError(
                        f"placeholder {tok!r} used without a relation table")
                rows.append(relation_table.lookup(m.group(1)))
            else:
                rows.append(self.token_embedding(tok))
        return PromptEmbedding(torch.stack(rows), text)

    # -- denoiser -----------------------------------------------------------

    def denoise_once(self, z: LatentGrid, t: int, cond: PromptEmbedding) -> DenoiserOutput:
        if z.stride != 8:
            raise DimensionError(f"denoiser expects stride-8 latents, got {z.stride}")
        if z.h % 16 or z.w % 16:
            raise DimensionError(
                f"latent dims ({z.h}, {z.w}) must be divisible by 16 for 4 levels")
        if cond.n_tokens < 1:
            raise InputError("empty conditioning")
        x = z.data.permute(2, 0, 1).unsqueeze(0)
        t_norm = torch.tensor([[float(t) / 1000.0]], dtype=z.data.dtype)
        features, attention = [], []
        for l, block in enumerate(self.blocks):
            x = block(x)
            x = x + self.time_proj[l](t_norm).view(1, -1, 1, 1)
            _, ch, hl, wl = x.shape
            flat = x.squeeze(0).permute(1, 2, 0).reshape(hl * wl, ch)
            keys = self.to_k[l](cond.tokens)
            logits = flat @ keys.T / math.sqrt(ch)
            attn = torch.softmax(logits, dim=-1)
            flat = flat + attn @ self.to_v[l](cond.tokens)
            x = flat.reshape(hl, wl, ch).permute(2, 0, 1).unsqueeze(0)
            features.append(LatentGrid(x.squeeze(0).permute(1, 2, 0), 8 * 2 ** (l + 1)))
            attention.append(attn.reshape(hl, wl, cond.n_tokens))
        up = F.interpolate(features[0].data.permute(2, 0, 1).unsqueeze(0),
                           scale_factor=2, mode="nearest")
        if self.zero_noise:
            pred = torch.zeros_like(z.data)
        else:
            pred = self.noise_head(up).squeeze(0).permute(1, 2, 0)
        return DenoiserOutput(features, attention, LatentGrid(pred, 8))

    def denoise_iterative(self, zT: LatentGrid, cond: PromptEmbedding, n_steps: int,
                          sched: NoiseSchedule, return_last: bool = False):
        """Deterministic (DDIM-style) sampling chain from time T down to 0.

        Timesteps are spread evenly over the schedule; the final update
        targets alphas_bar = 1, so a zero-noise denoiser maps zT to
        zT / sqrt(alphas_bar[T]).
        """
        if n_steps < 1:
            raise RangeError(f"n_steps must be >= 1, got {n_steps}")
        T = sched.steps - 1
        ts = [int(round(T * (n_steps - j) / n_steps)) for j in range(n_steps)]
        z = zT
        last = None
        for j, t in enumerate(ts):
            ab_t = sched.alphas_bar[t].to(z.data.dtype)
            ab_prev = (sched.alphas_bar[ts[j + 1]].to(z.data.dtype)
                       if j + 1 < n_steps else torch.ones((), dtype=z.data.dtype))
            last = self.denoise_once(z, t, cond)
            eps = last.noise_pred.data
            z0_pred = (z.data - torch.sqrt(1.0 - ab_t) * eps) / torch.sqrt(ab_t)
            data = torch.sqrt(ab_prev) * z0_pred + torch.sqrt(1.0 - ab_prev) * eps
            z = LatentGrid(data, 8)
        if return_last:
            return z, last
        return z

    # -- FPN ----------------------------------------------------------------

    def fpn_aggregate(self, features) -> LatentGrid:
        strides = tuple(f.stride for f in features)
        if strides != FEATURE_STRIDES:
            raise DimensionError(f"expected strides {FEATURE_STRIDES}, got {strides}")
        p = None
        for l in range(3, -1, -1):
            x = features[l].data.permute(2, 0, 1).unsqueeze(0)
            lat = self.laterals[l](x)
            p = lat if p is None else lat + F.interpolate(p, scale_factor=2, mode="nearest")
        out = F.avg_pool2d(p, kernel_size=2, stride=2)
        return LatentGrid(out.squeeze(0).permute(1, 2, 0), 32)

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict:
        return {k: v.detach().cpu().numpy().astype(np.float32)
                for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays: dict):
        state = {k: torch.as_tensor(v, dtype=self.config.dtype) for k, v in arrays.items()}
        self.load_state_dict(state)
