"""A small seeded ViT-style encoder for desk-scale runs and tests.

Two pre-norm transformer layers over 8x8 patches of a 32x32 image, a random
joint-space projection, and a bag-of-words text tower.  All
weights come from ``numpy.random.default_rng(seed)`` so outputs are
reproducible across processes.
"""

from __future__ import annotations

import re
import zlib

import numpy as np
import torch
import torch.nn.functional as F

from advedm.encoders.base import EncoderDescriptor, EncoderOutput, VisionTextEncoder

VOCABULARY = (
    "a an the of and with on in near next to at by under over behind front left right "
    "person man woman child dog cat horse bird cow sheep car truck bus bicycle motorcycle "
    "train boat airplane traffic light sign stop road street sidewalk building house tree "
    "grass sky cloud water bench chair table cup bottle bowl banana apple orange pizza cake "
    "laptop phone book clock vase umbrella bag ball kite pedestrian crosswalk lane block "
    "robot arm gripper box red green blue yellow white black"
).split()

# Per-channel normalisation applied inside the adapter.
_MEAN = (0.48145466, 0.4578275, 0.40821073)
_STD = (0.26862954, 0.26130258, 0.27577711)

_WORD = re.compile(r"[a-z0-9]+")


class ToyEncoder(VisionTextEncoder):
    """Deterministic differentiable two-layer attention encoder."""

    dtype = torch.float64

    def __init__(
        self,
        seed: int = 0,
        *,
        patch_size: int = 8,
        resolution: int = 32,
        dim: int = 32,
        heads: int = 4,
        layers: int = 2,
        mlp_ratio: int = 2,
        hash_buckets: int = 32,
    ):
        self.seed = seed
        self.heads = heads
        self.descriptor = EncoderDescriptor(
            identifier=f"toy:{seed}",
            patch_size=patch_size,
            input_resolution=resolution,
            embedding_dim=dim,
            joint_space=True,
        )
        rng = np.random.default_rng(seed)

        def normal(*shape, scale=1.0):
            return torch.as_tensor(rng.standard_normal(shape) * scale)

        patch_dim = patch_size * patch_size * 3
        grid = self.descriptor.grid_side
        self.w_embed = normal(patch_dim, dim, scale=patch_dim**-0.5)
        self.b_embed = normal(dim, scale=0.1)
        self.cls_token = normal(dim, scale=1.0)
        self.pos = normal(grid * grid, dim, scale=0.5)
        self.blocks = []
        hidden = dim * mlp_ratio
        for _ in range(layers):
            self.blocks.append(
                {
                    "ln1": (1.0 + normal(dim, scale=0.1), normal(dim, scale=0.1)),
                    "qkv": normal(dim, 3 * dim, scale=dim**-0.5),
                    "out": normal(dim, dim, scale=dim**-0.5),
                    "ln2": (1.0 + normal(dim, scale=0.1), normal(dim, scale=0.1)),
                    "fc1": (normal(dim, hidden, scale=dim**-0.5), normal(hidden, scale=0.1)),
                    "fc2": (normal(hidden, dim, scale=hidden**-0.5), normal(dim, scale=0.1)),
                }
            )
        self.ln_final = (1.0 + normal(dim, scale=0.1), normal(dim, scale=0.1))
        self.proj = normal(dim, dim, scale=dim**-0.5)

        self.vocabulary = {w: i for i, w in enumerate(dict.fromkeys(VOCABULARY))}
        self.hash_buckets = hash_buckets
        self.word_table = normal(len(self.vocabulary) + hash_buckets, dim)
        self._mean = torch.tensor(_MEAN, dtype=self.dtype)
        self._std = torch.tensor(_STD, dtype=self.dtype)

    # vision tower

    def _patchify(self, x: torch.Tensor) -> torch.Tensor:
        p = self.descriptor.patch_size
        h, w, c = x.shape
        x = x.reshape(h // p, p, w // p, p, c).permute(0, 2, 1, 3, 4)
        return x.reshape((h // p) * (w // p), p * p * c)

    def _positions(self, gh: int, gw: int) -> torch.Tensor:
        g = self.descriptor.grid_side
        if (gh, gw) == (g, g):
            return self.pos
        grid = self.pos.T.reshape(1, -1, g, g)
        grid = F.interpolate(grid, size=(gh, gw), mode="bilinear", align_corners=False)
        return grid.reshape(-1, gh * gw).T

    def _attention(self, x, qkv):
        t, d = x.shape
        hd = d // self.heads
        q, k, v = (x @ qkv).split(d, dim=-1)
        q = q.reshape(t, self.heads, hd).transpose(0, 1)
        k = k.reshape(t, self.heads, hd).transpose(0, 1)
        v = v.reshape(t, self.heads, hd).transpose(0, 1)
        probs = torch.softmax(q @ k.transpose(-1, -2) * hd**-0.5, dim=-1)
        out = (probs @ v).transpose(0, 1).reshape(t, d)
        return out, probs

    def forward(self, pixels: torch.Tensor) -> EncoderOutput:
        p = self.descriptor.patch_size
        gh, gw = pixels.shape[0] // p, pixels.shape[1] // p
        x = (pixels - self._mean) / self._std
        tokens = self._patchify(x) @ self.w_embed + self.b_embed + self._positions(gh, gw)
        x = torch.cat([self.cls_token[None, :], tokens], dim=0)
        cls_rows = []
        dim = x.shape[-1]
        for blk in self.blocks:
            h, probs = self._attention(F.layer_norm(x, (dim,), *blk["ln1"]), blk["qkv"])
            x = x + h @ blk["out"]
            cls_rows.append(probs[:, 0, 1:])
            h = F.layer_norm(x, (dim,), *blk["ln2"])
            w1, b1 = blk["fc1"]
            w2, b2 = blk["fc2"]
            x = x + F.gelu(h @ w1 + b1, approximate="tanh") @ w2 + b2
        x = F.layer_norm(x, (dim,), *self.ln_final) @ self.proj
        attention = torch.stack(cls_rows).mean(dim=(0, 1))
        return EncoderOutput(cls=x[0], patches=x[1:], attention=attention)

    # text tower

    def _word_index(self, word: str) -> int:
        idx = self.vocabulary.get(word)
        if idx is None:
            idx = len(self.vocabulary) + zlib.crc32(word.encode()) % self.hash_buckets
        return idx

    def embed_text(self, phrase: str) -> torch.Tensor:
        words = _WORD.findall(phrase.lower()) or [phrase.lower()]
        rows = self.word_table[[self._word_index(w) for w in words]]
        return rows.mean(dim=0)


def make_toy_encoder(seed: int = 0, **kwargs) -> ToyEncoder:
    return ToyEncoder(seed, **kwargs)


def synthetic_scene(seed: int, size: int = 32) -> np.ndarray:
    """A smooth background with a few flat-coloured rectangles.

    Gives the toy encoder inputs with some spatial structure instead of
    white noise.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a, b = rng.uniform(-0.3, 0.3, size=(2, 3))
    img = rng.uniform(0.3, 0.7, size=3) + a * yy[..., None] + b * xx[..., None]
    for _ in range(rng.integers(2, 5)):
        h, w = rng.integers(size // 6, size // 2, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        img[r : r + h, c : c + w] = rng.uniform(0.05, 0.95, size=3)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_reference(encoder: VisionTextEncoder, phrase: str, m: int, steps: int = 200, seed: int = 0) -> np.ndarray:
    """Synthesise an m x m patch image the encoder reads as ``phrase``.

    Stands in for a text-to-image model when running against a toy encoder:
    gradient ascent on cos([CLS], text) over a sigmoid pixel parametrisation.
    """
    side = m * encoder.descriptor.patch_size
    rng = np.random.default_rng(seed)
    logits = torch.as_tensor(rng.normal(0.0, 0.5, size=(side, side, 3))).requires_grad_(True)
    text = encoder.encode_text(phrase).to(encoder.dtype)
    opt = torch.optim.Adam([logits], lr=0.05)
    for _ in range(steps):
        opt.zero_grad()
        out = encoder.forward(torch.sigmoid(logits).to(encoder.dtype))
        loss = -F.cosine_similarity(out.cls, text, dim=0)
        loss.backward()
        opt.step()
    return torch.sigmoid(logits).detach().to(torch.float64).numpy()
