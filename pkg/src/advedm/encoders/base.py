"""Vision-text encoder contract.

An encoder maps an RGB image in [0, 1] pixel space to a global [CLS]
embedding, per-patch embeddings and a per-patch attention summary, and maps
short phrases to text embeddings.  Adapters own any mean/std normalisation,
so callers (and the perturbation budget) only ever see [0, 1] pixels.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np
import torch

from advedm.errors import DimensionMismatchError, EmptyQueryError, NotDifferentiableError


@dataclass(frozen=True)
class EncoderDescriptor:
    identifier: str
    patch_size: int
    input_resolution: int
    embedding_dim: int
    joint_space: bool = True

    def __post_init__(self):
        if self.input_resolution % self.patch_size:
            raise DimensionMismatchError(
                f"input resolution {self.input_resolution} is not a multiple of patch size {self.patch_size}"
            )

    @property
    def grid_side(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


@dataclass(frozen=True)
class EncoderOutput:
    """Embeddings of one image.

    ``cls`` is (d,), ``patches`` is (n, d) and ``attention`` is (n,): the
    [CLS]-query attention paid to each patch key, averaged over all layers
    and heads.
    """

    cls: torch.Tensor
    patches: torch.Tensor
    attention: torch.Tensor

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    def detach(self) -> "EncoderOutput":
        return EncoderOutput(self.cls.detach(), self.patches.detach(), self.attention.detach())


def as_image(image) -> np.ndarray:
    """Validate an H x W x 3 float image with values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatchError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def text_query(phrase) -> str:
    if not isinstance(phrase, str) or not phrase.strip():
        raise EmptyQueryError("text query is empty")
    return phrase.strip()


class VisionTextEncoder(abc.ABC):
    """Base class for pluggable encoders.

    Subclasses implement :meth:`forward` (differentiable, on a pixel tensor)
    and :meth:`embed_text`.  Everything else is shared.
    """

    descriptor: EncoderDescriptor
    dtype: torch.dtype = torch.float64
    differentiable: bool = True

    @abc.abstractmethod
    def forward(self, pixels: torch.Tensor) -> EncoderOutput:
        """Encode an (H, W, 3) pixel tensor in [0, 1]."""

    @abc.abstractmethod
    def embed_text(self, phrase: str) -> torch.Tensor:
        """Joint-space embedding of a non-empty phrase."""

    def check_image(self, image, native: bool = True) -> np.ndarray:
        arr = as_image(image)
        h, w, _ = arr.shape
        p = self.descriptor.patch_size
        if h % p or w % p:
            raise DimensionMismatchError(f"image {h}x{w} is not divisible into {p}x{p} patches")
        res = self.descriptor.input_resolution
        if native and (h, w) != (res, res):
            raise DimensionMismatchError(f"encoder expects {res}x{res} input, got {h}x{w}")
        return arr

    def _pixels(self, arr: np.ndarray) -> torch.Tensor:
        return torch.as_tensor(arr).to(self.dtype)

    def encode_image(self, image, native: bool = True) -> EncoderOutput:
        """Encode an image; ``native=False`` admits any patch-aligned size."""
        arr = self.check_image(image, native=native)
        with torch.no_grad():
            return self.forward(self._pixels(arr)).detach()

    def encode_text(self, query) -> torch.Tensor:
        with torch.no_grad():
            return self.embed_text(text_query(query)).detach()

    def value_and_grad(self, image, loss_evaluator, native: bool = True):
        """Evaluate ``loss_evaluator(EncoderOutput)`` and its pixel gradient.

        Returns ``(loss, gradient)`` with the gradient shaped like the image.
        """
        if not self.differentiable:
            raise NotDifferentiableError(f"encoder {self.descriptor.identifier!r} cannot provide gradients")
        arr = self.check_image(image, native=native)
        pixels = self._pixels(arr).requires_grad_(True)
        loss = loss_evaluator(self.forward(pixels))
        if not isinstance(loss, torch.Tensor):
            loss = torch.as_tensor(float(loss), dtype=self.dtype)
        if loss.requires_grad:
            (grad,) = torch.autograd.grad(loss, pixels, allow_unused=True)
        else:
            grad = None
        grad = np.zeros_like(arr) if grad is None else grad.detach().to(torch.float64).numpy()
        return float(loss.detach()), grad

    def input_gradient(self, image, loss_evaluator, native: bool = True) -> np.ndarray:
        return self.value_and_grad(image, loss_evaluator, native=native)[1]

    def __repr__(self):
        return f"{type(self).__name__}({self.descriptor.identifier!r})"
