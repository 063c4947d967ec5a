"""Object injection: add a new object's semantics inside a chosen window.

A reference image containing only the new object supplies the target
embeddings.  Globally the [CLS] embedding is pulled toward a blend of the
clean and reference [CLS]; locally the window's attention-scaled patches are
pulled toward the reference patches, while the rest of the image is held to
its clean features under a reallocated attention map.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from advedm._ops import as_tensor, cosine, masked_mean, require_nonzero, row_cosine
from advedm.encoders.base import EncoderOutput, VisionTextEncoder, as_image, text_query
from advedm.errors import CountMismatchError, GeometryError
from advedm.optim import AttackConfig, AttackResult, LossBreakdown, optimize
from advedm.regions import PatchMask, RegionSpec, select_injection_region, window_size_from_pixels

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReferenceImage:
    """A reference picture resized to an m x m patch grid, with its encoding."""

    image: np.ndarray
    m: int
    outputs: EncoderOutput


def load_image(source) -> np.ndarray:
    """Decode a path, bytes, PIL image or array into an RGB float image."""
    if isinstance(source, np.ndarray):
        return as_image(source)
    if isinstance(source, Image.Image):
        pil = source
    elif isinstance(source, (bytes, bytearray)):
        pil = Image.open(io.BytesIO(source))
    elif isinstance(source, (str, os.PathLike)):
        pil = Image.open(source)
    else:
        raise TypeError(f"cannot decode image from {type(source).__name__}")
    pil.load()
    return np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    pil = Image.fromarray(np.round(image * 255).astype(np.uint8))
    return np.asarray(pil.resize((size, size), Image.BICUBIC), dtype=np.float64) / 255.0


def prepare_reference(source, m: int, encoder: VisionTextEncoder) -> ReferenceImage:
    """Resize a reference to m patches a side and encode it."""
    desc = encoder.descriptor
    if m < 1 or m > desc.grid_side:
        raise GeometryError(f"reference grid {m} does not fit the encoder's {desc.grid_side}-patch grid")
    image = resize_image(load_image(source), m * desc.patch_size)
    return ReferenceImage(image=image, m=m, outputs=encoder.encode_image(image, native=False))


def fuse_cls_target(cls_clean, cls_ref, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    a = as_tensor(cls_clean)
    b = as_tensor(cls_ref, like=a)
    return (1 - alpha) * a + alpha * b


def window_map(mask) -> np.ndarray:
    """Reference-patch index for every image patch; -1 outside the window.

    Window patches are matched to reference patches in row-major order.
    """
    bits = mask.bits if isinstance(mask, PatchMask) else np.asarray(mask)
    mapping = np.full(len(bits), -1, dtype=np.int64)
    sel = np.flatnonzero(bits == 0)
    mapping[sel] = np.arange(len(sel))
    return mapping


def reallocate_attention(attention_clean, attention_ref, mask, beta: float) -> torch.Tensor:
    """beta * reference attention inside the window, (1 - beta) * clean outside."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    a_clean = as_tensor(attention_clean)
    a_ref = as_tensor(attention_ref, like=a_clean)
    bits = mask.bits if isinstance(mask, PatchMask) else np.asarray(mask)
    if len(bits) != a_clean.shape[0]:
        raise CountMismatchError(f"mask length {len(bits)} differs from {a_clean.shape[0]} patches")
    mapping = window_map(bits)
    n_sel = int(np.sum(bits == 0))
    if n_sel != a_ref.shape[0]:
        raise CountMismatchError(f"window has {n_sel} patches but the reference has {a_ref.shape[0]}")
    out = (1 - beta) * a_clean
    sel = torch.as_tensor(bits == 0)
    out = torch.where(sel, beta * a_ref[torch.as_tensor(np.maximum(mapping, 0))], out)
    return out


def loss_cls_addition(cls_adv, cls_clean, cls_ref, alpha: float) -> torch.Tensor:
    a = as_tensor(cls_adv)
    fused = fuse_cls_target(as_tensor(cls_clean, like=a), as_tensor(cls_ref, like=a), alpha)
    return -cosine(a, fused)


def _ref_rows(patches_ref, mask) -> torch.Tensor:
    mapping = window_map(mask)
    return patches_ref[torch.as_tensor(np.maximum(mapping, 0))]


def loss_patch_addition(out_adv: EncoderOutput, ref, reallocated, mask) -> torch.Tensor:
    """Negated mean window cosine between adversarial and reference key features."""
    bits = mask.bits if isinstance(mask, PatchMask) else np.asarray(mask)
    if not np.any(bits == 0):
        raise ValueError("mask selects no patches")
    ref_out = ref.outputs if isinstance(ref, ReferenceImage) else ref
    dtype = out_adv.patches.dtype
    adv = out_adv.attention[:, None] * out_adv.patches
    target = as_tensor(reallocated).to(dtype)[:, None] * _ref_rows(ref_out.patches.to(dtype), bits)
    return -masked_mean(row_cosine(adv, target), torch.as_tensor(bits == 0))


def loss_fixation_addition(out_adv: EncoderOutput, out_clean: EncoderOutput, reallocated, mask, attention_mode="literal"):
    bits = mask.bits if isinstance(mask, PatchMask) else np.asarray(mask)
    if not np.any(bits == 1):
        raise ValueError("mask keeps no patches")
    dtype = out_adv.patches.dtype
    a_new = as_tensor(reallocated).to(dtype)
    adv = out_adv.attention[:, None] * out_adv.patches
    clean = a_new[:, None] * out_clean.patches.to(dtype)
    weights = a_new if attention_mode == "weighted" else None
    return -masked_mean(row_cosine(adv, clean), torch.as_tensor(bits == 1), weights)


def injection_window_size(config: AttackConfig, encoder: VisionTextEncoder) -> int:
    desc = encoder.descriptor
    if config.region is not None:
        return config.region.m
    if config.region_size is not None:
        return config.region_size
    return window_size_from_pixels(config.region_pixels, desc.patch_size, desc.grid_side)


class AdditionObjective:
    """Everything fixed at setup for one injection run."""

    def __init__(
        self,
        image,
        reference,
        target: str,
        config: AttackConfig,
        encoder: VisionTextEncoder,
        region: RegionSpec | None = None,
    ):
        self.encoder = encoder
        self.config = config
        self.target = text_query(target)
        self.image = encoder.check_image(image)
        self.clean = encoder.encode_image(self.image)
        m = region.m if region is not None else injection_window_size(config, encoder)
        if not isinstance(reference, ReferenceImage):
            reference = prepare_reference(reference, m, encoder)
        if reference.m != m:
            raise GeometryError(f"reference prepared for m={reference.m}, window needs m={m}")
        self.reference = reference
        foreground = [encoder.encode_text(t) for t in config.foreground]
        self.region, self.mask = select_injection_region(
            self.clean.patches, foreground, m, region if region is not None else config.region
        )
        self.reallocated = reallocate_attention(
            self.clean.attention, reference.outputs.attention, self.mask, config.beta
        )
        self.fused = fuse_cls_target(self.clean.cls, reference.outputs.cls, config.alpha)
        require_nonzero(self.fused, what="fused [CLS] target")
        self._window = torch.as_tensor(self.mask.bits == 0)
        self._ref_rows = self.reallocated[:, None] * _ref_rows(reference.outputs.patches, self.mask)

    def terms(self, out: EncoderOutput):
        dtype = out.cls.dtype
        l_cls = -cosine(out.cls, self.fused.to(dtype))
        adv = out.attention[:, None] * out.patches
        l_p = -masked_mean(row_cosine(adv, self._ref_rows.to(dtype)), self._window)
        l_fix = loss_fixation_addition(out, self.clean, self.reallocated, self.mask, self.config.attention_mode)
        return l_cls, l_p, l_fix

    def __call__(self, image):
        w1, w2, w3 = self.config.weights
        record = {}

        def evaluate(out):
            terms = self.terms(out)
            record["terms"] = [float(t.detach()) for t in terms]
            return w1 * terms[0] + w2 * terms[1] + w3 * terms[2]

        loss, grad = self.encoder.value_and_grad(image, evaluate)
        return loss, grad, LossBreakdown.combine(record["terms"], self.config.weights)


def run_addition_attack(
    image,
    reference,
    target: str,
    region: RegionSpec | None = None,
    config: AttackConfig | None = None,
    encoder: VisionTextEncoder | None = None,
    on_iterate=None,
) -> AttackResult:
    """Craft an adversarial image whose encoding gains the reference object.

    ``region`` (or ``config.region``) fixes the injection window; otherwise
    it is searched using ``config.foreground`` object names.
    """
    if encoder is None:
        raise ValueError("an encoder is required")
    config = config or AttackConfig.addition()
    objective = AdditionObjective(image, reference, target, config, encoder, region)
    result = optimize(objective, objective.image, config, mask=objective.mask, on_iterate=on_iterate)
    result.region = objective.region
    result.metadata.update(
        attack="addition",
        target=objective.target,
        encoder=encoder.descriptor.identifier,
        alpha=config.alpha,
        beta=config.beta,
    )
    if result.aborted:
        logger.error("addition attack aborted: %s", result.diagnostic)
    return result
