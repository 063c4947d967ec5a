"""Object removal: erase one object's semantics, keep the rest.

The objective combines three terms over the adversarial image's embeddings:

* ``l_cls``: cosine of the [CLS] embedding with the target's text embedding
  (pushed down),
* ``l_p``: negated mean cosine between the selected patches and the same
  patches of the image with those patches blacked out (pulled together),
* ``l_fix``: negated mean cosine between attention-scaled kept patches of the
  adversarial and clean images (held in place).
"""

from __future__ import annotations

import logging

import numpy as np
import torch

from advedm._ops import as_tensor, cosine, masked_mean, require_nonzero, row_cosine
from advedm.encoders.base import EncoderOutput, VisionTextEncoder, text_query
from advedm.optim import AttackConfig, AttackResult, LossBreakdown, optimize
from advedm.regions import PatchMask, build_removal_mask, make_masked_image, patch_similarity

logger = logging.getLogger(__name__)


def _bits(mask) -> np.ndarray:
    return mask.bits if isinstance(mask, PatchMask) else np.asarray(mask)


def loss_cls_removal(cls_adv, target_text) -> torch.Tensor:
    return cosine(cls_adv, target_text)


def loss_patch_removal(patches_adv, patches_masked, mask) -> torch.Tensor:
    a = as_tensor(patches_adv)
    b = as_tensor(patches_masked, like=a)
    bits = _bits(mask)
    if a.shape != b.shape or a.shape[0] != len(bits):
        raise ValueError(f"shapes {tuple(a.shape)}, {tuple(b.shape)} and mask length {len(bits)} disagree")
    if not np.any(bits == 0):
        raise ValueError("mask selects no patches")
    return -masked_mean(row_cosine(a, b), torch.as_tensor(bits == 0))


def _attention_scaled(out: EncoderOutput):
    return out.attention[:, None] * out.patches


def loss_fixation_removal(out_adv: EncoderOutput, out_clean: EncoderOutput, mask, attention_mode: str = "literal"):
    """Negated mean cosine of attention-scaled kept patches.

    ``attention_mode="weighted"`` additionally weights each kept row by the
    clean image's attention in the mean.
    """
    bits = _bits(mask)
    if not np.any(bits == 1):
        raise ValueError("mask keeps no patches")
    adv = _attention_scaled(out_adv)
    clean = _attention_scaled(out_clean).to(adv.dtype)
    sims = row_cosine(adv, clean)
    weights = out_clean.attention.to(adv.dtype) if attention_mode == "weighted" else None
    return -masked_mean(sims, torch.as_tensor(bits == 1), weights)


class RemovalObjective:
    """Bundles everything fixed at setup for one removal run."""

    def __init__(self, image, target: str, config: AttackConfig, encoder: VisionTextEncoder):
        self.encoder = encoder
        self.config = config
        self.target = text_query(target)
        self.image = encoder.check_image(image)
        self.text = encoder.encode_text(self.target)
        require_nonzero(self.text, what="target text embedding")
        self.clean = encoder.encode_image(self.image)
        self.similarity = patch_similarity(self.clean.patches, self.text)
        self.mask = build_removal_mask(self.similarity, config.selection_mode, config.selection_param)
        self.masked_image = make_masked_image(self.image, self.mask, encoder.descriptor.patch_size)
        self.masked = encoder.encode_image(self.masked_image)
        self._select = torch.as_tensor(self.mask.bits == 0)

    def terms(self, out: EncoderOutput):
        l_cls = loss_cls_removal(out.cls, self.text.to(out.cls.dtype))
        l_p = -masked_mean(row_cosine(out.patches, self.masked.patches.to(out.patches.dtype)), self._select)
        l_fix = loss_fixation_removal(out, self.clean, self.mask, self.config.attention_mode)
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


def run_removal_attack(
    image,
    target: str,
    config: AttackConfig | None = None,
    encoder: VisionTextEncoder | None = None,
    on_iterate=None,
) -> AttackResult:
    """Craft an adversarial image whose encoding no longer carries ``target``."""
    if encoder is None:
        raise ValueError("an encoder is required")
    config = config or AttackConfig.removal()
    objective = RemovalObjective(image, target, config, encoder)
    result = optimize(objective, objective.image, config, mask=objective.mask, on_iterate=on_iterate)
    result.metadata.update(
        attack="removal",
        target=objective.target,
        encoder=encoder.descriptor.identifier,
        similarity=objective.similarity.tolist(),
    )
    if result.aborted:
        logger.error("removal attack aborted: %s", result.diagnostic)
    return result
